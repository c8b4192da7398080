"""``catmem`` command line: data generation, training, evaluation, ablation and attention statistics.

Configuration resolves as built-in defaults < ``--preset`` < ``--config`` file < flags.
Exit codes: 0 success, 2 validation/usage error, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from importlib import resources
from pathlib import Path


from catmem.data import SyntheticSpec, generate, load_csv, load_dataset_dir, save_dataset_dir, similarity_stats
from catmem.errors import CsvParseError, MetricsSchemaError, NumericalError, ShapeError, SnapshotError
from catmem.experiments import (
    SCHEMA_VERSION,
    ablate,
    attention_cumsum,
    default_workers,
    evaluate,
    read_ablation,
    read_metrics,
    train_run,
    write_metrics,
)
from catmem.network import TrainConfig, config_digest, load_checkpoint, make_read_mode, save_checkpoint


EXIT_OK, EXIT_USAGE, EXIT_NUMERIC = 0, 2, 3
PRESETS = ("fine-grained", "coarse")

# flag name -> (config field, type, help text)
DATA_FLAGS = {
    "num-classes": ("num_classes", int, "number of classes C"),
    "dim": ("dim", int, "feature dimension D"),
    "attribute-pool": ("attribute_pool", int, "attribute dictionary size A (<= D)"),
    "attrs-per-class": ("attrs_per_class", int, "attributes per class k (<= A)"),
    "shared-fraction": ("shared_fraction", float, "fraction of attributes drawn from the shared pool"),
    "unique-strength": ("unique_strength", float, "coefficient of each class's private direction"),
    "jitter-std": ("jitter_std", float, "per-sample attribute coefficient noise"),
    "noise-std": ("noise_std", float, "isotropic sample noise"),
    "train-per-class": ("train_per_class", int, "training samples per class"),
    "test-per-class": ("test_per_class", int, "test samples per class"),
}

TRAIN_FLAGS = {
    "lr": ("lr_backbone", float, "backbone learning rate"),
    "lr-multiplier": ("lr_multiplier_new", float, "learning-rate multiplier for the classifier/predictor"),
    "momentum": ("momentum", float, "SGD momentum"),
    "weight-decay": ("weight_decay", float, "L2 weight decay"),
    "batch-size": ("batch_size", int, "mini-batch size"),
    "epochs": ("epochs", int, "training epochs"),
    "lr-decay-factor": ("lr_decay_factor", float, "step decay factor"),
    "lr-decay-epoch": ("lr_decay_epoch", int, "epoch at which the step decay applies"),
    "beta": ("beta", float, "memory update rate in (0, 1)"),
    "tau": ("tau", float, "attention softmax temperature"),
    "read-mode": ("read_mode", str, "attention | equal | topk | predicted"),
    "topk": ("topk", int, "k for the topk read mode"),
    "similarity": ("similarity", str, "cosine | dot"),
    "hidden": ("hidden", lambda s: tuple(int(x) for x in s.split(",") if x), "hidden layer sizes, comma separated"),
    "feature-dim": ("feature_dim", int, "feature (and prototype) dimension"),
    "feature-relu": ("feature_relu", lambda s: s.lower() in ("1", "true", "yes"), "ReLU on the feature layer"),
}


class UsageError(Exception):
    pass


def _preset_config(name: str) -> dict:
    if name not in PRESETS:
        raise UsageError(f"unknown preset {name!r}; choose from {PRESETS}")
    text = resources.files("catmem.presets").joinpath(f"{name}.json").read_text()
    return json.loads(text)


def load_config_file(path) -> dict:
    try:
        cfg = json.loads(Path(path).read_text())
    except FileNotFoundError:
        raise UsageError(f"config file not found: {path}") from None
    except json.JSONDecodeError as exc:
        raise UsageError(f"config file {path} is not valid JSON: {exc}") from None
    if cfg.get("schema_version") != SCHEMA_VERSION:
        raise UsageError(f"config file {path}: schema_version must be {SCHEMA_VERSION}")
    return cfg


def _merge(base: dict, over: dict) -> dict:
    out = dict(base)
    for k, v in over.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _merge(out[k], v)
        else:
            out[k] = v
    return out


def resolve_config(args) -> dict:
    """Merge defaults, preset, config file and explicit flags into one serializable dict."""
    cfg = {"schema_version": SCHEMA_VERSION, "data": SyntheticSpec().to_dict(), "train": TrainConfig().to_dict()}
    if getattr(args, "preset", None):
        cfg = _merge(cfg, _preset_config(args.preset))
    if args.config:
        cfg = _merge(cfg, load_config_file(args.config))
    for flag, (name, _, _) in DATA_FLAGS.items():
        v = getattr(args, flag.replace("-", "_"), None)
        if v is not None:
            cfg["data"][name] = v
    for flag, (name, _, _) in TRAIN_FLAGS.items():
        v = getattr(args, flag.replace("-", "_"), None)
        if v is not None:
            cfg["train"][name] = list(v) if isinstance(v, tuple) else v
    if getattr(args, "no_attention_backprop", False):
        cfg["train"]["backprop_through_attention"] = False
    for key in ("variant", "seeds", "topk_grid"):
        v = getattr(args, key, None)
        if v is not None:
            cfg[key] = v
    if args.seed is not None:
        cfg["seed"] = args.seed
    cfg.pop("description", None)
    return cfg


def _add_common(p: argparse.ArgumentParser, out_default: str):
    p.add_argument("--config", help="JSON config file (schema_version 1); flags override it")
    p.add_argument("--seed", type=int, help="random seed (default: from config, else 0)")
    p.add_argument("--out", default=out_default, help="output directory (default: %(default)s)")
    p.add_argument("--quiet", action="store_true", help="suppress informational output")
    p.add_argument("--preset", help=f"named config preset: {', '.join(PRESETS)}")


def _add_flag_group(p: argparse.ArgumentParser, flags: dict, defaults):
    for flag, (name, typ, text) in flags.items():
        default = getattr(defaults, name)
        if isinstance(default, tuple):
            default = ",".join(map(str, default))
        p.add_argument(f"--{flag}", type=typ, default=None, help=f"{text} (default: {default})")


def _seed_list(s: str) -> list[int]:
    try:
        return [int(x) for x in s.split(",") if x.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {s!r}") from None


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="catmem", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate a synthetic dataset (train.csv, test.csv, meta.json)")
    _add_common(p, "data")
    _add_flag_group(p, DATA_FLAGS, SyntheticSpec())
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="train one model and write metrics plus a checkpoint")
    _add_common(p, "runs/train")
    p.add_argument("--data", required=True, help="directory holding train.csv/test.csv (and meta.json)")
    p.add_argument("--variant", choices=("baseline", "cmn", "random"), help="model variant (default: cmn)")
    _add_flag_group(p, TRAIN_FLAGS, TrainConfig())
    p.add_argument("--no-attention-backprop", action="store_true",
                   help="treat attention weights as constants in the backward pass")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="accuracy of a checkpoint on a dataset")
    _add_common(p, "runs/eval")
    p.add_argument("--checkpoint", required=True, help="checkpoint.cmnw written by train")
    p.add_argument("--data", help="dataset directory (its test.csv is used)")
    p.add_argument("--dataset", help="a single dataset CSV (overrides --data)")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("ablate", help="run all ablation variants across seeds")
    _add_common(p, "runs/ablate")
    p.add_argument("--data", required=True, help="directory holding train.csv/test.csv")
    p.add_argument("--seeds", type=_seed_list, help="comma-separated seeds (default: seed..seed+4)")
    p.add_argument("--topk-grid", dest="topk_grid", type=_seed_list, help="comma-separated top-K grid (default: none)")
    p.add_argument("--workers", type=int, help="parallel runs (default: $CMN_THREADS or CPU count)")
    _add_flag_group(p, TRAIN_FLAGS, TrainConfig())
    p.add_argument("--no-attention-backprop", action="store_true",
                   help="treat attention weights as constants in the backward pass")
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("attn-stats", help="cumulative sorted attention curve of a checkpoint")
    _add_common(p, "runs/attn")
    p.add_argument("--checkpoint", required=True, help="checkpoint.cmnw written by train")
    p.add_argument("--data", required=True, help="dataset directory (its test.csv is used)")
    p.set_defaults(func=cmd_attn_stats)

    p = sub.add_parser("report", help="print metrics or an ablation report as tab-separated text")
    _add_common(p, ".")
    p.add_argument("path", help="run directory (summary.json) or ablation.json / its directory")
    p.set_defaults(func=cmd_report)
    return parser


def _info(args, msg: str):
    if not args.quiet:
        print(msg)


def _write_json(path: Path, obj) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def cmd_gen_data(args) -> int:
    cfg = resolve_config(args)
    if "seed" in cfg:
        cfg["data"]["seed"] = cfg["seed"]
    spec = SyntheticSpec.from_dict(cfg["data"])
    try:
        spec.validate()
    except ValueError as exc:
        raise UsageError(f"infeasible data spec: {exc}") from None
    train, test, means = generate(spec)
    out = Path(args.out)
    save_dataset_dir(out, train, test, spec)
    rep = similarity_stats(means)
    _info(args, f"wrote {out / 'train.csv'} ({len(train)} rows), {out / 'test.csv'} ({len(test)} rows), "
                f"{out / 'meta.json'}")
    _info(args, f"class-mean cosine: mean {rep.mean:.4f}  max {rep.max:.4f}  (data digest {config_digest(cfg['data'])})")
    return EXIT_OK


def _train_config(cfg: dict) -> TrainConfig:
    t = dict(cfg["train"])
    if "seed" in cfg:
        t["seed"] = cfg["seed"]
    try:
        return TrainConfig.from_dict(t)
    except (TypeError, ValueError) as exc:
        raise UsageError(f"invalid training config: {exc}") from None


def _load_data_dir(path):
    if not Path(path, "train.csv").exists() or not Path(path, "test.csv").exists():
        raise UsageError(f"{path} must contain train.csv and test.csv")
    return load_dataset_dir(path)


def cmd_train(args) -> int:
    cfg = resolve_config(args)
    tcfg = _train_config(cfg)
    cfg["train"] = tcfg.to_dict()
    variant = cfg.get("variant", "cmn")
    train, test, _ = _load_data_dir(args.data)
    result = train_run(train, test, tcfg, variant)
    m = result.metrics
    if result.memory is not None and result.memory.eligible().any():
        m.attention_curve = attention_cumsum(result.model, result.memory, test, result.read_mode,
                                             tcfg.similarity).tolist()
    out = Path(args.out)
    write_metrics(m, out)
    summary = json.loads((out / "summary.json").read_text())
    summary["resolved_config"] = cfg
    summary["resolved_config_digest"] = config_digest(cfg)
    _write_json(out / "summary.json", summary)
    save_checkpoint(out / "checkpoint.cmnw", result.model, result.memory, result.predictor,
                    {"variant": variant, "train": tcfg.to_dict(), "final_test_accuracy": m.final_test_accuracy})
    if result.memory is not None:
        result.memory.to_csv(out / "memory.csv")
    _info(args, f"{variant} seed={tcfg.seed} final test accuracy {m.final_test_accuracy:.4f} -> {out}")
    return EXIT_OK


def _load_checkpoint(path):
    if not Path(path).exists():
        raise UsageError(f"checkpoint not found: {path}")
    model, mem, predictor, meta = load_checkpoint(path)
    tcfg = TrainConfig.from_dict(meta.get("train", {}))
    mode = make_read_mode(tcfg, predictor) if mem is not None else None
    return model, mem, mode, tcfg, meta


def _eval_dataset(args, num_classes: int):
    if args.dataset:
        if not Path(args.dataset).exists():
            raise UsageError(f"dataset not found: {args.dataset}")
        return load_csv(args.dataset, num_classes, "test")
    if args.data:
        return _load_data_dir(args.data)[1]
    raise UsageError("eval needs --data or --dataset")


def _check_dims(model, ds):
    if ds.dim != model.input_dim:
        raise UsageError(f"dataset dim {ds.dim} does not match checkpoint input dim {model.input_dim}")
    if ds.num_classes > model.num_classes:
        raise UsageError(f"dataset has {ds.num_classes} classes, checkpoint has {model.num_classes}")
    ds.num_classes = model.num_classes


def cmd_eval(args) -> int:
    model, mem, mode, tcfg, meta = _load_checkpoint(args.checkpoint)
    ds = _eval_dataset(args, model.num_classes)
    _check_dims(model, ds)
    acc = evaluate(model, mem, ds, mode, tcfg.similarity)
    out = Path(args.out)
    _write_json(out / "eval.json", {"schema_version": SCHEMA_VERSION, "accuracy": acc,
                                    "checkpoint": str(args.checkpoint), "n": len(ds),
                                    "config_digest": config_digest(meta)})
    print(f"accuracy\t{acc!r}")
    return EXIT_OK


def cmd_attn_stats(args) -> int:
    model, mem, mode, tcfg, meta = _load_checkpoint(args.checkpoint)
    if mem is None or not mem.eligible().any():
        raise UsageError("checkpoint has no memory with initialized slots (baseline variant?)")
    ds = _load_data_dir(args.data)[1]
    _check_dims(model, ds)
    curve = attention_cumsum(model, mem, ds, mode, tcfg.similarity)
    c = curve.size
    half = curve[c // 2 - 1] if c >= 2 else curve[0]
    doc = {"schema_version": SCHEMA_VERSION, "curve": curve.tolist(), "num_classes": c,
           "top_half_mass": float(half), "uniform_top_half_mass": (c // 2) / c,
           "config_digest": config_digest(meta)}
    _write_json(Path(args.out) / "attn_curve.json", doc)
    _info(args, "k\tcumulative_attention")
    if not args.quiet:
        for k, v in enumerate(curve, start=1):
            print(f"{k}\t{v:.6f}")
    print(f"top_half_mass\t{half:.6f}")
    return EXIT_OK


def cmd_ablate(args) -> int:
    cfg = resolve_config(args)
    tcfg = _train_config(cfg)
    cfg["train"] = tcfg.to_dict()
    base = tcfg.seed
    seeds = cfg.get("seeds") or [base + i for i in range(5)]
    topk = cfg.get("topk_grid") or []
    cfg["seeds"], cfg["topk_grid"] = seeds, topk
    train, test, _ = _load_data_dir(args.data)
    bad = [k for k in topk if not 1 <= k <= train.num_classes]
    if bad:
        raise UsageError(f"top-K values {bad} outside [1, {train.num_classes}]")
    if len(seeds) < 2:
        raise UsageError("ablate needs at least two seeds")
    workers = args.workers if args.workers else default_workers()
    report = ablate(train, test, tcfg, seeds, topk, workers=workers)
    out = Path(args.out)
    write_metrics(report, out)
    doc = json.loads((out / "ablation.json").read_text())
    doc["resolved_config"] = cfg
    doc["resolved_config_digest"] = config_digest(cfg)
    _write_json(out / "ablation.json", doc)
    if not args.quiet:
        _print_ablation(report)
    return EXIT_OK


def _print_ablation(report) -> None:
    means, stds, diffs = report.means, report.stds, report.diffs_vs_baseline()
    print("variant\tmean\tstd\tdiff_vs_baseline\t" + "\t".join(f"seed{s}" for s in report.seeds))
    for name, accs in report.accuracies.items():
        d = diffs.get(name, 0.0)
        print(f"{name}\t{means[name]:.4f}\t{stds[name]:.4f}\t{d:+.4f}\t" + "\t".join(f"{a:.4f}" for a in accs))


def cmd_report(args) -> int:
    p = Path(args.path)
    if (p / "summary.json").exists():
        m = read_metrics(p)
        print("epoch\ttrain_loss\ttrain_acc\ttest_acc\tlr")
        for r in m.records:
            print(f"{r.epoch}\t{r.train_loss:.6f}\t{r.train_acc:.4f}\t{r.test_acc:.4f}\t{r.lr:g}")
        print(f"# variant={m.variant} seed={m.seed} final_test_accuracy={m.final_test_accuracy} "
              f"config_digest={m.config_digest}")
        return EXIT_OK
    if p.is_file() or (p / "ablation.json").exists():
        _print_ablation(read_ablation(p))
        return EXIT_OK
    raise UsageError(f"no summary.json or ablation.json under {p}")


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0) if exc.code in (0, None) else EXIT_USAGE
    logging.basicConfig(level=logging.WARNING if args.quiet else logging.INFO, format="%(message)s")
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except NumericalError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (ValueError, ShapeError, SnapshotError, CsvParseError, MetricsSchemaError, FileNotFoundError,
            IndexError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
