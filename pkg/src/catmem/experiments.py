"""Training and evaluation loops, the ablation suite and metrics persistence."""

from __future__ import annotations

import hashlib
import json
import os
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from catmem.data import Dataset
from catmem.errors import MetricsSchemaError, NumericalError
from catmem.memory import CategoricalMemory, PredictorParams, ReadMode, TopK, read_batch
from catmem.network import (
    MlpModel,
    OptimizerState,
    TrainConfig,
    backward_batch,
    config_digest,
    forward_batch,
    lr_at,
    make_read_mode,
    sgd_step,
)
from catmem.numerics import Rng

SCHEMA_VERSION = 1
VARIANTS = ("baseline", "cmn", "random")
EPOCH_FIELDS = ("epoch", "train_loss", "train_acc", "test_acc", "lr")
SUMMARY_FIELDS = ("variant", "seed", "config", "config_digest", "final_test_accuracy", "batch_digest")
EVAL_CHUNK = 1024


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    train_acc: float
    test_acc: float
    lr: float

    def to_dict(self) -> dict:
        return {"schema_version": SCHEMA_VERSION, "epoch": self.epoch, "train_loss": self.train_loss,
                "train_acc": self.train_acc, "test_acc": self.test_acc, "lr": self.lr}


@dataclass
class RunMetrics:
    variant: str
    seed: int
    config: dict
    config_digest: str
    records: list[EpochRecord] = field(default_factory=list)
    final_test_accuracy: float | None = None
    batch_digest: str = ""
    wall_clock: float = 0.0
    attention_curve: list[float] | None = None

    def summary(self) -> dict:
        return {"schema_version": SCHEMA_VERSION, "variant": self.variant, "seed": self.seed,
                "config": self.config, "config_digest": self.config_digest,
                "final_test_accuracy": self.final_test_accuracy, "batch_digest": self.batch_digest,
                "epochs": len(self.records), "attention_curve": self.attention_curve}


@dataclass
class RunResult:
    model: MlpModel
    memory: CategoricalMemory | None
    metrics: RunMetrics
    predictor: PredictorParams | None = None

    @property
    def read_mode(self) -> ReadMode | None:
        if self.memory is None:
            return None
        return make_read_mode(TrainConfig.from_dict(self.metrics.config), self.predictor)

    def __iter__(self):
        return iter((self.model, self.memory, self.metrics))


class ClampedTopK(TopK):
    """TopK that falls back to all eligible slots while fewer than k exist (memory warm-up)."""


def _effective_mode(mode: ReadMode | None, mem: CategoricalMemory | None) -> ReadMode | None:
    if isinstance(mode, ClampedTopK) and mem is not None:
        n = int(mem.eligible().sum())
        if 0 < n < mode.k:
            return TopK(n)
        return TopK(mode.k)
    return mode


def _setup(config: TrainConfig, variant: str, input_dim: int, num_classes: int):
    if variant not in VARIANTS:
        raise ValueError(f"unknown variant {variant!r}; expected one of {VARIANTS}")
    model = MlpModel.init(Rng(config.seed, "init"), input_dim, config.hidden, config.feature_dim,
                          num_classes, config.classifier_std, config.feature_relu)
    mem = None
    predictor = None
    mode = None
    if variant == "cmn":
        mem = CategoricalMemory.empty(num_classes, config.feature_dim, config.beta, config.tau)
    elif variant == "random":
        mem = CategoricalMemory.random(num_classes, config.feature_dim, Rng(config.seed, "memory"),
                                       config.random_scale, config.beta, config.tau)
    if mem is not None:
        if config.read_mode == "predicted":
            predictor = PredictorParams.init(num_classes, config.feature_dim, Rng(config.seed, "predictor"))
        mode = make_read_mode(config, predictor)
        if isinstance(mode, TopK):
            mode = ClampedTopK(mode.k)
    return model, mem, predictor, mode


def train_run(train: Dataset, test: Dataset, config: TrainConfig, variant: str = "cmn") -> RunResult:
    """Train one model; evaluate on ``test`` with frozen memory after every epoch."""
    t0 = time.perf_counter()
    if train.dim != test.dim:
        raise ValueError(f"train dim {train.dim} != test dim {test.dim}")
    if train.num_classes != test.num_classes:
        raise ValueError(f"train has {train.num_classes} classes, test has {test.num_classes}")
    if len(train) == 0:
        raise ValueError("empty training set")
    model, mem, predictor, mode = _setup(config, variant, train.dim, train.num_classes)
    writes = variant == "cmn" and config.memory_writes
    cfg = config.to_dict()
    metrics = RunMetrics(variant, config.seed, cfg, config_digest({"variant": variant, **cfg}))

    backbone = model.backbone_params()
    head = model.head_params() + ([predictor.weight, predictor.bias] if predictor is not None else [])
    state_backbone = OptimizerState.zeros_like(backbone)
    state_head = OptimizerState.zeros_like(head)
    shuffle = Rng(config.seed, "shuffle")
    digest = hashlib.sha256()
    n = len(train)

    for epoch in range(config.epochs):
        lr_b, lr_new = lr_at(epoch, config)
        perm = shuffle.permutation(n)
        digest.update(perm.astype("<i8").tobytes())
        loss_sum = 0.0
        correct = 0
        for start in range(0, n, config.batch_size):
            idx = perm[start:start + config.batch_size]
            X, y = train.features[idx], train.labels[idx]
            step_mode = _effective_mode(mode, mem)
            losses, grads, cache = backward_batch(model, mem, X, y, step_mode,
                                                  config.backprop_through_attention, config.similarity)
            if not np.all(np.isfinite(losses)):
                raise NumericalError(f"non-finite loss at epoch {epoch}, batch starting {start}")
            loss_sum += float(losses.sum())
            correct += int((cache.logits.argmax(axis=1) == y).sum())
            scale = 1.0 / idx.size
            sgd_step(backbone, [g * scale for g in grads.backbone()], state_backbone, lr_b,
                     config.momentum, config.weight_decay)
            sgd_step(head, [g * scale for g in grads.head()], state_head, lr_new,
                     config.momentum, config.weight_decay)
            if writes:
                mem.batch_write(cache.features, y)
        if mem is not None:
            was_frozen = mem.frozen
            mem.frozen = True
            test_acc = evaluate(model, mem, test, _effective_mode(mode, mem), config.similarity)
            mem.frozen = was_frozen
        else:
            test_acc = evaluate(model, None, test)
        metrics.records.append(EpochRecord(epoch, loss_sum / n, correct / n, test_acc, lr_b))

    if mem is not None:
        mem.frozen = True
    metrics.batch_digest = digest.hexdigest()[:16]
    metrics.final_test_accuracy = metrics.records[-1].test_acc if metrics.records else None
    metrics.wall_clock = time.perf_counter() - t0
    return RunResult(model, mem, metrics, predictor)


def predict(model: MlpModel, mem: CategoricalMemory | None, X: np.ndarray, mode: ReadMode | None = None,
            similarity: str = "cosine") -> np.ndarray:
    out = []
    for start in range(0, X.shape[0], EVAL_CHUNK):
        logits = forward_batch(model, mem, X[start:start + EVAL_CHUNK], mode, similarity).logits
        out.append(logits.argmax(axis=1))
    return np.concatenate(out) if out else np.zeros(0, dtype=np.int64)


def evaluate(model: MlpModel, mem: CategoricalMemory | None, dataset: Dataset, mode: ReadMode | None = None,
             similarity: str = "cosine") -> float:
    """Top-1 accuracy; argmax ties go to the lower class index. Memory is only read."""
    if len(dataset) == 0:
        raise ValueError("cannot evaluate on an empty dataset")
    mode = _effective_mode(mode, mem)
    pred = predict(model, mem, dataset.features, mode, similarity)
    return int((pred == dataset.labels).sum()) / len(dataset)


def attention_cumsum(model: MlpModel, mem: CategoricalMemory, dataset: Dataset, mode: ReadMode | None = None,
                     similarity: str = "cosine") -> np.ndarray:
    """Mean over samples of the sorted (descending) cumulative attention weights."""
    if mem is None or not mem.eligible().any():
        raise ValueError("attention statistics need a memory with at least one eligible slot")
    mode = _effective_mode(mode, mem)
    total = np.zeros(mem.num_classes)
    for start in range(0, len(dataset), EVAL_CHUNK):
        F = forward_batch(model, None, dataset.features[start:start + EVAL_CHUNK]).features
        W = read_batch(mem, F, mode, similarity).weights
        total += np.cumsum(-np.sort(-W, axis=1), axis=1).sum(axis=0)
    return total / len(dataset)


# -- ablation -------------------------------------------------------------------


def ablation_variants(config: TrainConfig, topk_grid=()) -> list[tuple[str, str, TrainConfig]]:
    """``(name, variant, config)`` triples in a fixed order."""
    base = config.to_dict()

    def cfg(**kw):
        return TrainConfig.from_dict({**base, **kw})

    out = [
        ("baseline", "baseline", cfg()),
        ("cmn-attention", "cmn", cfg(read_mode="attention", topk=None)),
        ("cmn-equal", "cmn", cfg(read_mode="equal", topk=None)),
        ("cmn-predicted", "cmn", cfg(read_mode="predicted", topk=None)),
        ("random", "random", cfg(read_mode="attention", topk=None)),
    ]
    for k in topk_grid:
        out.append((f"cmn-topk-{int(k)}", "cmn", cfg(read_mode="topk", topk=int(k))))
    return out


@dataclass
class AblationReport:
    seeds: list[int]
    accuracies: dict[str, list[float]]
    batch_digests: dict[str, list[str]]
    config: dict
    config_digest: str

    @property
    def means(self) -> dict[str, float]:
        return {k: float(np.mean(v)) for k, v in self.accuracies.items()}

    @property
    def stds(self) -> dict[str, float]:
        return {k: float(np.std(v, ddof=1)) if len(v) > 1 else 0.0 for k, v in self.accuracies.items()}

    def diffs_vs_baseline(self) -> dict[str, float]:
        m = self.means
        return {k: m[k] - m["baseline"] for k in m if k != "baseline"}

    def to_dict(self) -> dict:
        return {"schema_version": SCHEMA_VERSION, "seeds": self.seeds, "accuracies": self.accuracies,
                "batch_digests": self.batch_digests, "means": self.means, "stds": self.stds,
                "diff_vs_baseline": self.diffs_vs_baseline(), "config": self.config,
                "config_digest": self.config_digest}

    @classmethod
    def from_dict(cls, d: dict) -> "AblationReport":
        _check_schema(d, ("seeds", "accuracies", "batch_digests", "config", "config_digest"), "ablation report")
        # the file is written with sorted keys; restore the run order recorded in the config
        order = [v for v in d["config"].get("variants", []) if v in d["accuracies"]]
        order += [v for v in d["accuracies"] if v not in order]
        acc = {v: d["accuracies"][v] for v in order}
        dig = {v: d["batch_digests"][v] for v in order if v in d["batch_digests"]}
        return cls(d["seeds"], acc, dig, d["config"], d["config_digest"])


def _run_task(args) -> tuple[str, int, float, str]:
    name, variant, config, train, test = args
    m = train_run(train, test, config, variant).metrics
    return name, config.seed, m.final_test_accuracy, m.batch_digest


def default_workers() -> int:
    env = os.environ.get("CMN_THREADS")
    if env:
        return max(1, int(env))
    return os.cpu_count() or 1


def ablate(train: Dataset, test: Dataset, config: TrainConfig, seeds, topk_grid=(),
           workers: int | None = None, variants=None) -> AblationReport:
    """Run every ablation variant for every seed on the same data.

    ``variants`` optionally restricts the run to a subset of variant names.
    """
    seeds = [int(s) for s in seeds]
    if len(seeds) < 2:
        raise ValueError("an ablation needs at least two seeds")
    plan = ablation_variants(config, topk_grid)
    if variants is not None:
        plan = [p for p in plan if p[0] in set(variants)]
    tasks = []
    for name, variant, cfg in plan:
        for s in seeds:
            tasks.append((name, variant, TrainConfig.from_dict({**cfg.to_dict(), "seed": s}), train, test))
    workers = default_workers() if workers is None else workers
    if workers > 1 and len(tasks) > 1:
        with ProcessPoolExecutor(max_workers=min(workers, len(tasks))) as pool:
            results = list(pool.map(_run_task, tasks))
    else:
        results = [_run_task(t) for t in tasks]
    acc = {name: [0.0] * len(seeds) for name, _, _ in plan}
    dig = {name: [""] * len(seeds) for name, _, _ in plan}
    for name, seed, a, d in results:
        acc[name][seeds.index(seed)] = a
        dig[name][seeds.index(seed)] = d
    resolved = {"train": config.to_dict(), "seeds": seeds, "topk_grid": [int(k) for k in topk_grid],
                "variants": [p[0] for p in plan]}
    return AblationReport(seeds, acc, dig, resolved, config_digest(resolved))


# -- persistence ------------------------------------------------------------------


def _check_schema(d: dict, required, what: str) -> None:
    version = d.get("schema_version")
    if version != SCHEMA_VERSION:
        raise MetricsSchemaError(f"{what}: schema_version {version!r} unsupported (expected {SCHEMA_VERSION})")
    missing = [k for k in required if k not in d]
    if missing:
        raise MetricsSchemaError(f"{what} (schema v{SCHEMA_VERSION}): missing field(s) {missing}")


def _dump(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


def write_metrics(obj, out_dir) -> list[Path]:
    """Persist RunMetrics (``metrics.jsonl`` + ``summary.json``) or an AblationReport (``ablation.json``).

    Wall-clock time goes to a separate ``timing.json`` so that the metrics files
    themselves are byte-identical across reruns.
    """
    out = Path(out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
        if isinstance(obj, AblationReport):
            p = out / "ablation.json"
            p.write_text(json.dumps(obj.to_dict(), indent=2, sort_keys=True) + "\n")
            return [p]
        lines = out / "metrics.jsonl"
        lines.write_text("".join(_dump(r.to_dict()) + "\n" for r in obj.records))
        summary = out / "summary.json"
        summary.write_text(json.dumps(obj.summary(), indent=2, sort_keys=True) + "\n")
        timing = out / "timing.json"
        timing.write_text(_dump({"schema_version": SCHEMA_VERSION, "wall_clock_seconds": obj.wall_clock}) + "\n")
        return [lines, summary, timing]
    except OSError as exc:
        raise OSError(f"cannot write metrics to {out}: {exc}") from exc


def read_metrics(out_dir) -> RunMetrics:
    out = Path(out_dir)
    summary = json.loads((out / "summary.json").read_text())
    _check_schema(summary, SUMMARY_FIELDS, "summary.json")
    records = []
    for i, line in enumerate((out / "metrics.jsonl").read_text().splitlines(), start=1):
        d = json.loads(line)
        _check_schema(d, EPOCH_FIELDS, f"metrics.jsonl line {i}")
        records.append(EpochRecord(*(d[k] for k in EPOCH_FIELDS)))
    m = RunMetrics(summary["variant"], summary["seed"], summary["config"], summary["config_digest"], records,
                   summary["final_test_accuracy"], summary["batch_digest"],
                   attention_curve=summary.get("attention_curve"))
    timing = out / "timing.json"
    if timing.exists():
        m.wall_clock = json.loads(timing.read_text()).get("wall_clock_seconds", 0.0)
    return m


def read_ablation(path) -> AblationReport:
    p = Path(path)
    if p.is_dir():
        p = p / "ablation.json"
    return AblationReport.from_dict(json.loads(p.read_text()))
