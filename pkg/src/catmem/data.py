"""Synthetic fine-grained datasets and feature-CSV ingestion.

Each class mean is a sum of unit attribute vectors drawn from an orthonormal
dictionary. A ``shared_fraction`` of every class's attributes comes from a
common pool, so raising it makes classes look alike.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from catmem.errors import CsvParseError
from catmem.numerics import Rng


@dataclass
class SyntheticSpec:
    num_classes: int = 20
    dim: int = 32
    attribute_pool: int = 16
    attrs_per_class: int = 8
    shared_fraction: float = 0.8
    unique_strength: float = 0.5
    jitter_std: float = 0.3
    noise_std: float = 0.3
    train_per_class: int = 30
    test_per_class: int = 30
    seed: int = 0

    def validate(self) -> None:
        if self.num_classes < 2:
            raise ValueError(f"num_classes must be >= 2, got {self.num_classes}")
        if self.attrs_per_class > self.attribute_pool:
            raise ValueError(
                f"attrs_per_class ({self.attrs_per_class}) must not exceed attribute_pool ({self.attribute_pool})")
        if self.attribute_pool > self.dim:
            raise ValueError(f"attribute_pool ({self.attribute_pool}) must not exceed dim ({self.dim})")
        if self.attrs_per_class < 1:
            raise ValueError("attrs_per_class must be >= 1")
        if not 0.0 <= self.shared_fraction <= 1.0:
            raise ValueError(f"shared_fraction must lie in [0, 1], got {self.shared_fraction}")
        for name in ("unique_strength", "jitter_std", "noise_std"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be non-negative, got {getattr(self, name)}")
        if self.unique_strength > 0 and self.num_classes > self.dim:
            raise ValueError(f"unique directions need num_classes ({self.num_classes}) <= dim ({self.dim})")
        if self.train_per_class < 1 or self.test_per_class < 0:
            raise ValueError("train_per_class must be >= 1 and test_per_class >= 0")
        k_shared, k_private = self.attribute_split()
        if k_private > self.attribute_pool - self.shared_pool_size():
            raise ValueError(f"{k_private} private attributes per class but only "
                             f"{self.attribute_pool - self.shared_pool_size()} non-shared attributes")
        if k_shared > self.shared_pool_size():
            raise ValueError("shared pool too small for the requested shared attributes")

    def shared_pool_size(self) -> int:
        return math.ceil(self.shared_fraction * self.attribute_pool)

    def attribute_split(self) -> tuple[int, int]:
        """Number of shared and private attributes per class."""
        k_shared = min(round(self.shared_fraction * self.attrs_per_class), self.shared_pool_size())
        k_private = self.attrs_per_class - k_shared
        if self.attribute_pool - self.shared_pool_size() == 0:
            k_shared, k_private = self.attrs_per_class, 0
        return k_shared, k_private

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "SyntheticSpec":
        return cls(**{k: v for k, v in d.items() if k in cls.__dataclass_fields__})


@dataclass
class Dataset:
    features: np.ndarray
    labels: np.ndarray
    num_classes: int
    split: str = "train"

    def __post_init__(self):
        self.features = np.ascontiguousarray(self.features, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.features.ndim != 2 or self.labels.shape != (self.features.shape[0],):
            raise ValueError(f"features {self.features.shape} and labels {self.labels.shape} disagree")
        if self.labels.size and (self.labels.min() < 0 or self.labels.max() >= self.num_classes):
            raise ValueError(f"labels must lie in [0, {self.num_classes})")

    def __len__(self) -> int:
        return self.labels.shape[0]

    @property
    def dim(self) -> int:
        return self.features.shape[1]

    def class_counts(self) -> np.ndarray:
        return np.bincount(self.labels, minlength=self.num_classes)


@dataclass
class SimilarityReport:
    matrix: np.ndarray
    mean: float
    max: float

    def to_dict(self) -> dict:
        return {"mean_pairwise_cosine": self.mean, "max_pairwise_cosine": self.max,
                "matrix": self.matrix.tolist()}


def gram_schmidt(vectors: np.ndarray) -> np.ndarray:
    """Orthonormalize the rows of ``vectors`` (modified Gram-Schmidt, two passes)."""
    q = np.array(vectors, dtype=np.float64)
    for i in range(q.shape[0]):
        for _ in range(2):
            for j in range(i):
                q[i] -= (q[j] @ q[i]) * q[j]
        n = np.linalg.norm(q[i])
        if n < 1e-10:
            raise ValueError("linearly dependent draw during orthonormalization")
        q[i] /= n
    return q


def class_attributes(spec: SyntheticSpec, rng: Rng) -> list[np.ndarray]:
    """Attribute index sets per class.

    The shared attributes are common to every class: one draw of ``k_shared``
    indices from the shared pool, reused for all classes. Private attributes
    are dealt round-robin from a shuffled non-shared pool, so they stay
    disjoint across classes whenever the pool is large enough. Drawing the
    shared part independently per class would make the expected overlap
    independent of ``shared_fraction`` and flatten the dial.
    """
    n_shared = spec.shared_pool_size()
    k_shared, k_private = spec.attribute_split()
    private_pool = np.arange(n_shared, spec.attribute_pool)
    common = list(rng.choice(n_shared, k_shared)) if k_shared else []
    deck = rng.permutation(private_pool.size) if private_pool.size else np.array([], dtype=int)
    out = []
    cursor = 0
    for _ in range(spec.num_classes):
        picks = []
        while len(picks) < k_private:
            a = private_pool[deck[cursor % deck.size]]
            cursor += 1
            if a not in picks:
                picks.append(a)
        out.append(np.array(sorted(common + picks), dtype=np.int64))
    return out


def generate(spec: SyntheticSpec) -> tuple[Dataset, Dataset, np.ndarray]:
    """Build train/test splits and the ground-truth class means (C x D)."""
    spec.validate()
    root = Rng(spec.seed, "synthetic")
    attributes = gram_schmidt(root.substream("attributes").normal((spec.attribute_pool, spec.dim)))
    unique = np.zeros((spec.num_classes, spec.dim))
    if spec.unique_strength > 0:
        unique = gram_schmidt(root.substream("unique").normal((spec.num_classes, spec.dim)))
    supports = class_attributes(spec, root.substream("supports"))
    means = np.stack([attributes[s].sum(axis=0) + spec.unique_strength * unique[i]
                      for i, s in enumerate(supports)])

    def sample(per_class: int, stream: str, split: str) -> Dataset:
        rng = root.substream(stream)
        feats, labels = [], []
        for i, s in enumerate(supports):
            coef = rng.normal((per_class, s.size), 0.0, spec.jitter_std) if spec.jitter_std > 0 \
                else np.zeros((per_class, s.size))
            noise = rng.normal((per_class, spec.dim), 0.0, spec.noise_std) if spec.noise_std > 0 \
                else np.zeros((per_class, spec.dim))
            feats.append(means[i] + coef @ attributes[s] + noise)
            labels.append(np.full(per_class, i))
        return Dataset(np.concatenate(feats), np.concatenate(labels), spec.num_classes, split)

    return sample(spec.train_per_class, "train", "train"), sample(spec.test_per_class, "test", "test"), means


def similarity_stats(source) -> SimilarityReport:
    """Pairwise cosine between class means, given directly (C x D) or estimated from a Dataset."""
    if isinstance(source, Dataset):
        counts = source.class_counts()
        if np.any(counts == 0):
            raise ValueError(f"classes {np.flatnonzero(counts == 0).tolist()} have no samples")
        means = np.stack([source.features[source.labels == c].mean(axis=0) for c in range(source.num_classes)])
    else:
        means = np.asarray(source, dtype=np.float64)
    if means.ndim != 2 or means.shape[0] < 2:
        raise ValueError("similarity statistics need at least two classes")
    norms = np.linalg.norm(means, axis=1)
    if np.any(norms <= 1e-12):
        raise ValueError("a class mean has near-zero norm")
    unit = means / norms[:, None]
    m = np.clip(unit @ unit.T, -1.0, 1.0)
    np.fill_diagonal(m, 1.0)
    off = m[~np.eye(m.shape[0], dtype=bool)]
    return SimilarityReport(m, float(off.mean()), float(off.max()))


def split(dataset: Dataset, fraction: float, seed: int) -> tuple[Dataset, Dataset]:
    """Stratified, seeded split; ``fraction`` of every class goes to the first part."""
    if not 0.0 < fraction < 1.0:
        raise ValueError(f"fraction must lie in (0, 1), got {fraction}")
    counts = dataset.class_counts()
    present = np.flatnonzero(counts)
    if np.any(counts[present] < 2):
        raise ValueError("every class needs at least 2 samples to split")
    rng = Rng(seed, "split")
    first, second = [], []
    for c in present:
        idx = np.flatnonzero(dataset.labels == c)
        idx = idx[rng.permutation(idx.size)]
        n_first = min(max(1, round(fraction * idx.size)), idx.size - 1)
        first.append(idx[:n_first])
        second.append(idx[n_first:])
    a = np.sort(np.concatenate(first))
    b = np.sort(np.concatenate(second))
    return (Dataset(dataset.features[a], dataset.labels[a], dataset.num_classes, "train"),
            Dataset(dataset.features[b], dataset.labels[b], dataset.num_classes, "test"))


# -- CSV ----------------------------------------------------------------------


def save_csv(dataset: Dataset, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["label"] + [f"f{j}" for j in range(dataset.dim)])
        for label, row in zip(dataset.labels, dataset.features):
            w.writerow([int(label)] + [repr(float(x)) for x in row])


def load_csv(path, num_classes: int | None = None, split: str | None = None) -> Dataset:
    """Read a ``label,f0,...`` file. Without ``num_classes`` it is inferred from the labels."""
    path = Path(path)
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise CsvParseError("empty file, expected a header", 1)
    header = rows[0]
    if not header or header[0].strip() != "label":
        raise CsvParseError("header must start with 'label'", 1)
    width = len(header)
    if width < 2:
        raise CsvParseError("header declares no feature columns", 1)
    labels, feats = [], []
    for lineno, row in enumerate(rows[1:], start=2):
        if not row:
            continue
        if len(row) != width:
            raise CsvParseError(f"expected {width} columns, got {len(row)}", lineno)
        try:
            label = int(row[0])
        except ValueError:
            raise CsvParseError(f"label {row[0]!r} is not an integer", lineno) from None
        if label < 0:
            raise CsvParseError(f"label {label} is negative", lineno)
        if num_classes is not None and label >= num_classes:
            raise CsvParseError(f"label {label} >= declared class count {num_classes}", lineno)
        try:
            values = [float(x) for x in row[1:]]
        except ValueError as exc:
            raise CsvParseError(f"non-numeric cell: {exc}", lineno) from None
        if not all(math.isfinite(v) for v in values):
            raise CsvParseError("non-finite feature value", lineno)
        labels.append(label)
        feats.append(values)
    if num_classes is None:
        num_classes = max(labels) + 1 if labels else 0
    features = np.array(feats, dtype=np.float64).reshape(len(feats), width - 1)
    return Dataset(features, np.array(labels, dtype=np.int64), num_classes, split or path.stem)


def write_metadata(path, train: Dataset, test: Dataset, spec: SyntheticSpec | None = None) -> dict:
    meta = {
        "schema_version": 1,
        "num_classes": train.num_classes,
        "dim": train.dim,
        "splits": {d.split: {"file": f"{d.split}.csv", "n": len(d)} for d in (train, test)},
        "generator": spec.to_dict() if spec is not None else None,
    }
    Path(path).write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")
    return meta


def save_dataset_dir(out_dir, train: Dataset, test: Dataset, spec: SyntheticSpec | None = None) -> dict:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    save_csv(train, out / "train.csv")
    save_csv(test, out / "test.csv")
    return write_metadata(out / "meta.json", train, test, spec)


def load_dataset_dir(data_dir) -> tuple[Dataset, Dataset, dict]:
    """Load ``train.csv``/``test.csv`` with the class count from ``meta.json`` when present."""
    d = Path(data_dir)
    meta = {}
    if (d / "meta.json").exists():
        meta = json.loads((d / "meta.json").read_text())
    c = meta.get("num_classes")
    train = load_csv(d / "train.csv", c, "train")
    test = load_csv(d / "test.csv", c if c is not None else train.num_classes, "test")
    if c is None:
        c = max(train.num_classes, test.num_classes)
        train.num_classes = test.num_classes = c
    if train.dim != test.dim:
        raise ValueError(f"train dim {train.dim} and test dim {test.dim} differ")
    return train, test, meta
