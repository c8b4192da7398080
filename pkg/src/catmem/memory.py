"""Class-specific memory: one prototype row per class.

Prototypes are written with an exponential moving average and read through a
softmax attention over their similarity to a query feature. The read response
is added to the query (``f_aug = f + response``). Prototypes never receive a
gradient; ``read_backward`` differentiates the read with respect to the query
(and the predictor layer in ``Predicted`` mode) only.
"""

from __future__ import annotations

import csv
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Union

import numpy as np

from catmem.errors import DegenerateVectorError, FrozenMemoryError, ShapeError, SnapshotError
from catmem.numerics import NORM_EPS, Rng, as_matrix, as_vector, masked_softmax_rows

SNAPSHOT_MAGIC = b"CMNM"
SNAPSHOT_VERSION = 1
# magic, version u16, C u32, D u32, beta f64, tau f64, frozen u8
_HEADER = struct.Struct("<4sHIIddB")

SIMILARITIES = ("cosine", "dot")


@dataclass(frozen=True)
class Attention:
    name = "attention"


@dataclass(frozen=True)
class Equal:
    name = "equal"


@dataclass(frozen=True)
class TopK:
    k: int
    name = "topk"

    def __post_init__(self):
        if self.k < 1:
            raise ValueError(f"TopK needs k >= 1, got {self.k}")


@dataclass
class PredictorParams:
    """Fully connected layer (C x D weight, C bias) producing selection logits."""

    weight: np.ndarray
    bias: np.ndarray

    @classmethod
    def init(cls, num_classes: int, dim: int, rng: Rng, std: float = 0.01) -> "PredictorParams":
        return cls(rng.normal((num_classes, dim), 0.0, std), np.zeros(num_classes))


@dataclass
class Predicted:
    params: PredictorParams
    name = "predicted"


ReadMode = Union[Attention, Equal, TopK, Predicted]


@dataclass
class ReadResult:
    weights: np.ndarray
    response: np.ndarray
    eligible_count: int


@dataclass
class CategoricalMemory:
    """C x D prototype matrix with per-slot initialization flags."""

    slots: np.ndarray
    initialized: np.ndarray
    beta: float
    tau: float
    frozen: bool = False

    def __post_init__(self):
        self.slots = as_matrix(self.slots, "slots")
        self.initialized = np.asarray(self.initialized, dtype=bool)
        if self.initialized.shape != (self.slots.shape[0],):
            raise ShapeError(f"need {self.slots.shape[0]} initialized flags, got {self.initialized.shape}")
        if not 0.0 < self.beta < 1.0:
            raise ValueError(f"beta must lie in (0, 1), got {self.beta}")
        if not self.tau > 0.0:
            raise ValueError(f"tau must be positive, got {self.tau}")

    @classmethod
    def empty(cls, num_classes: int, dim: int, beta: float = 0.9, tau: float = 0.1) -> "CategoricalMemory":
        if num_classes < 1 or dim < 1:
            raise ValueError(f"memory needs C >= 1 and D >= 1, got {num_classes}x{dim}")
        return cls(np.zeros((num_classes, dim)), np.zeros(num_classes, dtype=bool), beta, tau)

    @classmethod
    def random(cls, num_classes: int, dim: int, rng: Rng, scale: float | None = None,
               beta: float = 0.9, tau: float = 0.1) -> "CategoricalMemory":
        """Frozen memory with i.i.d. N(0, scale^2) slots; ``scale`` defaults to 1/sqrt(D)."""
        if scale is None:
            scale = 1.0 / np.sqrt(dim)
        if not scale > 0:
            raise ValueError(f"scale must be positive, got {scale}")
        mem = cls.empty(num_classes, dim, beta, tau)
        mem.slots = rng.normal((num_classes, dim), 0.0, scale)
        mem.initialized[:] = True
        mem.frozen = True
        return mem

    @property
    def num_classes(self) -> int:
        return self.slots.shape[0]

    @property
    def dim(self) -> int:
        return self.slots.shape[1]

    def eligible(self) -> np.ndarray:
        """Boolean mask of slots that take part in reads."""
        norms = np.sqrt(np.einsum("ij,ij->i", self.slots, self.slots))
        return self.initialized & (norms > NORM_EPS)

    def copy(self) -> "CategoricalMemory":
        return CategoricalMemory(self.slots.copy(), self.initialized.copy(), self.beta, self.tau, self.frozen)

    def _check_writable(self, class_id: int, f: np.ndarray):
        if self.frozen:
            raise FrozenMemoryError("memory is frozen; writes are rejected")
        if not 0 <= class_id < self.num_classes:
            raise IndexError(f"class id {class_id} out of range for {self.num_classes} slots")
        if f.shape != (self.dim,):
            raise ShapeError(f"feature of length {f.shape} does not match slot dim {self.dim}")
        if not np.all(np.isfinite(f)):
            raise ValueError("cannot write a non-finite feature")

    def write(self, class_id: int, f) -> np.ndarray:
        """Moving-average update of one slot; the first write copies ``f``."""
        f = as_vector(f, "f")
        class_id = int(class_id)
        self._check_writable(class_id, f)
        if self.initialized[class_id]:
            self.slots[class_id] = (1.0 - self.beta) * self.slots[class_id] + self.beta * f
        else:
            self.slots[class_id] = f
            self.initialized[class_id] = True
        return self.slots[class_id]

    def batch_write(self, features, labels) -> None:
        """One moving-average step per class present, using the class mean within the batch."""
        features = as_matrix(features, "features")
        labels = np.asarray(labels, dtype=np.int64)
        if features.shape[0] != labels.shape[0]:
            raise ShapeError(f"{features.shape[0]} features but {labels.shape[0]} labels")
        if self.frozen:
            raise FrozenMemoryError("memory is frozen; writes are rejected")
        if features.shape[1] != self.dim:
            raise ShapeError(f"features of dim {features.shape[1]} do not match slot dim {self.dim}")
        if labels.size and (labels.min() < 0 or labels.max() >= self.num_classes):
            raise IndexError(f"label out of range for {self.num_classes} slots")
        if not np.all(np.isfinite(features)):
            raise ValueError("cannot write non-finite features")
        counts = np.bincount(labels, minlength=self.num_classes)
        sums = np.zeros_like(self.slots)
        np.add.at(sums, labels, features)
        present = counts > 0
        means = sums[present] / counts[present, None]
        fresh = present & ~self.initialized
        old = present & self.initialized
        self.slots[old] = (1.0 - self.beta) * self.slots[old] + self.beta * means[old[present]]
        self.slots[fresh] = means[fresh[present]]
        self.initialized |= present

    # -- persistence --------------------------------------------------------

    def snapshot(self) -> bytes:
        c, d = self.slots.shape
        header = _HEADER.pack(SNAPSHOT_MAGIC, SNAPSHOT_VERSION, c, d, self.beta, self.tau, int(self.frozen))
        flags = self.initialized.astype(np.uint8).tobytes()
        return header + flags + self.slots.astype("<f8").tobytes()

    @classmethod
    def restore(cls, data: bytes) -> "CategoricalMemory":
        mem, end = cls.restore_from(data, 0)
        if end != len(data):
            raise SnapshotError(f"{len(data) - end} trailing bytes after memory snapshot", end)
        return mem

    @classmethod
    def restore_from(cls, data: bytes, offset: int) -> tuple["CategoricalMemory", int]:
        """Parse a snapshot starting at ``offset``; return it and the end offset."""
        if len(data) - offset < _HEADER.size:
            raise SnapshotError("truncated memory header", len(data))
        magic, version, c, d, beta, tau, frozen = _HEADER.unpack_from(data, offset)
        if magic != SNAPSHOT_MAGIC:
            raise SnapshotError(f"bad magic {magic!r}", offset)
        if version != SNAPSHOT_VERSION:
            raise SnapshotError(f"unsupported snapshot version {version}", offset + 4)
        if frozen not in (0, 1):
            raise SnapshotError(f"frozen byte must be 0 or 1, got {frozen}", offset + _HEADER.size - 1)
        pos = offset + _HEADER.size
        end = pos + c + 8 * c * d
        if len(data) < end:
            raise SnapshotError(f"truncated memory body: need {end - pos} bytes", len(data))
        flags = np.frombuffer(data, dtype=np.uint8, count=c, offset=pos)
        if np.any(flags > 1):
            raise SnapshotError("initialized flags must be 0 or 1", pos + int(np.argmax(flags > 1)))
        slots = np.frombuffer(data, dtype="<f8", count=c * d, offset=pos + c).reshape(c, d)
        try:
            mem = cls(slots.astype(np.float64), flags.astype(bool), beta, tau, bool(frozen))
        except ValueError as exc:
            raise SnapshotError(str(exc), offset + 14) from exc
        return mem, end

    def to_csv(self, path) -> None:
        """Row per class: class id then D values (uninitialized rows included as zeros)."""
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["class"] + [f"m{j}" for j in range(self.dim)])
            for i, row in enumerate(self.slots):
                w.writerow([i] + [repr(float(x)) for x in row])

    def __eq__(self, other) -> bool:
        if not isinstance(other, CategoricalMemory):
            return NotImplemented
        return self.snapshot() == other.snapshot()


# -- reading ----------------------------------------------------------------


@dataclass
class ReadCache:
    """Intermediate values of a batched read, kept for the backward pass."""

    features: np.ndarray
    eligible: np.ndarray
    weights: np.ndarray
    responses: np.ndarray
    mode: ReadMode
    similarity: str
    scores: np.ndarray | None = None
    feature_norms: np.ndarray | None = None
    unit_features: np.ndarray | None = None
    unit_slots: np.ndarray | None = None
    selected: np.ndarray | None = None
    extra: dict = field(default_factory=dict)


def _similarity_scores(mem: CategoricalMemory, F: np.ndarray, eligible: np.ndarray, similarity: str, cache: ReadCache):
    if similarity == "dot":
        S = F @ mem.slots.T
        cache.scores = S
        return S
    if similarity != "cosine":
        raise ValueError(f"unknown similarity {similarity!r}; expected one of {SIMILARITIES}")
    fn = np.sqrt(np.einsum("ij,ij->i", F, F))
    if np.any(fn <= NORM_EPS):
        raise DegenerateVectorError(f"query feature with near-zero norm {fn.min():.3g}")
    mn = np.sqrt(np.einsum("ij,ij->i", mem.slots, mem.slots))
    Mhat = np.zeros_like(mem.slots)
    Mhat[eligible] = mem.slots[eligible] / mn[eligible, None]
    Fhat = F / fn[:, None]
    S = Fhat @ Mhat.T
    cache.scores = S
    cache.feature_norms = fn
    cache.unit_features = Fhat
    cache.unit_slots = Mhat
    return S


def _topk_selection(S: np.ndarray, eligible: np.ndarray, k: int) -> np.ndarray:
    # stable sort on negated scores keeps the lower class index first among ties
    keyed = np.where(eligible, -S, np.inf)
    order = np.argsort(keyed, axis=1, kind="stable")[:, :k]
    sel = np.zeros_like(S, dtype=bool)
    np.put_along_axis(sel, order, True, axis=1)
    return sel


def read_batch(mem: CategoricalMemory, F, mode: ReadMode | None = None, similarity: str = "cosine") -> ReadCache:
    """Read the memory for every row of ``F`` (N x D)."""
    mode = Attention() if mode is None else mode
    F = as_matrix(F, "features")
    n, d = F.shape
    if d != mem.dim:
        raise ShapeError(f"feature dim {d} does not match memory dim {mem.dim}")
    if not np.all(np.isfinite(F)):
        raise ValueError("query features must be finite")
    eligible = mem.eligible()
    n_eligible = int(eligible.sum())
    if isinstance(mode, TopK) and mode.k > max(n_eligible, 0) and n_eligible > 0:
        raise ValueError(f"TopK k={mode.k} exceeds {n_eligible} eligible slots")
    cache = ReadCache(F, eligible, np.zeros((n, mem.num_classes)), np.zeros((n, d)), mode, similarity)
    if n_eligible == 0:
        return cache

    if isinstance(mode, Equal):
        W = np.where(eligible, 1.0 / n_eligible, 0.0)
        W = np.broadcast_to(W, (n, mem.num_classes)).copy()
    elif isinstance(mode, Predicted):
        p = mode.params
        if p.weight.shape != mem.slots.shape or p.bias.shape != (mem.num_classes,):
            raise ShapeError(f"predictor shapes {p.weight.shape}/{p.bias.shape} do not match memory {mem.slots.shape}")
        Z = F @ p.weight.T + p.bias
        W = masked_softmax_rows(Z, eligible, 1.0)
    elif isinstance(mode, (Attention, TopK)):
        S = _similarity_scores(mem, F, eligible, similarity, cache)
        W = masked_softmax_rows(S, eligible, mem.tau)
        # k covering every eligible slot is plain attention; skipping the renormalization keeps it bit-identical
        if isinstance(mode, TopK) and mode.k < n_eligible:
            sel = _topk_selection(S, eligible, mode.k)
            W = np.where(sel, W, 0.0)
            W = W / W.sum(axis=1, keepdims=True)
            cache.selected = sel
    else:
        raise TypeError(f"unknown read mode {mode!r}")

    cache.weights = W
    if isinstance(mode, Equal):
        # the plain mean, not W @ M, so the response equals the prototype average bit for bit
        cache.responses = np.broadcast_to(mem.slots[eligible].mean(axis=0), (n, d)).copy()
    else:
        cache.responses = W @ mem.slots
    return cache


def read_batch_backward(mem: CategoricalMemory, cache: ReadCache, upstream,
                        through_attention: bool = True) -> tuple[np.ndarray, PredictorParams | None]:
    """Gradient of ``<upstream, F + responses>`` w.r.t. ``F`` (and the predictor layer).

    Returns ``(grad_F, predictor_grad)``; ``predictor_grad`` is None unless the
    read used ``Predicted`` mode. With ``through_attention=False`` the weights
    are treated as constants, so the read path contributes nothing.
    """
    U = as_matrix(upstream, "upstream")
    if U.shape != cache.features.shape:
        raise ShapeError(f"upstream shape {U.shape} does not match features {cache.features.shape}")
    mode = cache.mode
    pgrad = None
    if isinstance(mode, Predicted):
        pgrad = PredictorParams(np.zeros_like(mode.params.weight), np.zeros_like(mode.params.bias))
    grad = U.copy()
    if not through_attention or not cache.eligible.any() or isinstance(mode, Equal):
        return grad, pgrad

    W = cache.weights
    GW = U @ mem.slots.T
    GZ = W * (GW - np.einsum("ij,ij->i", W, GW)[:, None])
    if isinstance(mode, Predicted):
        grad += GZ @ mode.params.weight
        pgrad.weight += GZ.T @ cache.features
        pgrad.bias += GZ.sum(axis=0)
        return grad, pgrad

    GS = GZ / mem.tau
    if cache.similarity == "dot":
        grad += GS @ mem.slots
    else:
        S = cache.scores
        radial = np.einsum("ij,ij->i", GS, S)
        grad += (GS @ cache.unit_slots - radial[:, None] * cache.unit_features) / cache.feature_norms[:, None]
    return grad, pgrad


# -- single-query convenience API ---------------------------------------------


def attention_scores(mem: CategoricalMemory, f, similarity: str = "cosine") -> np.ndarray:
    """Softmax attention weights of ``f`` over the eligible slots (zero elsewhere)."""
    f = as_vector(f, "f")
    return read_batch(mem, f[None, :], Attention(), similarity).weights[0]


def read(mem: CategoricalMemory, f, mode: ReadMode | None = None, similarity: str = "cosine") -> ReadResult:
    f = as_vector(f, "f")
    cache = read_batch(mem, f[None, :], mode, similarity)
    return ReadResult(cache.weights[0], cache.responses[0], int(cache.eligible.sum()))


def augment(f, response) -> np.ndarray:
    f = as_vector(f, "f")
    response = as_vector(response, "response")
    if f.shape != response.shape:
        raise ShapeError(f"cannot add response of length {response.size} to feature of length {f.size}")
    return f + response


def read_backward(mem: CategoricalMemory, f, mode: ReadMode | None, upstream,
                  through_attention: bool = True, similarity: str = "cosine"):
    """Gradient of ``<upstream, augment(f, read(f).response)>`` with respect to ``f``.

    In ``Predicted`` mode a ``(grad_f, PredictorParams)`` pair is returned.
    """
    f = as_vector(f, "f")
    cache = read_batch(mem, f[None, :], mode, similarity)
    grad, pgrad = read_batch_backward(mem, cache, as_vector(upstream, "upstream")[None, :], through_attention)
    if pgrad is not None:
        return grad[0], pgrad
    return grad[0]


def save_snapshot(mem: CategoricalMemory, path) -> None:
    Path(path).write_bytes(mem.snapshot())


def load_snapshot(path) -> CategoricalMemory:
    return CategoricalMemory.restore(Path(path).read_bytes())
