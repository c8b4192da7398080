"""A small MLP feature extractor with a linear head over memory-augmented features."""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from catmem.errors import ShapeError, SnapshotError
from catmem.memory import (
    Attention,
    CategoricalMemory,
    Equal,
    Predicted,
    PredictorParams,
    ReadCache,
    ReadMode,
    ReadResult,
    TopK,
    read_batch,
    read_batch_backward,
)
from catmem.numerics import Rng, as_matrix, as_vector


@dataclass
class MlpModel:
    """Hidden layers ``(W, b)`` with ReLU between them; the last layer's linear output is the feature."""

    layers: list[tuple[np.ndarray, np.ndarray]]
    classifier: tuple[np.ndarray, np.ndarray]
    feature_relu: bool = False

    def __post_init__(self):
        prev = None
        for i, (w, b) in enumerate(self.layers):
            if w.ndim != 2 or b.shape != (w.shape[0],):
                raise ShapeError(f"layer {i}: weight {w.shape} and bias {b.shape} are inconsistent")
            if prev is not None and w.shape[1] != prev:
                raise ShapeError(f"layer {i} expects {w.shape[1]} inputs but previous layer gives {prev}")
            prev = w.shape[0]
        wc, bc = self.classifier
        if wc.shape[1] != self.feature_dim or bc.shape != (wc.shape[0],):
            raise ShapeError(f"classifier {wc.shape} does not match feature dim {self.feature_dim}")

    @classmethod
    def init(cls, rng: Rng, input_dim: int, hidden: tuple[int, ...] | list[int], feature_dim: int,
             num_classes: int, classifier_std: float = 0.01, feature_relu: bool = False) -> "MlpModel":
        dims = [input_dim, *hidden, feature_dim]
        layers = []
        for fan_in, fan_out in zip(dims[:-1], dims[1:]):
            layers.append((rng.normal((fan_out, fan_in), 0.0, np.sqrt(2.0 / fan_in)), np.zeros(fan_out)))
        classifier = (rng.normal((num_classes, feature_dim), 0.0, classifier_std), np.zeros(num_classes))
        return cls(layers, classifier, feature_relu)

    @property
    def input_dim(self) -> int:
        return self.layers[0][0].shape[1]

    @property
    def feature_dim(self) -> int:
        return self.layers[-1][0].shape[0]

    @property
    def num_classes(self) -> int:
        return self.classifier[0].shape[0]

    def backbone_params(self) -> list[np.ndarray]:
        return [p for layer in self.layers for p in layer]

    def head_params(self) -> list[np.ndarray]:
        return list(self.classifier)

    def copy(self) -> "MlpModel":
        return MlpModel([(w.copy(), b.copy()) for w, b in self.layers],
                        (self.classifier[0].copy(), self.classifier[1].copy()), self.feature_relu)


@dataclass
class TrainConfig:
    lr_backbone: float = 1e-2
    lr_multiplier_new: float = 5.0
    momentum: float = 0.9
    weight_decay: float = 1e-4
    batch_size: int = 16
    epochs: int = 60
    lr_decay_factor: float = 0.1
    lr_decay_epoch: int = 40
    beta: float = 0.9
    tau: float = 0.1
    read_mode: str = "attention"
    topk: int | None = None
    seed: int = 0
    backprop_through_attention: bool = True
    similarity: str = "cosine"
    hidden: tuple[int, ...] = (64,)
    feature_dim: int = 32
    feature_relu: bool = False
    classifier_std: float = 0.01
    random_scale: float | None = None
    memory_writes: bool = True

    def __post_init__(self):
        self.hidden = tuple(int(h) for h in self.hidden)
        for name in ("lr_backbone", "lr_multiplier_new", "lr_decay_factor", "tau"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive, got {getattr(self, name)}")
        if not 0.0 < self.beta < 1.0:
            raise ValueError(f"beta must lie in (0, 1), got {self.beta}")
        if not 0.0 <= self.momentum < 1.0:
            raise ValueError(f"momentum must lie in [0, 1), got {self.momentum}")
        if self.weight_decay < 0:
            raise ValueError(f"weight_decay must be non-negative, got {self.weight_decay}")
        if self.batch_size < 1 or self.epochs < 0 or self.feature_dim < 1:
            raise ValueError("batch_size and feature_dim must be >= 1 and epochs >= 0")
        if not 0 <= self.lr_decay_epoch <= self.epochs:
            raise ValueError(f"lr_decay_epoch {self.lr_decay_epoch} must lie in [0, epochs={self.epochs}]")
        if self.read_mode not in ("attention", "equal", "topk", "predicted"):
            raise ValueError(f"unknown read mode {self.read_mode!r}")
        if self.read_mode == "topk" and (self.topk is None or self.topk < 1):
            raise ValueError("read_mode 'topk' needs topk >= 1")
        if self.similarity not in ("cosine", "dot"):
            raise ValueError(f"unknown similarity {self.similarity!r}")

    @classmethod
    def reference_defaults(cls, **overrides) -> "TrainConfig":
        """Large-backbone reference schedule: lr 4e-3, 60 epochs, decay at 40."""
        return cls(**{"lr_backbone": 4e-3, **overrides})

    def to_dict(self) -> dict:
        d = asdict(self)
        d["hidden"] = list(self.hidden)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {k: v for k, v in d.items() if k in cls.__dataclass_fields__}
        return cls(**known)

    def digest(self) -> str:
        return config_digest(self.to_dict())


def config_digest(obj) -> str:
    blob = json.dumps(obj, sort_keys=True, separators=(",", ":")).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


def lr_at(epoch: int, config: TrainConfig) -> tuple[float, float]:
    """Step schedule: ``(backbone lr, new-layer lr)`` at ``epoch``."""
    lr = config.lr_backbone
    if epoch >= config.lr_decay_epoch:
        lr *= config.lr_decay_factor
    return lr, lr * config.lr_multiplier_new


def make_read_mode(config: TrainConfig, predictor: PredictorParams | None = None) -> ReadMode:
    if config.read_mode == "attention":
        return Attention()
    if config.read_mode == "equal":
        return Equal()
    if config.read_mode == "topk":
        return TopK(config.topk)
    if predictor is None:
        raise ValueError("predicted read mode needs predictor parameters")
    return Predicted(predictor)


# -- forward / backward ---------------------------------------------------------


@dataclass
class ForwardCache:
    inputs: np.ndarray
    pre_acts: list[np.ndarray]
    acts: list[np.ndarray]
    features: np.ndarray
    read: ReadCache | None
    augmented: np.ndarray
    logits: np.ndarray


def forward_batch(model: MlpModel, mem: CategoricalMemory | None, X, mode: ReadMode | None = None,
                  similarity: str = "cosine") -> ForwardCache:
    """Forward pass for a batch; ``mem=None`` skips the memory module entirely."""
    X = as_matrix(X, "inputs")
    if X.shape[1] != model.input_dim:
        raise ShapeError(f"input dim {X.shape[1]} does not match model input dim {model.input_dim}")
    h = X
    acts = [X]
    pre_acts = []
    last = len(model.layers) - 1
    for i, (w, b) in enumerate(model.layers):
        z = h @ w.T + b
        pre_acts.append(z)
        h = z if (i == last and not model.feature_relu) else np.maximum(z, 0.0)
        acts.append(h)
    F = h
    if mem is None:
        rc = None
        F_aug = F
    else:
        rc = read_batch(mem, F, mode, similarity)
        F_aug = F + rc.responses
    wc, bc = model.classifier
    logits = F_aug @ wc.T + bc
    return ForwardCache(X, pre_acts, acts, F, rc, F_aug, logits)


def forward(model: MlpModel, mem: CategoricalMemory | None, x, mode: ReadMode | None = None,
            similarity: str = "cosine"):
    """Single-sample forward: ``(f, ReadResult, f_aug, logits)``."""
    x = as_vector(x, "x")
    c = forward_batch(model, mem, x[None, :], mode, similarity)
    if c.read is None:
        rr = ReadResult(np.zeros(model.num_classes), np.zeros(model.feature_dim), 0)
    else:
        rr = ReadResult(c.read.weights[0], c.read.responses[0], int(c.read.eligible.sum()))
    return c.features[0], rr, c.augmented[0], c.logits[0]


def log_softmax_rows(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=1, keepdims=True))


def cross_entropy(logits, label: int) -> tuple[float, np.ndarray]:
    logits = as_vector(logits, "logits")
    losses, grad = cross_entropy_batch(logits[None, :], np.array([label]))
    return float(losses[0]), grad[0]


def cross_entropy_batch(logits: np.ndarray, labels) -> tuple[np.ndarray, np.ndarray]:
    """Per-sample losses and ``softmax - one_hot`` gradients."""
    labels = np.asarray(labels, dtype=np.int64)
    n, c = logits.shape
    if labels.shape != (n,):
        raise ShapeError(f"{labels.shape[0]} labels for {n} logit rows")
    if np.any(labels < 0) or np.any(labels >= c):
        raise IndexError(f"label out of range for {c} classes")
    logp = log_softmax_rows(logits)
    rows = np.arange(n)
    grad = np.exp(logp)
    grad[rows, labels] -= 1.0
    return -logp[rows, labels], grad


@dataclass
class Gradients:
    layers: list[tuple[np.ndarray, np.ndarray]]
    classifier: tuple[np.ndarray, np.ndarray]
    predictor: PredictorParams | None = None
    inputs: np.ndarray | None = None

    def backbone(self) -> list[np.ndarray]:
        return [g for layer in self.layers for g in layer]

    def head(self) -> list[np.ndarray]:
        out = list(self.classifier)
        if self.predictor is not None:
            out += [self.predictor.weight, self.predictor.bias]
        return out


def backward_batch(model: MlpModel, mem: CategoricalMemory | None, X, labels, mode: ReadMode | None = None,
                   through_attention: bool = True, similarity: str = "cosine",
                   cache: ForwardCache | None = None) -> tuple[np.ndarray, Gradients, ForwardCache]:
    """Summed-over-batch gradients of the cross-entropy loss.

    Returns per-sample losses, the gradients and the forward cache.
    """
    if cache is None:
        cache = forward_batch(model, mem, X, mode, similarity)
    losses, g_logits = cross_entropy_batch(cache.logits, labels)
    wc, _ = model.classifier
    g_wc = g_logits.T @ cache.augmented
    g_bc = g_logits.sum(axis=0)
    g_aug = g_logits @ wc
    pgrad = None
    if cache.read is None:
        g = g_aug
    else:
        g, pgrad = read_batch_backward(mem, cache.read, g_aug, through_attention)
    layer_grads = []
    last = len(model.layers) - 1
    for i in range(last, -1, -1):
        w, _ = model.layers[i]
        if i != last or model.feature_relu:
            g = g * (cache.pre_acts[i] > 0)
        layer_grads.append((g.T @ cache.acts[i], g.sum(axis=0)))
        g = g @ w
    layer_grads.reverse()
    return losses, Gradients(layer_grads, (g_wc, g_bc), pgrad, g), cache


# -- optimizer ----------------------------------------------------------------


@dataclass
class OptimizerState:
    velocities: list[np.ndarray] = field(default_factory=list)

    @classmethod
    def zeros_like(cls, params: list[np.ndarray]) -> "OptimizerState":
        return cls([np.zeros_like(p) for p in params])


def sgd_step(params: list[np.ndarray], grads: list[np.ndarray], state: OptimizerState,
             lr: float, momentum: float, weight_decay: float) -> None:
    """In-place SGD with momentum and L2 weight decay (coupled into the gradient)."""
    if not (len(params) == len(grads) == len(state.velocities)):
        raise ShapeError(f"{len(params)} params, {len(grads)} grads, {len(state.velocities)} velocity buffers")
    for p, g, v in zip(params, grads, state.velocities):
        if not (p.shape == g.shape == v.shape):
            raise ShapeError(f"param {p.shape}, grad {g.shape}, velocity {v.shape} differ")
        v *= momentum
        v += g + weight_decay * p
        p -= lr * v


# -- checkpoint -----------------------------------------------------------------

CHECKPOINT_MAGIC = b"CMNW"
CHECKPOINT_VERSION = 1


def _pack_array_pair(w: np.ndarray, b: np.ndarray) -> bytes:
    return struct.pack("<II", *w.shape) + w.astype("<f8").tobytes() + b.astype("<f8").tobytes()


def _unpack_array_pair(data: bytes, pos: int) -> tuple[np.ndarray, np.ndarray, int]:
    if len(data) < pos + 8:
        raise SnapshotError("truncated layer header", len(data))
    rows, cols = struct.unpack_from("<II", data, pos)
    pos += 8
    need = 8 * (rows * cols + rows)
    if len(data) < pos + need:
        raise SnapshotError(f"truncated layer body: need {need} bytes", len(data))
    w = np.frombuffer(data, "<f8", rows * cols, pos).reshape(rows, cols).astype(np.float64)
    b = np.frombuffer(data, "<f8", rows, pos + 8 * rows * cols).astype(np.float64)
    return w, b, pos + need


def save_checkpoint(path, model: MlpModel, mem: CategoricalMemory | None,
                    predictor: PredictorParams | None = None, meta: dict | None = None) -> None:
    """Write model (+ optional predictor and memory) in the CMNW binary layout."""
    out = [CHECKPOINT_MAGIC, struct.pack("<HIB", CHECKPOINT_VERSION, len(model.layers), int(model.feature_relu))]
    for w, b in model.layers:
        out.append(_pack_array_pair(w, b))
    out.append(_pack_array_pair(*model.classifier))
    out.append(struct.pack("<B", int(predictor is not None)))
    if predictor is not None:
        out.append(_pack_array_pair(predictor.weight, predictor.bias))
    out.append(struct.pack("<B", int(mem is not None)))
    if mem is not None:
        out.append(mem.snapshot())
    blob = json.dumps(meta or {}, sort_keys=True).encode()
    out.append(struct.pack("<I", len(blob)) + blob)
    Path(path).write_bytes(b"".join(out))


def load_checkpoint(path) -> tuple[MlpModel, CategoricalMemory | None, PredictorParams | None, dict]:
    data = Path(path).read_bytes()
    return parse_checkpoint(data)


def parse_checkpoint(data: bytes):
    if data[:4] != CHECKPOINT_MAGIC:
        raise SnapshotError(f"bad checkpoint magic {data[:4]!r}", 0)
    if len(data) < 11:
        raise SnapshotError("truncated checkpoint header", len(data))
    version, n_layers, feature_relu = struct.unpack_from("<HIB", data, 4)
    if version != CHECKPOINT_VERSION:
        raise SnapshotError(f"unsupported checkpoint version {version}", 4)
    pos = 11
    layers = []
    for _ in range(n_layers):
        w, b, pos = _unpack_array_pair(data, pos)
        layers.append((w, b))
    wc, bc, pos = _unpack_array_pair(data, pos)

    def flag(pos):
        if len(data) < pos + 1:
            raise SnapshotError("truncated section flag", len(data))
        return data[pos], pos + 1

    has_pred, pos = flag(pos)
    predictor = None
    if has_pred:
        pw, pb, pos = _unpack_array_pair(data, pos)
        predictor = PredictorParams(pw, pb)
    has_mem, pos = flag(pos)
    mem = None
    if has_mem:
        mem, pos = CategoricalMemory.restore_from(data, pos)
    if len(data) < pos + 4:
        raise SnapshotError("truncated metadata length", len(data))
    (n_meta,) = struct.unpack_from("<I", data, pos)
    pos += 4
    if len(data) != pos + n_meta:
        raise SnapshotError(f"metadata length {n_meta} does not match remaining {len(data) - pos} bytes", pos)
    try:
        meta = json.loads(data[pos:].decode())
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise SnapshotError(f"unreadable metadata: {exc}", pos) from exc
    try:
        model = MlpModel(layers, (wc, bc), bool(feature_relu))
    except ShapeError as exc:
        raise SnapshotError(str(exc), 11) from exc
    return model, mem, predictor, meta
