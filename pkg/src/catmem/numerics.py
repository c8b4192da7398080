"""Dense float64 primitives and seeded random streams.

Matrices are plain ``numpy`` arrays of dtype float64 in C (row-major) order.
"""

from __future__ import annotations

import zlib

import numpy as np

from catmem.errors import DegenerateVectorError, ShapeError

NORM_EPS = 1e-12


def as_matrix(a, name: str = "matrix") -> np.ndarray:
    arr = np.ascontiguousarray(a, dtype=np.float64)
    if arr.ndim != 2:
        raise ShapeError(f"{name} must be 2-D, got shape {arr.shape}")
    return arr


def as_vector(v, name: str = "vector") -> np.ndarray:
    arr = np.ascontiguousarray(v, dtype=np.float64)
    if arr.ndim != 1:
        raise ShapeError(f"{name} must be 1-D, got shape {arr.shape}")
    return arr


def matmul(a, b) -> np.ndarray:
    """Matrix product of two 2-D float64 arrays."""
    a = as_matrix(a, "a")
    b = as_matrix(b, "b")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"cannot multiply {a.shape[0]}x{a.shape[1]} by {b.shape[0]}x{b.shape[1]}")
    return a @ b


def stable_softmax(scores, temperature: float = 1.0) -> np.ndarray:
    """Softmax of ``scores / temperature`` with the maximum subtracted first."""
    s = as_vector(scores, "scores")
    if s.size == 0:
        raise ValueError("softmax of an empty vector")
    if not np.all(np.isfinite(s)):
        raise ValueError("softmax scores must be finite")
    if not temperature > 0:
        raise ValueError(f"temperature must be positive, got {temperature}")
    z = (s - s.max()) / temperature
    e = np.exp(z)
    return e / e.sum()


def masked_softmax_rows(logits: np.ndarray, mask: np.ndarray, temperature: float = 1.0) -> np.ndarray:
    """Row-wise softmax over the columns selected by ``mask``; zero elsewhere.

    ``mask`` is either a length-C boolean vector shared by all rows or an
    N x C boolean array. Rows with no selected column come back all-zero.
    """
    mask = np.broadcast_to(mask, logits.shape)
    z = np.where(mask, logits, -np.inf)
    zmax = z.max(axis=1, keepdims=True)
    zmax = np.where(np.isfinite(zmax), zmax, 0.0)
    e = np.where(mask, np.exp((z - zmax) / temperature), 0.0)
    total = e.sum(axis=1, keepdims=True)
    return np.divide(e, total, out=np.zeros_like(e), where=total > 0)


def cosine(a, b) -> float:
    a = as_vector(a, "a")
    b = as_vector(b, "b")
    if a.shape != b.shape:
        raise ShapeError(f"cosine of vectors with lengths {a.size} and {b.size}")
    na = np.linalg.norm(a)
    nb = np.linalg.norm(b)
    if na <= NORM_EPS or nb <= NORM_EPS:
        raise DegenerateVectorError(f"cosine undefined for near-zero norm ({na:.3g}, {nb:.3g})")
    c = float(a @ b) / (na * nb)
    return min(1.0, max(-1.0, c))


def _stream_key(stream) -> int:
    if isinstance(stream, str):
        return zlib.crc32(stream.encode("utf-8"))
    return int(stream)


class Rng:
    """Counter-based (Philox 4x64) generator keyed by ``(seed, stream)``.

    Streams with different ids are statistically independent; the same
    ``(seed, stream)`` pair always reproduces the same draws. ``stream`` may be
    an int or a name (hashed with CRC-32).
    """

    def __init__(self, seed: int, stream: int | str = 0):
        self.seed = int(seed)
        self.stream = _stream_key(stream)
        seq = np.random.SeedSequence([self.seed & 0xFFFFFFFFFFFFFFFF, self.stream])
        self.generator = np.random.Generator(np.random.Philox(seq))

    def substream(self, stream: int | str) -> "Rng":
        return Rng(self.seed, f"{self.stream}/{_stream_key(stream)}")

    def normal(self, size, mean: float = 0.0, std: float = 1.0) -> np.ndarray:
        return self.generator.normal(mean, std, size)

    def permutation(self, n: int) -> np.ndarray:
        return self.generator.permutation(n)

    def choice(self, n: int, size: int, replace: bool = False) -> np.ndarray:
        return self.generator.choice(n, size=size, replace=replace)


def gaussian(rng: Rng, n: int, mean: float = 0.0, std: float = 1.0) -> np.ndarray:
    """``n`` i.i.d. normal draws; ``std == 0`` gives the constant ``mean`` vector."""
    if std < 0:
        raise ValueError(f"std must be non-negative, got {std}")
    if n < 0:
        raise ValueError(f"n must be non-negative, got {n}")
    if std == 0:
        return np.full(n, float(mean))
    return rng.normal(n, mean, std)
