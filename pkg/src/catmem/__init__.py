"""Class-specific categorical memory: EMA prototypes, attention reads and feature augmentation."""

from catmem.errors import (
    CsvParseError,
    DegenerateVectorError,
    FrozenMemoryError,
    MetricsSchemaError,
    NumericalError,
    ShapeError,
    SnapshotError,
)
from catmem.memory import (
    Attention,
    CategoricalMemory,
    Equal,
    Predicted,
    PredictorParams,
    ReadResult,
    TopK,
    attention_scores,
    augment,
    read,
    read_backward,
)
from catmem.numerics import Rng, cosine, gaussian, matmul, stable_softmax

__version__ = "0.1.0"

__all__ = [
    "Attention",
    "CategoricalMemory",
    "CsvParseError",
    "DegenerateVectorError",
    "Equal",
    "FrozenMemoryError",
    "MetricsSchemaError",
    "NumericalError",
    "Predicted",
    "PredictorParams",
    "ReadResult",
    "Rng",
    "ShapeError",
    "SnapshotError",
    "TopK",
    "attention_scores",
    "augment",
    "cosine",
    "gaussian",
    "matmul",
    "read",
    "read_backward",
    "stable_softmax",
]
