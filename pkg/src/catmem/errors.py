"""Exception types shared across the package."""


class ShapeError(ValueError):
    """Operand shapes are incompatible."""


class DegenerateVectorError(ValueError):
    """A vector norm is too small to normalize."""


class FrozenMemoryError(RuntimeError):
    """A write was attempted on a frozen memory."""


class NumericalError(ArithmeticError):
    """A loss or parameter became non-finite."""


class SnapshotError(ValueError):
    """Malformed binary snapshot or checkpoint."""

    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (at byte offset {offset})")
        self.offset = offset


class CsvParseError(ValueError):
    """Malformed dataset CSV."""

    def __init__(self, message: str, line: int):
        super().__init__(f"line {line}: {message}")
        self.line = line


class MetricsSchemaError(ValueError):
    """A metrics file does not match the expected schema version or fields."""
