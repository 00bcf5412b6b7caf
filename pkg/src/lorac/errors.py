"""Exception types shared across the package."""


class ShapeError(ValueError):
    """Operands have incompatible or otherwise invalid dimensions."""


class ConfigError(ValueError):
    """A configuration value violates its contract."""


class DegenerateInputError(ValueError):
    """Numerically degenerate input, e.g. a row with (near-)zero norm."""


class NumericalError(ArithmeticError):
    """A numerical procedure failed (non-convergence, non-finite values)."""

    def __init__(self, message: str, residual: float | None = None):
        super().__init__(message)
        self.residual = residual


class TapeError(RuntimeError):
    """Misuse of a gradient tape (wrong tape, reuse after backward, ...)."""


class GenerationError(RuntimeError):
    """Synthetic data generation could not satisfy its constraints."""


class FormatError(ValueError):
    """A binary artifact (dataset or checkpoint file) is malformed."""
