"""Exception types shared across the package."""


class MatrrecError(Exception):
    """Base class for package errors."""


class ConfigError(MatrrecError, ValueError):
    """Invalid hyperparameters or flag combinations."""


class DimensionError(MatrrecError, ValueError):
    """Tensor extents are incompatible."""


class ContractError(MatrrecError, RuntimeError):
    """A precondition of an operation was violated."""


class FormatError(MatrrecError, ValueError):
    """Malformed input file or artifact."""

    def __init__(self, message: str, line: int | None = None):
        self.line = line
        super().__init__(f"line {line}: {message}" if line is not None else message)


class ArtifactMismatch(MatrrecError):
    """Two artifacts that should belong together carry different hashes."""


class TrainingDivergence(MatrrecError, FloatingPointError):
    """Loss became non-finite during training."""
