"""Exception types raised across the package."""


class CactError(Exception):
    """Base class for all package errors."""


class ContractError(CactError, ValueError):
    """A precondition of an operation was violated."""


class DimensionError(ContractError):
    """Tensor shapes are incompatible for the requested operation."""


class DegenerateBatchError(ContractError):
    """Batch statistics cannot be computed from a single element per channel."""


class ConfigurationError(CactError, ValueError):
    """A model or run configuration is inconsistent; ``key`` names the offending field if known."""

    def __init__(self, message: str, key: str | None = None):
        self.key = key
        super().__init__(message)


class StratificationError(CactError, ValueError):
    """A class is missing from a split or fold."""


class GenerationError(CactError, RuntimeError):
    """A synthetic dataset spec failed a generation-time check."""


class DatasetValidationError(CactError, ValueError):
    """Dataset on disk failed validation; ``issues`` lists every problem found."""

    def __init__(self, issues):
        self.issues = list(issues)
        super().__init__("; ".join(self.issues))


class NonFiniteGradientError(CactError, FloatingPointError):
    """An optimizer step saw a NaN or infinite gradient."""
