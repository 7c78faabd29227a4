"""Exception types raised across the package."""


class DomainError(ValueError):
    """An argument lies outside the mathematical domain of a function."""


class ConvergenceError(RuntimeError):
    """An iterative evaluation failed to reach its internal tolerance."""


class DimensionError(ValueError):
    """Inputs that must share a dimension do not."""


class ZeroVectorError(ValueError):
    """Normalization of a vector with zero norm."""


class ContractError(ValueError):
    """Arguments are individually valid but violate a cross-argument contract."""


class DivergenceError(RuntimeError):
    """Training produced a non-finite loss."""

    def __init__(self, message, step=None):
        super().__init__(message)
        self.step = step
