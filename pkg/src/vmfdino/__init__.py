"""von Mises-Fisher mixture view of DINO-style self-distillation heads."""

__version__ = "0.1.0"

from vmfdino.errors import (  # noqa: E402
    ContractError,
    ConvergenceError,
    DimensionError,
    DivergenceError,
    DomainError,
    ZeroVectorError,
)
