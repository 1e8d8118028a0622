"""Exception hierarchy shared across the package."""


class DomainError(ValueError):
    """An argument is outside the mathematical domain of the operation."""


class DimensionError(DomainError):
    """Array shapes are incompatible for the requested operation."""


class BudgetError(DomainError):
    """A client resource budget (active experts or rank) is invalid."""


class NumericError(ArithmeticError):
    """A numerical procedure failed to converge or produced NaN/Inf."""


class ConfigError(ValueError):
    """An experiment config failed schema validation."""


class IntegrityError(RuntimeError):
    """A checkpoint file is corrupt, truncated, or has an unsupported version."""
