"""Exception types shared across the package."""


class StyleVarError(Exception):
    pass


class DimensionError(StyleVarError, ValueError):
    """Operand shapes do not conform to an op's shape rule."""


class NumericDomainError(StyleVarError, ArithmeticError):
    """A value left the numeric domain of an operation (log of <= 0, NaN, overflow)."""


class ContractError(StyleVarError, RuntimeError):
    """A call violated an API precondition (e.g. backward on a non-scalar)."""


class ValidationError(StyleVarError, ValueError):
    """Input data failed validation."""


class ConfigError(StyleVarError, ValueError):
    """Run configuration is invalid. ``key`` names the offending entry."""

    def __init__(self, message, key=None):
        super().__init__(message)
        self.key = key
