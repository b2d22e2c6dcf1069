"""Exception types shared across the package."""


class DimensionError(ValueError):
    """Operand shapes are incompatible (channel/extent mismatch)."""


class ParameterError(ValueError):
    """A numeric argument is out of its valid range."""


class ConfigError(ValueError):
    """A configuration object is internally inconsistent."""


class QueryError(ValueError):
    """A cost query is missing fields required by its op kind."""
