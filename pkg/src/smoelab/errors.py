"""Exception types shared across the package."""


class DimensionError(ValueError):
    """Operand shapes are incompatible for the requested operation."""


class ContractError(ValueError):
    """A call violated an interface precondition."""


class DataError(RuntimeError):
    """A dataset is missing, malformed, or too small."""


class ConfigError(ValueError):
    """A configuration file or override is invalid."""
