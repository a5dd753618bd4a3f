"""Exception hierarchy shared by every module."""


class EianetError(Exception):
    """Base class for all errors raised by this package."""


class DimensionError(EianetError, ValueError):
    """Operand shapes are incompatible with the requested operation."""


class ContractError(EianetError, RuntimeError):
    """An operation was called in a state its contract forbids."""


class ConfigError(EianetError, ValueError):
    """A configuration value is invalid."""


class DataError(EianetError, ValueError):
    """Input data violates an operation's preconditions."""


class FormatError(EianetError, ValueError):
    """An on-disk artifact is malformed."""
