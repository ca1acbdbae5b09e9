"""Exception hierarchy shared across the toolkit."""


class RMProbeError(Exception):
    """Base class for every error raised by rmprobe."""


class ShapeError(RMProbeError, ValueError):
    pass


class UnboundVariableError(RMProbeError, LookupError):
    pass


class NumericError(RMProbeError, ArithmeticError):
    """Non-finite values or an undefined numeric operation."""


class DegenerateError(NumericError):
    """Input has no usable terms for the requested statistic."""


class FormatError(RMProbeError, ValueError):
    """Malformed or truncated file."""


class ConfigError(RMProbeError, ValueError):
    pass
