"""Exception hierarchy shared by the retrieval engine and the harness."""


class ReplaySelError(Exception):
    """Base class for all errors raised by this package."""


class ConfigError(ReplaySelError, ValueError):
    """Invalid configuration value or unknown configuration key."""


class DataFormatError(ReplaySelError, ValueError):
    """Malformed interchange file or inconsistent input data."""


class ZeroNormError(ReplaySelError, ValueError):
    pass


class DegeneratePrototypeError(ReplaySelError, ValueError):
    """A class prototype averaged to the zero vector."""


class UnknownClassError(ReplaySelError, KeyError):
    pass


class EmptyBufferError(ReplaySelError, ValueError):
    """No candidate survived buffer selection."""


class ProbabilityOverflowError(ReplaySelError, ArithmeticError):
    pass


class DegenerateVarianceError(ReplaySelError, ValueError):
    pass


class ExhaustionError(ReplaySelError):
    """Not enough eligible samples to satisfy a retrieval request."""


class InsufficientSupportError(ExhaustionError):
    """A weighted draw asked for more indices than carry probability mass."""


class ExhaustedClassError(ExhaustionError):
    pass
