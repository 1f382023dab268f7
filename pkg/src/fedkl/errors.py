"""Exception types raised across the package."""


class FedKLError(Exception):
    """Base class for every error raised by fedkl."""


class ShapeError(FedKLError, ValueError):
    pass


class NonFiniteError(FedKLError, ArithmeticError):
    pass


class KeyRequiredError(FedKLError, ValueError):
    pass


class AmbiguousLabelError(FedKLError, ValueError):
    """The output-bias gradient does not single out one class."""


class NoActiveRowError(FedKLError, ValueError):
    """Every row of the target layer's bias gradient is (numerically) zero."""


class FormatError(FedKLError, ValueError):
    """A file on disk does not match the expected binary layout."""


class ConfigError(FedKLError, ValueError):
    pass
