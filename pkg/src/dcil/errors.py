"""Exception hierarchy shared across the package."""


class DcilError(Exception):
    """Base class for all package errors."""


class ConfigError(DcilError, ValueError):
    """Invalid configuration or inconsistent layer spec."""


class ShapeError(DcilError, ValueError):
    """Tensor dimensions do not conform."""


class ContractError(DcilError, RuntimeError):
    """An API call sequence was violated, e.g. backward without forward."""


class DataFormatError(DcilError, ValueError):
    """A dataset or checkpoint file is malformed."""


class NumericalError(DcilError, ArithmeticError):
    """A loss or gradient became non-finite."""
