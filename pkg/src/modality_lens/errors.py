"""Exception types shared across the package.

The CLI maps these onto exit codes: config/data/parse problems exit 2,
numeric failures exit 3.
"""


class LensError(Exception):
    """Base class for all errors raised by this package."""


class ContractError(LensError, ValueError):
    """A documented precondition of an operation was violated."""


class DimensionError(ContractError):
    """Tensor shapes are incompatible for the requested operation."""


class NumericError(LensError, ArithmeticError):
    """A non-finite value or a degenerate quantity (e.g. a zero norm) appeared."""


class ConfigError(LensError, ValueError):
    pass


class DataError(LensError, ValueError):
    pass


class ParseError(DataError):
    """A file could not be parsed; the message names the line or byte offset."""


class EmptyInputError(ParseError):
    pass
