"""Exception types raised across the package."""


class BrimaError(Exception):
    """Base class for all package errors."""


class ShapeError(BrimaError, ValueError):
    pass


class ContractError(BrimaError, RuntimeError):
    """A caller violated an operation's precondition."""


class NumericError(BrimaError, ArithmeticError):
    pass


class ConfigError(BrimaError, ValueError):
    pass


class ParseError(BrimaError, ValueError):
    def __init__(self, message, record_index=None):
        if record_index is not None:
            message = f"record {record_index}: {message}"
        super().__init__(message)
        self.record_index = record_index


class SchemaError(BrimaError, ValueError):
    pass


class BufferEmptyError(BrimaError, LookupError):
    """Retrieval was asked to search an empty memory buffer."""


class UndefinedMetricError(BrimaError, ValueError):
    """A correlation or normalised error is undefined for the given input."""
