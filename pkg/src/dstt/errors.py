"""Exception hierarchy shared by every stage of the forecasting pipeline."""


class DsttError(Exception):
    """Base class for all package errors."""


class DimensionError(DsttError, ValueError):
    pass


class NumericDomainError(DsttError, ArithmeticError):
    pass


class ContractError(DsttError, ValueError):
    """A documented precondition of an operation was violated."""


class EmptySequenceError(ContractError):
    pass


class TrainingDivergenceError(DsttError, RuntimeError):
    def __init__(self, message, *, param_id=None, last_good_epoch=None):
        super().__init__(message)
        self.param_id = param_id
        self.last_good_epoch = last_good_epoch


class ConfigError(DsttError, ValueError):
    def __init__(self, message, *, field=None):
        super().__init__(message)
        self.field = field


class DataError(DsttError, ValueError):
    pass


class ParseError(DataError):
    def __init__(self, message, *, line=None):
        super().__init__(message if line is None else f"line {line}: {message}")
        self.line = line


class OrderingError(DataError):
    pass


class HorizonRangeError(DataError):
    pass


class DegenerateFeatureError(DataError):
    pass


class SplitError(DataError):
    pass


class FoldError(DataError):
    pass


class FetchError(DsttError, RuntimeError):
    pass


class CacheInvalidError(FetchError):
    pass


class AleatoricUnavailableError(ContractError):
    pass


class UndefinedMetricError(ContractError):
    pass
