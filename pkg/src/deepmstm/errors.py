"""Exception hierarchy shared by every module."""


class DeepMstmError(Exception):
    """Base class for all package errors."""


class DimensionError(DeepMstmError, ValueError):
    """Array shapes do not conform."""


class ContractError(DeepMstmError, ValueError):
    """A precondition on the arguments was violated."""


class RangeError(DeepMstmError, ValueError):
    """Requested range lacks enough history or lies outside the data."""


class DataError(DeepMstmError):
    """Input data is malformed."""


class ParseError(DataError):
    def __init__(self, path, row, column, value):
        self.path, self.row, self.column, self.value = path, row, column, value
        super().__init__(f"{path}: row {row}, column {column!r}: cannot parse {value!r}")


class DateGapError(DataError):
    def __init__(self, path, missing):
        self.path, self.missing = path, missing
        super().__init__(f"{path}: missing date {missing.isoformat()}")


class DuplicateDateError(DataError):
    def __init__(self, path, date):
        self.path, self.date = path, date
        super().__init__(f"{path}: duplicate date {date.isoformat()}")


class InsufficientDataError(DataError, RangeError):
    """Fewer observations than the lag window needs."""


class ConstantSeriesError(DataError):
    """A series has zero standard deviation and cannot be normalized."""


class UndefinedMetricError(DeepMstmError, ValueError):
    """Metric is undefined for the given inputs (e.g. zero mean)."""


class NumericalError(DeepMstmError, ArithmeticError):
    """Non-finite values appeared during training."""


class IncompatibleParamsError(DeepMstmError):
    """Parameter file does not match the configured model."""


class ConfigError(DeepMstmError):
    """Run configuration is invalid."""
