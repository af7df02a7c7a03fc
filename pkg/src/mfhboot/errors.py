"""Exception hierarchy shared across the package."""


class MFHError(Exception):
    """Base class for all package errors."""


class NumericalError(MFHError):
    """Failures of the numerical pipeline (CLI exit code 3)."""


class DataError(MFHError):
    """Problems with the input data or configuration (CLI exit code 2)."""


class NotPositiveDefinite(NumericalError):
    pass


class DegenerateVariance(NumericalError):
    """The fitted random-effects covariance sits on the singular boundary."""


class UfhZeroVariance(DegenerateVariance):
    """Univariate fit with zero random-effects variance; no interval exists."""


class TooManyFailures(NumericalError):
    pass


class InsufficientReplicates(NumericalError):
    pass


class BadDimension(DataError):
    pass


class InfeasiblePsi(DataError):
    pass


class RankDeficientDesign(DataError):
    pass


class BadVariance(DataError):
    pass


class ConfigError(DataError):
    pass


class ValidationFailure(DataError):
    pass


class ParseError(DataError):
    def __init__(self, message, line=None, column=None):
        where = []
        if line is not None:
            where.append(f"line {line}")
        if column is not None:
            where.append(f"column {column!r}")
        if where:
            message = f"{message} ({', '.join(where)})"
        super().__init__(message)
        self.line = line
        self.column = column


class DegenerateVarianceWarning(RuntimeWarning):
    pass


class BelowMinimumReplicates(UserWarning):
    pass
