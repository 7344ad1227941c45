"""Exception hierarchy.

Input problems (bad files, bad flags) and numerical problems (rank
deficiency, separation) are kept apart so the CLI can map them to
distinct exit codes.
"""


class SSOTRError(Exception):
    """Base class for all package errors."""


class DataError(SSOTRError, ValueError):
    """Malformed or inconsistent input data."""


class NumericalError(SSOTRError, ArithmeticError):
    """An estimator could not be computed from otherwise valid data."""


class RankDeficientError(NumericalError):
    pass


class SeparationError(NumericalError):
    pass


class EmptyArmError(NumericalError):
    pass
