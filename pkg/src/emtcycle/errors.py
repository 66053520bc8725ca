"""Exception hierarchy shared by all emtcycle modules."""


class EmtError(Exception):
    """Base class for all library errors."""


class DataError(EmtError):
    """Bad or insufficient input data."""


class InvalidBoundsError(DataError):
    pass


class InsufficientDataError(DataError):
    pass


class InvalidSpecError(DataError):
    pass


class OutOfVolumeError(DataError):
    pass


class UnreachableTargetError(DataError):
    pass


class ShapeError(DataError):
    pass


class NumericError(EmtError):
    """Non-finite values met during optimisation."""


class SingularFitError(NumericError):
    pass
