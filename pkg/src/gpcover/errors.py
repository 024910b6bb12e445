"""Exception types shared across the package."""


class GpCoverError(Exception):
    """Base class for all errors raised by gpcover."""


class EmptyDiscretization(GpCoverError):
    pass


class NoFeasiblePath(GpCoverError):
    pass


class InvalidEnvironment(GpCoverError):
    pass


class FactorizationFailure(GpCoverError):
    pass


class InsufficientData(GpCoverError):
    pass


class FitDiverged(GpCoverError):
    pass


class InvalidTarget(GpCoverError):
    pass


class DigestMismatch(GpCoverError):
    pass
