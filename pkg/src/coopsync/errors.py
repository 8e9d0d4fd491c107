"""Exception hierarchy for the synchronization library."""


class SyncError(Exception):
    """Base class for all library errors."""


class InvalidClock(SyncError, ValueError):
    pass


class InvalidTopology(SyncError, ValueError):
    pass


class TopologyGenerationFailed(SyncError):
    pass


class DegenerateLink(SyncError):
    """Link timestamps carry no skew information (rank-deficient A^T A)."""


class DegenerateMessage(SyncError):
    """A factor-to-variable message would require inverting a singular matrix."""


class SingularBelief(SyncError):
    """Belief precision is singular, so no mean (and no estimate) exists."""


class SingularPosterior(SyncError):
    """Global posterior precision could not be factorized."""


class SingularFisher(SyncError):
    """Fisher information is not positive definite."""


class InvalidSkew(SyncError, ValueError):
    """Estimated inverse skew is not positive."""


class NotConverged(SyncError):
    """Raised when an iterative solver hits its iteration budget.

    The partial result is available as ``result``.
    """

    def __init__(self, message, result=None):
        super().__init__(message)
        self.result = result


class ConfigError(SyncError, ValueError):
    pass
