"""Exception types shared across msglab."""


class MsgLabError(Exception):
    """Base class for all msglab errors."""


class DimensionMismatch(MsgLabError, ValueError):
    pass


class EmptyDataset(MsgLabError):
    """Raised when dataset generation retains no transitions."""


class SingularGram(MsgLabError):
    """The regularized Gram matrix is numerically singular."""


class NoConvergence(MsgLabError):
    pass


class DivergentHorizon(MsgLabError):
    """gamma * ||C|| >= 1, so dynamic programming may diverge."""


class Diverged(MsgLabError):
    """A training loss became non-finite."""


class EmptyRegion(MsgLabError):
    pass


class ConfigError(MsgLabError):
    """Invalid experiment configuration; the message names the offending field."""
