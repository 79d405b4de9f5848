"""Exception types raised by the library."""


class RVRSError(Exception):
    """Base class for all library errors."""


class DimensionError(RVRSError, ValueError):
    """Latent vector has the wrong dimension for the target or proposal."""


class ShapeError(RVRSError, ValueError):
    """Parameter and gradient shapes disagree."""


class NoThetaError(RVRSError):
    """A model-parameter gradient was requested from a target without parameters."""


class DataIndexError(RVRSError, IndexError):
    """Datapoint index out of range."""


class InconsistentPathError(RVRSError, ValueError):
    """A latent sample does not match the reparameterization of its noise draw."""


class BudgetExhaustedError(RVRSError, RuntimeError):
    """The rejection sampler exceeded its proposal budget.

    Usually means the threshold ``T`` is far too low for the current proposal.
    """

    def __init__(self, message, proposals_drawn=None, accepted=None):
        super().__init__(message)
        self.proposals_drawn = proposals_drawn
        self.accepted = accepted


class BatchTooSmallError(RVRSError, ValueError):
    """A covariance-style estimator needs at least two samples per batch."""


class EmptyMaskError(RVRSError, ValueError):
    """Every datapoint in a mini-batch was masked out."""


class DivergedError(RVRSError, FloatingPointError):
    """Optimization produced non-finite values.

    ``last_good`` holds whatever state was valid before the failure.
    """

    def __init__(self, message, last_good=None):
        super().__init__(message)
        self.last_good = last_good


class DivergentXiError(RVRSError, ValueError):
    """The tail moment xi is not finite: the proposal is lighter-tailed than the posterior."""


class ConfigError(RVRSError, ValueError):
    """Invalid experiment configuration."""


class DataFormatError(RVRSError, ValueError):
    """Malformed dataset file."""
