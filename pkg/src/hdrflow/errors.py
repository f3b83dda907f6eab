"""Exception hierarchy shared by every hdrflow module."""


class HdrFlowError(Exception):
    """Base class for all library errors."""


class ShapeError(HdrFlowError, ValueError):
    """Tensor dimensions are inconsistent with an operation's contract."""


class NumericFault(HdrFlowError, ArithmeticError):
    """An operation produced NaN or Inf from finite inputs."""

    def __init__(self, message, snapshot=None):
        super().__init__(message)
        self.snapshot = snapshot or {}


class GradientError(HdrFlowError, RuntimeError):
    """backward() was called on something that is not a scalar on the graph."""


class FormatError(HdrFlowError, ValueError):
    """A file on disk is malformed, truncated or of an unsupported kind."""


class ConfigError(HdrFlowError, ValueError):
    """Invalid parameter values (exposures, thresholds, schedules, ...)."""


class TrainingDiverged(HdrFlowError, RuntimeError):
    def __init__(self, message, curve=None):
        super().__init__(message)
        self.curve = list(curve or [])
