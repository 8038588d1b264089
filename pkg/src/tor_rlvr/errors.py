"""Exception types shared across the engine."""


class TorError(Exception):
    pass


class ConfigurationError(TorError, ValueError):
    """Invalid configuration or incompatible shapes."""


class UsageError(TorError, ValueError):
    """A call violated a documented precondition."""


class NumericError(TorError, FloatingPointError):
    """A non-finite value appeared in a computation."""


class StalenessError(TorError):
    """Rollouts and parameters come from different policy versions."""


class DegenerateBatchError(TorError):
    """No usable rollout group survived filtering."""


class UndefinedCorrelationError(TorError, ValueError):
    """Rank correlation requested on a constant sequence."""


class CheckpointError(TorError):
    """Checkpoint file is malformed or incompatible."""
