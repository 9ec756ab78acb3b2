"""Exception hierarchy shared by the simulator, trainer and backtester."""


class MarketLabError(Exception):
    """Base class for every error raised on purpose by this package."""


class ConfigurationError(MarketLabError, ValueError):
    """Invalid or inconsistent configuration (bad shapes, unstable kernels, ranges)."""

    def __init__(self, message: str, key_path: str | None = None):
        self.key_path = key_path
        super().__init__(f"{key_path}: {message}" if key_path else message)


class OutOfOrderEventError(MarketLabError, ValueError):
    """An event was injected at a time earlier than the process clock."""


class DegenerateSupportError(MarketLabError, ValueError):
    """A truncated jump distribution has an empty support."""


class ContractViolationError(MarketLabError, RuntimeError):
    """An internal pre-condition was broken (e.g. a limit order jumping over the spread)."""


class EpisodeFinishedError(MarketLabError, RuntimeError):
    """step() was called on an environment whose episode is already done."""


class CalibrationError(MarketLabError, ValueError):
    """Normalization statistics are degenerate or missing."""


class InsufficientDataError(MarketLabError, ValueError):
    """Too few samples to compute a statistic."""


class CheckpointFormatError(MarketLabError, ValueError):
    """A checkpoint file is truncated, has a bad magic string or an unknown version."""


class TrainingDivergedError(MarketLabError, RuntimeError):
    """A SAC loss became NaN or infinite."""
