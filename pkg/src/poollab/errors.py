"""Exception types shared across the package."""


class PoolLabError(Exception):
    """Base class for all package errors."""


class DatasetIOError(PoolLabError):
    """A dataset or asset file could not be read or parsed."""


class StatMissingError(PoolLabError):
    """A filter was applied to samples that do not carry the required statistic."""


class StatCollisionError(PoolLabError):
    """Two different operators would write the same statistic name."""


class ScorerProtocolError(PoolLabError):
    """An external scorer violated the id/score output contract."""


class TrainerError(PoolLabError):
    """An external trainer process failed or returned malformed metrics."""


class ConfigError(PoolLabError):
    """A workflow configuration failed to load or validate."""
