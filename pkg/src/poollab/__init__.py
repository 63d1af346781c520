"""poollab: build controlled data pools, run cheap reference-model trials,
and turn the feedback into ranked, composable data recipes."""

from .core import (
    CostParams,
    DataPool,
    Dataset,
    HoeffdingParams,
    KeepRange,
    MetricVector,
    OperatorConfig,
    ProvenanceStep,
    Recipe,
    RunLedger,
    Sample,
    validate_dataset,
)
from .errors import (
    ConfigError,
    DatasetIOError,
    PoolLabError,
    ScorerProtocolError,
    StatCollisionError,
    StatMissingError,
    TrainerError,
)

__version__ = "0.1.0"
