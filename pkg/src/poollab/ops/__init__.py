from . import text_stats
from .assets import BigramLanguageModel, LexiconAsset
from .engine import (
    OPS,
    StatSpec,
    apply_filter,
    apply_mapper,
    compute_stats,
    register_mapper,
    register_op,
    register_tokenizer,
    statistic_for,
)
from .scorer import external_score, score_dataset

__all__ = [
    "BigramLanguageModel",
    "LexiconAsset",
    "OPS",
    "StatSpec",
    "apply_filter",
    "apply_mapper",
    "compute_stats",
    "external_score",
    "register_mapper",
    "register_op",
    "register_tokenizer",
    "score_dataset",
    "statistic_for",
    "text_stats",
]
