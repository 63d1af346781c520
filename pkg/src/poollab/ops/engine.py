"""Operator registry plus the compute/filter/map entry points.

Built-in operators each produce exactly one statistic, written onto the
sample under the operator's declared statistic name. Statistic values are
pure functions of (text, params, assets), so computation may run with any
degree of parallelism; results are merged back in input order.
"""

from __future__ import annotations

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Mapping, Sequence

from ..core import DataPool, Dataset, KeepRange, ProvenanceStep, Sample
from ..errors import StatCollisionError, StatMissingError
from . import text_stats
from .assets import BigramLanguageModel, LexiconAsset

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class ParamField:
    type: type
    required: bool = False
    default: object = None
    minimum: float | None = None


@dataclass(frozen=True)
class OpDefinition:
    """A registered statistic-computing operator."""

    op_name: str
    statistic: str
    inputs: frozenset[str]
    param_schema: Mapping[str, ParamField] = field(default_factory=dict)
    build: Callable[[Mapping], Callable[[Sample], float]] | None = None


def _validate_params(definition: OpDefinition, params: Mapping) -> dict:
    schema = definition.param_schema
    resolved: dict = {}
    for name, value in params.items():
        if name not in schema:
            raise ValueError(f"op {definition.op_name!r}: unknown param {name!r}")
        fld = schema[name]
        if not isinstance(value, fld.type):
            raise ValueError(
                f"op {definition.op_name!r}: param {name!r} must be {fld.type.__name__}"
            )
        if fld.minimum is not None and value < fld.minimum:
            raise ValueError(f"op {definition.op_name!r}: param {name!r} must be >= {fld.minimum}")
        resolved[name] = value
    for name, fld in schema.items():
        if name in resolved:
            continue
        if fld.required:
            raise ValueError(f"op {definition.op_name!r}: missing required param {name!r}")
        if fld.default is not None:
            resolved[name] = fld.default
    return resolved


# ---------------------------------------------------------------------------
# built-in operators

OPS: dict[str, OpDefinition] = {}
# statistic name -> declared input fields, for stats produced outside the
# registry (external scorers); used by mappers to invalidate stale stats
EXTERNAL_STAT_INPUTS: dict[str, frozenset[str]] = {}

TOKENIZERS: dict[str, Callable[[str], list[str]]] = {
    "whitespace": text_stats.whitespace_tokens,
}


def register_op(definition: OpDefinition) -> OpDefinition:
    for existing in OPS.values():
        if existing.statistic == definition.statistic and existing.op_name != definition.op_name:
            raise StatCollisionError(
                f"statistic {definition.statistic!r} already owned by {existing.op_name!r}"
            )
    OPS[definition.op_name] = definition
    return definition


def register_tokenizer(name: str, fn: Callable[[str], list[str]]) -> None:
    TOKENIZERS[name] = fn


def _simple(op_name: str, fn: Callable[[str], float], inputs=("text",)) -> OpDefinition:
    return OpDefinition(
        op_name=op_name,
        statistic=op_name,
        inputs=frozenset(inputs),
        build=lambda params: (lambda sample: fn(sample.text)),
    )


def _count_op(op_name: str, key: str) -> OpDefinition:
    def build(params):
        tokenizer = TOKENIZERS[params.get("tokenizer", "whitespace")]
        return lambda sample: float(text_stats.text_counts(sample.text, tokenizer)[key])

    return OpDefinition(
        op_name=op_name,
        statistic=op_name,
        inputs=frozenset({"text"}),
        param_schema={"tokenizer": ParamField(str, default="whitespace")},
        build=build,
    )


def _ngram_op(op_name: str, fn: Callable[[str, int], float], default_n: int) -> OpDefinition:
    return OpDefinition(
        op_name=op_name,
        statistic=op_name,
        inputs=frozenset({"text"}),
        param_schema={"n": ParamField(int, default=default_n, minimum=1)},
        build=lambda params: (lambda sample: fn(sample.text, params["n"])),
    )


def _lexicon_op(op_name: str, fn) -> OpDefinition:
    def build(params):
        lexicon = LexiconAsset.load(params["lexicon"])
        return lambda sample: float(fn(sample.text, lexicon.terms))

    return OpDefinition(
        op_name=op_name,
        statistic=op_name,
        inputs=frozenset({"text"}),
        param_schema={"lexicon": ParamField(str, required=True)},
        build=build,
    )


def _perplexity_op() -> OpDefinition:
    def build(params):
        model = BigramLanguageModel.load(params["model"])
        return lambda sample: text_stats.perplexity(sample.text, model)

    return OpDefinition(
        op_name="perplexity",
        statistic="perplexity",
        inputs=frozenset({"text"}),
        param_schema={"model": ParamField(str, required=True)},
        build=build,
    )


for _definition in (
    _simple("alphanumeric_ratio", text_stats.alphanumeric_ratio),
    _simple("special_char_ratio", text_stats.special_char_ratio),
    _count_op("text_length", "text_length"),
    _count_op("word_number", "word_number"),
    _count_op("token_number", "token_number"),
    _ngram_op("char_repetition", text_stats.char_ngram_repetition, default_n=3),
    _ngram_op("word_repetition", text_stats.word_ngram_repetition, default_n=2),
    _lexicon_op("stopword_ratio", text_stats.lexicon_ratio),
    _lexicon_op("flagged_word_ratio", text_stats.lexicon_ratio),
    _lexicon_op("action_number", text_stats.lexicon_count),
    _perplexity_op(),
):
    register_op(_definition)


def statistic_for(op_name: str) -> str:
    """The statistic an op writes; unregistered names map to themselves
    (externally scored statistics use the statistic name as op name)."""
    definition = OPS.get(op_name)
    return definition.statistic if definition is not None else op_name


def stat_inputs(statistic: str) -> frozenset[str]:
    for definition in OPS.values():
        if definition.statistic == statistic:
            return definition.inputs
    # provenance unknown: assume it depends on everything
    return EXTERNAL_STAT_INPUTS.get(statistic, frozenset({"text", "media"}))


# ---------------------------------------------------------------------------
# stat specs and computation


@dataclass(frozen=True)
class StatSpec:
    """A resolved request to compute one statistic."""

    op_name: str
    statistic: str
    params: Mapping = field(default_factory=dict)

    def __post_init__(self):
        definition = OPS.get(self.op_name)
        if definition is None:
            raise ValueError(f"unknown op {self.op_name!r}")
        object.__setattr__(self, "params", _validate_params(definition, self.params))

    @classmethod
    def for_op(cls, op_name: str, **params) -> "StatSpec":
        definition = OPS.get(op_name)
        if definition is None:
            raise ValueError(f"unknown op {op_name!r}")
        return cls(op_name=op_name, statistic=definition.statistic, params=params)

    def to_dict(self) -> dict:
        return {"op_name": self.op_name, "statistic": self.statistic, "params": dict(self.params)}

    @classmethod
    def from_dict(cls, data: Mapping) -> "StatSpec":
        return cls(
            op_name=data["op_name"],
            statistic=data.get("statistic", statistic_for(data["op_name"])),
            params=data.get("params") or {},
        )


def _check_collisions(specs: Sequence[StatSpec]) -> None:
    # stat ownership is by naming convention (statistic = the op's declared
    # name), so a spec writing another op's statistic is a collision, as are
    # two specs claiming the same statistic; register_op keeps the registry
    # itself collision-free
    owner: dict[str, str] = {}
    for spec in specs:
        definition = OPS[spec.op_name]
        if spec.statistic != definition.statistic:
            raise StatCollisionError(
                f"spec for op {spec.op_name!r} names statistic {spec.statistic!r}, "
                f"but the op declares {definition.statistic!r}"
            )
        previous = owner.setdefault(spec.statistic, spec.op_name)
        if previous != spec.op_name:
            raise StatCollisionError(
                f"statistic {spec.statistic!r} requested by both {previous!r} and {spec.op_name!r}"
            )


def compute_stats(
    dataset: Dataset,
    specs: Sequence[StatSpec],
    max_workers: int | None = None,
) -> Dataset:
    """Attach one statistic per spec to every sample.

    Existing unrelated stats are preserved; re-running the same specs is
    idempotent. Assets are resolved before any work starts so a missing
    lexicon or model file fails fast.
    """
    if not specs:
        return dataset
    _check_collisions(specs)
    compute_fns = [(spec.statistic, OPS[spec.op_name].build(spec.params)) for spec in specs]

    def one(sample: Sample) -> Sample:
        return sample.with_stats({stat: fn(sample) for stat, fn in compute_fns})

    if max_workers is None or max_workers <= 1:
        return Dataset(one(sample) for sample in dataset)
    with ThreadPoolExecutor(max_workers=max_workers) as pool:
        return Dataset(pool.map(one, dataset.samples))


def apply_filter(
    dataset: Dataset,
    op_name: str,
    keep_range: KeepRange,
    params: Mapping | None = None,
    pool_id: str | None = None,
) -> DataPool:
    """Keep exactly the samples whose statistic falls inside the closed
    keep range, preserving dataset order."""
    statistic = statistic_for(op_name)
    missing = [s.id for s in dataset if statistic not in s.stats]
    if missing:
        preview = ", ".join(missing[:5])
        raise StatMissingError(
            f"{len(missing)} samples missing statistic {statistic!r} "
            f"(e.g. {preview}); run compute_stats first"
        )
    kept = tuple(s.id for s in dataset if keep_range.contains(s.stats[statistic]))
    return DataPool(
        pool_id=pool_id or op_name,
        sample_ids=kept,
        provenance=(ProvenanceStep(op_name=op_name, keep_range=keep_range, params=params or {}),),
        split_label="composed",
        declared_size=len(kept),
        pyramid_level=1,
    )


# ---------------------------------------------------------------------------
# mappers


@dataclass(frozen=True)
class MapperDefinition:
    name: str
    fn: Callable[[Sample, Mapping], Sample]
    mutates: frozenset[str]


MAPPERS: dict[str, MapperDefinition] = {}


def register_mapper(name: str, fn, mutates: Sequence[str]) -> None:
    MAPPERS[name] = MapperDefinition(name=name, fn=fn, mutates=frozenset(mutates))


register_mapper("identity", lambda sample, params: sample, mutates=())
register_mapper(
    "lowercase_text",
    lambda sample, params: sample.with_text(sample.text.lower()),
    mutates=("text",),
)


def apply_mapper(dataset: Dataset, mapper_name: str, params: Mapping | None = None) -> Dataset:
    """Transform every sample, clearing stats whose inputs were mutated."""
    definition = MAPPERS.get(mapper_name)
    if definition is None:
        raise ValueError(f"unknown mapper {mapper_name!r}; registered: {sorted(MAPPERS)}")
    params = params or {}

    def one(sample: Sample) -> Sample:
        mapped = definition.fn(sample, params)
        if not definition.mutates:
            return mapped
        stale = [
            stat for stat in mapped.stats if stat_inputs(stat) & definition.mutates
        ]
        return mapped.without_stats(stale)

    return Dataset(one(sample) for sample in dataset)
