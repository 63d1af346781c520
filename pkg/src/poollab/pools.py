"""Pool construction: per-op bucket splits, the random control pool,
frozen-threshold recipe composition, the subset pyramid, exact dedup and
compute-scaling schedules.

All constructions are deterministic functions of (dataset, config, seed).
"""

from __future__ import annotations

import itertools
import logging
import random
import unicodedata
from dataclasses import dataclass
from typing import Mapping, Sequence

from .core import DataPool, Dataset, KeepRange, ProvenanceStep, Recipe
from .errors import StatMissingError
from .ops.engine import apply_filter, statistic_for

logger = logging.getLogger(__name__)

MAX_PYRAMID_OPS = 5


def split_labels(n_splits: int) -> list[str]:
    """Labels for an ordered bucket split; 3 gives the usual low/mid/high."""
    if n_splits == 2:
        return ["low", "high"]
    if n_splits == 3:
        return ["low", "mid", "high"]
    if 4 <= n_splits <= 5:
        return ["low"] + [f"mid_{i}" for i in range(1, n_splits - 1)] + ["high"]
    raise ValueError(f"n_splits must be between 2 and 5, got {n_splits}")


@dataclass(frozen=True)
class TertileBoundaries:
    """Frozen cut points of one op's bucket split.

    ``cuts`` holds the stat value at the top of each bucket except the
    last; for the default 3 buckets this is (q1, q2). Frozen once computed
    so recipe composition reuses exactly the probe-phase thresholds.
    """

    op_name: str
    cuts: tuple[float, ...]
    dataset_digest: str

    def __post_init__(self):
        if any(a > b for a, b in zip(self.cuts, self.cuts[1:])):
            raise ValueError(f"cuts must be non-decreasing, got {self.cuts}")

    def keep_range(self, label: str, labels: Sequence[str]) -> KeepRange:
        index = list(labels).index(label)
        lo = float("-inf") if index == 0 else self.cuts[index - 1]
        hi = float("inf") if index == len(labels) - 1 else self.cuts[index]
        return KeepRange(lo, hi)

    def to_dict(self) -> dict:
        return {
            "op_name": self.op_name,
            "cuts": list(self.cuts),
            "dataset_digest": self.dataset_digest,
        }

    @classmethod
    def from_dict(cls, data: Mapping) -> "TertileBoundaries":
        return cls(
            op_name=data["op_name"],
            cuts=tuple(data["cuts"]),
            dataset_digest=data["dataset_digest"],
        )


@dataclass(frozen=True)
class SplitResult:
    pools: Mapping[str, DataPool]  # label -> pool
    boundaries: TertileBoundaries
    warnings: tuple[str, ...] = ()


def partition_sizes(total: int, groups: int) -> list[int]:
    """Sizes as equal as possible, remainders assigned to lower groups first."""
    base, remainder = divmod(total, groups)
    return [base + (1 if i < remainder else 0) for i in range(groups)]


def _seeded_downsample(ids: Sequence[str], size: int, seed: int) -> tuple[str, ...]:
    if len(ids) <= size:
        return tuple(ids)
    rng = random.Random(seed)
    chosen = sorted(rng.sample(range(len(ids)), size))
    return tuple(ids[i] for i in chosen)


def split_tertiles(
    dataset: Dataset,
    op_name: str,
    target_pool_size: int,
    seed: int,
    n_splits: int = 3,
    params: Mapping | None = None,
) -> SplitResult:
    """Sort by (stat, id), cut into contiguous buckets, downsample each to
    the target size.

    Buckets smaller than the target are kept as "short pools" with their
    actual size recorded in a warning instead of failing the run.
    """
    if target_pool_size < 1:
        raise ValueError("target_pool_size must be >= 1")
    statistic = statistic_for(op_name)
    missing = [s.id for s in dataset if statistic not in s.stats]
    if missing:
        raise StatMissingError(
            f"{len(missing)} samples missing statistic {statistic!r} (e.g. {missing[0]!r})"
        )
    labels = split_labels(n_splits)
    ordered = sorted(dataset, key=lambda s: (s.stats[statistic], s.id))
    sizes = partition_sizes(len(ordered), n_splits)

    groups: list[list] = []
    cuts: list[float] = []
    start = 0
    for index, size in enumerate(sizes):
        group = ordered[start : start + size]
        start += size
        groups.append(group)
        if index < n_splits - 1:
            if group:
                cuts.append(group[-1].stats[statistic])
            else:
                # empty bucket: boundary collapses onto the previous cut
                cuts.append(cuts[-1] if cuts else float("-inf"))
    boundaries = TertileBoundaries(
        op_name=op_name, cuts=tuple(cuts), dataset_digest=dataset.digest()
    )

    pools: dict[str, DataPool] = {}
    warnings: list[str] = []
    for index, (label, group) in enumerate(zip(labels, groups)):
        ids = _seeded_downsample([s.id for s in group], target_pool_size, seed + index)
        if len(ids) < target_pool_size:
            warnings.append(
                f"short pool {op_name}/{label}: {len(ids)} of {target_pool_size} requested"
            )
        pools[label] = DataPool(
            pool_id=f"{op_name}.{label}",
            sample_ids=ids,
            provenance=(
                ProvenanceStep(
                    op_name=op_name,
                    keep_range=boundaries.keep_range(label, labels),
                    params=params or {},
                ),
            ),
            split_label=label,
            declared_size=target_pool_size,
        )
    for message in warnings:
        logger.warning(message)
    return SplitResult(pools=pools, boundaries=boundaries, warnings=tuple(warnings))


def sample_random_control(dataset: Dataset, size: int, seed: int) -> DataPool:
    """Uniform sample without replacement; the training baseline pool."""
    if size > len(dataset):
        raise ValueError(f"cannot sample {size} from dataset of {len(dataset)}")
    rng = random.Random(seed)
    ids = dataset.ids()
    chosen = rng.sample(ids, size)
    return DataPool(
        pool_id="random",
        sample_ids=tuple(chosen),
        provenance=(),
        split_label="random",
        declared_size=size,
    )


def compose_recipe(dataset: Dataset, recipe: Recipe, pool_id: str | None = None) -> DataPool:
    """Sequential filtering with the recipe's frozen keep ranges.

    The resulting sample set equals the intersection of the single-op keep
    sets; provenance lists the ops in application order.
    """
    for op in recipe.ops:
        if op.keep_range is None:
            raise ValueError(
                f"recipe op {op.op_name!r} has no frozen keep range; run the probe phase first"
            )
    current = dataset
    provenance: list[ProvenanceStep] = []
    for op in recipe.ops:
        pool = apply_filter(current, op.op_name, op.keep_range, params=op.params)
        provenance.append(pool.provenance[0])
        current = dataset.subset(pool.sample_ids)
    ids = tuple(s.id for s in current)
    return DataPool(
        pool_id=pool_id or "+".join(recipe.op_names),
        sample_ids=ids,
        provenance=tuple(provenance),
        split_label="composed",
        declared_size=len(ids),
        pyramid_level=len(provenance),
    )


@dataclass(frozen=True)
class PyramidSpec:
    """The 2^n - 1 pools over all non-empty subsets of the top ops."""

    top_ops: tuple[str, ...]
    pool_ids_by_level: Mapping[int, tuple[str, ...]]  # level -> pool ids
    sizes: Mapping[str, int]

    @property
    def pool_count(self) -> int:
        return sum(len(ids) for ids in self.pool_ids_by_level.values())

    def to_dict(self) -> dict:
        return {
            "top_ops": list(self.top_ops),
            "levels": {str(k): list(v) for k, v in self.pool_ids_by_level.items()},
            "sizes": dict(self.sizes),
        }


@dataclass(frozen=True)
class PyramidResult:
    spec: PyramidSpec
    pools: Mapping[str, DataPool]  # pool id -> pool

    def top_pool(self) -> DataPool:
        top_level = max(self.spec.pool_ids_by_level)
        (pool_id,) = self.spec.pool_ids_by_level[top_level]
        return self.pools[pool_id]

    def pools_by_level_desc(self) -> list[list[DataPool]]:
        ordered = []
        for level in sorted(self.spec.pool_ids_by_level, reverse=True):
            ordered.append(
                [self.pools[pid] for pid in self.spec.pool_ids_by_level[level]]
            )
        return ordered


def build_pyramid(
    dataset: Dataset,
    top_ops: Sequence,
    max_ops: int = MAX_PYRAMID_OPS,
) -> PyramidResult:
    """One pool per non-empty subset of the top ops; level = subset size.

    ``top_ops`` is an ordered sequence of OperatorConfig with frozen keep
    ranges, strongest-ranked first. Sizes are non-increasing along every
    superset chain because composition intersects keep sets.
    """
    n = len(top_ops)
    if n < 1:
        raise ValueError("pyramid needs at least one op")
    if n > max_ops:
        raise ValueError(f"{n} ops would create {2 ** n - 1} pools; cap is {max_ops} ops")
    for op in top_ops:
        if op.keep_range is None:
            raise ValueError(f"op {op.op_name!r} has no frozen keep range")

    pools: dict[str, DataPool] = {}
    levels: dict[int, list[str]] = {}
    sizes: dict[str, int] = {}
    for level in range(1, n + 1):
        for subset in itertools.combinations(range(n), level):
            ops = tuple(top_ops[i] for i in subset)
            recipe = Recipe(ops=ops, origin_strategy="manual")
            pool = compose_recipe(dataset, recipe)
            pools[pool.pool_id] = pool
            levels.setdefault(level, []).append(pool.pool_id)
            sizes[pool.pool_id] = pool.size
    spec = PyramidSpec(
        top_ops=tuple(op.op_name for op in top_ops),
        pool_ids_by_level={k: tuple(v) for k, v in levels.items()},
        sizes=sizes,
    )
    return PyramidResult(spec=spec, pools=pools)


def _dedup_key(sample) -> tuple:
    text = unicodedata.normalize("NFC", sample.text)
    media = tuple(sorted((sample.media or {}).values()))
    return (text, media)


def dedup_exact(pools: Sequence[DataPool], dataset: Dataset, pool_id: str = "dedup_merged") -> DataPool:
    """Concatenate pools (highest pyramid level first) and drop repeats.

    The dedup key is NFC-normalized text plus the sorted media paths; the
    first occurrence wins. Recorded as a one-step pool whose single
    provenance entry names the dedup operation.
    """
    seen: set[tuple] = set()
    kept: list[str] = []
    for pool in pools:
        for sid in pool.sample_ids:
            key = _dedup_key(dataset.by_id(sid))
            if key in seen:
                continue
            seen.add(key)
            kept.append(sid)
    return DataPool(
        pool_id=pool_id,
        sample_ids=tuple(kept),
        provenance=(
            ProvenanceStep(op_name="exact_dedup", keep_range=KeepRange.unbounded()),
        ),
        split_label="composed",
        declared_size=len(kept),
        pyramid_level=1,
    )


@dataclass(frozen=True)
class ScheduleEntry:
    pool_id: str
    pass_index: int
    take: int  # samples this entry contributes

    def to_dict(self) -> dict:
        return {"pool_id": self.pool_id, "pass": self.pass_index, "take": self.take}


@dataclass(frozen=True)
class ComputeSchedule:
    """How trained-sample volume is scaled to k x |top pool|."""

    mode: str  # repetitive | non-repetitive
    expansion_rate: int
    stream: tuple[ScheduleEntry, ...]
    total_samples: int
    seed: int
    warnings: tuple[str, ...] = ()

    def __post_init__(self):
        if self.mode not in ("repetitive", "non-repetitive"):
            raise ValueError(f"unknown schedule mode {self.mode!r}")

    def to_dict(self) -> dict:
        return {
            "mode": self.mode,
            "k": self.expansion_rate,
            "stream": [entry.to_dict() for entry in self.stream],
            "total": self.total_samples,
            "seed": self.seed,
            "warnings": list(self.warnings),
        }

    @classmethod
    def from_dict(cls, data: Mapping) -> "ComputeSchedule":
        return cls(
            mode=data["mode"],
            expansion_rate=int(data["k"]),
            stream=tuple(
                ScheduleEntry(
                    pool_id=entry["pool_id"],
                    pass_index=int(entry["pass"]),
                    take=int(entry["take"]),
                )
                for entry in data["stream"]
            ),
            total_samples=int(data["total"]),
            seed=int(data.get("seed", 0)),
            warnings=tuple(data.get("warnings") or ()),
        )


def schedule_compute(
    pyramid: PyramidResult,
    expansion_rate: int,
    mode: str,
    seed: int,
) -> ComputeSchedule:
    """Plan the training stream for one compute scale.

    Repetitive mode makes ``k`` seeded-shuffled passes over the top pool.
    Non-repetitive mode descends the pyramid, dedup-merging level by level
    until the sample count matches the repetitive total, truncating with a
    recorded warning when not enough distinct data exists.
    """
    if expansion_rate < 1:
        raise ValueError("expansion rate k must be >= 1")
    top = pyramid.top_pool()
    if top.size == 0:
        raise ValueError("top pool is empty; nothing to schedule")
    target = expansion_rate * top.size

    if mode == "repetitive":
        stream = tuple(
            ScheduleEntry(pool_id=top.pool_id, pass_index=i, take=top.size)
            for i in range(expansion_rate)
        )
        return ComputeSchedule(
            mode=mode,
            expansion_rate=expansion_rate,
            stream=stream,
            total_samples=target,
            seed=seed,
        )

    if mode != "non-repetitive":
        raise ValueError(f"unknown schedule mode {mode!r}")
    stream: list[ScheduleEntry] = []
    seen_ids: set[str] = set()
    total = 0
    warnings: list[str] = []
    for level_pools in pyramid.pools_by_level_desc():
        for pool in sorted(level_pools, key=lambda p: p.pool_id):
            fresh = [sid for sid in pool.sample_ids if sid not in seen_ids]
            if not fresh:
                continue
            take = min(len(fresh), target - total)
            seen_ids.update(fresh[:take])
            stream.append(ScheduleEntry(pool_id=pool.pool_id, pass_index=0, take=take))
            total += take
            if total >= target:
                break
        if total >= target:
            break
    if total < target:
        warnings.append(
            f"non-repetitive schedule truncated: {total} distinct samples available, "
            f"target was {target}"
        )
        logger.warning(warnings[-1])
    return ComputeSchedule(
        mode=mode,
        expansion_rate=expansion_rate,
        stream=tuple(stream),
        total_samples=total,
        seed=seed,
        warnings=tuple(warnings),
    )


def materialize_schedule(
    schedule: ComputeSchedule, pools: Mapping[str, DataPool]
) -> list[str]:
    """Expand a schedule into the ordered training stream of sample ids."""
    ordered: list[str] = []
    seen: set[str] = set()
    for entry in schedule.stream:
        pool = pools[entry.pool_id]
        if schedule.mode == "repetitive":
            ids = list(pool.sample_ids)
            random.Random(schedule.seed * 1_000_003 + entry.pass_index).shuffle(ids)
            ordered.extend(ids)
        else:
            fresh = [sid for sid in pool.sample_ids if sid not in seen]
            take = fresh[: entry.take]
            seen.update(take)
            ordered.extend(take)
    return ordered
