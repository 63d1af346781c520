"""Feedback analysis: rankings, correlations, clustering, diversity and
recipe candidates derived from trial metrics."""

from __future__ import annotations

import itertools
import math
from collections import Counter
from dataclasses import dataclass, field
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np

from .core import KeepRange, MetricVector, OperatorConfig, Recipe

SPLIT_ORDER = ("low", "mid", "high")


@dataclass(frozen=True)
class TrialResult:
    pool_id: str
    metrics: MetricVector
    baseline: bool = False
    op_name: str | None = None
    split_label: str | None = None


def relative_improvement(
    scores: MetricVector,
    baseline: MetricVector,
    normalizer: Callable[[str, float], float] | None = None,
) -> float:
    """Percent change of the metric average over the baseline average.

    Computed as 100 * sum(s_i - s'_i) / sum(s'_i), which equals the change
    of plain averages. ``normalizer`` optionally rescales each metric
    (applied to both sides) for callers that want per-metric normalization;
    the default is the raw formula.
    """
    if set(scores.metrics) != set(baseline.metrics):
        raise ValueError(
            f"metric sets differ: {sorted(scores.metrics)} vs {sorted(baseline.metrics)}"
        )

    def value(name: str, raw: float) -> float:
        return raw if normalizer is None else normalizer(name, raw)

    baseline_sum = sum(value(name, v) for name, v in baseline.metrics.items())
    if baseline_sum == 0:
        raise ValueError("baseline metric sum is zero; relative change undefined")
    delta = sum(
        value(name, scores.metrics[name]) - value(name, baseline.metrics[name])
        for name in baseline.metrics
    )
    return 100.0 * delta / baseline_sum


@dataclass(frozen=True)
class OpRankRow:
    """Per-split relative changes for one op, plus the winning split."""

    op_name: str
    low: float
    mid: float
    high: float
    best_split: str = field(init=False)
    best_value: float = field(init=False)

    def __post_init__(self):
        by_split = {"low": self.low, "mid": self.mid, "high": self.high}
        # max() keeps the first maximal split, so ties go to the lower one
        best = max(SPLIT_ORDER, key=lambda s: by_split[s])
        object.__setattr__(self, "best_split", best)
        object.__setattr__(self, "best_value", by_split[best])

    def to_dict(self) -> dict:
        return {
            "op_name": self.op_name,
            "low": self.low,
            "mid": self.mid,
            "high": self.high,
            "best_split": self.best_split,
            "best_value": self.best_value,
        }


def rank_ops(rows: Iterable[OpRankRow]) -> list[OpRankRow]:
    """Order descending by best value; ties broken by op name."""
    rows = list(rows)
    if not rows:
        raise ValueError("ranking needs at least one row")
    return sorted(rows, key=lambda r: (-r.best_value, r.op_name))


def rank_from_trials(trials: Sequence[TrialResult]) -> list[OpRankRow]:
    """Build ranking rows from per-pool trials against the baseline trial."""
    baselines = [t for t in trials if t.baseline]
    if len(baselines) != 1:
        raise ValueError(f"expected exactly one baseline trial, found {len(baselines)}")
    baseline = baselines[0]
    by_op: dict[str, dict[str, float]] = {}
    for trial in trials:
        if trial.baseline:
            continue
        if trial.op_name is None or trial.split_label is None:
            raise ValueError(f"trial {trial.pool_id!r} lacks op/split labels")
        change = relative_improvement(trial.metrics, baseline.metrics)
        by_op.setdefault(trial.op_name, {})[trial.split_label] = change
    rows = []
    for op_name, changes in by_op.items():
        missing = [s for s in SPLIT_ORDER if s not in changes]
        if missing:
            raise ValueError(f"op {op_name!r} missing splits: {missing}")
        rows.append(OpRankRow(op_name=op_name, **changes))
    return rank_ops(rows)


@dataclass(frozen=True)
class CorrelationMatrix:
    labels: tuple[str, ...]
    values: tuple[tuple[float, ...], ...]
    degenerate: tuple[str, ...] = ()  # constant series, correlation pinned to 0

    def __post_init__(self):
        n = len(self.labels)
        if len(self.values) != n or any(len(row) != n for row in self.values):
            raise ValueError("matrix shape does not match labels")
        for i in range(n):
            if self.values[i][i] != 1.0:
                raise ValueError("diagonal must be exactly 1")
            for j in range(n):
                v = self.values[i][j]
                if not math.isfinite(v) or abs(v) > 1 + 1e-12:
                    raise ValueError(f"entry ({i},{j}) out of [-1,1]: {v}")
                if self.values[i][j] != self.values[j][i]:
                    raise ValueError("matrix must be symmetric")

    def entry(self, a: str, b: str) -> float:
        i, j = self.labels.index(a), self.labels.index(b)
        return self.values[i][j]

    def distance_matrix(self) -> np.ndarray:
        """1 - r distance used for clustering op statistics."""
        return 1.0 - np.asarray(self.values)


def pearson(x: Sequence[float], y: Sequence[float]) -> float:
    """Plain Pearson r; 0.0 for constant input (flagged by the caller)."""
    xa = np.asarray(x, dtype=float)
    ya = np.asarray(y, dtype=float)
    if xa.shape != ya.shape:
        raise ValueError("series lengths differ")
    dx = xa - xa.mean()
    dy = ya - ya.mean()
    denom = math.sqrt(float(dx @ dx) * float(dy @ dy))
    if denom == 0:
        return 0.0
    return float(np.clip((dx @ dy) / denom, -1.0, 1.0))


def pearson_matrix(vectors: Mapping[str, Sequence[float]]) -> CorrelationMatrix:
    """Pairwise Pearson coefficients over equal-length series.

    Constant series are mathematically undefined; their off-diagonal
    entries are set to 0 and the label recorded in ``degenerate`` so the
    pipeline keeps going on degenerate stats.
    """
    labels = tuple(vectors.keys())
    series = [np.asarray(vectors[label], dtype=float) for label in labels]
    lengths = {len(s) for s in series}
    if len(lengths) > 1:
        raise ValueError(f"series lengths differ: {sorted(lengths)}")
    n_obs = lengths.pop() if lengths else 0
    if n_obs < 2:
        raise ValueError("need at least 2 observations per series")
    degenerate = tuple(
        label for label, s in zip(labels, series) if float(np.ptp(s)) == 0.0
    )
    n = len(labels)
    values = [[0.0] * n for _ in range(n)]
    for i in range(n):
        values[i][i] = 1.0
        for j in range(i + 1, n):
            if labels[i] in degenerate or labels[j] in degenerate:
                r = 0.0
            else:
                r = pearson(series[i], series[j])
            values[i][j] = values[j][i] = r
    return CorrelationMatrix(
        labels=labels,
        values=tuple(tuple(row) for row in values),
        degenerate=degenerate,
    )


# ---------------------------------------------------------------------------
# hierarchical clustering (Ward linkage)


@dataclass(frozen=True)
class Merge:
    members_a: tuple[int, ...]
    members_b: tuple[int, ...]
    height: float


@dataclass(frozen=True)
class ClusterAssignment:
    k: int
    labels: tuple[int, ...]
    merges: tuple[Merge, ...]

    def clusters(self) -> list[tuple[int, ...]]:
        groups: dict[int, list[int]] = {}
        for item, label in enumerate(self.labels):
            groups.setdefault(label, []).append(item)
        return [tuple(groups[label]) for label in sorted(groups)]


def _initial_distances(data, from_correlation: bool) -> np.ndarray:
    if from_correlation:
        dist = np.asarray(data.distance_matrix() if isinstance(data, CorrelationMatrix) else data, dtype=float)
        if dist.ndim != 2 or dist.shape[0] != dist.shape[1]:
            raise ValueError("correlation input must be square")
        return dist
    rows = np.asarray(data, dtype=float)
    if rows.ndim == 1:
        rows = rows[:, None]
    diff = rows[:, None, :] - rows[None, :, :]
    return np.sqrt((diff**2).sum(axis=2))


def ward_cluster(data, k: int, from_correlation: bool | None = None) -> ClusterAssignment:
    """Agglomerative Ward-linkage clustering cut at k clusters.

    ``data`` is either feature rows (Euclidean start distances) or a
    CorrelationMatrix / square matrix (1 - r start distances). Merge
    candidates tie-break on the smallest pair of item indices, so the
    result is fully deterministic. Heights follow the Lance-Williams
    update and are non-decreasing.
    """
    if from_correlation is None:
        from_correlation = isinstance(data, CorrelationMatrix)
    dist = _initial_distances(data, from_correlation)
    n = dist.shape[0]
    if not 1 <= k <= n:
        raise ValueError(f"k must be in [1, {n}], got {k}")

    sq = dist.astype(float) ** 2
    clusters: dict[int, tuple[int, ...]] = {i: (i,) for i in range(n)}
    sizes: dict[int, int] = {i: 1 for i in range(n)}
    merges: list[Merge] = []
    active = set(range(n))
    next_id = n
    index_of: dict[int, int] = {i: i for i in range(n)}  # cluster id -> matrix row
    big = np.zeros((2 * n, 2 * n))
    big[:n, :n] = sq

    while len(active) > k:
        best_key = None
        best_pair = None
        for a in active:
            for b in active:
                if a >= b:
                    continue
                d2 = float(big[index_of[a], index_of[b]])
                min_a, min_b = min(clusters[a]), min(clusters[b])
                key = (d2, min(min_a, min_b), max(min_a, min_b))
                if best_key is None or key < best_key:
                    best_key, best_pair = key, (a, b)
        assert best_pair is not None
        a, b = best_pair
        d2 = best_key[0]
        na, nb = sizes[a], sizes[b]
        merged = tuple(sorted(clusters[a] + clusters[b]))
        merges.append(
            Merge(members_a=clusters[a], members_b=clusters[b], height=math.sqrt(max(d2, 0.0)))
        )
        new_id = next_id
        next_id += 1
        row = index_of[a]  # reuse a's slot for the merged cluster
        for c in active:
            if c in (a, b):
                continue
            nc = sizes[c]
            d_ac = big[index_of[a], index_of[c]]
            d_bc = big[index_of[b], index_of[c]]
            updated = ((na + nc) * d_ac + (nb + nc) * d_bc - nc * d2) / (na + nb + nc)
            big[row, index_of[c]] = big[index_of[c], row] = updated
        active.discard(a)
        active.discard(b)
        active.add(new_id)
        clusters[new_id] = merged
        sizes[new_id] = na + nb
        index_of[new_id] = row

    final = sorted((clusters[c] for c in active), key=lambda members: members[0])
    labels = [0] * n
    for label, members in enumerate(final):
        for item in members:
            labels[item] = label
    return ClusterAssignment(k=k, labels=tuple(labels), merges=tuple(merges))


# ---------------------------------------------------------------------------
# diversity


def word_entropy(texts: Iterable[str]) -> float:
    """Entropy (nats) of the empirical token distribution.

    Tokens are whitespace-split and lowercased. Zero tokens overall is an
    error; entropy is undefined without a distribution.
    """
    counts = Counter()
    for text in texts:
        counts.update(tok.lower() for tok in text.split())
    total = sum(counts.values())
    if total == 0:
        raise ValueError("no tokens; entropy undefined")
    entropy = 0.0
    for count in counts.values():
        p = count / total
        entropy -= p * math.log(p)
    return entropy


def diversity_report(texts: Iterable[str], top_n: int = 50) -> dict:
    """Entropy plus the top token frequencies, ready for JSON emission.

    Token frequencies are included so word-frequency visualizations can be
    rendered outside this package.
    """
    counts = Counter()
    for text in texts:
        counts.update(tok.lower() for tok in text.split())
    total = sum(counts.values())
    if total == 0:
        raise ValueError("no tokens; diversity report undefined")
    entropy = 0.0
    for count in counts.values():
        p = count / total
        entropy -= p * math.log(p)
    top = sorted(counts.items(), key=lambda kv: (-kv[1], kv[0]))[:top_n]
    return {
        "token_count": total,
        "distinct_tokens": len(counts),
        "entropy_nats": entropy,
        "top_tokens": [{"token": tok, "count": cnt} for tok, cnt in top],
    }


# ---------------------------------------------------------------------------
# recipe proposals


def _subsets_in_rank_order(ops: Sequence[str], max_order: int):
    for size in range(1, min(max_order, len(ops)) + 1):
        for combo in itertools.combinations(range(len(ops)), size):
            yield tuple(ops[i] for i in combo)


def propose_recipes(
    ranking: Sequence[OpRankRow],
    ranges: Mapping[str, Mapping[str, KeepRange]],
    strategy: str,
    max_order: int,
    clusters: ClusterAssignment | None = None,
    params: Mapping[str, Mapping] | None = None,
) -> list[Recipe]:
    """Candidate recipes from the ranking.

    * ``top-k``: every non-empty subset of the top ``max_order`` ops.
    * ``cluster-representative``: the best-ranked op of each cluster forms
      the candidate set; subsets up to ``max_order`` are emitted.

    Each op keeps the keep-range of its best split, looked up in
    ``ranges`` (op -> split -> range, frozen during the probe phase).
    """
    if not ranking:
        raise ValueError("ranking is empty")
    if max_order < 1:
        raise ValueError("max_order must be >= 1")
    if max_order > len(ranking):
        raise ValueError(f"max_order {max_order} exceeds ranking length {len(ranking)}")
    params = params or {}

    if strategy == "top-k":
        candidates = [row.op_name for row in ranking[:max_order]]
    elif strategy == "cluster-representative":
        if clusters is None:
            raise ValueError("cluster-representative strategy needs a ClusterAssignment")
        rank_position = {row.op_name: i for i, row in enumerate(ranking)}
        op_names = [row.op_name for row in ranking]
        if len(op_names) != len(clusters.labels):
            raise ValueError("cluster assignment does not cover the ranking")
        reps = []
        for members in clusters.clusters():
            best = min(members, key=lambda item: rank_position[op_names[item]])
            reps.append(op_names[best])
        candidates = sorted(reps, key=lambda op: rank_position[op])
    else:
        raise ValueError(f"unknown strategy {strategy!r}")

    best_split = {row.op_name: row.best_split for row in ranking}
    recipes = []
    origin = "top-k" if strategy == "top-k" else "cluster-representative"
    for subset in _subsets_in_rank_order(candidates, max_order):
        ops = []
        for op_name in subset:
            split = best_split[op_name]
            try:
                keep = ranges[op_name][split]
            except KeyError as exc:
                raise ValueError(
                    f"no frozen keep range for op {op_name!r} split {split!r}"
                ) from exc
            ops.append(
                OperatorConfig(
                    op_name=op_name,
                    params=params.get(op_name, {}),
                    keep_range=keep,
                )
            )
        recipes.append(Recipe(ops=tuple(ops), origin_strategy=origin))
    return recipes
