"""Sandbox economics: break-even analysis, the deviation bound on
small-pool feedback, and the trained-sample cost ledger.

Per-sample compute costs are carried symbolically in "alpha units" (an
opaque scale constant); totals stay comparable without measuring real
FLOPs.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterable, Mapping

from .core import CostParams, HoeffdingParams


@dataclass(frozen=True)
class CostComparison:
    cost_without: float  # M full-scale iterations
    cost_with: float  # one full run plus m small-pool experiments
    ratio: float  # cost_with / cost_without
    sandbox_preferred: bool

    def to_dict(self) -> dict:
        return {
            "cost_without": self.cost_without,
            "cost_with": self.cost_with,
            "ratio": self.ratio,
            "preferred": self.sandbox_preferred,
        }


def breakeven(params: CostParams) -> CostComparison:
    """Compare M full-scale iterations against (1 + m*r) full-scale units.

    The sandbox is preferred exactly when 1 + m*r <= M.
    """
    cost_without = params.M * params.T_full
    cost_with = (1 + params.m * params.r) * params.T_full
    return CostComparison(
        cost_without=cost_without,
        cost_with=cost_with,
        ratio=cost_with / cost_without,
        sandbox_preferred=(1 + params.m * params.r) <= params.M,
    )


def hoeffding_bound(params: HoeffdingParams) -> float:
    """Probability bound exp(-2 eps^2 / (b - a)^2) on the small-pool
    feedback overshooting the full-scale effect by eps, clamped to <= 1."""
    if params.epsilon == 0:
        return 1.0
    width = params.b - params.a
    return min(1.0, math.exp(-2.0 * params.epsilon**2 / width**2))


@dataclass(frozen=True)
class FlopsLedgerEntry:
    """One trained run's compute, in alpha-scaled opaque units."""

    run_id: str
    trained_samples: int
    per_sample_cost: float
    unit: str = "alpha"

    def __post_init__(self):
        if self.trained_samples < 0:
            raise ValueError("trained_samples must be >= 0")
        if not math.isfinite(self.per_sample_cost) or self.per_sample_cost < 0:
            raise ValueError("per_sample_cost must be finite and >= 0")

    @property
    def total(self) -> float:
        return self.per_sample_cost * self.trained_samples

    def to_dict(self) -> dict:
        return {
            "run_id": self.run_id,
            "trained_samples": self.trained_samples,
            "per_sample_cost": self.per_sample_cost,
            "unit": self.unit,
            "total": self.total,
        }


@dataclass(frozen=True)
class LedgerTotal:
    total_cost: float
    unit: str
    trained_samples: int
    samples_by_run: Mapping[str, int]

    def to_dict(self) -> dict:
        return {
            "total_cost": self.total_cost,
            "unit": self.unit,
            "trained_samples": self.trained_samples,
            "samples_by_run": dict(self.samples_by_run),
        }


def ledger_total(entries: Iterable[FlopsLedgerEntry]) -> LedgerTotal:
    """Alpha-scaled cost sum plus trained-sample totals per run.

    Entries must share a unit tag; time and FLOPs ledgers are kept
    comparable only within their own unit.
    """
    entries = list(entries)
    units = {e.unit for e in entries}
    if len(units) > 1:
        raise ValueError(f"mixed cost units in ledger: {sorted(units)}")
    unit = units.pop() if units else "alpha"
    by_run: dict[str, int] = {}
    total_cost = 0.0
    total_samples = 0
    for entry in entries:
        total_cost += entry.total
        total_samples += entry.trained_samples
        by_run[entry.run_id] = by_run.get(entry.run_id, 0) + entry.trained_samples
    return LedgerTotal(
        total_cost=total_cost,
        unit=unit,
        trained_samples=total_samples,
        samples_by_run=by_run,
    )
