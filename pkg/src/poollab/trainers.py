"""Trainer capability boundary.

Two adapters produce MetricVectors from pools: a synthetic reference model
with a planted linear signal (cheap, deterministic, used for desk-scale
verification), and a subprocess adapter speaking the manifest/metrics JSON
protocol for real trainers.
"""

from __future__ import annotations

import hashlib
import json
import math
import random
import subprocess
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

from .core import DataPool, Dataset, MetricVector, canonical_json
from .errors import TrainerError


@dataclass(frozen=True)
class PlantedSignalSpec:
    """Linear score model: base + sum_s w_s * (mean_pool(stat_s) - c_s) + noise.

    Noise is drawn once per (seed, pool content digest), never per
    invocation, so repeated evaluation reproduces bit-identical metrics.
    """

    base: Mapping[str, float]  # metric name -> base score
    weights: Mapping[str, float] = field(default_factory=dict)  # stat -> weight
    centers: Mapping[str, float] = field(default_factory=dict)  # stat -> center
    noise_scale: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if not self.base:
            raise ValueError("at least one metric is required")
        if self.noise_scale < 0:
            raise ValueError("noise scale must be >= 0")
        for stat, w in self.weights.items():
            if not math.isfinite(w):
                raise ValueError(f"weight for {stat!r} must be finite")
        object.__setattr__(self, "base", dict(self.base))
        object.__setattr__(self, "weights", dict(self.weights))
        object.__setattr__(self, "centers", dict(self.centers))

    def to_dict(self) -> dict:
        return {
            "base": dict(self.base),
            "weights": dict(self.weights),
            "centers": dict(self.centers),
            "noise_scale": self.noise_scale,
            "seed": self.seed,
        }

    @classmethod
    def from_dict(cls, data: Mapping) -> "PlantedSignalSpec":
        return cls(
            base=data["base"],
            weights=data.get("weights") or {},
            centers=data.get("centers") or {},
            noise_scale=float(data.get("noise_scale", 0.0)),
            seed=int(data.get("seed", 0)),
        )


def _noise(seed: int, pool_digest: str, metric: str, extra: str = "") -> float:
    material = f"{seed}|{pool_digest}|{metric}|{extra}".encode("utf-8")
    derived = int.from_bytes(hashlib.sha256(material).digest()[:8], "big")
    return random.Random(derived).gauss(0.0, 1.0)


def synthetic_train_eval(
    pool: DataPool,
    dataset: Dataset,
    spec: PlantedSignalSpec,
    hyperparams: Mapping | None = None,
) -> MetricVector:
    """Deterministic surrogate for a reference-model training trial.

    A pure function of (pool content digest, spec, hyperparams): sample
    order within the pool does not matter, and identical inputs yield
    identical metrics. Hyperparams perturb only the noise derivation so
    config sweeps produce distinguishable, reproducible trials.
    """
    samples = [dataset.by_id(sid) for sid in pool.sample_ids]
    means: dict[str, float] = {}
    for stat in spec.weights:
        missing = [s.id for s in samples if stat not in s.stats]
        if missing:
            raise TrainerError(
                f"pool {pool.pool_id!r}: {len(missing)} samples missing stat {stat!r}"
            )
        means[stat] = (
            sum(s.stats[stat] for s in samples) / len(samples) if samples else 0.0
        )
    digest = pool.content_digest()
    hp_extra = canonical_json(dict(hyperparams)) if hyperparams else ""
    metrics = {}
    for name in sorted(spec.base):
        score = spec.base[name]
        for stat, weight in spec.weights.items():
            score += weight * (means[stat] - spec.centers.get(stat, 0.0))
        score += spec.noise_scale * _noise(spec.seed, digest, name, hp_extra)
        metrics[name] = score
    # wall time is reported as 0 so artifacts stay byte-reproducible
    return MetricVector(metrics=metrics, trained_samples=pool.size, wall_time=0.0)


class SyntheticTrainer:
    """Trainer capability backed by the planted-signal model."""

    supports_checkpoints = True

    def __init__(self, dataset: Dataset, spec: PlantedSignalSpec):
        self.dataset = dataset
        self.spec = spec

    def train_eval(
        self,
        pool: DataPool,
        hyperparams: Mapping | None = None,
        checkpoint_in: str | None = None,
    ) -> MetricVector:
        extra = dict(hyperparams or {})
        if checkpoint_in:
            extra["checkpoint_in"] = checkpoint_in
        return synthetic_train_eval(pool, self.dataset, self.spec, extra or None)


# ---------------------------------------------------------------------------
# external trainer protocol


@dataclass(frozen=True)
class TrainerManifest:
    """Everything an external trainer process needs, as one JSON file."""

    pool_manifest: str
    dataset: str
    hyperparams: Mapping
    seed: int
    output: str
    checkpoint_in: str | None = None

    def __post_init__(self):
        object.__setattr__(self, "hyperparams", dict(self.hyperparams))

    def to_dict(self) -> dict:
        data = {
            "pool_manifest": self.pool_manifest,
            "dataset": self.dataset,
            "hyperparams": dict(self.hyperparams),
            "seed": self.seed,
            "output": self.output,
        }
        if self.checkpoint_in is not None:
            data["checkpoint_in"] = self.checkpoint_in
        return data

    @classmethod
    def from_dict(cls, data: Mapping) -> "TrainerManifest":
        return cls(
            pool_manifest=data["pool_manifest"],
            dataset=data["dataset"],
            hyperparams=data.get("hyperparams") or {},
            seed=int(data.get("seed", 0)),
            output=data["output"],
            checkpoint_in=data.get("checkpoint_in"),
        )

    def write(self, path: str | Path) -> Path:
        path = Path(path)
        path.write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n", "utf-8")
        return path


@dataclass(frozen=True)
class ExternalTrainResult:
    metrics: MetricVector
    checkpoint_out: str | None = None


def external_train_eval(
    manifest: TrainerManifest,
    command: Sequence[str],
    manifest_path: str | Path | None = None,
    timeout: float | None = 1800.0,
) -> ExternalTrainResult:
    """Write the manifest, invoke the trainer, parse its metrics JSON.

    The trainer is called as ``command <manifest-path>`` and must write
    ``{"metrics": {...}, "trained_samples": int, "wall_time_s": num,
    "checkpoint_out"?: path}`` to the manifest's output path.
    """
    out_path = Path(manifest.output)
    if manifest_path is None:
        manifest_path = out_path.parent / "trainer_manifest.json"
    manifest_path = manifest.write(manifest_path)

    proc = subprocess.run(
        [*command, str(manifest_path)],
        capture_output=True,
        text=True,
        timeout=timeout,
    )
    if proc.returncode != 0:
        tail = proc.stderr.strip().splitlines()[-5:]
        raise TrainerError(
            f"trainer exited with status {proc.returncode}: {' | '.join(tail) or '<no stderr>'}"
        )
    if not out_path.exists():
        raise TrainerError(f"trainer wrote no metrics file at {out_path}")
    try:
        payload = json.loads(out_path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise TrainerError(f"malformed metrics JSON at {out_path}: {exc}") from exc
    if "metrics" not in payload or not isinstance(payload["metrics"], dict):
        raise TrainerError(f"metrics JSON at {out_path} lacks a 'metrics' object")
    try:
        metrics = MetricVector.from_dict(payload)
    except (ValueError, TypeError) as exc:
        raise TrainerError(f"invalid metrics at {out_path}: {exc}") from exc
    return ExternalTrainResult(
        metrics=metrics, checkpoint_out=payload.get("checkpoint_out")
    )
