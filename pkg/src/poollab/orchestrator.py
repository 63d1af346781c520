"""Workflow orchestration.

A workflow config (YAML) declares four phases - probe, refine, execute,
evaluate - each an ordered job list. High-level job kinds (``probe``,
``sweep``) expand into concrete jobs at load time, so unresolved names and
id collisions fail before anything runs. Execution is content-addressed:
a job's identity digest covers its kind, params, seed, input files and the
output digests of its dependencies, which makes resume a digest lookup.

Behaviors plug in as named hook functions (pre/post job, with ledger
access); trainer capabilities plug in as named factory classes.
"""

from __future__ import annotations

import hashlib
import json
import logging
import math
import shutil
import threading
import time
from concurrent.futures import FIRST_COMPLETED, ThreadPoolExecutor, wait
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Mapping, Sequence

import yaml

from . import reports
from .analysis import (
    OpRankRow,
    TrialResult,
    rank_from_trials,
    relative_improvement,
)
from .core import (
    DataPool,
    Dataset,
    KeepRange,
    LedgerEntry,
    MetricVector,
    OperatorConfig,
    ProvenanceStep,
    Recipe,
    RunLedger,
    canonical_json,
    sha256_hex,
)
from .errors import ConfigError, TrainerError
from .ops.engine import StatSpec, compute_stats
from .pools import (
    PyramidResult,
    PyramidSpec,
    build_pyramid,
    compose_recipe,
    materialize_schedule,
    sample_random_control,
    schedule_compute,
    split_labels,
    split_tertiles,
)
from .trainers import (
    PlantedSignalSpec,
    TrainerManifest,
    external_train_eval,
    synthetic_train_eval,
)

logger = logging.getLogger(__name__)

PHASES = ("probe", "refine", "execute", "evaluate")


# ---------------------------------------------------------------------------
# registries: behaviors (hooks) and capabilities (factories)

HookFn = Callable[[str, "Job", RunLedger], None]
HOOKS: dict[str, HookFn] = {}
TRAINER_FACTORIES: dict[str, Callable[[Mapping], "TrainerAdapter"]] = {}


def register_hook(name: str, fn: HookFn) -> None:
    HOOKS[name] = fn


def register_trainer_factory(name: str, factory) -> None:
    TRAINER_FACTORIES[name] = factory


def _log_jobs_hook(event: str, job: "Job", ledger: RunLedger) -> None:
    logger.info("%s %s (%s)", event, job.job_id, job.kind)


register_hook("log_jobs", _log_jobs_hook)


# ---------------------------------------------------------------------------
# trainer adapters


@dataclass
class TrialInputs:
    dataset: Dataset
    pool: DataPool
    dataset_path: str
    pool_manifest_path: str
    hyperparams: Mapping
    seed: int
    out_dir: Path
    checkpoint_in: str | None = None
    want_checkpoint: bool = False


@dataclass(frozen=True)
class TrialOutput:
    metrics: MetricVector
    checkpoint_out: str | None = None


class TrainerAdapter:
    """Capability interface trials run through."""

    supports_checkpoints = False

    def run_trial(self, inputs: TrialInputs) -> TrialOutput:
        raise NotImplementedError

    # optional: trainers that can report a partial metric at a fraction of
    # the training budget enable early stopping; others leave it inert
    partial_metric = None


class SyntheticAdapter(TrainerAdapter):
    supports_checkpoints = True

    def __init__(self, params: Mapping):
        self.spec = PlantedSignalSpec.from_dict(params)

    def _evaluate(self, inputs: TrialInputs, pool: DataPool) -> MetricVector:
        extra = dict(inputs.hyperparams or {})
        if inputs.checkpoint_in:
            extra["checkpoint_in"] = Path(inputs.checkpoint_in).name
        return synthetic_train_eval(pool, inputs.dataset, self.spec, extra or None)

    def run_trial(self, inputs: TrialInputs) -> TrialOutput:
        metrics = self._evaluate(inputs, inputs.pool)
        checkpoint_out = None
        if inputs.want_checkpoint:
            lineage = []
            if inputs.checkpoint_in:
                previous = json.loads(Path(inputs.checkpoint_in).read_text("utf-8"))
                lineage = list(previous.get("lineage", []))
            lineage.append(inputs.pool.content_digest())
            ckpt_path = inputs.out_dir / "checkpoint.json"
            ckpt_path.write_text(
                json.dumps({"lineage": lineage}, sort_keys=True) + "\n", "utf-8"
            )
            checkpoint_out = str(ckpt_path)
        return TrialOutput(metrics=metrics, checkpoint_out=checkpoint_out)

    def partial_metric(self, inputs: TrialInputs, fraction: float) -> float:
        take = max(1, math.ceil(fraction * inputs.pool.size))
        truncated = DataPool(
            pool_id=inputs.pool.pool_id + ".partial",
            sample_ids=inputs.pool.sample_ids[:take],
            provenance=inputs.pool.provenance,
            split_label=inputs.pool.split_label,
            declared_size=take,
            pyramid_level=inputs.pool.pyramid_level,
        )
        return self._evaluate(inputs, truncated).mean()


class ExternalAdapter(TrainerAdapter):
    def __init__(self, params: Mapping):
        command = params.get("command")
        if not command:
            raise ConfigError("external trainer factory needs a 'command' list")
        self.command = [str(part) for part in command]
        self.supports_checkpoints = bool(params.get("supports_checkpoints", False))
        self.timeout = params.get("timeout", 1800.0)

    def run_trial(self, inputs: TrialInputs) -> TrialOutput:
        manifest = TrainerManifest(
            pool_manifest=str(inputs.pool_manifest_path),
            dataset=str(inputs.dataset_path),
            hyperparams=dict(inputs.hyperparams or {}),
            seed=inputs.seed,
            output=str(inputs.out_dir / "metrics.json"),
            checkpoint_in=inputs.checkpoint_in,
        )
        result = external_train_eval(
            manifest,
            self.command,
            manifest_path=inputs.out_dir / "trainer_manifest.json",
            timeout=self.timeout,
        )
        return TrialOutput(metrics=result.metrics, checkpoint_out=result.checkpoint_out)


register_trainer_factory("synthetic", SyntheticAdapter)
register_trainer_factory("external", ExternalAdapter)


# ---------------------------------------------------------------------------
# plan model


@dataclass(frozen=True)
class Job:
    job_id: str
    kind: str
    phase: str
    params: Mapping = field(default_factory=dict)
    needs: tuple[str, ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "params", dict(self.params))
        object.__setattr__(self, "needs", tuple(self.needs))


@dataclass(frozen=True)
class WorkflowPlan:
    workdir: Path
    seed: int
    max_parallel: int
    hooks: tuple[str, ...]
    factories: Mapping[str, str]
    phases: Mapping[str, tuple[Job, ...]]

    def jobs(self) -> list[Job]:
        return [job for phase in PHASES for job in self.phases[phase]]

    def job(self, job_id: str) -> Job:
        for job in self.jobs():
            if job.job_id == job_id:
                return job
        raise KeyError(job_id)


@dataclass(frozen=True)
class EarlyStopPolicy:
    """Abort a trial whose partial metric trails the baseline by more than
    the margin at the checkpoint fraction."""

    fraction: float
    margin: float

    def __post_init__(self):
        if not (0 < self.fraction <= 1):
            raise ValueError("checkpoint fraction must lie in (0, 1]")
        if math.isnan(self.margin):
            raise ValueError("margin must not be NaN")

    @classmethod
    def from_dict(cls, data: Mapping) -> "EarlyStopPolicy":
        margin = data.get("margin", math.inf)
        if isinstance(margin, str):
            margin = float(margin)
        return cls(fraction=float(data.get("fraction", 0.5)), margin=margin)


def early_stop_check(
    partial_metric: float, baseline_metric: float, policy: EarlyStopPolicy
) -> str:
    """'abort' iff the partial metric is strictly below baseline - margin."""
    if math.isinf(policy.margin):
        return "continue"
    return "abort" if partial_metric < baseline_metric - policy.margin else "continue"


# ---------------------------------------------------------------------------
# workflow loading and expansion


def _expand_probe(job: Job) -> list[Job]:
    params = dict(job.params)
    ops = params.get("ops") or []
    if not ops:
        raise ConfigError(f"probe job {job.job_id!r} lists no ops")
    target = params.get("target_pool_size")
    if not target:
        raise ConfigError(f"probe job {job.job_id!r} needs target_pool_size")
    n_splits = int(params.get("n_splits", 3))
    if n_splits != 3:
        # ranking rows are fixed to low/mid/high; other bucket counts are
        # available through explicit build_pool jobs
        raise ConfigError(
            f"probe job {job.job_id!r}: automatic ranking needs n_splits=3, got {n_splits}"
        )
    labels = split_labels(n_splits)
    dataset = params.get("dataset")
    if not dataset:
        raise ConfigError(f"probe job {job.job_id!r} needs a dataset path")
    specs = params.get("specs") or []
    trainer_params = params.get("trainer_params") or {}
    trainer = params.get("trainer")
    expanded: list[Job] = []

    source: dict
    stats_id = f"{job.job_id}.stats"
    if specs:
        expanded.append(
            Job(
                job_id=stats_id,
                kind="compute_stats",
                phase=job.phase,
                params={"dataset": dataset, "specs": specs},
                needs=job.needs,
            )
        )
        source = {"source": stats_id}
        pool_needs = (stats_id,)
    else:
        source = {"dataset": dataset}
        pool_needs = job.needs

    trial_ids = []
    for op in ops:
        for label in labels:
            pool_id = f"{job.job_id}.pool.{op}.{label}"
            expanded.append(
                Job(
                    job_id=pool_id,
                    kind="build_pool",
                    phase=job.phase,
                    params={
                        **source,
                        "op": op,
                        "split": label,
                        "target_size": target,
                        "n_splits": n_splits,
                    },
                    needs=pool_needs,
                )
            )
            trial_id = f"{job.job_id}.trial.{op}.{label}"
            trial_ids.append(trial_id)
            trial_params = {
                "pool": pool_id,
                "op": op,
                "split": label,
                "trainer": trainer,
                "trainer_params": trainer_params,
                "baseline": False,
            }
            if params.get("checkpoint_in"):
                trial_params["checkpoint_in"] = params["checkpoint_in"]
            expanded.append(
                Job(
                    job_id=trial_id,
                    kind="trial",
                    phase=job.phase,
                    params=trial_params,
                    needs=(pool_id,),
                )
            )
    random_pool_id = f"{job.job_id}.pool.random"
    expanded.append(
        Job(
            job_id=random_pool_id,
            kind="build_pool",
            phase=job.phase,
            params={**source, "split": "random", "target_size": target},
            needs=pool_needs,
        )
    )
    baseline_trial_id = f"{job.job_id}.trial.random"
    baseline_params = {
        "pool": random_pool_id,
        "trainer": trainer,
        "trainer_params": trainer_params,
        "baseline": True,
    }
    if params.get("checkpoint_in"):
        baseline_params["checkpoint_in"] = params["checkpoint_in"]
    expanded.append(
        Job(
            job_id=baseline_trial_id,
            kind="trial",
            phase=job.phase,
            params=baseline_params,
            needs=(random_pool_id,),
        )
    )
    trial_ids.append(baseline_trial_id)
    expanded.append(
        Job(
            job_id=f"{job.job_id}.rank",
            kind="rank",
            phase=job.phase,
            params={"trials": trial_ids},
            needs=tuple(trial_ids),
        )
    )
    return expanded


def _expand_sweep(job: Job) -> list[Job]:
    params = dict(job.params)
    grid = params.get("grid")
    if not grid:
        raise ConfigError(f"sweep job {job.job_id!r} has an empty grid")
    pool = params.get("pool")
    if not pool and "pool_manifest" not in params:
        raise ConfigError(f"sweep job {job.job_id!r} needs a pool reference")
    baseline_index = int(params.get("baseline_index", 0))
    seen: dict[str, int] = {}
    points: list[Mapping] = []
    for index, point in enumerate(grid):
        key = canonical_json(dict(point))
        if key in seen:
            logger.warning(
                "sweep %s: grid point %d duplicates point %d, dropped",
                job.job_id,
                index,
                seen[key],
            )
            continue
        seen[key] = index
        points.append(point)
    if not (0 <= baseline_index < len(grid)):
        raise ConfigError(f"sweep job {job.job_id!r}: baseline_index out of range")
    baseline_key = canonical_json(dict(grid[baseline_index]))

    expanded: list[Job] = []
    trial_ids = []
    for index, point in enumerate(points):
        trial_id = f"{job.job_id}.point{index}"
        trial_ids.append(trial_id)
        trial_params = {
            "trainer": params.get("trainer"),
            "trainer_params": params.get("trainer_params") or {},
            "hyperparams": point,
            "baseline": canonical_json(dict(point)) == baseline_key,
            "sweep_point": index,
        }
        if pool:
            trial_params["pool"] = pool
            needs = (pool, *job.needs)
        else:
            trial_params["pool_manifest"] = params["pool_manifest"]
            trial_params["dataset"] = params["dataset"]
            needs = job.needs
        expanded.append(
            Job(
                job_id=trial_id,
                kind="trial",
                phase=job.phase,
                params=trial_params,
                needs=needs,
            )
        )
    expanded.append(
        Job(
            job_id=f"{job.job_id}.rank",
            kind="sweep_rank",
            phase=job.phase,
            params={"trials": trial_ids},
            needs=tuple(trial_ids),
        )
    )
    return expanded


_EXPANSIONS = {"probe": _expand_probe, "sweep": _expand_sweep}

JOB_KINDS = (
    "compute_stats",
    "build_pool",
    "trial",
    "rank",
    "sweep_rank",
    "correlate",
    "propose",
    "compose",
    "pyramid",
    "schedule",
    "schedule_trial",
    "report",
)


def load_workflow(config: str | Path | Mapping, overrides: Mapping | None = None) -> WorkflowPlan:
    """Parse, expand and validate a workflow config.

    Unresolved hook/factory names, duplicate job ids, unknown kinds and
    dangling ``needs`` are all rejected here, never at run time.
    """
    if isinstance(config, (str, Path)):
        path = Path(config)
        try:
            text = path.read_text(encoding="utf-8")
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        try:
            raw = yaml.safe_load(text)
        except yaml.YAMLError as exc:
            mark = getattr(exc, "problem_mark", None)
            where = f"{path}:{mark.line + 1}" if mark else str(path)
            raise ConfigError(f"{where}: invalid YAML: {exc}") from exc
    else:
        raw = dict(config)
    if not isinstance(raw, Mapping):
        raise ConfigError("workflow config must be a mapping")
    raw = dict(raw)
    if overrides:
        raw.update({k: v for k, v in overrides.items() if v is not None})

    workdir = raw.get("workdir")
    if not workdir:
        raise ConfigError("config needs a 'workdir' (or pass --workdir / SANDBOX_WORKDIR)")
    seed = int(raw.get("seed", 0))
    max_parallel = int(raw.get("max_parallel", 1))
    if max_parallel < 1:
        raise ConfigError("max_parallel must be >= 1")

    registries = raw.get("registries") or {}
    hooks = tuple(registries.get("hooks") or ())
    for hook in hooks:
        if hook not in HOOKS:
            raise ConfigError(f"unknown hook {hook!r}; registered: {sorted(HOOKS)}")
    factories = dict(registries.get("factories") or {})
    for role, name in factories.items():
        if name not in TRAINER_FACTORIES:
            raise ConfigError(
                f"unknown factory {name!r} for role {role!r}; "
                f"registered: {sorted(TRAINER_FACTORIES)}"
            )

    phases_raw = raw.get("phases") or {}
    unknown_phases = set(phases_raw) - set(PHASES)
    if unknown_phases:
        raise ConfigError(f"unknown phases: {sorted(unknown_phases)}")

    phases: dict[str, list[Job]] = {phase: [] for phase in PHASES}
    for phase in PHASES:
        for raw_job in phases_raw.get(phase) or []:
            if "id" not in raw_job or "kind" not in raw_job:
                raise ConfigError(f"{phase} job needs 'id' and 'kind': {raw_job!r}")
            job = Job(
                job_id=str(raw_job["id"]),
                kind=str(raw_job["kind"]),
                phase=phase,
                params=raw_job.get("params") or {},
                needs=tuple(raw_job.get("needs") or ()),
            )
            if job.kind in _EXPANSIONS:
                phases[phase].extend(_EXPANSIONS[job.kind](job))
            elif job.kind in JOB_KINDS:
                phases[phase].append(job)
            else:
                raise ConfigError(f"unknown job kind {job.kind!r} in job {job.job_id!r}")

    all_ids: list[str] = [job.job_id for phase in PHASES for job in phases[phase]]
    duplicates = {job_id for job_id in all_ids if all_ids.count(job_id) > 1}
    if duplicates:
        raise ConfigError(f"duplicate job ids: {sorted(duplicates)}")

    # needs must reference jobs in the same or an earlier phase
    seen: set[str] = set()
    for phase in PHASES:
        phase_ids = {job.job_id for job in phases[phase]}
        for job in phases[phase]:
            for dep in job.needs:
                if dep not in seen and dep not in phase_ids:
                    raise ConfigError(
                        f"job {job.job_id!r} needs {dep!r}, which is not defined "
                        "in the same or an earlier phase"
                    )
        seen |= phase_ids

    # same-phase needs must be acyclic
    for phase in PHASES:
        phase_jobs = {job.job_id: job for job in phases[phase]}
        indegree = {job_id: 0 for job_id in phase_jobs}
        dependents: dict[str, list[str]] = {job_id: [] for job_id in phase_jobs}
        for job in phase_jobs.values():
            for dep in job.needs:
                if dep in phase_jobs:
                    indegree[job.job_id] += 1
                    dependents[dep].append(job.job_id)
        queue = [job_id for job_id, degree in indegree.items() if degree == 0]
        visited = 0
        while queue:
            current = queue.pop()
            visited += 1
            for follower in dependents[current]:
                indegree[follower] -= 1
                if indegree[follower] == 0:
                    queue.append(follower)
        if visited != len(phase_jobs):
            cyclic = sorted(job_id for job_id, degree in indegree.items() if degree > 0)
            raise ConfigError(f"dependency cycle in phase {phase!r}: {cyclic}")

    # trial jobs must resolve their trainer factory at load time
    for job in (j for phase in PHASES for j in phases[phase]):
        if job.kind in ("trial", "schedule_trial"):
            trainer = job.params.get("trainer") or factories.get("trainer")
            if trainer is None:
                raise ConfigError(
                    f"job {job.job_id!r} has no trainer; set registries.factories.trainer"
                )
            if trainer not in TRAINER_FACTORIES:
                raise ConfigError(f"unknown trainer factory {trainer!r}")

    return WorkflowPlan(
        workdir=Path(workdir),
        seed=seed,
        max_parallel=max_parallel,
        hooks=hooks,
        factories=factories,
        phases={phase: tuple(jobs) for phase, jobs in phases.items()},
    )


# ---------------------------------------------------------------------------
# execution

# params whose file content feeds the input digest
_FILE_PARAMS = ("dataset", "pool_manifest")


class _Context:
    def __init__(self, plan: WorkflowPlan, ledger: RunLedger):
        self.plan = plan
        self.ledger = ledger
        self.results: dict[str, dict] = {}
        self.output_digests: dict[str, str] = {}
        self._datasets: dict[str, Dataset] = {}
        self._lock = threading.Lock()

    def job_dir(self, job_id: str) -> Path:
        return self.plan.workdir / "jobs" / job_id

    def load_dataset(self, path: str | Path) -> Dataset:
        key = str(Path(path).resolve())
        with self._lock:
            cached = self._datasets.get(key)
        if cached is not None:
            return cached
        dataset = Dataset.from_jsonl(path)
        with self._lock:
            self._datasets[key] = dataset
        return dataset

    def dataset_path_for(self, job: Job) -> Path:
        if "source" in job.params:
            source = job.params["source"]
            return Path(self.results[source]["dataset"])
        if "dataset" in job.params:
            return Path(job.params["dataset"])
        raise ConfigError(f"job {job.job_id!r} has neither 'source' nor 'dataset'")


def _file_digest(path: Path) -> str:
    h = hashlib.sha256()
    with path.open("rb") as handle:
        for chunk in iter(lambda: handle.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _input_digest(job: Job, ctx: _Context) -> str:
    payload = {
        "kind": job.kind,
        "params": dict(job.params),
        "seed": ctx.plan.seed,
        "deps": {dep: ctx.output_digests.get(dep) for dep in sorted(job.needs)},
    }
    files = {}
    for key in _FILE_PARAMS:
        value = job.params.get(key)
        if isinstance(value, str) and Path(value).is_file():
            files[key] = _file_digest(Path(value))
    payload["files"] = files
    return sha256_hex(canonical_json(payload).encode("utf-8"))


def _dir_digest(path: Path) -> str:
    h = hashlib.sha256()
    for file in sorted(p for p in path.rglob("*") if p.is_file()):
        h.update(str(file.relative_to(path)).encode("utf-8"))
        h.update(b"\x00")
        h.update(_file_digest(file).encode("utf-8"))
        h.update(b"\x00")
    return h.hexdigest()


# --- executors --------------------------------------------------------------


def _exec_compute_stats(job: Job, ctx: _Context, out_dir: Path) -> dict:
    dataset = ctx.load_dataset(ctx.dataset_path_for(job))
    specs = [
        StatSpec.for_op(entry["op"], **(entry.get("params") or {}))
        for entry in job.params.get("specs", [])
    ]
    result = compute_stats(dataset, specs)
    out_path = out_dir / "dataset.jsonl"
    result.to_jsonl(out_path)
    return {"dataset": str(out_path), "digest": result.digest(), "samples": len(result)}


def _exec_build_pool(job: Job, ctx: _Context, out_dir: Path) -> dict:
    dataset_path = ctx.dataset_path_for(job)
    dataset = ctx.load_dataset(dataset_path)
    split = job.params["split"]
    target = int(job.params["target_size"])
    warnings: tuple[str, ...] = ()
    if split == "random":
        pool = sample_random_control(dataset, min(target, len(dataset)), ctx.plan.seed)
    else:
        result = split_tertiles(
            dataset,
            job.params["op"],
            target,
            ctx.plan.seed,
            n_splits=int(job.params.get("n_splits", 3)),
            params=job.params.get("op_params") or {},
        )
        pool = result.pools[split]
        warnings = result.warnings
        (out_dir / "boundaries.json").write_text(
            json.dumps(result.boundaries.to_dict(), sort_keys=True) + "\n", "utf-8"
        )
    manifest_path = out_dir / "pool.json"
    pool.save(manifest_path)
    marker = f"{job.params.get('op', '')}/{split}"
    return {
        "pool_manifest": str(manifest_path),
        "pool_id": pool.pool_id,
        "size": pool.size,
        "declared_size": pool.declared_size,
        "dataset": str(dataset_path),
        # downstream digests must see the dataset content, not just its path
        "dataset_digest": dataset.digest(),
        "warnings": [w for w in warnings if marker in w],
    }


def _adapter_for(job: Job, ctx: _Context) -> TrainerAdapter:
    name = job.params.get("trainer") or ctx.plan.factories.get("trainer")
    factory = TRAINER_FACTORIES[name]
    trainer_params = dict(job.params.get("trainer_params") or {})
    trainer_params.setdefault("seed", ctx.plan.seed)
    return factory(trainer_params)


def _resolve_trial_pool(job: Job, ctx: _Context) -> tuple[str, str]:
    """Returns (pool manifest path, dataset path) for a trial job."""
    if "pool" in job.params:
        pool_result = ctx.results[job.params["pool"]]
        return pool_result["pool_manifest"], pool_result["dataset"]
    if "pool_from_rank" in job.params:
        ref = job.params["pool_from_rank"]
        rank_result = ctx.results[ref["rank"]]
        row = rank_result["rows"][int(ref.get("position", 0))]
        info = rank_result["pools"][row["op_name"]][row["best_split"]]
        return info["pool_manifest"], info["dataset"]
    if "pool_manifest" in job.params:
        return job.params["pool_manifest"], job.params["dataset"]
    raise ConfigError(f"trial {job.job_id!r} has no pool reference")


def _exec_trial(job: Job, ctx: _Context, out_dir: Path) -> dict:
    pool_manifest_path, dataset_path = _resolve_trial_pool(job, ctx)
    pool = DataPool.load(pool_manifest_path)
    dataset = ctx.load_dataset(dataset_path)
    adapter = _adapter_for(job, ctx)
    inputs = TrialInputs(
        dataset=dataset,
        pool=pool,
        dataset_path=dataset_path,
        pool_manifest_path=pool_manifest_path,
        hyperparams=job.params.get("hyperparams") or {},
        seed=ctx.plan.seed,
        out_dir=out_dir,
        checkpoint_in=job.params.get("checkpoint_in"),
        want_checkpoint=bool(job.params.get("want_checkpoint", False)),
    )

    early_stop_record = None
    early = job.params.get("early_stop")
    if early and adapter.partial_metric is not None and job.params.get("baseline_trial"):
        policy = EarlyStopPolicy.from_dict(early)
        baseline_metrics = MetricVector.from_dict(
            ctx.results[job.params["baseline_trial"]]
        )
        partial = adapter.partial_metric(inputs, policy.fraction)
        decision = early_stop_check(partial, baseline_metrics.mean(), policy)
        if decision == "abort":
            return {
                "aborted": True,
                "partial_metric": partial,
                "fraction": policy.fraction,
                "pool_id": pool.pool_id,
                "op": job.params.get("op"),
                "split": job.params.get("split"),
                "baseline": False,
            }
        early_stop_record = {
            "decision": decision,
            "partial_metric": partial,
            "fraction": policy.fraction,
        }

    output = adapter.run_trial(inputs)
    metrics_path = out_dir / "metrics.json"
    if not metrics_path.exists():  # in-process adapters write it here
        metrics_path.write_text(
            json.dumps(output.metrics.to_dict(), sort_keys=True) + "\n", "utf-8"
        )
    keep_range = None
    if pool.provenance:
        keep_range = pool.provenance[0].keep_range.to_json()
    result = {
        **output.metrics.to_dict(),
        "pool_id": pool.pool_id,
        "pool_size": pool.size,
        "pool_manifest": str(pool_manifest_path),
        "dataset": str(dataset_path),
        "op": job.params.get("op"),
        "split": job.params.get("split"),
        "keep_range": keep_range,
        "baseline": bool(job.params.get("baseline", False)),
        "aborted": False,
    }
    if early_stop_record:
        result["early_stop"] = early_stop_record
    if "sweep_point" in job.params:
        result["sweep_point"] = job.params["sweep_point"]
        result["hyperparams"] = dict(job.params.get("hyperparams") or {})
    if output.checkpoint_out:
        result["checkpoint_out"] = output.checkpoint_out
    return result


def _trial_results(job: Job, ctx: _Context) -> list[dict]:
    ids = job.params.get("trials") or list(job.needs)
    return [{**ctx.results[trial_id], "_job_id": trial_id} for trial_id in ids]


def _exec_rank(job: Job, ctx: _Context, out_dir: Path) -> dict:
    raw = [r for r in _trial_results(job, ctx) if not r.get("aborted")]
    trials = [
        TrialResult(
            pool_id=r["pool_id"],
            metrics=MetricVector.from_dict(r),
            baseline=r["baseline"],
            op_name=r.get("op"),
            split_label=r.get("split"),
        )
        for r in raw
    ]
    rows = rank_from_trials(trials)
    ranges: dict[str, dict[str, list]] = {}
    pools: dict[str, dict[str, dict]] = {}
    for r in raw:
        if r.get("op") and r.get("keep_range") is not None:
            ranges.setdefault(r["op"], {})[r["split"]] = r["keep_range"]
            pools.setdefault(r["op"], {})[r["split"]] = {
                "pool_manifest": r["pool_manifest"],
                "dataset": r["dataset"],
            }
    csv_path = out_dir / "ranking.csv"
    reports.write_ranking_csv(rows, csv_path)
    payload = {"rows": [row.to_dict() for row in rows], "ranges": ranges, "pools": pools}
    (out_dir / "ranking.json").write_text(
        json.dumps(payload, sort_keys=True, indent=2) + "\n", "utf-8"
    )
    return {**payload, "ranking_csv": str(csv_path)}


def _exec_sweep_rank(job: Job, ctx: _Context, out_dir: Path) -> dict:
    raw = _trial_results(job, ctx)
    baselines = [r for r in raw if r["baseline"]]
    if len(baselines) != 1:
        raise ValueError(f"sweep needs exactly one baseline point, got {len(baselines)}")
    baseline = MetricVector.from_dict(baselines[0])
    rows = []
    for r in raw:
        change = relative_improvement(MetricVector.from_dict(r), baseline)
        rows.append(
            {
                "point": r.get("sweep_point"),
                "hyperparams": r.get("hyperparams") or {},
                "improvement_pct": change,
                "baseline": r["baseline"],
            }
        )
    rows.sort(key=lambda row: (-row["improvement_pct"], row["point"]))
    csv_path = out_dir / "sweep.csv"
    reports.write_sweep_csv(rows, csv_path)
    (out_dir / "sweep.json").write_text(
        json.dumps({"rows": rows}, sort_keys=True, indent=2) + "\n", "utf-8"
    )
    return {"rows": rows, "sweep_csv": str(csv_path)}


def _ranges_from_rank(rank_result: Mapping) -> dict[str, dict[str, KeepRange]]:
    return {
        op: {split: KeepRange.from_json(rng) for split, rng in splits.items()}
        for op, splits in rank_result["ranges"].items()
    }


def _exec_correlate(job: Job, ctx: _Context, out_dir: Path) -> dict:
    from .analysis import pearson_matrix, ward_cluster

    dataset = ctx.load_dataset(ctx.dataset_path_for(job))
    ops = job.params.get("ops")
    if not ops:
        raise ConfigError(f"correlate job {job.job_id!r} needs an 'ops' list")
    stats = {op: [] for op in ops}
    for sample in dataset:
        for op in ops:
            if op not in sample.stats:
                raise ConfigError(f"sample {sample.id!r} lacks statistic {op!r}")
            stats[op].append(sample.stats[op])
    matrix = pearson_matrix(stats)
    reports.write_correlation_csv(matrix, out_dir / "correlation.csv")
    payload: dict = {
        "labels": list(matrix.labels),
        "degenerate": list(matrix.degenerate),
        "correlation_csv": str(out_dir / "correlation.csv"),
    }
    k = job.params.get("k")
    if k is not None:
        assignment = ward_cluster(matrix, k=int(k))
        groups = [[matrix.labels[i] for i in block] for block in assignment.clusters()]
        payload["clusters"] = groups
        (out_dir / "clusters.json").write_text(
            json.dumps({"k": int(k), "clusters": groups}, sort_keys=True, indent=2) + "\n",
            "utf-8",
        )
    return payload


def _exec_propose(job: Job, ctx: _Context, out_dir: Path) -> dict:
    from .analysis import ClusterAssignment, propose_recipes

    rank_result = ctx.results[job.params["rank"]]
    rows = [
        OpRankRow(op_name=r["op_name"], low=r["low"], mid=r["mid"], high=r["high"])
        for r in rank_result["rows"]
    ]
    ranges = _ranges_from_rank(rank_result)
    strategy = job.params.get("strategy", "top-k")
    clusters = None
    if strategy == "cluster-representative":
        source = job.params.get("clusters_from")
        if not source:
            raise ConfigError(
                f"propose job {job.job_id!r} needs 'clusters_from' for the "
                "cluster-representative strategy"
            )
        groups = ctx.results[source]["clusters"]
        label_of = {
            op: index for index, group in enumerate(groups) for op in group
        }
        missing = [row.op_name for row in rows if row.op_name not in label_of]
        if missing:
            raise ConfigError(f"ranked ops missing from clustering: {missing}")
        clusters = ClusterAssignment(
            k=len(groups),
            labels=tuple(label_of[row.op_name] for row in rows),
            merges=(),
        )
    recipes = propose_recipes(
        ranking=rows,
        ranges=ranges,
        strategy=strategy,
        max_order=int(job.params.get("max_order", min(3, len(rows)))),
        clusters=clusters,
    )
    payload = {"recipes": [recipe.to_dict() for recipe in recipes]}
    (out_dir / "recipes.json").write_text(
        json.dumps(payload, sort_keys=True, indent=2) + "\n", "utf-8"
    )
    return payload


def _exec_compose(job: Job, ctx: _Context, out_dir: Path) -> dict:
    dataset_path = ctx.dataset_path_for(job)
    dataset = ctx.load_dataset(dataset_path)
    if "recipes_from" in job.params:
        source = ctx.results[job.params["recipes_from"]]
        recipe = Recipe.from_dict(
            source["recipes"][int(job.params.get("recipe_index", -1))]
        )
    else:
        recipe = Recipe.from_dict(job.params["recipe"])
    pool = compose_recipe(dataset, recipe)
    manifest_path = out_dir / "pool.json"
    pool.save(manifest_path)
    return {
        "pool_manifest": str(manifest_path),
        "pool_id": pool.pool_id,
        "size": pool.size,
        "dataset": str(dataset_path),
    }


def _top_ops_from_rank(rank_result: Mapping, top_n: int) -> list[OperatorConfig]:
    ranges = _ranges_from_rank(rank_result)
    ops = []
    for row in rank_result["rows"][:top_n]:
        op = row["op_name"]
        ops.append(
            OperatorConfig(
                op_name=op,
                keep_range=ranges[op][row["best_split"]],
            )
        )
    return ops


def _exec_pyramid(job: Job, ctx: _Context, out_dir: Path) -> dict:
    dataset_path = ctx.dataset_path_for(job)
    dataset = ctx.load_dataset(dataset_path)
    if "rank" in job.params:
        top_ops = _top_ops_from_rank(
            ctx.results[job.params["rank"]], int(job.params.get("top_n", 3))
        )
    else:
        top_ops = [OperatorConfig.from_dict(d) for d in job.params["ops"]]
    result = build_pyramid(dataset, top_ops)
    manifests = {}
    for pool_id, pool in sorted(result.pools.items()):
        manifest_path = out_dir / f"pool_{pool_id.replace('+', '_')}.json"
        pool.save(manifest_path)
        manifests[pool_id] = str(manifest_path)
    (out_dir / "pyramid.json").write_text(
        json.dumps(result.spec.to_dict(), sort_keys=True, indent=2) + "\n", "utf-8"
    )
    return {
        "spec": result.spec.to_dict(),
        "manifests": manifests,
        "dataset": str(dataset_path),
    }


def _load_pyramid(pyramid_result: Mapping) -> PyramidResult:
    pools = {
        pool_id: DataPool.load(path)
        for pool_id, path in pyramid_result["manifests"].items()
    }
    spec_raw = pyramid_result["spec"]
    spec = PyramidSpec(
        top_ops=tuple(spec_raw["top_ops"]),
        pool_ids_by_level={
            int(level): tuple(ids) for level, ids in spec_raw["levels"].items()
        },
        sizes=dict(spec_raw["sizes"]),
    )
    return PyramidResult(spec=spec, pools=pools)


def _exec_schedule(job: Job, ctx: _Context, out_dir: Path) -> dict:
    pyramid_result = ctx.results[job.params["pyramid"]]
    pyramid = _load_pyramid(pyramid_result)
    dataset_path = pyramid_result["dataset"]
    schedule = schedule_compute(
        pyramid,
        expansion_rate=int(job.params["k"]),
        mode=job.params.get("mode", "repetitive"),
        seed=ctx.plan.seed,
    )
    (out_dir / "schedule.json").write_text(
        json.dumps(schedule.to_dict(), sort_keys=True, indent=2) + "\n", "utf-8"
    )
    stream_ids = materialize_schedule(schedule, pyramid.pools)
    distinct = tuple(dict.fromkeys(stream_ids))
    if schedule.mode == "repetitive":
        merged = pyramid.top_pool()
    else:
        merged = DataPool(
            pool_id=f"schedule_k{schedule.expansion_rate}",
            sample_ids=distinct,
            provenance=(
                ProvenanceStep(op_name="exact_dedup", keep_range=KeepRange.unbounded()),
            ),
            split_label="composed",
            declared_size=len(distinct),
            pyramid_level=1,
        )
    manifest_path = out_dir / "pool.json"
    merged.save(manifest_path)
    (out_dir / "stream.ids").write_text(
        "".join(sid + "\n" for sid in stream_ids), "utf-8"
    )
    return {
        **schedule.to_dict(),
        "pool_manifest": str(manifest_path),
        "pool_id": merged.pool_id,
        "dataset": str(dataset_path),
        "trained_samples": schedule.total_samples,
    }


def _exec_schedule_trial(job: Job, ctx: _Context, out_dir: Path) -> dict:
    schedule_result = ctx.results[job.params["schedule"]]
    pool = DataPool.load(schedule_result["pool_manifest"])
    dataset = ctx.load_dataset(schedule_result["dataset"])
    adapter = _adapter_for(job, ctx)
    inputs = TrialInputs(
        dataset=dataset,
        pool=pool,
        dataset_path=schedule_result["dataset"],
        pool_manifest_path=schedule_result["pool_manifest"],
        hyperparams=job.params.get("hyperparams") or {},
        seed=ctx.plan.seed,
        out_dir=out_dir,
    )
    output = adapter.run_trial(inputs)
    # trained-sample count reflects the schedule, including repetition
    metrics = MetricVector(
        metrics=output.metrics.metrics,
        trained_samples=int(schedule_result["trained_samples"]),
        wall_time=output.metrics.wall_time,
    )
    metrics_path = out_dir / "metrics.json"
    metrics_path.write_text(json.dumps(metrics.to_dict(), sort_keys=True) + "\n", "utf-8")
    return {
        **metrics.to_dict(),
        "pool_id": pool.pool_id,
        "k": schedule_result["k"],
        "mode": schedule_result["mode"],
        "baseline": bool(job.params.get("baseline", False)),
        "aborted": False,
    }


def _exec_report(job: Job, ctx: _Context, out_dir: Path) -> dict:
    return reports.build_bundle(job, ctx, out_dir)


_EXECUTORS: dict[str, Callable[[Job, _Context, Path], dict]] = {
    "compute_stats": _exec_compute_stats,
    "build_pool": _exec_build_pool,
    "trial": _exec_trial,
    "rank": _exec_rank,
    "sweep_rank": _exec_sweep_rank,
    "correlate": _exec_correlate,
    "propose": _exec_propose,
    "compose": _exec_compose,
    "pyramid": _exec_pyramid,
    "schedule": _exec_schedule,
    "schedule_trial": _exec_schedule_trial,
    "report": _exec_report,
}


# --- the runner -------------------------------------------------------------


def _now() -> str:
    return time.strftime("%Y-%m-%dT%H:%M:%S", time.gmtime()) + f".{int(time.time() * 1e6) % 1_000_000:06d}Z"


class _JobFailure(Exception):
    pass


def run(plan: WorkflowPlan, resume: bool = False) -> RunLedger:
    """Execute the plan phase by phase, parallel within a phase.

    Every job gets a ledger entry. A failed job halts its dependents
    (recorded as skipped) but unrelated jobs continue. With ``resume``,
    jobs whose input digest matches a completed ledger entry are not
    re-executed; their recorded artifacts and results are reused.
    """
    workdir = plan.workdir
    workdir.mkdir(parents=True, exist_ok=True)
    (workdir / "jobs").mkdir(exist_ok=True)
    ledger_path = workdir / "ledger.jsonl"
    previous: dict[str, LedgerEntry] = {}
    if resume and ledger_path.exists():
        previous = RunLedger.load(ledger_path).completed()
    elif ledger_path.exists():
        raise ConfigError(
            f"ledger already exists at {ledger_path}; pass resume=True or use a fresh workdir"
        )
    ledger = RunLedger(path=ledger_path)
    ctx = _Context(plan, ledger)
    hooks = [HOOKS[name] for name in plan.hooks]

    failed: set[str] = set()

    def fire(event: str, job: Job) -> None:
        for hook in hooks:
            hook(event, job, ledger)

    def run_job(job: Job) -> None:
        started = _now()
        input_digest = _input_digest(job, ctx)
        job_dir = ctx.job_dir(job.job_id)
        prior = previous.get(job.job_id)
        if (
            prior is not None
            and prior.input_digest == input_digest
            and job_dir.is_dir()
        ):
            result = json.loads((job_dir / "result.json").read_text("utf-8"))
            ctx.results[job.job_id] = result
            ctx.output_digests[job.job_id] = prior.output_digest or ""
            ledger.append(
                LedgerEntry(
                    job_id=job.job_id,
                    job_kind=job.kind,
                    input_digest=input_digest,
                    output_digest=prior.output_digest,
                    status="skipped",
                    seed=plan.seed,
                    started_at=started,
                    finished_at=_now(),
                    note="resume: input digest matched completed entry",
                )
            )
            return

        fire("pre_job", job)
        staging = workdir / "jobs" / f".staging-{job.job_id}"
        if staging.exists():
            shutil.rmtree(staging)
        staging.mkdir(parents=True)
        try:
            result = _EXECUTORS[job.kind](job, ctx, staging)
        except Exception as exc:
            shutil.rmtree(staging, ignore_errors=True)
            logger.warning("job %s failed: %s: %s", job.job_id, type(exc).__name__, exc)
            ledger.append(
                LedgerEntry(
                    job_id=job.job_id,
                    job_kind=job.kind,
                    input_digest=input_digest,
                    output_digest=None,
                    status="failed",
                    seed=plan.seed,
                    started_at=started,
                    finished_at=_now(),
                    note=f"{type(exc).__name__}: {exc}",
                )
            )
            fire("post_job", job)
            raise _JobFailure(job.job_id) from exc

        # results reference files inside the staging dir; fix paths to the
        # final location before persisting
        final = json.loads(
            json.dumps(result).replace(str(staging), str(job_dir))
        )
        (staging / "result.json").write_text(
            json.dumps(final, sort_keys=True, indent=2) + "\n", "utf-8"
        )
        if job_dir.exists():
            shutil.rmtree(job_dir)
        staging.replace(job_dir)
        output_digest = _dir_digest(job_dir)
        ctx.results[job.job_id] = final
        ctx.output_digests[job.job_id] = output_digest
        status = "aborted" if final.get("aborted") else "completed"
        note = "early stop: partial metric below baseline margin" if final.get("aborted") else None
        ledger.append(
            LedgerEntry(
                job_id=job.job_id,
                job_kind=job.kind,
                input_digest=input_digest,
                output_digest=output_digest,
                status=status,
                seed=plan.seed,
                started_at=started,
                finished_at=_now(),
                note=note,
            )
        )
        fire("post_job", job)

    for phase in PHASES:
        jobs = list(plan.phases[phase])
        if not jobs:
            continue
        in_phase = {job.job_id for job in jobs}
        pending = {job.job_id: job for job in jobs}
        done: set[str] = set()
        with ThreadPoolExecutor(max_workers=plan.max_parallel) as executor:
            futures: dict = {}
            while pending or futures:
                progressed = False
                for job_id in list(pending):
                    job = pending[job_id]
                    failed_deps = [dep for dep in job.needs if dep in failed]
                    if failed_deps:
                        del pending[job_id]
                        failed.add(job_id)
                        progressed = True
                        ledger.append(
                            LedgerEntry(
                                job_id=job_id,
                                job_kind=job.kind,
                                input_digest="",
                                output_digest=None,
                                status="skipped",
                                seed=plan.seed,
                                started_at=_now(),
                                finished_at=_now(),
                                note=f"dependency failed: {failed_deps[0]}",
                            )
                        )
                        continue
                    # cross-phase deps already finished behind the phase
                    # barrier; only in-phase deps can still be outstanding
                    if all(dep in done for dep in job.needs if dep in in_phase):
                        del pending[job_id]
                        progressed = True
                        futures[executor.submit(run_job, job)] = job_id
                if futures:
                    finished, _ = wait(futures.keys(), return_when=FIRST_COMPLETED)
                    for future in finished:
                        job_id = futures.pop(future)
                        try:
                            future.result()
                            done.add(job_id)
                        except _JobFailure:
                            failed.add(job_id)
                elif not progressed:
                    # load_workflow rejects cycles, so this is unreachable;
                    # guard against livelock anyway
                    raise RuntimeError(f"stuck jobs in phase {phase}: {sorted(pending)}")
    return ledger


def job_result(workdir: str | Path, job_id: str) -> dict:
    """Read a completed job's persisted result."""
    path = Path(workdir) / "jobs" / job_id / "result.json"
    return json.loads(path.read_text(encoding="utf-8"))


# ---------------------------------------------------------------------------
# iterative workflows


@dataclass(frozen=True)
class IterationLink:
    iteration: int
    recipe: Mapping  # best op/split descriptor chosen by that iteration's ranking
    checkpoint_in: str | None
    checkpoint_out: str


@dataclass(frozen=True)
class IterationChain:
    links: tuple[IterationLink, ...]

    def __post_init__(self):
        for previous, current in zip(self.links, self.links[1:]):
            if current.checkpoint_in != previous.checkpoint_out:
                raise ValueError(
                    f"iteration {current.iteration} does not continue from "
                    f"iteration {previous.iteration}'s checkpoint"
                )


def run_iterative(config: Mapping, iterations: int) -> tuple[IterationChain, list[RunLedger]]:
    """Chain probe runs: each iteration ranks its pools, trains the best
    one starting from the previous iteration's checkpoint, and hands the
    new checkpoint to the next iteration.

    ``config`` is a workflow config whose probe phase holds exactly one
    probe job; per-iteration artifacts land under ``workdir/iter<N>``.
    """
    if iterations < 1:
        raise ValueError("iterations must be >= 1")
    base = dict(config)
    workdir = Path(base.get("workdir", ""))
    if not str(workdir):
        raise ConfigError("iterative run needs a workdir")
    phases = dict(base.get("phases") or {})
    probe_jobs = [j for j in (phases.get("probe") or []) if j.get("kind") == "probe"]
    if len(probe_jobs) != 1:
        raise ConfigError("iterative run needs exactly one probe job")
    probe_raw = dict(probe_jobs[0])
    probe_id = probe_raw["id"]
    trainer = (base.get("registries") or {}).get("factories", {}).get("trainer") or probe_raw[
        "params"
    ].get("trainer")
    trainer_params = dict(probe_raw["params"].get("trainer_params") or {})
    if iterations > 1:
        factory = TRAINER_FACTORIES[trainer]
        probe_adapter = factory({**trainer_params, "seed": int(base.get("seed", 0))})
        if not probe_adapter.supports_checkpoints:
            raise TrainerError(
                f"trainer {trainer!r} does not support checkpoints; "
                "cannot chain more than one iteration"
            )

    links: list[IterationLink] = []
    ledgers: list[RunLedger] = []
    checkpoint: str | None = None
    for iteration in range(1, iterations + 1):
        iter_dir = workdir / f"iter{iteration}"
        probe_job = json.loads(json.dumps(probe_raw))
        probe_job["params"]["checkpoint_in"] = checkpoint
        best_train = {
            "id": "best_train",
            "kind": "trial",
            "params": {
                "pool_from_rank": {"rank": f"{probe_id}.rank", "position": 0},
                "trainer": trainer,
                "trainer_params": trainer_params,
                "checkpoint_in": checkpoint,
                "want_checkpoint": True,
            },
            "needs": [f"{probe_id}.rank"],
        }
        iter_config = {
            **base,
            "workdir": str(iter_dir),
            "phases": {
                **phases,
                "probe": [probe_job],
                "execute": list(phases.get("execute") or []) + [best_train],
            },
        }
        plan = load_workflow(iter_config)
        ledgers.append(run(plan))
        rank = job_result(iter_dir, f"{probe_id}.rank")
        best_row = rank["rows"][0]
        trained = job_result(iter_dir, "best_train")
        checkpoint_out = trained.get("checkpoint_out")
        if not checkpoint_out:
            raise TrainerError(
                f"iteration {iteration}: trainer produced no checkpoint; cannot continue chain"
            )
        links.append(
            IterationLink(
                iteration=iteration,
                recipe={
                    "op": best_row["op_name"],
                    "split": best_row["best_split"],
                    "pool_id": trained["pool_id"],
                },
                checkpoint_in=checkpoint,
                checkpoint_out=checkpoint_out,
            )
        )
        checkpoint = checkpoint_out
    return IterationChain(links=tuple(links)), ledgers


def run_sweep(
    trial_template: Mapping,
    grid: Sequence[Mapping],
    *,
    workdir: str | Path,
    seed: int = 0,
    max_parallel: int = 1,
    baseline_index: int = 0,
    resume: bool = False,
) -> RunLedger:
    """One trial per unique grid point plus a ranking against the grid's
    designated baseline point; duplicates are dropped with a warning.

    ``trial_template`` carries the pool reference (``pool_manifest`` +
    ``dataset``) and trainer settings shared by every point.
    """
    if not grid:
        raise ValueError("parameter grid must not be empty")
    config = {
        "workdir": str(workdir),
        "seed": seed,
        "max_parallel": max_parallel,
        "registries": {"factories": {"trainer": trial_template.get("trainer", "synthetic")}},
        "phases": {
            "execute": [
                {
                    "id": "sweep",
                    "kind": "sweep",
                    "params": {
                        **dict(trial_template),
                        "grid": [dict(point) for point in grid],
                        "baseline_index": baseline_index,
                    },
                }
            ]
        },
    }
    return run(load_workflow(config), resume=resume)
