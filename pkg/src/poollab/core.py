"""Domain types shared by every stage: samples, datasets, pools, recipes,
metrics, cost parameters and the run ledger.

All types are immutable values after construction; "mutation" happens by
building new values (e.g. :meth:`Sample.with_stats`). File formats:

* dataset: JSON Lines, one sample per line
  ``{"id": str, "text": str, "media": {modality: path}?, "stats": {name: num}?}``
* pool manifest: JSON ``{pool_id, split_label, provenance: [...],
  sample_ids_file, declared_size, pyramid_level}`` with the id list stored
  one-per-line in a sibling file
* run ledger: append-only JSON Lines, one entry per job
"""

from __future__ import annotations

import hashlib
import json
import math
import os
import threading
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Iterator, Mapping, Sequence

from .errors import DatasetIOError

SPLIT_LABELS = ("low", "mid", "high", "random", "composed")
RECIPE_STRATEGIES = ("top-k", "cluster-representative", "manual")


def _check_finite(name: str, value: float) -> float:
    if not math.isfinite(value):
        raise ValueError(f"{name} must be finite, got {value!r}")
    return float(value)


def sha256_hex(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()


def canonical_json(obj) -> str:
    """Stable JSON encoding used for digests and on-disk artifacts."""
    return json.dumps(obj, sort_keys=True, ensure_ascii=False, separators=(",", ":"))


# ---------------------------------------------------------------------------
# samples and datasets


@dataclass(frozen=True)
class Sample:
    """One corpus record: text plus optional media paths and a stats map.

    ``stats`` may be empty before probing; every recorded value must be a
    finite real. Media values are opaque paths handed to external
    scorers/trainers, never parsed here.
    """

    id: str
    text: str
    media: Mapping[str, str] | None = None
    stats: Mapping[str, float] = field(default_factory=dict)

    def __post_init__(self):
        if not isinstance(self.id, str) or not self.id:
            raise ValueError("sample id must be a non-empty string")
        object.__setattr__(self, "stats", dict(self.stats))
        if self.media is not None:
            object.__setattr__(self, "media", dict(self.media))

    def with_stats(self, new_stats: Mapping[str, float]) -> "Sample":
        """Return a copy with ``new_stats`` merged over the existing map."""
        merged = dict(self.stats)
        for name, value in new_stats.items():
            merged[name] = _check_finite(f"stat {name!r}", value)
        return Sample(id=self.id, text=self.text, media=self.media, stats=merged)

    def without_stats(self, names: Iterable[str]) -> "Sample":
        drop = set(names)
        kept = {k: v for k, v in self.stats.items() if k not in drop}
        return Sample(id=self.id, text=self.text, media=self.media, stats=kept)

    def with_text(self, text: str) -> "Sample":
        return Sample(id=self.id, text=text, media=self.media, stats=self.stats)

    def to_record(self) -> dict:
        record: dict = {"id": self.id, "text": self.text}
        if self.media is not None:
            record["media"] = dict(self.media)
        if self.stats:
            record["stats"] = dict(self.stats)
        return record

    @classmethod
    def from_record(cls, record: Mapping, fallback_id: str | None = None) -> "Sample":
        sample_id = record.get("id", fallback_id)
        if sample_id is None:
            raise DatasetIOError("record has no id and no fallback was provided")
        return cls(
            id=str(sample_id),
            text=record.get("text", ""),
            media=record.get("media"),
            stats=record.get("stats") or {},
        )


class Dataset:
    """An ordered collection of samples.

    Construction tolerates duplicate ids so that :func:`validate_dataset`
    can report them; operations that need unique ids check on use.
    """

    def __init__(self, samples: Iterable[Sample]):
        self._samples: tuple[Sample, ...] = tuple(samples)
        self._by_id: dict[str, Sample] | None = None
        self._digest: str | None = None

    def __len__(self) -> int:
        return len(self._samples)

    def __iter__(self) -> Iterator[Sample]:
        return iter(self._samples)

    def __getitem__(self, index: int) -> Sample:
        return self._samples[index]

    @property
    def samples(self) -> tuple[Sample, ...]:
        return self._samples

    def ids(self) -> list[str]:
        return [s.id for s in self._samples]

    def by_id(self, sample_id: str) -> Sample:
        if self._by_id is None:
            self._by_id = {s.id: s for s in self._samples}
        return self._by_id[sample_id]

    def subset(self, sample_ids: Sequence[str]) -> "Dataset":
        """Samples for the given ids, in the given order."""
        return Dataset(self.by_id(sid) for sid in sample_ids)

    def digest(self) -> str:
        if self._digest is None:
            h = hashlib.sha256()
            for sample in self._samples:
                h.update(canonical_json(sample.to_record()).encode("utf-8"))
                h.update(b"\n")
            self._digest = h.hexdigest()
        return self._digest

    @classmethod
    def from_jsonl(cls, path: str | os.PathLike) -> "Dataset":
        path = Path(path)
        try:
            raw = path.read_text(encoding="utf-8")
        except OSError as exc:
            raise DatasetIOError(f"cannot read dataset {path}: {exc}") from exc
        samples = []
        for lineno, line in enumerate(raw.splitlines()):
            if not line.strip():
                continue
            try:
                record = json.loads(line)
            except json.JSONDecodeError as exc:
                raise DatasetIOError(f"{path}:{lineno + 1}: invalid JSON: {exc}") from exc
            # ids assigned as zero-padded record indices when absent
            samples.append(Sample.from_record(record, fallback_id=f"{lineno:08d}"))
        return cls(samples)

    def to_jsonl(self, path: str | os.PathLike) -> None:
        path = Path(path)
        with path.open("w", encoding="utf-8") as handle:
            for sample in self._samples:
                handle.write(canonical_json(sample.to_record()))
                handle.write("\n")


@dataclass(frozen=True)
class ValidationReport:
    sample_count: int
    duplicate_ids: tuple[str, ...]
    non_finite_stats: tuple[tuple[str, str], ...]  # (sample id, stat name)
    empty_texts: tuple[str, ...]

    @property
    def valid(self) -> bool:
        return not (self.duplicate_ids or self.non_finite_stats or self.empty_texts)

    def to_dict(self) -> dict:
        return {
            "sample_count": self.sample_count,
            "duplicate_ids": list(self.duplicate_ids),
            "non_finite_stats": [list(pair) for pair in self.non_finite_stats],
            "empty_texts": list(self.empty_texts),
            "valid": self.valid,
        }


def validate_dataset(dataset: Dataset) -> ValidationReport:
    """Report duplicate ids, non-finite stats and empty texts.

    Findings are reported, not raised; I/O failures surface earlier, at
    load time, as :class:`DatasetIOError`.
    """
    seen: set[str] = set()
    duplicates: list[str] = []
    non_finite: list[tuple[str, str]] = []
    empty: list[str] = []
    for sample in dataset:
        if sample.id in seen:
            duplicates.append(sample.id)
        seen.add(sample.id)
        if not sample.text:
            empty.append(sample.id)
        for name, value in sample.stats.items():
            if not (isinstance(value, (int, float)) and math.isfinite(value)):
                non_finite.append((sample.id, name))
    return ValidationReport(
        sample_count=len(dataset),
        duplicate_ids=tuple(duplicates),
        non_finite_stats=tuple(non_finite),
        empty_texts=tuple(empty),
    )


# ---------------------------------------------------------------------------
# keep ranges, operator configs, recipes


@dataclass(frozen=True)
class KeepRange:
    """Closed interval [lo, hi] over a statistic value.

    Unbounded ends use +/-inf and serialize to JSON null.
    """

    lo: float
    hi: float

    def __post_init__(self):
        if math.isnan(self.lo) or math.isnan(self.hi):
            raise ValueError("keep range bounds must not be NaN")
        if self.lo > self.hi:
            raise ValueError(f"keep range lo > hi: [{self.lo}, {self.hi}]")

    def contains(self, value: float) -> bool:
        return self.lo <= value <= self.hi

    def to_json(self) -> list:
        return [
            None if math.isinf(self.lo) else self.lo,
            None if math.isinf(self.hi) else self.hi,
        ]

    @classmethod
    def from_json(cls, pair: Sequence) -> "KeepRange":
        lo, hi = pair
        return cls(
            lo=float("-inf") if lo is None else float(lo),
            hi=float("inf") if hi is None else float(hi),
        )

    @classmethod
    def unbounded(cls) -> "KeepRange":
        return cls(float("-inf"), float("inf"))


@dataclass(frozen=True)
class OperatorConfig:
    """One operator with params and a frozen keep range.

    ``keep_range`` may be None while a recipe is still being shaped; any
    attempt to apply such a config is rejected.
    """

    op_name: str
    params: Mapping = field(default_factory=dict)
    keep_range: KeepRange | None = None

    def __post_init__(self):
        object.__setattr__(self, "params", dict(self.params))

    def to_dict(self) -> dict:
        return {
            "op_name": self.op_name,
            "params": dict(self.params),
            "keep_range": None if self.keep_range is None else self.keep_range.to_json(),
        }

    @classmethod
    def from_dict(cls, data: Mapping) -> "OperatorConfig":
        keep = data.get("keep_range")
        return cls(
            op_name=data["op_name"],
            params=data.get("params") or {},
            keep_range=None if keep is None else KeepRange.from_json(keep),
        )


@dataclass(frozen=True)
class Recipe:
    """Ordered operator configs applied as composed filters."""

    ops: tuple[OperatorConfig, ...]
    origin_strategy: str = "manual"

    def __post_init__(self):
        object.__setattr__(self, "ops", tuple(self.ops))
        if len(self.ops) < 1:
            raise ValueError("a recipe needs at least one operator")
        names = [op.op_name for op in self.ops]
        if len(set(names)) != len(names):
            raise ValueError(f"duplicate op names in recipe: {names}")
        if self.origin_strategy not in RECIPE_STRATEGIES:
            raise ValueError(f"unknown origin strategy {self.origin_strategy!r}")

    @property
    def op_names(self) -> tuple[str, ...]:
        return tuple(op.op_name for op in self.ops)

    def to_dict(self) -> dict:
        return {
            "ops": [op.to_dict() for op in self.ops],
            "origin_strategy": self.origin_strategy,
        }

    @classmethod
    def from_dict(cls, data: Mapping) -> "Recipe":
        return cls(
            ops=tuple(OperatorConfig.from_dict(d) for d in data["ops"]),
            origin_strategy=data.get("origin_strategy", "manual"),
        )


# ---------------------------------------------------------------------------
# pools


@dataclass(frozen=True)
class ProvenanceStep:
    op_name: str
    keep_range: KeepRange
    params: Mapping = field(default_factory=dict)

    def __post_init__(self):
        object.__setattr__(self, "params", dict(self.params))

    def to_dict(self) -> dict:
        return {
            "op_name": self.op_name,
            "keep_range": self.keep_range.to_json(),
            "params": dict(self.params),
        }

    @classmethod
    def from_dict(cls, data: Mapping) -> "ProvenanceStep":
        return cls(
            op_name=data["op_name"],
            keep_range=KeepRange.from_json(data["keep_range"]),
            params=data.get("params") or {},
        )


def _valid_split_label(label: str) -> bool:
    # low/mid/high for the default three buckets; mid_1..mid_k when the
    # bucket count is configured away from 3
    if label in SPLIT_LABELS:
        return True
    return label.startswith("mid_") and label[4:].isdigit()


@dataclass(frozen=True)
class DataPool:
    """A materialized subset of a dataset with provenance."""

    pool_id: str
    sample_ids: tuple[str, ...]
    provenance: tuple[ProvenanceStep, ...]
    split_label: str
    declared_size: int
    pyramid_level: int | None = None

    def __post_init__(self):
        object.__setattr__(self, "sample_ids", tuple(self.sample_ids))
        object.__setattr__(self, "provenance", tuple(self.provenance))
        if not _valid_split_label(self.split_label):
            raise ValueError(f"unknown split label {self.split_label!r}")
        if len(set(self.sample_ids)) != len(self.sample_ids):
            raise ValueError(f"pool {self.pool_id}: duplicate sample ids")
        if (self.split_label == "random") != (len(self.provenance) == 0):
            raise ValueError(
                f"pool {self.pool_id}: provenance must be empty exactly for random pools"
            )
        if self.split_label == "composed" and self.pyramid_level is not None:
            if self.pyramid_level != len(self.provenance):
                raise ValueError(
                    f"pool {self.pool_id}: pyramid_level {self.pyramid_level} != "
                    f"provenance length {len(self.provenance)}"
                )

    @property
    def size(self) -> int:
        return len(self.sample_ids)

    @property
    def is_short(self) -> bool:
        return self.size < self.declared_size

    def content_digest(self) -> str:
        """Order-invariant digest of the pool's membership."""
        h = hashlib.sha256()
        for sid in sorted(self.sample_ids):
            h.update(sid.encode("utf-8"))
            h.update(b"\x00")
        return h.hexdigest()

    def manifest_dict(self, sample_ids_file: str) -> dict:
        return {
            "pool_id": self.pool_id,
            "split_label": self.split_label,
            "provenance": [step.to_dict() for step in self.provenance],
            "sample_ids_file": sample_ids_file,
            "declared_size": self.declared_size,
            "pyramid_level": self.pyramid_level,
        }

    def save(self, manifest_path: str | os.PathLike) -> None:
        """Write the manifest JSON plus a sibling ``<pool_id>.ids`` file."""
        manifest_path = Path(manifest_path)
        ids_name = manifest_path.stem + ".ids"
        ids_path = manifest_path.parent / ids_name
        ids_path.write_text("".join(sid + "\n" for sid in self.sample_ids), encoding="utf-8")
        manifest_path.write_text(
            json.dumps(self.manifest_dict(ids_name), indent=2, sort_keys=True) + "\n",
            encoding="utf-8",
        )

    @classmethod
    def load(cls, manifest_path: str | os.PathLike) -> "DataPool":
        manifest_path = Path(manifest_path)
        try:
            manifest = json.loads(manifest_path.read_text(encoding="utf-8"))
        except (OSError, json.JSONDecodeError) as exc:
            raise DatasetIOError(f"cannot read pool manifest {manifest_path}: {exc}") from exc
        ids_path = manifest_path.parent / manifest["sample_ids_file"]
        try:
            ids = [line for line in ids_path.read_text(encoding="utf-8").splitlines() if line]
        except OSError as exc:
            raise DatasetIOError(f"cannot read sample id list {ids_path}: {exc}") from exc
        return cls(
            pool_id=manifest["pool_id"],
            sample_ids=tuple(ids),
            provenance=tuple(ProvenanceStep.from_dict(d) for d in manifest["provenance"]),
            split_label=manifest["split_label"],
            declared_size=manifest["declared_size"],
            pyramid_level=manifest.get("pyramid_level"),
        )


# ---------------------------------------------------------------------------
# metrics


@dataclass(frozen=True)
class MetricVector:
    """Evaluation scores for one trained trial."""

    metrics: Mapping[str, float]
    trained_samples: int = 0
    wall_time: float = 0.0

    def __post_init__(self):
        if not self.metrics:
            raise ValueError("metric map must be non-empty")
        checked = {}
        for name, value in self.metrics.items():
            checked[name] = _check_finite(f"metric {name!r}", value)
        object.__setattr__(self, "metrics", checked)
        if self.trained_samples < 0:
            raise ValueError("trained_samples must be >= 0")

    def mean(self) -> float:
        return sum(self.metrics.values()) / len(self.metrics)

    def to_dict(self) -> dict:
        return {
            "metrics": dict(self.metrics),
            "trained_samples": self.trained_samples,
            "wall_time_s": self.wall_time,
        }

    @classmethod
    def from_dict(cls, data: Mapping) -> "MetricVector":
        return cls(
            metrics=data["metrics"],
            trained_samples=int(data.get("trained_samples", 0)),
            wall_time=float(data.get("wall_time_s", 0.0)),
        )


# ---------------------------------------------------------------------------
# cost parameters


@dataclass(frozen=True)
class CostParams:
    """Inputs to the break-even comparison between full-scale iteration and
    many small-pool experiments."""

    T_full: float
    r: float
    M: int
    m: int

    def __post_init__(self):
        if self.T_full <= 0:
            raise ValueError("T_full must be positive")
        if not (0 < self.r <= 1):
            raise ValueError("r must lie in (0, 1]")
        if self.M < 1:
            raise ValueError("M must be >= 1")
        if self.m < 0:
            raise ValueError("m must be >= 0")

    @property
    def T_pool(self) -> float:
        return self.r * self.T_full

    def to_dict(self) -> dict:
        return {"T_full": self.T_full, "r": self.r, "M": self.M, "m": self.m}

    @classmethod
    def from_dict(cls, data: Mapping) -> "CostParams":
        return cls(
            T_full=float(data["T_full"]), r=float(data["r"]),
            M=int(data["M"]), m=int(data["m"]),
        )


@dataclass(frozen=True)
class HoeffdingParams:
    """Deviation bound inputs: tolerance epsilon and the [a, b] range of the
    small-pool performance change."""

    epsilon: float
    a: float
    b: float

    def __post_init__(self):
        if self.epsilon < 0:
            raise ValueError("epsilon must be >= 0")
        if self.a > self.b:
            raise ValueError("range must satisfy a <= b")
        if self.b == self.a and self.epsilon > 0:
            raise ValueError("degenerate range a == b with epsilon > 0 has no finite bound")

    def to_dict(self) -> dict:
        return {"epsilon": self.epsilon, "a": self.a, "b": self.b}

    @classmethod
    def from_dict(cls, data: Mapping) -> "HoeffdingParams":
        return cls(epsilon=float(data["epsilon"]), a=float(data["a"]), b=float(data["b"]))


# ---------------------------------------------------------------------------
# run ledger


@dataclass(frozen=True)
class LedgerEntry:
    job_id: str
    job_kind: str
    input_digest: str
    output_digest: str | None
    status: str  # completed | failed | skipped | aborted
    seed: int
    started_at: str
    finished_at: str | None = None
    note: str | None = None

    def to_dict(self) -> dict:
        return {
            "job_id": self.job_id,
            "job_kind": self.job_kind,
            "input_digest": self.input_digest,
            "output_digest": self.output_digest,
            "status": self.status,
            "seed": self.seed,
            "started_at": self.started_at,
            "finished_at": self.finished_at,
            "note": self.note,
        }

    @classmethod
    def from_dict(cls, data: Mapping) -> "LedgerEntry":
        return cls(
            job_id=data["job_id"],
            job_kind=data["job_kind"],
            input_digest=data["input_digest"],
            output_digest=data.get("output_digest"),
            status=data["status"],
            seed=int(data.get("seed", 0)),
            started_at=data.get("started_at", ""),
            finished_at=data.get("finished_at"),
            note=data.get("note"),
        )


class RunLedger:
    """Append-only record of every job; one JSON line per entry.

    Appends are serialized through a lock so concurrent job executors can
    share one ledger. A job id may appear once per run; replays append a
    fresh entry rather than rewriting history.
    """

    def __init__(self, path: str | os.PathLike | None = None):
        self.path = Path(path) if path is not None else None
        self._entries: list[LedgerEntry] = []
        self._lock = threading.Lock()

    @property
    def entries(self) -> tuple[LedgerEntry, ...]:
        return tuple(self._entries)

    def append(self, entry: LedgerEntry) -> None:
        with self._lock:
            for existing in self._entries:
                if existing.job_id == entry.job_id and existing.status == entry.status:
                    raise ValueError(f"duplicate ledger entry for job {entry.job_id!r}")
            self._entries.append(entry)
            if self.path is not None:
                with self.path.open("a", encoding="utf-8") as handle:
                    handle.write(canonical_json(entry.to_dict()) + "\n")

    def completed(self) -> dict[str, LedgerEntry]:
        return {e.job_id: e for e in self._entries if e.status == "completed"}

    def by_kind(self, kind: str) -> list[LedgerEntry]:
        return [e for e in self._entries if e.job_kind == kind]

    @classmethod
    def load(cls, path: str | os.PathLike) -> "RunLedger":
        path = Path(path)
        ledger = cls(path=None)
        if path.exists():
            for line in path.read_text(encoding="utf-8").splitlines():
                if line.strip():
                    ledger._entries.append(LedgerEntry.from_dict(json.loads(line)))
        ledger.path = path
        return ledger
