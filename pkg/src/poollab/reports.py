"""Machine-readable report emission.

Every file is byte-deterministic given the same inputs: UTF-8 CSV with a
header row and '.' decimals, JSON with sorted keys, and a bundle index
whose digests let downstream consumers verify integrity.
"""

from __future__ import annotations

import csv
import hashlib
import json
from pathlib import Path
from typing import Iterable, Mapping, Sequence

from .analysis import OpRankRow, TrialResult, diversity_report, rank_from_trials, relative_improvement
from .core import CostParams, DataPool, HoeffdingParams, MetricVector
from .cost import breakeven, hoeffding_bound


def _write_csv(path: Path, header: Sequence[str], rows: Iterable[Sequence]) -> Path:
    with Path(path).open("w", encoding="utf-8", newline="") as handle:
        writer = csv.writer(handle, lineterminator="\n")
        writer.writerow(header)
        for row in rows:
            writer.writerow(row)
    return Path(path)


def write_ranking_csv(rows: Sequence[OpRankRow], path: str | Path) -> Path:
    return _write_csv(
        Path(path),
        ("op", "low", "mid", "high", "best_split", "best_value"),
        (
            (r.op_name, r.low, r.mid, r.high, r.best_split, r.best_value)
            for r in rows
        ),
    )


def emit_ranking(trials: Sequence[TrialResult], path: str | Path) -> Path:
    """Rank trials against their baseline and write the table."""
    rows = rank_from_trials(trials)
    return write_ranking_csv(rows, path)


def emit_scaling_curve(
    points: Sequence[tuple[float, MetricVector]],
    baseline: MetricVector | None,
    path: str | Path,
) -> Path:
    """CSV of (expansion rate k, relative improvement %), ordered by k.

    An empty point list produces a header-only file.
    """
    rows = []
    for k, metrics in sorted(points, key=lambda kv: kv[0]):
        if baseline is None:
            raise ValueError("scaling curve needs a baseline metric vector")
        rows.append((k, relative_improvement(metrics, baseline)))
    return _write_csv(Path(path), ("k", "improvement_pct"), rows)


def write_correlation_csv(matrix, path: str | Path) -> Path:
    header = ("label", *matrix.labels)
    rows = (
        (label, *matrix.values[i])
        for i, label in enumerate(matrix.labels)
    )
    return _write_csv(Path(path), header, rows)


def write_sweep_csv(rows: Sequence[Mapping], path: str | Path) -> Path:
    return _write_csv(
        Path(path),
        ("point", "hyperparams", "improvement_pct", "baseline"),
        (
            (
                r["point"],
                json.dumps(r["hyperparams"], sort_keys=True),
                r["improvement_pct"],
                r["baseline"],
            )
            for r in rows
        ),
    )


def cost_report(
    cost: CostParams, hoeffding: HoeffdingParams | None = None
) -> dict:
    comparison = breakeven(cost)
    payload = comparison.to_dict()
    if hoeffding is not None:
        payload["hoeffding"] = {
            "epsilon": hoeffding.epsilon,
            "range": [hoeffding.a, hoeffding.b],
            "bound": hoeffding_bound(hoeffding),
        }
    return payload


def _file_digest(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def write_bundle_index(bundle_dir: str | Path) -> Path:
    """Index every bundle file with its digest; written last."""
    bundle_dir = Path(bundle_dir)
    files = {}
    for file in sorted(p for p in bundle_dir.rglob("*") if p.is_file()):
        rel = str(file.relative_to(bundle_dir))
        if rel in ("index.json", "result.json"):
            continue
        files[rel] = _file_digest(file)
    index_path = bundle_dir / "index.json"
    index_path.write_text(
        json.dumps({"files": files}, sort_keys=True, indent=2) + "\n", "utf-8"
    )
    return index_path


def verify_bundle(bundle_dir: str | Path) -> list[str]:
    """Names of bundle files whose digest no longer matches the index."""
    bundle_dir = Path(bundle_dir)
    index = json.loads((bundle_dir / "index.json").read_text("utf-8"))
    stale = []
    for rel, digest in index["files"].items():
        file = bundle_dir / rel
        if not file.is_file() or _file_digest(file) != digest:
            stale.append(rel)
    return stale


def build_bundle(job, ctx, out_dir: Path) -> dict:
    """Assemble the report bundle for an orchestrator report job.

    Recognized params: ``rankings`` (rank job ids), ``scaling``
    (``{baseline: trial id, points: [{k?, trial: id}]}``), ``diversity``
    (``{pools: [pool job ids], top_n?}``), ``cost`` (CostParams plus
    optional epsilon/a/b), ``sweeps`` (sweep_rank job ids),
    ``correlations`` (correlate job ids).
    """
    out_dir = Path(out_dir)
    written: list[str] = []

    for rank_id in job.params.get("rankings") or []:
        source = ctx.results[rank_id]["ranking_csv"]
        target = out_dir / f"ranking_{rank_id.replace('.', '_')}.csv"
        target.write_bytes(Path(source).read_bytes())
        written.append(target.name)

    scaling = job.params.get("scaling")
    if scaling:
        baseline = MetricVector.from_dict(ctx.results[scaling["baseline"]])
        points = []
        for point in scaling["points"]:
            result = ctx.results[point["trial"]]
            k = point.get("k", result.get("k"))
            points.append((float(k), MetricVector.from_dict(result)))
        emit_scaling_curve(points, baseline, out_dir / "scaling.csv")
        written.append("scaling.csv")

    diversity = job.params.get("diversity")
    if diversity:
        for pool_job in diversity.get("pools") or []:
            result = ctx.results[pool_job]
            pool = DataPool.load(result["pool_manifest"])
            dataset = ctx.load_dataset(result["dataset"])
            texts = (dataset.by_id(sid).text for sid in pool.sample_ids)
            report = diversity_report(texts, top_n=int(diversity.get("top_n", 50)))
            target = out_dir / f"diversity_{pool_job.replace('.', '_')}.json"
            target.write_text(json.dumps(report, sort_keys=True, indent=2) + "\n", "utf-8")
            written.append(target.name)

    cost_params = job.params.get("cost")
    if cost_params:
        cost = CostParams(
            T_full=float(cost_params.get("T_full", 1.0)),
            r=float(cost_params["r"]),
            M=int(cost_params["M"]),
            m=int(cost_params["m"]),
        )
        hoeffding = None
        if "epsilon" in cost_params:
            hoeffding = HoeffdingParams(
                epsilon=float(cost_params["epsilon"]),
                a=float(cost_params.get("a", 0.0)),
                b=float(cost_params.get("b", 1.0)),
            )
        (out_dir / "cost.json").write_text(
            json.dumps(cost_report(cost, hoeffding), sort_keys=True, indent=2) + "\n",
            "utf-8",
        )
        written.append("cost.json")

    for sweep_id in job.params.get("sweeps") or []:
        source = ctx.results[sweep_id]["sweep_csv"]
        target = out_dir / f"sweep_{sweep_id.replace('.', '_')}.csv"
        target.write_bytes(Path(source).read_bytes())
        written.append(target.name)

    for corr_id in job.params.get("correlations") or []:
        source = ctx.results[corr_id]["correlation_csv"]
        target = out_dir / f"correlation_{corr_id.replace('.', '_')}.csv"
        target.write_bytes(Path(source).read_bytes())
        written.append(target.name)

    write_bundle_index(out_dir)
    written.append("index.json")
    return {"bundle_dir": str(out_dir), "files": sorted(written)}
