"""Command-line entry points: run, report, cost, validate."""

from __future__ import annotations

import json
import logging
import os
import sys
from pathlib import Path

import click

from . import orchestrator, reports
from .core import CostParams, Dataset, HoeffdingParams, validate_dataset
from .errors import ConfigError, DatasetIOError

EXIT_OK = 0
EXIT_FAILURE = 1
EXIT_CONFIG = 2


@click.group()
@click.option("--verbose", is_flag=True, help="Log job progress to stderr.")
def main(verbose: bool) -> None:
    """Data-pool probing, recipe refinement and cheap reference trials."""
    logging.basicConfig(
        level=logging.INFO if verbose else logging.WARNING,
        format="%(levelname)s %(name)s: %(message)s",
        stream=sys.stderr,
    )


@main.command()
@click.argument("config", type=click.Path(exists=True, dir_okay=False))
@click.option("--workdir", type=click.Path(), default=None, help="Override the config workdir.")
@click.option("--seed", type=int, default=None, help="Override the config seed.")
@click.option("--max-parallel", type=int, default=None, help="Override job parallelism.")
@click.option("--resume", is_flag=True, help="Skip jobs already completed with matching inputs.")
def run(config: str, workdir: str | None, seed: int | None, max_parallel: int | None, resume: bool):
    """Execute a workflow config."""
    workdir = workdir or os.environ.get("SANDBOX_WORKDIR")
    overrides = {"workdir": workdir, "seed": seed, "max_parallel": max_parallel}
    try:
        plan = orchestrator.load_workflow(config, overrides=overrides)
        ledger = orchestrator.run(plan, resume=resume)
    except ConfigError as exc:
        click.echo(f"config error: {exc}", err=True)
        sys.exit(EXIT_CONFIG)
    counts: dict[str, int] = {}
    for entry in ledger.entries:
        counts[entry.status] = counts.get(entry.status, 0) + 1
    summary = ", ".join(f"{status}={count}" for status, count in sorted(counts.items()))
    click.echo(f"{len(ledger.entries)} jobs ({summary}); ledger at {ledger.path}")
    for entry in ledger.entries:
        if entry.status == "failed":
            click.echo(f"FAILED {entry.job_id}: {entry.note}", err=True)
    sys.exit(EXIT_FAILURE if counts.get("failed") else EXIT_OK)


@main.command()
@click.argument("workdir", type=click.Path(exists=True, file_okay=False))
@click.option("--out", type=click.Path(), default=None, help="Copy bundles here (default: WORKDIR/reports).")
def report(workdir: str, out: str | None):
    """Verify and collect the report bundles of a completed run."""
    workdir_path = Path(workdir)
    out_dir = Path(out) if out else workdir_path / "reports"
    bundles = sorted(workdir_path.glob("jobs/*/index.json"))
    if not bundles:
        click.echo("no report bundles found (no jobs emitted an index.json)", err=True)
        sys.exit(EXIT_FAILURE)
    stale_any = False
    for index in bundles:
        bundle_dir = index.parent
        stale = reports.verify_bundle(bundle_dir)
        if stale:
            stale_any = True
            click.echo(f"STALE {bundle_dir.name}: {', '.join(stale)}", err=True)
            continue
        target = out_dir / bundle_dir.name
        target.mkdir(parents=True, exist_ok=True)
        for rel in json.loads(index.read_text("utf-8"))["files"]:
            (target / rel).parent.mkdir(parents=True, exist_ok=True)
            (target / rel).write_bytes((bundle_dir / rel).read_bytes())
        (target / "index.json").write_bytes(index.read_bytes())
        click.echo(f"ok {bundle_dir.name} -> {target}")
    sys.exit(EXIT_FAILURE if stale_any else EXIT_OK)


@main.command()
@click.option("--t-full", type=float, default=1.0, show_default=True, help="Full-scale training time units.")
@click.option("-r", "--pool-ratio", "ratio", type=float, required=True, help="Small-pool time as a fraction of full scale.")
@click.option("-m", "--experiments", type=int, required=True, help="Planned small-pool experiments.")
@click.option("-M", "--iterations", type=int, required=True, help="Full-scale iterations without the sandbox.")
@click.option("--epsilon", type=float, default=None, help="Deviation tolerance for the probability bound.")
@click.option("--range-a", type=float, default=0.0, show_default=True)
@click.option("--range-b", type=float, default=1.0, show_default=True)
def cost(t_full: float, ratio: float, experiments: int, iterations: int, epsilon: float | None, range_a: float, range_b: float):
    """Break-even comparison plus the feedback deviation bound."""
    try:
        params = CostParams(T_full=t_full, r=ratio, M=iterations, m=experiments)
        hoeffding = (
            HoeffdingParams(epsilon=epsilon, a=range_a, b=range_b)
            if epsilon is not None
            else None
        )
    except ValueError as exc:
        click.echo(f"invalid parameters: {exc}", err=True)
        sys.exit(EXIT_CONFIG)
    click.echo(json.dumps(reports.cost_report(params, hoeffding), indent=2, sort_keys=True))


@main.command()
@click.argument("dataset", type=click.Path(dir_okay=False))
def validate(dataset: str):
    """Check a dataset file for duplicate ids, bad stats and empty texts."""
    try:
        loaded = Dataset.from_jsonl(dataset)
    except DatasetIOError as exc:
        click.echo(f"cannot read dataset: {exc}", err=True)
        sys.exit(EXIT_CONFIG)
    findings = validate_dataset(loaded)
    click.echo(json.dumps(findings.to_dict(), indent=2, sort_keys=True))
    sys.exit(EXIT_OK if findings.valid else EXIT_FAILURE)


if __name__ == "__main__":
    main()
