"""Bridge to external model-based scorers.

Protocol: the batch is written as JSONL ``{"id", "text", "media"?}`` to a
temp file passed as the command's final argument. The scorer emits JSONL
``{"id", "score"}`` either on stdout (default) or to a path handed over in
an environment variable.
"""

from __future__ import annotations

import json
import math
import os
import subprocess
import tempfile
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path
from typing import Sequence

from ..core import Dataset, Sample
from ..errors import ScorerProtocolError
from .engine import EXTERNAL_STAT_INPUTS

DEFAULT_ENV_VAR = "SCORER_OUTPUT"


def _parse_scores(raw: str, source: str) -> dict[str, float]:
    scores: dict[str, float] = {}
    for lineno, line in enumerate(raw.splitlines()):
        if not line.strip():
            continue
        try:
            record = json.loads(line)
        except json.JSONDecodeError as exc:
            raise ScorerProtocolError(f"{source}:{lineno + 1}: invalid JSON: {exc}") from exc
        if "id" not in record or "score" not in record:
            raise ScorerProtocolError(f"{source}:{lineno + 1}: record needs 'id' and 'score'")
        value = float(record["score"])
        if not math.isfinite(value):
            raise ScorerProtocolError(
                f"scorer returned non-finite score {record['score']!r} for id {record['id']!r}"
            )
        scores[str(record["id"])] = value
    return scores


def external_score(
    samples: Sequence[Sample],
    command: Sequence[str],
    statistic: str,
    *,
    output: str = "stdout",
    env_var: str = DEFAULT_ENV_VAR,
    timeout: float | None = 300.0,
) -> dict[str, float]:
    """Run one scorer invocation over ``samples``; scores keyed by id.

    Raises :class:`ScorerProtocolError` on nonzero exit, malformed output,
    non-finite scores, or any input id missing from the output. Extra ids
    in the output are ignored.
    """
    if output not in ("stdout", "file"):
        raise ValueError(f"output must be 'stdout' or 'file', got {output!r}")
    with tempfile.TemporaryDirectory(prefix="poollab-scorer-") as tmp:
        batch_path = Path(tmp) / "batch.jsonl"
        with batch_path.open("w", encoding="utf-8") as handle:
            for sample in samples:
                record = {"id": sample.id, "text": sample.text}
                if sample.media is not None:
                    record["media"] = dict(sample.media)
                handle.write(json.dumps(record, ensure_ascii=False) + "\n")

        env = dict(os.environ)
        out_path = Path(tmp) / "scores.jsonl"
        if output == "file":
            env[env_var] = str(out_path)
        proc = subprocess.run(
            [*command, str(batch_path)],
            capture_output=True,
            text=True,
            env=env,
            timeout=timeout,
        )
        if proc.returncode != 0:
            tail = proc.stderr.strip().splitlines()[-5:]
            raise ScorerProtocolError(
                f"scorer exited with status {proc.returncode}: {' | '.join(tail) or '<no stderr>'}"
            )
        if output == "stdout":
            scores = _parse_scores(proc.stdout, "scorer stdout")
        else:
            if not out_path.exists():
                raise ScorerProtocolError(f"scorer wrote no output file at {out_path}")
            scores = _parse_scores(out_path.read_text(encoding="utf-8"), str(out_path))

    missing = [s.id for s in samples if s.id not in scores]
    if missing:
        raise ScorerProtocolError(
            f"scorer output missing {len(missing)} ids (e.g. {missing[0]!r})"
        )
    return {s.id: scores[s.id] for s in samples}


def score_dataset(
    dataset: Dataset,
    command: Sequence[str],
    statistic: str,
    *,
    batch_size: int = 1024,
    max_parallel: int = 1,
    output: str = "stdout",
    env_var: str = DEFAULT_ENV_VAR,
    inputs: Sequence[str] = ("text", "media"),
) -> Dataset:
    """Score the whole dataset in batches and attach the statistic.

    At most ``max_parallel`` scorer processes run at once; results merge
    back in input order so the output is independent of scheduling.
    """
    EXTERNAL_STAT_INPUTS[statistic] = frozenset(inputs)
    batches = [
        dataset.samples[i : i + batch_size] for i in range(0, len(dataset), batch_size)
    ]

    def score_batch(batch) -> dict[str, float]:
        return external_score(
            batch, command, statistic, output=output, env_var=env_var
        )

    merged: dict[str, float] = {}
    if max_parallel <= 1 or len(batches) <= 1:
        for batch in batches:
            merged.update(score_batch(batch))
    else:
        with ThreadPoolExecutor(max_workers=max_parallel) as pool:
            for scores in pool.map(score_batch, batches):
                merged.update(scores)
    return Dataset(
        sample.with_stats({statistic: merged[sample.id]}) for sample in dataset
    )
