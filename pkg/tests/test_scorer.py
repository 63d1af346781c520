import sys

import pytest

from poollab.core import Dataset, Sample
from poollab.errors import ScorerProtocolError
from poollab.ops.scorer import external_score, score_dataset


def scorer_command(body: str) -> list[str]:
    """A stub scorer: reads the batch JSONL path from argv[1]."""
    prelude = (
        "import json, os, sys\n"
        "records = [json.loads(l) for l in open(sys.argv[1], encoding='utf-8') if l.strip()]\n"
    )
    return [sys.executable, "-c", prelude + body]


CONSTANT_SCORER = scorer_command(
    "for r in records:\n"
    "    print(json.dumps({'id': r['id'], 'score': 0.5}))\n"
)

LENGTH_SCORER = scorer_command(
    "for r in records:\n"
    "    print(json.dumps({'id': r['id'], 'score': float(len(r['text']))}))\n"
)


def batch(*texts):
    return [Sample(id=f"s{i}", text=text) for i, text in enumerate(texts)]


def test_constant_scorer_scores_every_id():
    scores = external_score(batch("a", "bb", "ccc"), CONSTANT_SCORER, "stub")
    assert scores == {"s0": 0.5, "s1": 0.5, "s2": 0.5}


def test_missing_id_is_named_in_the_error():
    dropper = scorer_command(
        "for r in records:\n"
        "    if r['id'] != 's1':\n"
        "        print(json.dumps({'id': r['id'], 'score': 1.0}))\n"
    )
    with pytest.raises(ScorerProtocolError, match="s1"):
        external_score(batch("a", "b", "c"), dropper, "stub")


def test_nonzero_exit_carries_stderr():
    failing = scorer_command("sys.stderr.write('model file not found'); sys.exit(3)")
    with pytest.raises(ScorerProtocolError, match="model file not found"):
        external_score(batch("a"), failing, "stub")


def test_non_finite_score_rejected():
    nan_scorer = scorer_command(
        "for r in records:\n"
        "    print(json.dumps({'id': r['id'], 'score': float('nan')}))\n"
    )
    with pytest.raises(ScorerProtocolError, match="non-finite"):
        external_score(batch("a"), nan_scorer, "stub")


def test_malformed_output_rejected():
    garbled = scorer_command("print('not json at all')")
    with pytest.raises(ScorerProtocolError, match="invalid JSON"):
        external_score(batch("a"), garbled, "stub")


def test_file_output_mode_via_env_var():
    file_scorer = scorer_command(
        "out = open(os.environ['SCORER_OUTPUT'], 'w')\n"
        "for r in records:\n"
        "    out.write(json.dumps({'id': r['id'], 'score': 1.0}) + '\\n')\n"
        "out.close()\n"
    )
    scores = external_score(batch("a", "b"), file_scorer, "stub", output="file")
    assert scores == {"s0": 1.0, "s1": 1.0}


def test_deterministic_scorer_reproduces_digest():
    ds = Dataset(batch("one", "two two", "three three three"))
    first = score_dataset(ds, LENGTH_SCORER, "ext_len", batch_size=2)
    second = score_dataset(ds, LENGTH_SCORER, "ext_len", batch_size=2)
    assert first.digest() == second.digest()
    assert first[1].stats["ext_len"] == 7.0


def test_parallel_batches_merge_in_input_order():
    ds = Dataset(batch(*(f"text {i}" for i in range(9))))
    sequential = score_dataset(ds, LENGTH_SCORER, "ext_len", batch_size=2, max_parallel=1)
    parallel = score_dataset(ds, LENGTH_SCORER, "ext_len", batch_size=2, max_parallel=4)
    assert sequential.digest() == parallel.digest()
