import json

import pytest

from poollab.analysis import TrialResult, pearson_matrix
from poollab.core import MetricVector
from poollab.errors import ConfigError
from poollab.reports import (
    cost_report,
    emit_ranking,
    emit_scaling_curve,
    verify_bundle,
    write_bundle_index,
    write_correlation_csv,
)
from poollab.core import CostParams, HoeffdingParams


def trial(pool_id, op, split, score, baseline=False):
    return TrialResult(
        pool_id=pool_id,
        metrics=MetricVector(metrics={"score": score}),
        baseline=baseline,
        op_name=op,
        split_label=split,
    )


def reference_trials():
    # per-split scores chosen so the relative changes reproduce the
    # image-to-text reference triplets against a baseline of 100
    rows = {
        "image_nsfw": (7.13, 18.44, 66.38),
        "text_action": (59.90, 0.29, -2.05),
        "language_score": (49.90, 0.85, -1.43),
    }
    trials = [trial("random", None, None, 100.0, baseline=True)]
    for op, (low, mid, high) in rows.items():
        for split, change in zip(("low", "mid", "high"), (low, mid, high)):
            trials.append(trial(f"{op}.{split}", op, split, 100.0 + change))
    return trials


class TestEmitRanking:
    def test_reference_order_and_values(self, tmp_path):
        path = emit_ranking(reference_trials(), tmp_path / "ranking.csv")
        lines = path.read_text().splitlines()
        assert lines[0] == "op,low,mid,high,best_split,best_value"
        rows = [line.split(",") for line in lines[1:]]
        assert [(row[0], row[4]) for row in rows] == [
            ("image_nsfw", "high"),
            ("text_action", "low"),
            ("language_score", "low"),
        ]
        # baseline arithmetic reconstructs the planted relative changes
        assert float(rows[0][5]) == pytest.approx(66.38)
        assert float(rows[1][5]) == pytest.approx(59.90)
        assert float(rows[2][5]) == pytest.approx(49.90)

    def test_single_op_single_row(self, tmp_path):
        trials = [
            trial("random", None, None, 10.0, baseline=True),
            trial("a.low", "a", "low", 11.0),
            trial("a.mid", "a", "mid", 10.0),
            trial("a.high", "a", "high", 9.0),
        ]
        path = emit_ranking(trials, tmp_path / "ranking.csv")
        assert len(path.read_text().splitlines()) == 2

    def test_identical_split_values_pick_low(self, tmp_path):
        trials = [
            trial("random", None, None, 10.0, baseline=True),
            trial("a.low", "a", "low", 12.0),
            trial("a.mid", "a", "mid", 12.0),
            trial("a.high", "a", "high", 12.0),
        ]
        path = emit_ranking(trials, tmp_path / "ranking.csv")
        assert path.read_text().splitlines()[1].endswith(",low,20.0")

    def test_missing_baseline_rejected(self, tmp_path):
        trials = [trial("a.low", "a", "low", 1.0)]
        with pytest.raises(ValueError, match="baseline"):
            emit_ranking(trials, tmp_path / "ranking.csv")


class TestScalingCurve:
    def _metrics(self, score):
        return MetricVector(metrics={"score": score})

    def test_rows_ordered_by_k(self, tmp_path):
        points = [(4.0, self._metrics(1.2)), (1.0, self._metrics(1.0)), (8.0, self._metrics(1.5)), (2.0, self._metrics(1.1))]
        path = emit_scaling_curve(points, self._metrics(1.0), tmp_path / "curve.csv")
        lines = path.read_text().splitlines()
        assert lines[0] == "k,improvement_pct"
        assert [line.split(",")[0] for line in lines[1:]] == ["1.0", "2.0", "4.0", "8.0"]

    def test_configured_k6_point_appears(self, tmp_path):
        points = [(6.0, self._metrics(1.3))]
        path = emit_scaling_curve(points, self._metrics(1.0), tmp_path / "curve.csv")
        assert path.read_text().splitlines()[1].startswith("6.0,")

    def test_empty_schedule_yields_header_only(self, tmp_path):
        path = emit_scaling_curve([], None, tmp_path / "curve.csv")
        assert path.read_text() == "k,improvement_pct\n"


def test_correlation_csv_layout(tmp_path):
    matrix = pearson_matrix({"a": [1, 2, 3], "b": [3, 2, 1]})
    path = write_correlation_csv(matrix, tmp_path / "corr.csv")
    lines = path.read_text().splitlines()
    assert lines[0] == "label,a,b"
    assert lines[1] == "a,1.0,-1.0"


def test_cost_report_shape():
    payload = cost_report(
        CostParams(T_full=1.0, r=0.01, M=3, m=30),
        HoeffdingParams(epsilon=0.1, a=0.0, b=1.0),
    )
    assert payload["preferred"] is True
    assert payload["cost_with"] == pytest.approx(1.3)
    assert payload["hoeffding"]["bound"] == pytest.approx(0.98020, abs=5e-6)
    assert payload["hoeffding"]["range"] == [0.0, 1.0]


class TestBundleIndex:
    def test_digests_verify_and_detect_tampering(self, tmp_path):
        (tmp_path / "ranking.csv").write_text("op\nx\n")
        (tmp_path / "cost.json").write_text("{}\n")
        write_bundle_index(tmp_path)
        assert verify_bundle(tmp_path) == []
        (tmp_path / "ranking.csv").write_text("op\ntampered\n")
        assert verify_bundle(tmp_path) == ["ranking.csv"]

    def test_index_is_reproducible(self, tmp_path):
        (tmp_path / "a.csv").write_text("x\n")
        first = write_bundle_index(tmp_path).read_bytes()
        second = write_bundle_index(tmp_path).read_bytes()
        assert first == second
