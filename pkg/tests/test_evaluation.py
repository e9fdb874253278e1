import csv
import io
import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from trapnet import evaluation
from trapnet.attacks import AttackResult
from trapnet.errors import ConfigError
from trapnet.evaluation import ExperimentReport, RocReport


def test_auc_examples():
    assert evaluation.auc([0.9, 0.8], [0.1, 0.2]) == 1.0
    assert evaluation.auc([0.3], [0.3]) == 0.5
    assert evaluation.auc([0.9, 0.4], [0.5, 0.1]) == 0.75
    assert evaluation.auc_bruteforce([0.9, 0.4], [0.5, 0.1]) == 0.75


def test_empty_inputs():
    for fn in (evaluation.auc, evaluation.auc_bruteforce, evaluation.roc_curve):
        with pytest.raises(ConfigError):
            fn([], [0.1])
    with pytest.raises(ConfigError):
        evaluation.tpr_at_fpr([0.1], [], 0.1)


def test_auc_matches_bruteforce_exactly():
    rng = np.random.default_rng(0)
    for _ in range(200):
        n, m = rng.integers(1, 201, 2)
        # coarse grid so ties are common
        a = rng.integers(0, 20, n) / 19.0
        b = rng.integers(0, 20, m) / 19.0
        assert evaluation.auc(a, b) == evaluation.auc_bruteforce(a, b)


scores = st.lists(st.floats(-1, 1), min_size=1, max_size=60)


@settings(max_examples=200, deadline=None)
@given(scores, scores)
def test_auc_symmetry(a, b):
    assert evaluation.auc(a, b) + evaluation.auc(b, a) == pytest.approx(1.0, abs=1e-12)


@settings(max_examples=200, deadline=None)
@given(scores, scores)
def test_auc_monotone_invariance(a, b):
    # scaling by a power of two is exact, so no distinct scores collide
    assert evaluation.auc(8 * np.asarray(a), 8 * np.asarray(b)) == evaluation.auc(a, b)
    # a nonlinear transform on scores spaced well above rounding error
    ga, gb = np.round(np.asarray(a), 3), np.round(np.asarray(b), 3)
    f = lambda v: np.exp(3 * v) + 2  # noqa: E731
    assert evaluation.auc(f(ga), f(gb)) == evaluation.auc(ga, gb)


@settings(max_examples=200, deadline=None)
@given(scores, scores)
def test_roc_consistent_with_auc(a, b):
    pts = evaluation.roc_curve(a, b)
    assert pts[0] == (0.0, 0.0) and pts[-1] == (1.0, 1.0)
    arr = np.array(pts)
    assert np.all(np.diff(arr[:, 0]) >= 0) and np.all(np.diff(arr[:, 1]) >= 0)
    assert evaluation.trapezoid_area(pts) == pytest.approx(evaluation.auc(a, b), abs=1e-12)


def test_roc_separated_and_diagonal():
    assert (0.0, 1.0) in evaluation.roc_curve([0.8, 0.9], [0.1, 0.2])
    pts = evaluation.roc_curve([0.1, 0.2, 0.3], [0.1, 0.2, 0.3])
    assert all(f == t for f, t in pts)


def test_tpr_examples():
    assert evaluation.tpr_at_fpr([0.9, 0.95], [0.1] * 20, 0.1) == 1.0
    assert evaluation.tpr_at_fpr([0.0, 0.05], [0.1, 0.2, 0.3], 0.1) == 0.0
    assert evaluation.tpr_at_fpr([0.9, 0.4], [0.5, 0.1], 0.5) == 1.0


@settings(max_examples=100, deadline=None)
@given(scores, scores, st.floats(0.01, 0.98), st.floats(0.0, 0.5))
def test_tpr_nondecreasing_in_fpr(a, b, f, step):
    g = min(f + step, 0.99)
    assert evaluation.tpr_at_fpr(a, b, f) <= evaluation.tpr_at_fpr(a, b, g)


def test_attack_success_rate():
    def r(flag):
        return AttackResult(np.zeros(2), 0.0, flag, 0, 0.0, 1)

    assert evaluation.attack_success_rate([r(True)] * 3) == 1.0
    assert evaluation.attack_success_rate([r(False)] * 3) == 0.0
    assert evaluation.attack_success_rate([r(True)] * 3 + [r(False)]) == 0.75
    assert evaluation.attack_success_rate([{"misclassified": True}, {"misclassified": False}]) == 0.5
    with pytest.raises(ConfigError):
        evaluation.attack_success_rate([])


def _report():
    rng = np.random.default_rng(1)
    roc = RocReport.build(rng.uniform(size=30), rng.uniform(size=40))
    return ExperimentReport(
        config={"seed": 3, "eps": 8 / 255},
        model_metrics={"clean_accuracy": 0.93, "trigger_success": 1.0},
        attacks={"pgd": {"success_rate": 0.9, "roc": roc}},
    )


def test_emit_roundtrip_and_bytes(tmp_path):
    rep = _report()
    evaluation.emit_report(rep, tmp_path / "a.json")
    evaluation.emit_report(rep, tmp_path / "b.json")
    assert (tmp_path / "a.json").read_bytes() == (tmp_path / "b.json").read_bytes()
    doc = json.loads((tmp_path / "a.json").read_text())
    back = RocReport.from_dict(doc["attacks"]["pgd"]["roc"])
    orig = rep.attacks["pgd"]["roc"]
    assert back.auc == orig.auc and back.adv_scores == orig.adv_scores
    assert back.roc_points == orig.roc_points and back.tpr_at == orig.tpr_at
    assert doc["config"] == rep.config


def test_csv_rows(tmp_path):
    rep = _report()
    evaluation.emit_report(rep, tmp_path / "r.json")
    rows = list(csv.reader(io.StringIO((tmp_path / "r.pgd.roc.csv").read_text())))
    assert rows[0] == ["fpr", "tpr"]
    assert len(rows) == len(rep.attacks["pgd"]["roc"].roc_points) + 1


def test_emit_unwritable(tmp_path):
    with pytest.raises(OSError, match="nope"):
        evaluation.emit_report(_report(), tmp_path / "nope" / "r.json")


def test_json_float_format():
    text = evaluation.report_json({"x": 0.1, "y": float("nan"), "z": np.float64(1 / 3)})
    doc = json.loads(text)
    assert doc == {"x": 0.1, "y": None, "z": 1 / 3}
    assert list(doc) == sorted(doc)
