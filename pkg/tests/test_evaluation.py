import itertools
import json

import numpy as np
import pytest
from hypothesis import given, strategies as st
from hypothesis.extra.numpy import arrays

from padforge.attacks import AttackConfig, ManipulationSpace
from padforge.evaluation import (ResultsMatrix, Verdict, calibrate_tau, caught, clean_metrics,
                                 compute_metrics, evaluate_grid, predict, robust_accuracy)
from padforge.models import Detector, MlpParams, init_params
from padforge.numerics import make_rng
from padforge.training import TrainConfig, baseline_train


def test_tau_examples():
    assert calibrate_tau(np.arange(1, 101), 5) == 95
    s = make_rng(0).normal(size=37)
    assert calibrate_tau(s, 0) == s.max()
    assert calibrate_tau(np.full(10, 2.5), 5) == 2.5


def test_tau_rejects_bad_input():
    with pytest.raises(ValueError):
        calibrate_tau([], 5)
    with pytest.raises(ValueError):
        calibrate_tau([1.0, 2.0], 100)
    with pytest.raises(ValueError):
        calibrate_tau([1.0, np.nan], 5)


@given(arrays(np.float64, st.integers(1, 200), elements=st.floats(-50, 50)),
       st.floats(0, 99.9))
def test_tau_rejects_at_most_k_percent(scores, k):
    tau = calibrate_tau(scores, k)
    assert np.sum(scores > tau) <= k / 100 * scores.size + 1e-9
    # smallest such value: any lower observed score rejects too many
    lower = scores[scores < tau]
    if lower.size:
        assert np.sum(scores > lower.max()) > k / 100 * scores.size


def test_predict_truth_table():
    table = {(0, False): Verdict.BENIGN, (1, False): Verdict.MALICIOUS,
             (1, True): Verdict.MALICIOUS, (0, True): Verdict.NOT_SURE}
    for (f, flagged), want in table.items():
        psi = 2.0 if flagged else 0.5
        assert predict(np.array([f]), np.array([psi]), 1.0)[0] == want
    # boundary: psi == tau is not flagged
    assert predict(np.array([0]), np.array([1.0]), 1.0)[0] == Verdict.BENIGN


def test_metrics_examples():
    y = np.array([1] * 10 + [0] * 10)
    r = compute_metrics(y, y)
    assert (r.FNR, r.FPR, r.Acc, r.bAcc, r.F1) == (0, 0, 100, 100, 100)
    r = compute_metrics(np.zeros(20, dtype=int), y)
    assert r.bAcc == 50
    pred = np.array([1] * 8 + [0] * 2 + [1] + [0] * 9)
    r = compute_metrics(pred, y)
    assert (r.TP, r.FN, r.FP, r.TN) == (8, 2, 1, 9)
    assert r.F1 == pytest.approx(2 * (8 / 9) * 0.8 / (8 / 9 + 0.8) * 100)
    assert round(r.F1, 2) == 84.21


def test_metrics_abstention_policies():
    y = np.array([1, 1, 0, 0])
    pred = np.array([Verdict.NOT_SURE, 1, Verdict.NOT_SURE, 0])
    a = compute_metrics(pred, y)
    assert (a.TP, a.TN, a.evaluated, a.abstained_benign, a.abstained_malware) == (2, 1, 3, 1, 1)
    b = compute_metrics(pred, y, "exclude")
    assert (b.TP, b.TN, b.evaluated, b.abstained) == (1, 1, 2, 2)
    assert a.TP + a.TN + a.FP + a.FN == a.evaluated
    with pytest.raises(ValueError):
        compute_metrics(pred, y, "guess")
    with pytest.raises(ValueError):
        compute_metrics(pred, y[:3])


def test_metrics_degenerate_denominators_flagged():
    r = compute_metrics(np.zeros(4, dtype=int), np.zeros(4, dtype=int))
    assert r.FNR == 0 and "FNR" in r.degenerate and "F1" in r.degenerate


@given(arrays(np.int64, 30, elements=st.integers(0, 2)), arrays(np.int64, 30, elements=st.integers(0, 1)))
def test_metrics_rates_bounded(pred, lab):
    r = compute_metrics(pred, lab)
    for v in (r.FNR, r.FPR, r.Acc, r.bAcc, r.F1):
        assert 0 <= v <= 100
    assert r.TP + r.TN + r.FP + r.FN == r.evaluated


def constant_benign_detector(d):
    p = MlpParams.zeros(d, (2, 2))
    p.b3[:] = [5.0, -5.0]
    return Detector(p)


def _toy_dnn(seed=0, d=10, epochs=8):
    rng = make_rng(seed)
    y = np.repeat([0, 1], 100)
    pm = np.full(d, 0.1)
    pb = np.full(d, 0.1)
    pm[:3] = 0.8
    pb[3:6] = 0.8
    X = (rng.random((200, d)) < np.where(y[:, None] == 1, pm, pb)).astype(float)
    cfg = TrainConfig(defense="dnn", epochs=epochs, batch=32, lr=0.01, mlp_widths=(8, 8), seed=seed)
    return Detector(baseline_train(X, y, cfg).mlp), X, y


def test_robust_accuracy_identity_and_constant_models():
    det, X, y = _toy_dnn()
    Xm = X[(y == 1) & (det.f(X) == 1)]
    space = ManipulationSpace.full(X.shape[1])
    assert robust_accuracy(det, AttackConfig("pgd", steps=0), Xm, space) == 100.0
    const = constant_benign_detector(X.shape[1])
    for fam in ("pgd", "bca", "maxma"):
        assert robust_accuracy(const, AttackConfig(fam, steps=3), X[y == 1], space) == 0.0
    with pytest.raises(ValueError):
        robust_accuracy(det, AttackConfig("pgd"), np.zeros((0, X.shape[1])), space)


def test_caught_counts_flagged_examples():
    d = 4
    det = constant_benign_detector(d)
    det.icnn = init_params("icnn", d, (3, 3), seed=0)
    det.tau = -np.inf
    assert caught(det, np.zeros((3, d))).all()
    det.tau = np.inf
    assert not caught(det, np.zeros((3, d))).any()


@pytest.mark.parametrize("p", [1, 2, np.inf])
def test_robust_accuracy_monotone_in_steps(p):
    det, X, y = _toy_dnn(1)
    Xm = X[y == 1]
    space = ManipulationSpace.from_indices(X.shape[1], addable=range(X.shape[1]), removable=[0])
    accs = [robust_accuracy(det, AttackConfig("pgd", p=p, steps=T), Xm, space)
            for T in (0, 1, 2, 5, 10, 20, 40)]
    assert all(a >= b for a, b in zip(accs, accs[1:])), accs


def test_results_matrix_and_grid(tmp_path):
    det, X, y = _toy_dnn(2, epochs=3)
    space = ManipulationSpace.full(X.shape[1])
    attacks = [AttackConfig("pgd", p=2, steps=3), AttackConfig("orth_pgd", steps=3, mode="adaptive")]
    mat = evaluate_grid({"dnn": det}, attacks, X[y == 1][:10], space)
    assert mat.attacks == ["pgd-l2/oblivious"] and mat.defenses == ["dnn"]
    data = json.loads(mat.to_json())
    assert data["accuracy"]["pgd-l2/oblivious"]["dnn"] == mat.get("pgd-l2/oblivious", "dnn")
    mat.write_csv(tmp_path / "m.csv")
    assert (tmp_path / "m.csv").read_text().splitlines()[0] == "attack,dnn"
    m2 = ResultsMatrix([], [])
    m2.set("a", "x", 12.5)
    m2.set("b", "y", 1)
    assert m2.get("a", "y") is None
    assert "12.50" in m2.format_table()


def test_clean_metrics_on_trained_model():
    det, X, y = _toy_dnn(3)
    r = clean_metrics(det, X, y)
    assert r.Acc > 80 and r.abstained == 0
