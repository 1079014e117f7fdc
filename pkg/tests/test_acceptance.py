"""End-to-end acceptance checks on the drebin-mini benchmark and constructed instances.

Each test prints one ``ACCEPTANCE nn: PASS|FAIL`` line (also collected in the
terminal summary) and then asserts the criterion at its stated tolerance.
"""
import itertools

import numpy as np
import pytest

from _util import rel_err
from padforge.attacks import (DEFAULT_LAMBDA_GRID, FAMILIES, AttackConfig, ManipulationSpace,
                              ModelCriterion, box_bounds, max_ma, pgd_attack, run_attack,
                              sma_attack)
from padforge.data import drebin_mini_space, drebin_mini_spec, generate_synthetic, split
from padforge.evaluation import Verdict, calibrate_tau, clean_metrics, predict, robust_accuracy
from padforge.models import (Detector, IcnnParams, MlpParams, icnn_loss_and_grads, icnn_score,
                             init_params, mlp_loss_and_grads)
from padforge.numerics import central_diff_grad, make_rng
from padforge.theory import (QuadraticCriterion, criterion_gradients, estimate_constants,
                             exhaustive_optimum, hessian_spectrum, quadratic_bound_check,
                             sample_pairs, segment_pairs, attack_gap_check)
from padforge.training import TrainConfig, train

WIDTHS = (32, 32)
EPOCHS = 50
SUITE = [("grosse", 1), ("bca", 1), ("bga", 1), ("rfgsm", 1), ("pgd", 1), ("pgd", 2),
         ("pgd", np.inf), ("maxma", 1), ("imaxma", 1), ("sma", 1)]


# ---------------------------------------------------------------- shared fixtures

@pytest.fixture(scope="module")
def bench():
    ds = generate_synthetic(drebin_mini_spec(0))
    tr, va, te = split(ds)
    return {"train": tr, "val": va, "test": te, "space": drebin_mini_space(),
            "malware": te.X[te.y == 1]}


_MODELS = {}


def _trained(bench, defense):
    if defense not in _MODELS:
        tr = bench["train"]
        cfg = TrainConfig(defense=defense, epochs=EPOCHS, mlp_widths=WIDTHS, icnn_widths=WIDTHS,
                          seed=0)
        st = train(tr.X, tr.y, cfg, bench["space"])
        det = Detector(st.mlp, st.icnn)
        if st.icnn is not None:
            det.tau = calibrate_tau(det.psi(bench["val"].X), 5)
        _MODELS[defense] = det
    return _MODELS[defense]


@pytest.fixture(scope="module")
def dnn(bench):
    return _trained(bench, "dnn")


@pytest.fixture(scope="module")
def pad(bench):
    return _trained(bench, "pad_sma")


@pytest.fixture(scope="module")
def at_maxma(bench):
    return _trained(bench, "at_maxma")


_PAD_SUITE = {}


@pytest.fixture(scope="module")
def pad_suite(bench, pad):
    """Adaptive robust accuracy of PAD-SMA under every suite member."""
    if not _PAD_SUITE:
        for fam, p in SUITE:
            cfg = AttackConfig(fam, p=p, mode="adaptive")
            _PAD_SUITE[cfg.label] = robust_accuracy(pad, cfg, bench["malware"], bench["space"])
    return _PAD_SUITE


# ---------------------------------------------------------------- 1

def test_01_gradient_oracles(acceptance_record):
    rng = make_rng(101)
    worst = 0.0
    for k in range(100):
        d = int(rng.integers(2, 65))
        widths = tuple(int(w) for w in rng.integers(2, 33, size=2))
        mlp = init_params("mlp", d, widths, rng=rng)
        icnn = init_params("icnn", d, widths, rng=rng)
        X = (rng.random((3, d)) < 0.5).astype(float) * rng.uniform(0.5, 1.0, (3, d))
        y = rng.integers(0, 2, 3)
        pert = rng.integers(0, 2, 3)

        def F(m, Xs=X):
            return mlp_loss_and_grads(m, Xs, y, reduction="mean", need_params=False)[0]

        def G(q, Xs=X):
            return icnn_loss_and_grads(q, Xs, pert, reduction="mean", need_params=False)[0]

        _, gm, gx_f, _ = mlp_loss_and_grads(mlp, X, y, reduction="mean")
        _, gi, gx_g, _ = icnn_loss_and_grads(icnn, X, pert, reduction="mean")
        errs = [rel_err(gx_f, central_diff_grad(lambda z: F(mlp, z.reshape(X.shape)), X.ravel())),
                rel_err(gx_g, central_diff_grad(lambda z: G(icnn, z.reshape(X.shape)), X.ravel()))]
        for name in MlpParams.NAMES:
            base = getattr(mlp, name)

            def fm(v, name=name, base=base):
                q = mlp.copy()
                setattr(q, name, v.reshape(base.shape))
                return F(q)
            errs.append(rel_err(getattr(gm, name), central_diff_grad(fm, base.ravel())))
        named, gnamed = icnn.named_arrays(), gi.named_arrays()
        for key, base in named.items():
            def fi(v, key=key, base=base):
                arrs = dict(named)
                arrs[key] = v.reshape(np.shape(base))
                return G(IcnnParams.from_named(arrs))
            errs.append(rel_err(gnamed[key], central_diff_grad(fi, np.ravel(base))))
        worst = max(worst, max(errs))
    ok = worst < 1e-4
    acceptance_record(1, ok, f"100 configs, worst relative error {worst:.2e} (< 1e-4)")
    assert ok


# ---------------------------------------------------------------- 2

def test_02_input_convexity(acceptance_record, bench, pad):
    rng = make_rng(102)
    worst_mid = -np.inf
    for k in range(1000):
        if k % 20 == 0:
            d = int(rng.integers(2, 65))
            icnn = init_params("icnn", d, tuple(int(w) for w in rng.integers(2, 33, 2)), rng=rng)
        a, b = rng.random(d), rng.random(d)
        gap = icnn_score(icnn, (a + b) / 2) - (icnn_score(icnn, a) + icnn_score(icnn, b)) / 2
        worst_mid = max(worst_mid, gap)
    # curvature of the trained detector's score: J = const - psi with a zero classifier
    zero_f = MlpParams.zeros(pad.d, (2, 2))
    crit = ModelCriterion(zero_f, pad.icnn, 1.0)
    pts = rng.uniform(0.05, 0.95, (50, pad.d))
    min_eig = min(-hessian_spectrum(crit, x).max_eigenvalue for x in pts)
    ok = worst_mid <= 1e-9 and min_eig >= -1e-5
    acceptance_record(2, ok, f"max midpoint violation {worst_mid:.2e} over 1000 triples; "
                             f"min Hessian eigenvalue of psi {min_eig:.2e} over 50 points")
    assert ok


# ---------------------------------------------------------------- 3

def test_03_hessian_spectrum_pattern(acceptance_record, bench, pad, dnn):
    X = bench["malware"][:20]
    pad_min, dnn_ext = [], []
    for x in X:
        rp = hessian_spectrum(ModelCriterion(pad.mlp, pad.icnn), x, lam=1.0)
        rd = hessian_spectrum(ModelCriterion(dnn.mlp), x, lam=1.0)
        pad_min.append(rp.min_eigenvalue)
        dnn_ext.append(max(abs(rd.min_eigenvalue), abs(rd.max_eigenvalue)))
    pm, de = float(np.median(pad_min)), float(np.median(dnn_ext))
    ok = pm < 0 and abs(pm) >= 10 * de
    acceptance_record(3, ok, f"median PAD-SMA min eigenvalue {pm:.3f}; median DNN extreme "
                             f"|eigenvalue| {de:.4f}; ratio {abs(pm) / max(de, 1e-300):.1f}x (>= 10x)")
    assert ok


# ---------------------------------------------------------------- 4

def _concave_instance(rng, d, lam):
    Q, _ = np.linalg.qr(rng.normal(size=(d, d)))
    B = Q @ np.diag(rng.uniform(1.0, 3.0, d)) @ Q.T
    M = rng.normal(size=(d, d))
    A = 0.1 * (M + M.T) / 2
    t = rng.integers(0, 2, d).astype(float)
    c = t + 0.3 * (2 * t - 1)
    crit = QuadraticCriterion(A, 0.1 * rng.normal(size=d), 0.0, B, -B @ c, 0.5 * c @ B @ c, lam)
    return crit, 1 - t


def _vertex_constants(crit, d):
    V = np.array(list(itertools.product([0.0, 1.0], repeat=d)))
    i, j = np.triu_indices(len(V), 1)
    gf, gg = criterion_gradients(crit)
    return estimate_constants(gf, gg, V[i], V[j])


def test_04_attack_gap_bound(acceptance_record):
    rng = make_rng(104)
    checked = skipped = violations = 0
    for _ in range(200):
        d = int(rng.integers(3, 7))
        lam = float(rng.choice([0.05, 1.0, 3.0]))
        crit, x = _concave_instance(rng, d, lam)
        est = _vertex_constants(crit, d)
        rep = attack_gap_check(crit, x, ManipulationSpace.full(d), lam, [1, 5, 10, 25], est)
        if not rep.applicable:
            skipped += 1
            assert all(b is None for b in rep.bound)
            continue
        checked += 1
        violations += sum(not h for h in rep.holds)
    ok = violations == 0 and checked > 0
    acceptance_record(4, ok, f"{checked} applicable instances x 4 horizons, {violations} violations; "
                             f"{skipped} flagged not-applicable")
    assert ok


# ---------------------------------------------------------------- 5

def test_05_quadratic_sandwich(acceptance_record, pad):
    crit = ModelCriterion(pad.mlp, pad.icnn, 1.0)
    A, B = sample_pairs(make_rng(105), pad.d, 1000)
    gf, gg = criterion_gradients(crit)
    est = estimate_constants(gf, gg, *segment_pairs(A, B))
    lam = next((l for l in DEFAULT_LAMBDA_GRID if l * est.M_g > est.L_f), None)
    at_one = quadratic_bound_check(crit, A, B, 1.0, est)
    if lam is None:
        acceptance_record(5, False, f"premise lambda*M > L unreachable on the grid "
                                    f"(L_f={est.L_f:.3g}, M_g={est.M_g:.3g})")
        pytest.fail("premise unreachable")
    rep = quadratic_bound_check(crit, A, B, lam, est)
    ok = rep.applicable and rep.violations == 0
    acceptance_record(5, ok, f"L_f={est.L_f:.3g} L_g={est.L_g:.3g} M_g={est.M_g:.3g}; "
                             f"premise first holds at lambda={lam:g}: {rep.violations} violations "
                             f"over {rep.n_pairs} pairs (lambda=1 applicable: {at_one.applicable})")
    assert ok


# ---------------------------------------------------------------- 6

def test_06_robustness_pattern(acceptance_record, bench, dnn, pad, pad_suite):
    space, Xm, te = bench["space"], bench["malware"], bench["test"]
    dnn_l1 = robust_accuracy(dnn, AttackConfig("pgd", p=1, mode="adaptive"), Xm, space)
    worst_label = min(pad_suite, key=pad_suite.get)
    worst = pad_suite[worst_label]
    acc_dnn = clean_metrics(dnn, te.X, te.y).Acc
    acc_pad = clean_metrics(pad, te.X, te.y).Acc
    a, b, c = dnn_l1 <= 5.0, worst >= 70.0, acc_dnn - acc_pad <= 5.0
    ok = a and b and c
    table = ", ".join(f"{k} {v:.1f}" for k, v in pad_suite.items())
    acceptance_record(6, ok, f"(a) DNN adaptive PGD-l1 {dnn_l1:.2f}% (<= 5); "
                             f"(b) PAD-SMA worst {worst_label} {worst:.2f}% (>= 70) [{table}]; "
                             f"(c) clean acc DNN {acc_dnn:.2f} vs PAD-SMA {acc_pad:.2f} (gap <= 5)")
    assert ok


# ---------------------------------------------------------------- 7

def test_07_iterated_attack_stability(acceptance_record, bench, at_maxma, pad_suite):
    space, Xm = bench["space"], bench["malware"]
    pad_gap = abs(pad_suite["imaxma"] - pad_suite["maxma"])
    at_max = robust_accuracy(at_maxma, AttackConfig("maxma"), Xm, space)
    at_imax = robust_accuracy(at_maxma, AttackConfig("imaxma", repeats=5), Xm, space)
    ok = pad_gap <= 5.0 and at_imax < at_max
    acceptance_record(7, ok, f"PAD-SMA |iMaxMA - MaxMA| = {pad_gap:.2f} (<= 5); "
                             f"AT-MaxMA iMaxMA {at_imax:.2f} vs MaxMA {at_max:.2f} (needs strictly lower)")
    assert ok


# ---------------------------------------------------------------- 8

def _random_invocation(seed):
    rng = make_rng(seed)
    d = int(rng.integers(3, 13))
    widths = (int(rng.integers(2, 7)), int(rng.integers(2, 7)))
    mlp = init_params("mlp", d, widths, rng=rng)
    icnn = init_params("icnn", d, widths, rng=rng)
    det = Detector(mlp, icnn, float(rng.normal()))
    space = ManipulationSpace(rng.random(d) < 0.6, rng.random(d) < 0.6)
    X = (rng.random((int(rng.integers(1, 4)), d)) < 0.5).astype(float)
    pool = (rng.random((5, d)) < 0.5).astype(float)
    fam = FAMILIES[int(rng.integers(len(FAMILIES)))]
    mode = "adaptive" if fam.startswith("orth") or rng.random() < 0.5 else "oblivious"
    lam = None if rng.random() < 0.3 else float(10.0 ** rng.integers(-2, 3))
    cfg = AttackConfig(fam, p=[1, 2, np.inf][int(rng.integers(3))], steps=int(rng.integers(0, 5)),
                       mode=mode, lam=lam, lambda_grid=(1e-2, 1.0, 1e2),
                       addition_only=bool(rng.random() < 0.3), repeats=int(rng.integers(1, 3)),
                       n_ben=int(rng.integers(1, 4)), seed=int(rng.integers(1000)))
    return det, X, space, cfg, pool


def test_08_attack_contracts(acceptance_record):
    n = 10_000
    box = binary = removals = mismatches = 0
    for seed in range(n):
        det, X, space, cfg, pool = _random_invocation(seed)
        res = run_attack(det, X, space, cfg, benign_pool=pool)
        again = run_attack(*_random_invocation(seed)[:4], benign_pool=pool)
        lo, hi = box_bounds(X, space, cfg.addition_only)
        xa = res.x_adv
        binary += int(not np.all((xa == 0) | (xa == 1)))
        box += int(not (np.all(lo <= xa) and np.all(xa <= hi)))
        if cfg.addition_only:
            removals += int(np.any((X == 1) & (xa == 0)))
        mismatches += int(xa.tobytes() != again.x_adv.tobytes()
                          or res.j_final.tobytes() != again.j_final.tobytes())
    ok = box == binary == removals == mismatches == 0
    acceptance_record(8, ok, f"{n} invocations: {box} box, {binary} binarity, {removals} "
                             f"addition-only, {mismatches} rerun mismatches")
    assert ok


# ---------------------------------------------------------------- 9

def test_09_oracle_dominance(acceptance_record):
    rng = make_rng(109)
    runs = exceed = 0
    for _ in range(150):
        d = int(rng.integers(2, 11))
        widths = (int(rng.integers(2, 9)), int(rng.integers(2, 9)))
        mlp = init_params("mlp", d, widths, rng=rng)
        icnn = init_params("icnn", d, widths, rng=rng)
        crit = ModelCriterion(mlp, icnn, float(10.0 ** rng.integers(-2, 2)))
        space = ManipulationSpace(rng.random(d) < 0.7, rng.random(d) < 0.7)
        ao = bool(rng.random() < 0.3)
        x = (rng.random(d) < 0.5).astype(float)
        j_star, _ = exhaustive_optimum(crit, x, space, ao)
        outs = [sma_attack(crit, x, space, 20, addition_only=ao),
                max_ma(crit, x, space, steps=20, addition_only=ao)]
        outs += [pgd_attack(crit, x, space, p, steps=20, addition_only=ao) for p in (1, 2, np.inf)]
        for r in outs:
            runs += 1
            exceed += int(crit.value(r.x_adv)[0] > j_star + 1e-12)
    ok = exceed == 0
    acceptance_record(9, ok, f"{runs} SMA/PGD/MaxMA outputs on d <= 10, {exceed} above the "
                             f"enumerated optimum")
    assert ok


# ---------------------------------------------------------------- 10

def test_10_prediction_rule(acceptance_record):
    tau = 0.7
    expected = {}
    for f, rel in itertools.product((0, 1), ("below", "equal", "above")):
        psi = {"below": tau - 0.1, "equal": tau, "above": tau + 0.1}[rel]
        flagged = rel == "above"
        want = Verdict.MALICIOUS if f == 1 else (Verdict.NOT_SURE if flagged else Verdict.BENIGN)
        expected[(f, psi)] = want
    fs = np.array([k[0] for k in expected])
    ps = np.array([k[1] for k in expected])
    got = predict(fs, ps, tau)
    scalar = [int(predict(np.array([f]), np.array([p]), tau)[0]) for f, p in expected]
    ok = (got.tolist() == [int(v) for v in expected.values()] == scalar
          and set(got.tolist()) <= {0, 1, 2})
    acceptance_record(10, ok, f"{len(expected)} branch combinations (f x psi vs tau) match")
    assert ok
