import math

import numpy as np
import pytest

from _util import rel_err
from padforge.models import (ContractError, Detector, IcnnParams, MlpParams, icnn_loss_and_grads,
                             icnn_score, icnn_score_and_grad, init_params, load_checkpoint,
                             mlp_forward, mlp_loss_and_grads, project_nonneg, save_checkpoint)
from padforge.numerics import central_diff_grad, make_rng


def test_zero_params_give_zero_logits_and_log2_loss():
    p = MlpParams.zeros(4, (3, 3))
    np.testing.assert_array_equal(mlp_forward(p, np.ones(4)), [0.0, 0.0])
    loss, *_ = mlp_loss_and_grads(p, np.ones(4), 1)
    assert loss == pytest.approx(math.log(2), abs=1e-12)


def test_zero_input_depends_only_on_biases():
    p = init_params("mlp", 5, (4, 3), seed=1)
    p.b1[:] = 0.3
    q = p.copy()
    q.W1[:] = 123.0
    np.testing.assert_allclose(mlp_forward(p, np.zeros(5)), mlp_forward(q, np.zeros(5)))


def test_mlp_forward_golden_logits():
    # recorded once from this implementation
    p = init_params("mlp", 5, (4, 3), seed=7)
    np.testing.assert_allclose(mlp_forward(p, np.array([1.0, 0, 1, 1, 0])),
                               [0.32251023720338995, -1.0213325403810851], rtol=1e-12)


def test_mlp_dimension_mismatch():
    p = init_params("mlp", 5, (4, 3), seed=7)
    with pytest.raises(ValueError):
        mlp_forward(p, np.zeros(6))


def test_mlp_input_gradient_matches_fd():
    rng = make_rng(0)
    for k in range(20):
        p = init_params("mlp", 7, (6, 5), rng=rng)
        x = rng.random(7)
        y = int(k % 2)
        _, _, gx, _ = mlp_loss_and_grads(p, x, y)
        fd = central_diff_grad(lambda z: mlp_loss_and_grads(p, z, y)[0], x)
        assert rel_err(gx, fd) < 1e-4


def test_mlp_param_gradient_matches_fd():
    rng = make_rng(1)
    p = init_params("mlp", 4, (3, 3), rng=rng)
    X = rng.random((3, 4))
    y = np.array([0, 1, 1])
    _, g, _, _ = mlp_loss_and_grads(p, X, y, reduction="mean")
    for name in MlpParams.NAMES:
        base = getattr(p, name)

        def fn(v, name=name):
            q = p.copy()
            setattr(q, name, v.reshape(base.shape))
            return mlp_loss_and_grads(q, X, y, reduction="mean")[0]

        fd = central_diff_grad(fn, base.ravel())
        assert rel_err(getattr(g, name), fd) < 1e-4, name


def test_duplicated_batch_doubles_sum_gradient():
    p = init_params("mlp", 4, (3, 3), seed=2)
    x = np.array([1.0, 0, 1, 0])
    _, g1, _, _ = mlp_loss_and_grads(p, x[None], [1])
    _, g2, _, _ = mlp_loss_and_grads(p, np.vstack([x, x]), [1, 1])
    for a, b in zip(g1.arrays(), g2.arrays()):
        np.testing.assert_allclose(2 * a, b, rtol=1e-12, atol=1e-15)


def test_icnn_constant_network():
    q = init_params("icnn", 5, (4, 4), seed=3)
    q = IcnnParams([np.zeros_like(s) for s in q.skip], [np.zeros_like(b) for b in q.bias],
                   q.hidden, q.w_out, np.zeros(5), 0.7)
    rng = make_rng(3)
    np.testing.assert_allclose(icnn_score(q, rng.random((6, 5))), 0.7, atol=1e-12)


def test_icnn_midpoint_convexity():
    rng = make_rng(4)
    for _ in range(20):
        q = init_params("icnn", 6, (5, 5), rng=rng)
        A, B = rng.random((50, 6)), rng.random((50, 6))
        mid = icnn_score(q, (A + B) / 2)
        assert np.all(mid <= (icnn_score(q, A) + icnn_score(q, B)) / 2 + 1e-9)


def test_icnn_affine_when_only_skip_paths_are_linear():
    # with every hidden unit's pre-activation positive, ELU is identity and psi is affine
    q = init_params("icnn", 3, (2,), seed=5)
    q.skip[0][:] = np.abs(q.skip[0])
    q.bias[0][:] = 1.0
    rng = make_rng(5)
    A, B = rng.random((20, 3)), rng.random((20, 3))
    np.testing.assert_allclose(icnn_score(q, (A + B) / 2),
                               (icnn_score(q, A) + icnn_score(q, B)) / 2, atol=1e-12)


def test_icnn_rejects_negative_constrained_weight():
    q = init_params("icnn", 4, (3, 3), seed=6)
    q.hidden[0][0, 0] = -0.5
    with pytest.raises(ContractError):
        icnn_score(q, np.zeros(4))


def test_icnn_bce_examples():
    q = init_params("icnn", 4, (3, 3), seed=6)
    q = IcnnParams([np.zeros_like(s) for s in q.skip], [np.zeros_like(b) for b in q.bias],
                   q.hidden, np.zeros_like(q.w_out), np.zeros(4), 0.0)
    for pert in (0, 1):
        assert icnn_loss_and_grads(q, np.ones(4), pert)[0] == pytest.approx(math.log(2))
    q.b_out = 60.0
    assert icnn_loss_and_grads(q, np.ones(4), 1)[0] < 1e-20


def test_icnn_gradients_match_fd():
    rng = make_rng(7)
    for k in range(10):
        q = init_params("icnn", 5, (4, 3), rng=rng)
        x = rng.random(5)
        _, _, gx, _ = icnn_loss_and_grads(q, x, k % 2)
        fd = central_diff_grad(lambda z: icnn_loss_and_grads(q, z, k % 2)[0], x)
        assert rel_err(gx, fd) < 1e-4
        _, gpsi = icnn_score_and_grad(q, x)
        assert rel_err(gpsi, central_diff_grad(lambda z: icnn_score(q, z), x)) < 1e-4
    X = rng.random((3, 5))
    pert = np.array([0, 1, 1])
    _, g, _, _ = icnn_loss_and_grads(q, X, pert, reduction="mean")
    named = q.named_arrays()
    gn = g.named_arrays()
    for key, base in named.items():
        def fn(v, key=key, base=base):
            arrs = dict(named)
            arrs[key] = v.reshape(np.shape(base))
            return icnn_loss_and_grads(IcnnParams.from_named(arrs), X, pert, reduction="mean")[0]
        fd = central_diff_grad(fn, np.ravel(base))
        assert rel_err(gn[key], fd) < 1e-4, key


def test_project_nonneg_scope_and_idempotence():
    q = init_params("icnn", 4, (3, 3), seed=8)
    q.hidden[0][0, 0] = -0.5
    q.w_out[0] = -0.5
    q.skip[0][0, 0] = -0.5
    p1 = project_nonneg(q)
    assert p1.hidden[0][0, 0] == 0.0 and p1.w_out[0] == 0.0
    assert p1.skip[0][0, 0] == -0.5
    p2 = project_nonneg(p1)
    for a, b in zip(p1.arrays(), p2.arrays()):
        assert np.array_equal(a, b)
    valid = init_params("icnn", 4, (3, 3), seed=9)
    out = project_nonneg(valid)
    for a, b in zip(valid.arrays(), out.arrays()):
        assert a.tobytes() == b.tobytes()


def test_init_deterministic_and_constrained_nonnegative():
    a = init_params("icnn", 10, (8, 8), seed=3)
    b = init_params("icnn", 10, (8, 8), seed=3)
    for u, v in zip(a.arrays(), b.arrays()):
        np.testing.assert_array_equal(u, v)
    assert a.is_valid()
    assert all(np.all(h >= 0) for h in a.hidden) and np.all(a.w_out >= 0)


def test_init_unconstrained_mean_near_zero():
    p = init_params("mlp", 100, (100, 100), seed=0)
    w = p.W2.ravel()              # 10^4 draws
    sigma = np.sqrt(6.0 / 200) / np.sqrt(3.0)
    assert abs(w.mean()) < 3 * sigma / np.sqrt(w.size)
    assert np.all(np.abs(w) <= np.sqrt(6.0 / 200))


def test_smoothness_witness_is_finite():
    p = init_params("mlp", 8, (6, 6), seed=10)
    rng = make_rng(10)
    A, B = rng.random((1000, 8)), rng.random((1000, 8))
    gA = mlp_loss_and_grads(p, A, 1, need_params=False)[2]
    gB = mlp_loss_and_grads(p, B, 1, need_params=False)[2]
    ratio = np.linalg.norm(gA - gB, axis=1) / np.linalg.norm(A - B, axis=1)
    assert np.all(np.isfinite(ratio)) and ratio.max() < 1e3


def test_detector_without_guard():
    det = Detector(init_params("mlp", 4, (3, 3), seed=1))
    X = np.ones((3, 4))
    np.testing.assert_array_equal(det.psi(X), 0.0)
    assert not det.flagged(X).any()


def test_checkpoint_round_trip_and_bytes(tmp_path):
    mlp = init_params("mlp", 6, (4, 4), seed=1)
    icnn = init_params("icnn", 6, (4, 4), seed=2)
    icnn.b_out = 0.25
    p1, p2 = tmp_path / "a.ckpt", tmp_path / "b.ckpt"
    save_checkpoint(p1, mlp, icnn, tau=1.5, extra={"defense": "pad_sma"})
    save_checkpoint(p2, mlp, icnn, tau=1.5, extra={"defense": "pad_sma"})
    assert p1.read_bytes() == p2.read_bytes()
    m2, i2, meta = load_checkpoint(p1)
    assert meta["d"] == 6 and meta["activation"] == "elu" and meta["tau"] == 1.5
    assert "icnn/w_out" in meta["constrained"]
    for a, b in zip(mlp.arrays() + icnn.arrays(), m2.arrays() + i2.arrays()):
        np.testing.assert_array_equal(a, b)


def test_checkpoint_without_icnn(tmp_path):
    mlp = init_params("mlp", 3, (2, 2), seed=1)
    save_checkpoint(tmp_path / "m.ckpt", mlp)
    _, icnn, meta = load_checkpoint(tmp_path / "m.ckpt")
    assert icnn is None and meta["tau"] is None
