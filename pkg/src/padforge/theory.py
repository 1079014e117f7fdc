"""Numeric checks of the inner problem's curvature and the attack/training guarantees.

Everything here is measurement, not proof: smoothness and convexity
constants are extremal ratios over finite samples, and every report keeps
its sample counts and raw values so readers can judge tightness.
"""
from __future__ import annotations

import itertools
import json
from dataclasses import asdict, dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from .attacks.core import (DEFAULT_ALPHAS, Criterion, ManipulationSpace, as_batch,
                           box_bounds)
from .attacks.gradient import sma_attack
from .numerics import DEFAULT_EIGEN_CAP, NumericError, make_rng, sigmoid, sym_eigenvalues

CONCAVE_TOL = 1e-6
ORACLE_CAP = 12


def _jsonable(obj):
    if isinstance(obj, dict):
        return {k: _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _jsonable(obj.tolist())
    if isinstance(obj, (np.floating, float)):
        v = float(obj)
        return v if np.isfinite(v) else str(v)
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, np.bool_):
        return bool(obj)
    return obj


def report_json(report) -> str:
    data = asdict(report) if hasattr(report, "__dataclass_fields__") else report
    return json.dumps(_jsonable(data), indent=1, sort_keys=True)


# ---------------------------------------------------------------- Hessian spectrum

@dataclass
class ConcavityReport:
    lam: float
    eigenvalues: np.ndarray
    max_eigenvalue: float
    min_eigenvalue: float
    verdict: str
    asymmetry: float
    h: float


def fd_hessian(fn: Callable[[np.ndarray], np.ndarray], x, h: float = 1e-3):
    """Central second-difference Hessian of a batched scalar function.

    ``fn`` maps ``(m, d)`` to ``(m,)``. Returns ``(H_symmetrized, asymmetry)``
    where ``asymmetry`` is ``max|H - H^T|`` before symmetrization.
    """
    if h <= 0:
        raise ValueError("h must be positive")
    x = np.asarray(x, dtype=np.float64).ravel()
    d = x.size
    E = np.eye(d) * h
    # points x + s_i e_i + s_j e_j for all (i, j) and four sign pairs
    pp = x + E[:, None, :] + E[None, :, :]
    pm = x + E[:, None, :] - E[None, :, :]
    mp = x - E[:, None, :] + E[None, :, :]
    mm = x - E[:, None, :] - E[None, :, :]
    vals = [np.asarray(fn(P.reshape(-1, d)), dtype=np.float64).reshape(d, d) for P in (pp, pm, mp, mm)]
    if not all(np.all(np.isfinite(v)) for v in vals):
        raise NumericError("non-finite function value in Hessian probe")
    H = (vals[0] - vals[1] - vals[2] + vals[3]) / (4.0 * h * h)
    asym = float(np.max(np.abs(H - H.T))) if d else 0.0
    return 0.5 * (H + H.T), asym


def hessian_spectrum(criterion: Criterion, x, lam: Optional[float] = None, h: float = 1e-3,
                     cap: int = DEFAULT_EIGEN_CAP) -> ConcavityReport:
    """Sorted eigenvalues of the finite-difference Hessian of the criterion at ``x``."""
    crit = criterion if lam is None else criterion.with_lambda(lam)
    x = np.asarray(x, dtype=np.float64).ravel()
    if x.size > cap:
        raise ValueError(f"dimension {x.size} exceeds the eigen cap {cap}; reduce d")
    H, asym = fd_hessian(crit.value, x, h)
    ev = sym_eigenvalues(H, cap=cap)
    mx = float(ev[-1])
    return ConcavityReport(float(crit.lam), ev, mx, float(ev[0]),
                           "concave" if mx <= CONCAVE_TOL else "indefinite", asym, h)


# ---------------------------------------------------------------- constants

@dataclass
class SmoothnessEstimate:
    L_f: float
    L_g: float
    M_g: float
    n_pairs: int
    box: tuple = (0.0, 1.0)


def gradient_ratios(grad_fn: Callable[[np.ndarray], np.ndarray], A, B):
    """Per-pair ``||g(a) - g(b)|| / ||a - b||`` and ``<g(a) - g(b), a - b> / ||a - b||^2``.

    Pairs with ``a == b`` are dropped.
    """
    A = as_batch(A)
    B = as_batch(B)
    D = A - B
    nn = np.sum(D * D, axis=1)
    keep = nn > 0
    A, B, D, nn = A[keep], B[keep], D[keep], nn[keep]
    G = np.atleast_2d(grad_fn(A)) - np.atleast_2d(grad_fn(B))
    norm_ratio = np.linalg.norm(G, axis=1) / np.sqrt(nn)
    ip_ratio = np.sum(G * D, axis=1) / nn
    return norm_ratio, ip_ratio


def sample_pairs(rng, d: int, n_pairs: int, lo: float = 0.0, hi: float = 1.0):
    """``n_pairs`` uniform pairs in ``[lo, hi]^d``; the first k pairs do not depend on ``n_pairs``."""
    P = rng.uniform(lo, hi, size=(n_pairs, 2, d))
    return P[:, 0], P[:, 1]


def segment_pairs(A, B, n_grid: int = 16):
    """Expand each pair ``(a, b)`` into ``(a, a + t (b - a))`` for ``t = k / n_grid``."""
    A = as_batch(A)
    B = as_batch(B)
    t = np.arange(1, n_grid + 1) / n_grid
    A2 = np.repeat(A, n_grid, axis=0)
    B2 = A2 + np.tile(t, A.shape[0])[:, None] * np.repeat(B - A, n_grid, axis=0)
    return A2, B2


def estimate_constants(grad_f, grad_g, A, B) -> SmoothnessEstimate:
    """Extremal ratios over the given pairs.

    ``L_f`` and ``L_g`` are the largest gradient-difference norm ratios;
    ``M_g`` is the smallest monotonicity ratio of ``grad_g``, the quantity
    bounded below by the strong-convexity constant. ``grad_g`` may be
    ``None`` (then ``L_g = M_g = 0``).
    """
    A = as_batch(A)
    B = as_batch(B)
    if A.shape[0] < 1:
        raise ValueError("need at least one pair")
    lf, _ = gradient_ratios(grad_f, A, B)
    L_f = float(lf.max()) if lf.size else 0.0
    L_g = M_g = 0.0
    if grad_g is not None:
        lg, mg = gradient_ratios(grad_g, A, B)
        if lg.size:
            L_g, M_g = float(lg.max()), float(mg.min())
    return SmoothnessEstimate(L_f, L_g, M_g, int(A.shape[0]),
                              (float(min(A.min(), B.min())), float(max(A.max(), B.max()))))


def criterion_gradients(criterion: Criterion):
    """``(grad F, grad psi)`` callables for a criterion (``grad psi`` may be ``None``)."""
    gf = lambda X: criterion.f_parts(as_batch(X))[1]
    probe = criterion.psi_parts(np.zeros((1, _dim(criterion))))
    gg = None if probe is None else (lambda X: criterion.psi_parts(as_batch(X))[1])
    return gf, gg


def _dim(criterion) -> int:
    if hasattr(criterion, "mlp"):
        return criterion.mlp.d
    return criterion.d


# ---------------------------------------------------------------- exhaustive oracle

def box_vertices(x, space: ManipulationSpace, addition_only: bool = False,
                 cap: int = ORACLE_CAP) -> np.ndarray:
    """Every binary point in the feasible box of ``x``."""
    x = np.asarray(x, dtype=np.float64).ravel()
    if x.size > cap:
        raise ValueError(f"exhaustive oracle limited to d <= {cap}, got {x.size}")
    lo, hi = box_bounds(x, space, addition_only)
    free = np.flatnonzero(lo != hi)
    V = np.repeat(x[None, :], 2 ** free.size, axis=0)
    if free.size:
        bits = np.array(list(itertools.product((0.0, 1.0), repeat=free.size)))
        V[:, free] = bits
    return V


def exhaustive_optimum(criterion: Criterion, x, space: ManipulationSpace,
                       addition_only: bool = False, cap: int = ORACLE_CAP):
    V = box_vertices(x, space, addition_only, cap)
    J = criterion.value(V)
    k = int(np.argmax(J))
    return float(J[k]), V[k]


@dataclass
class AttackGapReport:
    applicable: bool
    lam: float
    d: int
    j_start: float
    j_star: float
    T: list
    j_attack: list
    ratio: list
    bound: list
    holds: list
    constants: dict = field(default_factory=dict)


def attack_gap_bound(T: int, d: int, lam: float, est: SmoothnessEstimate) -> float:
    kappa = (lam * est.M_g - est.L_f) / (lam * est.L_g + est.L_f)
    return float(np.exp(-(T / d) * kappa))


def attack_gap_check(criterion: Criterion, x, space: ManipulationSpace, lam: float,
                     T_list: Sequence[int], est: SmoothnessEstimate, alphas: Optional[dict] = None,
                     addition_only: bool = False, cap: int = ORACLE_CAP) -> AttackGapReport:
    """Measured attack gap ratio against the exponential bound.

    One SMA run of ``max(T_list)`` steps is made; the point for each ``T``
    is the best rounded iterate among the first ``T`` steps, so ratios are
    non-increasing in ``T``. When ``lam * M_g <= L_f`` the premise fails and
    no bound is reported.
    """
    crit = criterion.with_lambda(lam)
    x = np.asarray(x, dtype=np.float64).ravel()
    d = x.size
    j_star, _ = exhaustive_optimum(crit, x, space, addition_only, cap)
    j0 = float(crit.value(x[None, :])[0])
    T_list = sorted(int(t) for t in T_list)
    res = sma_attack(crit, x, space, T_list[-1], alphas or dict(DEFAULT_ALPHAS), addition_only)
    kept = np.maximum.accumulate(res.criterion_trace[:, 0])
    applicable = lam * est.M_g > est.L_f
    gap0 = j_star - j0
    j_att, ratio, bound, holds = [], [], [], []
    for T in T_list:
        jT = float(kept[T])
        r = 0.0 if gap0 <= 0 else max(j_star - jT, 0.0) / gap0
        j_att.append(jT)
        ratio.append(r)
        if applicable:
            b = attack_gap_bound(T, d, lam, est)
            bound.append(b)
            holds.append(bool(r <= b + 1e-12))
        else:
            bound.append(None)
            holds.append(None)
    return AttackGapReport(bool(applicable), float(lam), d, j0, j_star, T_list, j_att, ratio,
                          bound, holds, asdict(est))


# ---------------------------------------------------------------- quadratic sandwich

@dataclass
class SandwichReport:
    applicable: bool
    lam: float
    n_pairs: int
    violations_lower: int
    violations_upper: int
    slack: float
    residual: np.ndarray
    lower: np.ndarray
    upper: np.ndarray
    constants: dict = field(default_factory=dict)

    @property
    def violations(self) -> int:
        return self.violations_lower + self.violations_upper


def quadratic_bound_check(criterion: Criterion, A, B, lam: float, est: SmoothnessEstimate,
                          slack: float = 1e-6) -> SandwichReport:
    """Check ``-(lam L_g + L_f)/2 |d|^2 <= R <= -(lam M_g - L_f)/2 |d|^2`` per pair.

    ``R = J(b) - J(a) - <grad J(a), b - a>``. Pairs are rows of ``A`` and ``B``.
    """
    crit = criterion.with_lambda(lam)
    A = as_batch(A)
    B = as_batch(B)
    applicable = lam * est.M_g > est.L_f
    Ja, ga = crit.value_and_grad(A)
    Jb = crit.value(B)
    D = B - A
    nn = np.sum(D * D, axis=1)
    R = Jb - Ja - np.sum(ga * D, axis=1)
    lower = -(lam * est.L_g + est.L_f) / 2 * nn
    upper = -(lam * est.M_g - est.L_f) / 2 * nn
    vl = int(np.sum(R < lower - slack))
    vu = int(np.sum(R > upper + slack))
    return SandwichReport(bool(applicable), float(lam), int(A.shape[0]), vl, vu, slack,
                          R, lower, upper, asdict(est))


# ---------------------------------------------------------------- convergence

@dataclass
class ConvergenceReport:
    grad_norms: np.ndarray
    running_mean: np.ndarray
    c1: float
    c2: float
    window: int
    eventually_nonincreasing: bool
    settle_window: Optional[int]


def fit_sqrt_floor(running_mean):
    """Least-squares fit of ``r_N ~ c1 / sqrt(N) + c2`` with ``N = 1..len``."""
    r = np.asarray(running_mean, dtype=np.float64)
    N = np.arange(1, r.size + 1, dtype=np.float64)
    A = np.column_stack([1.0 / np.sqrt(N), np.ones_like(N)])
    (c1, c2), *_ = np.linalg.lstsq(A, r, rcond=None)
    return float(c1), float(c2)


def convergence_trace(grad_norms, window: int = 10, tol: float = 1e-12) -> ConvergenceReport:
    """Running mean of per-epoch gradient norms, its fitted floor and a settling test.

    The running mean sampled at window ends must be non-increasing from some
    window in the first half of the run onward.
    """
    g = np.asarray(grad_norms, dtype=np.float64)
    if g.size == 0:
        raise ValueError("empty gradient-norm trace")
    rm = np.cumsum(g) / np.arange(1, g.size + 1)
    c1, c2 = fit_sqrt_floor(rm) if g.size >= 2 else (0.0, float(rm[0]))
    ends = rm[window - 1::window]
    settle = None
    for w0 in range(0, max(1, (ends.size + 1) // 2)):
        tail = ends[w0:]
        if tail.size and np.all(np.diff(tail) <= tol * max(1.0, abs(tail[0]))):
            settle = w0
            break
    return ConvergenceReport(g, rm, c1, c2, window, settle is not None, settle)


def logistic_sgd_trace(X, y, lr: float, epochs: int, batch: int = 32, seed: int = 0):
    """Per-epoch full-batch gradient norms of minibatch SGD on logistic regression."""
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    n, d = X.shape
    w = np.zeros(d)
    b = 0.0
    rng = make_rng(seed, 20)

    def grad(Xs, ys, w, b):
        r = sigmoid(Xs @ w + b) - ys
        return Xs.T @ r / len(ys), float(r.mean())

    norms = []
    for _ in range(epochs):
        perm = rng.permutation(n)
        for s in range(0, n, batch):
            idx = perm[s:s + batch]
            gw, gb = grad(X[idx], y[idx], w, b)
            w = w - lr * gw
            b = b - lr * gb
        gw, gb = grad(X, y, w, b)
        norms.append(float(np.sqrt(gw @ gw + gb * gb)))
    return np.array(norms)


def minibatch_gradient_variance(grad_fn: Callable[[np.ndarray], list], n: int, batch: int,
                                rng) -> float:
    """Mean squared deviation of minibatch gradients from their average (diagnostic only).

    ``grad_fn(rows)`` returns a list of gradient arrays for those rows.
    """
    perm = rng.permutation(n)
    flat = []
    for s in range(0, n - batch + 1, batch):
        gs = grad_fn(perm[s:s + batch])
        flat.append(np.concatenate([np.ravel(g) for g in gs]))
    if len(flat) < 2:
        return 0.0
    F = np.array(flat)
    return float(np.mean(np.sum((F - F.mean(0)) ** 2, axis=1)))


# ---------------------------------------------------------------- constructed instances

class QuadraticCriterion(Criterion):
    """``J(x) = F(x) - lam psi(x)`` with quadratic ``F`` and ``psi``.

    ``F(x) = 0.5 x'Ax + a'x + a0`` and ``psi(x) = 0.5 x'Bx + b'x + b0``.
    ``psi_B = None`` removes the adversary score.
    """

    def __init__(self, A, a, a0=0.0, B=None, b=None, b0=0.0, lam: float = 0.0):
        self.A = np.asarray(A, dtype=np.float64)
        self.a = np.asarray(a, dtype=np.float64)
        self.a0 = float(a0)
        self.B = None if B is None else np.asarray(B, dtype=np.float64)
        self.b = None if B is None else (np.zeros(self.A.shape[0]) if b is None
                                         else np.asarray(b, dtype=np.float64))
        self.b0 = float(b0)
        if lam < 0:
            raise ValueError("lambda must be non-negative")
        self.lam = float(lam)

    @property
    def d(self) -> int:
        return self.A.shape[0]

    def f_parts(self, X):
        X = as_batch(X)
        return (0.5 * np.sum((X @ self.A) * X, axis=1) + X @ self.a + self.a0,
                X @ self.A.T * 0.5 + X @ self.A * 0.5 + self.a)

    def psi_parts(self, X):
        if self.B is None:
            return None
        X = as_batch(X)
        return (0.5 * np.sum((X @ self.B) * X, axis=1) + X @ self.b + self.b0,
                X @ self.B.T * 0.5 + X @ self.B * 0.5 + self.b)

    def with_lambda(self, lam: float) -> "QuadraticCriterion":
        return QuadraticCriterion(self.A, self.a, self.a0, self.B, self.b, self.b0, lam)
