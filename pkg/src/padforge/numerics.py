"""Dense numeric helpers shared by every other module.

Arrays are plain ``numpy.float64`` ndarrays. Randomness comes from
:func:`make_rng`, which wraps numpy's counter-based Philox4x64 generator
keyed by ``(seed, stream)`` so that independent workers can draw from
non-overlapping, reproducible streams.
"""
from __future__ import annotations

from typing import Callable

import numpy as np

DEFAULT_EIGEN_CAP = 512


class NumericError(ArithmeticError):
    """Raised when a computation produces NaN or Inf."""


def make_rng(seed: int, stream: int = 0) -> np.random.Generator:
    """Deterministic generator for ``(seed, stream)``.

    Philox is counter-based, so identical keys give identical draws on
    every platform numpy supports.
    """
    ss = np.random.SeedSequence([int(seed) & 0xFFFFFFFFFFFFFFFF, int(stream)])
    return np.random.Generator(np.random.Philox(ss))


def ensure_finite(a, what: str = "value") -> np.ndarray:
    arr = np.asarray(a, dtype=np.float64)
    if not np.all(np.isfinite(arr)):
        raise NumericError(f"non-finite {what}")
    return arr


def elu(v, alpha: float = 1.0) -> np.ndarray:
    v = np.asarray(v, dtype=np.float64)
    # expm1 on the clipped branch avoids overflow warnings for large positive v
    return np.where(v > 0, v, alpha * np.expm1(np.minimum(v, 0.0)))


def elu_grad(v, alpha: float = 1.0) -> np.ndarray:
    v = np.asarray(v, dtype=np.float64)
    return np.where(v > 0, 1.0, alpha * np.exp(np.minimum(v, 0.0)))


def elu_hess(v, alpha: float = 1.0) -> np.ndarray:
    """Second derivative of ELU (zero on the linear branch)."""
    v = np.asarray(v, dtype=np.float64)
    return np.where(v > 0, 0.0, alpha * np.exp(np.minimum(v, 0.0)))


def sigmoid(v) -> np.ndarray:
    v = np.asarray(v, dtype=np.float64)
    out = np.empty_like(v)
    pos = v >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-v[pos]))
    ev = np.exp(v[~pos])
    out[~pos] = ev / (1.0 + ev)
    return out


def log_sigmoid(v) -> np.ndarray:
    v = np.asarray(v, dtype=np.float64)
    return -np.logaddexp(0.0, -v)


def softmax(logits) -> np.ndarray:
    z = np.asarray(logits, dtype=np.float64)
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def softmax_cross_entropy(logits, label):
    """Per-example cross-entropy and its gradient w.r.t. the logits.

    ``logits`` has shape ``(2,)`` or ``(n, 2)``; ``label`` is a scalar or an
    ``(n,)`` array of class indices. Returns ``(loss, grad)`` with the batch
    shape of the input.
    """
    z = np.asarray(logits, dtype=np.float64)
    single = z.ndim == 1
    z = np.atleast_2d(z)
    y = np.broadcast_to(np.asarray(label, dtype=np.int64), z.shape[:1])
    shifted = z - z.max(axis=1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=1))
    rows = np.arange(z.shape[0])
    loss = lse - shifted[rows, y]
    grad = softmax(z)
    grad[rows, y] -= 1.0
    if single:
        return float(loss[0]), grad[0]
    return loss, grad


def central_diff_grad(fn: Callable[[np.ndarray], float], x, h: float = 1e-5) -> np.ndarray:
    """Central finite-difference gradient of a scalar field."""
    if h <= 0:
        raise ValueError("h must be positive")
    x = np.asarray(x, dtype=np.float64)
    g = np.zeros_like(x)
    flat = g.reshape(-1)
    for i in range(x.size):
        e = np.zeros(x.size)
        e[i] = h
        e = e.reshape(x.shape)
        hi, lo = float(fn(x + e)), float(fn(x - e))
        if not (np.isfinite(hi) and np.isfinite(lo)):
            raise NumericError(f"non-finite evaluation at coordinate {i}")
        flat[i] = (hi - lo) / (2.0 * h)
    return g


def sym_eigenvalues(H, tol: float = 1e-10, cap: int = DEFAULT_EIGEN_CAP,
                    max_sweeps: int = 100) -> np.ndarray:
    """Eigenvalues of a symmetric matrix in ascending order (cyclic Jacobi).

    Sweeps over all off-diagonal pairs applying Givens rotations until the
    off-diagonal Frobenius norm drops below ``tol`` (relative to ``||H||_F``
    when that exceeds one).
    """
    A = np.array(H, dtype=np.float64, copy=True)
    if A.ndim != 2 or A.shape[0] != A.shape[1]:
        raise ValueError("expected a square matrix")
    n = A.shape[0]
    if n > cap:
        raise ValueError(f"dimension {n} exceeds eigen cap {cap}")
    ensure_finite(A, "matrix entry")
    if np.max(np.abs(A - A.T), initial=0.0) > 1e-8:
        raise ValueError("matrix is not symmetric")
    A = 0.5 * (A + A.T)
    scale = max(1.0, np.linalg.norm(A))
    for _ in range(max_sweeps):
        off = np.sqrt(2.0 * np.sum(np.triu(A, 1) ** 2))
        if off <= tol * scale:
            break
        for p in range(n - 1):
            for q in range(p + 1, n):
                apq = A[p, q]
                if abs(apq) < 1e-300:
                    continue
                theta = (A[q, q] - A[p, p]) / (2.0 * apq)
                if theta == 0.0:
                    t = 1.0
                elif abs(theta) > 1e100:
                    # theta^2 would overflow; the rotation angle is ~1/(2 theta)
                    t = 0.5 / theta
                else:
                    t = np.sign(theta) / (abs(theta) + np.sqrt(theta * theta + 1.0))
                c = 1.0 / np.sqrt(t * t + 1.0)
                s = t * c
                ap = A[:, p].copy()
                aq = A[:, q].copy()
                A[:, p] = c * ap - s * aq
                A[:, q] = s * ap + c * aq
                rp = A[p, :].copy()
                rq = A[q, :].copy()
                A[p, :] = c * rp - s * rq
                A[q, :] = s * rp + c * rq
                A[p, q] = A[q, p] = 0.0
    return np.sort(np.diag(A))
