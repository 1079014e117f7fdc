"""Shared attack machinery: feasible box, criterion, step directions, rounding."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from ..models import (Detector, IcnnParams, MlpParams, icnn_score,
                      icnn_score_and_grad, mlp_forward, mlp_loss_and_grads)
from ..numerics import softmax_cross_entropy

FAMILIES = ("grosse", "bca", "bga", "rfgsm", "pgd", "mimicry", "maxma", "imaxma",
            "sma", "orth_pgd", "orth_maxma", "orth_imaxma")
ADDITION_ONLY_FAMILIES = ("grosse", "bca", "bga")
NORMS = (1, 2, np.inf)
DEFAULT_ALPHAS = {1: 1.0, 2: 0.5, np.inf: 0.02}
DEFAULT_LAMBDA_GRID = tuple(10.0 ** k for k in range(-5, 6))


def parse_norm(p) -> float:
    if isinstance(p, str):
        p = p.strip().lower()
        if p in ("inf", "linf", "infinity"):
            return np.inf
        p = p.lstrip("l")
    p = float(p)
    if p not in (1.0, 2.0, np.inf):
        raise ValueError(f"unsupported norm {p}")
    return p


def norm_name(p) -> str:
    return "inf" if np.isinf(p) else str(int(p))


@dataclass(frozen=True)
class ManipulationSpace:
    addable: np.ndarray     # bool (d,)
    removable: np.ndarray   # bool (d,)

    def __post_init__(self):
        a = np.asarray(self.addable, dtype=bool)
        r = np.asarray(self.removable, dtype=bool)
        if a.ndim != 1 or a.shape != r.shape:
            raise ValueError("addable/removable masks must be 1-D with equal length")
        object.__setattr__(self, "addable", a)
        object.__setattr__(self, "removable", r)

    @property
    def d(self) -> int:
        return self.addable.shape[0]

    @classmethod
    def from_indices(cls, d: int, addable=(), removable=()):
        a = np.zeros(d, dtype=bool)
        r = np.zeros(d, dtype=bool)
        a[list(addable)] = True
        r[list(removable)] = True
        return cls(a, r)

    @classmethod
    def full(cls, d: int):
        return cls(np.ones(d, dtype=bool), np.ones(d, dtype=bool))

    @classmethod
    def frozen(cls, d: int):
        return cls(np.zeros(d, dtype=bool), np.zeros(d, dtype=bool))


def box_bounds(x, space: ManipulationSpace, addition_only: bool = False):
    """Per-coordinate bounds ``(lo, hi)`` reachable from binary ``x``."""
    x = np.asarray(x, dtype=np.float64)
    if x.shape[-1] != space.d:
        raise ValueError(f"feature dimension {x.shape[-1]} != space dimension {space.d}")
    hi = np.where((x == 0) & space.addable, 1.0, x)
    if addition_only:
        lo = x.copy()
    else:
        lo = np.where((x == 1) & space.removable, 0.0, x)
    return lo, hi


def project(v, lo, hi) -> np.ndarray:
    return np.minimum(np.maximum(v, lo), hi)


def normalized_direction(grad, p) -> np.ndarray:
    """Steepest-ascent unit direction under the l_p norm, row-wise.

    ``p = inf`` gives the sign vector, ``p = 2`` the normalized gradient
    (zero below 1e-12 norm), ``p = 1`` a signed one-hot at the largest
    magnitude entry with ties broken toward the lowest index.
    """
    g = np.asarray(grad, dtype=np.float64)
    single = g.ndim == 1
    g = np.atleast_2d(g)
    p = parse_norm(p)
    if np.isinf(p):
        e = np.sign(g)
    elif p == 2:
        nrm = np.linalg.norm(g, axis=1, keepdims=True)
        safe = np.where(nrm < 1e-12, 1.0, nrm)
        e = np.where(nrm < 1e-12, 0.0, g / safe)
    else:
        e = np.zeros_like(g)
        idx = np.argmax(np.abs(g), axis=1)
        rows = np.arange(g.shape[0])
        e[rows, idx] = np.sign(g[rows, idx])
    return e[0] if single else e


def round_discretize(x_real, thresholds=0.5) -> np.ndarray:
    """Bit ``i`` is 1 iff ``x_real[i] >= thresholds[i]`` (ties round up)."""
    x = np.asarray(x_real, dtype=np.float64)
    return (x >= thresholds).astype(np.float64)


def random_thresholds(rng, shape) -> np.ndarray:
    # values in (0, 1] so that 0 never rounds up and 1 always does
    return 1.0 - rng.random(shape)


def feasible_grad(grad, x_cur, lo, hi) -> np.ndarray:
    """Zero gradient entries that point out of the box at the current point."""
    blocked = ((grad > 0) & (x_cur >= hi)) | ((grad < 0) & (x_cur <= lo))
    return np.where(blocked, 0.0, grad)


# ---------------------------------------------------------------- criterion

class Criterion:
    """Attack criterion ``J(x) = F(x) - lam * psi(x)`` evaluated row-wise.

    Subclasses provide :meth:`f_parts` and :meth:`psi_parts` returning values
    and input gradients; ``psi_parts`` may return ``None`` when there is no
    adversary score.
    """
    lam: float = 0.0

    def f_parts(self, X):
        raise NotImplementedError

    def psi_parts(self, X):
        return None

    def f_value(self, X):
        return self.f_parts(X)[0]

    def psi_value(self, X):
        parts = self.psi_parts(X)
        return None if parts is None else parts[0]

    @property
    def uses_psi(self) -> bool:
        return self.lam != 0.0

    def value(self, X) -> np.ndarray:
        X = np.atleast_2d(np.asarray(X, dtype=np.float64))
        F = self.f_value(X)
        if self.uses_psi:
            psi = self.psi_value(X)
            if psi is not None:
                F = F - self.lam * psi
        return F

    def value_and_grad(self, X):
        X = np.atleast_2d(np.asarray(X, dtype=np.float64))
        F, gF = self.f_parts(X)
        if self.uses_psi:
            parts = self.psi_parts(X)
            if parts is not None:
                psi, gpsi = parts
                return F - self.lam * psi, gF - self.lam * gpsi
        return F, gF

    def with_lambda(self, lam: float) -> "Criterion":
        raise NotImplementedError


class ModelCriterion(Criterion):
    """``F(theta, x, 1) - lam * psi_vartheta(x)`` for a trained detector pair."""

    def __init__(self, mlp: MlpParams, icnn: Optional[IcnnParams] = None, lam: float = 0.0):
        if lam < 0:
            raise ValueError("lambda must be non-negative")
        self.mlp = mlp
        self.icnn = icnn
        self.lam = float(lam)

    @classmethod
    def for_detector(cls, det: Detector, lam: float = 0.0):
        return cls(det.mlp, det.icnn, lam)

    def f_parts(self, X):
        _, _, gx, per_ex = mlp_loss_and_grads(self.mlp, X, 1, need_params=False)
        return per_ex, gx

    def f_value(self, X):
        per_ex, _ = softmax_cross_entropy(np.atleast_2d(mlp_forward(self.mlp, X)), 1)
        return per_ex

    def psi_parts(self, X):
        if self.icnn is None:
            return None
        return icnn_score_and_grad(self.icnn, np.atleast_2d(X))

    def psi_value(self, X):
        if self.icnn is None:
            return None
        return icnn_score(self.icnn, np.atleast_2d(X))

    def with_lambda(self, lam: float) -> "ModelCriterion":
        return ModelCriterion(self.mlp, self.icnn, lam)


def criterion_j(mlp: MlpParams, icnn: Optional[IcnnParams], x_prime, lam: float) -> np.ndarray:
    return ModelCriterion(mlp, icnn, lam).value(x_prime)


# ---------------------------------------------------------------- config / result

@dataclass
class AttackConfig:
    family: str
    p: float = np.inf
    steps: int = 100
    alphas: dict = field(default_factory=lambda: dict(DEFAULT_ALPHAS))
    epsilon: float = 0.02
    lam: Optional[float] = None
    lambda_grid: tuple = DEFAULT_LAMBDA_GRID
    mode: str = "oblivious"
    addition_only: bool = False
    random_round: bool = True
    repeats: int = 5
    n_ben: int = 1
    seed: int = 0

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise ValueError(f"unknown attack family {self.family!r}")
        if self.mode not in ("oblivious", "adaptive"):
            raise ValueError(f"unknown mode {self.mode!r}")
        self.p = parse_norm(self.p)
        self.alphas = {parse_norm(k): float(v) for k, v in self.alphas.items()}
        if self.steps < 0 or self.repeats < 1 or self.n_ben < 1:
            raise ValueError("steps >= 0, repeats >= 1 and n_ben >= 1 required")
        if any(a <= 0 for a in self.alphas.values()) or self.epsilon < 0:
            raise ValueError("step sizes must be positive")
        if self.lam is not None and self.lam < 0:
            raise ValueError("lambda must be non-negative")
        if len(self.lambda_grid) == 0 or any(l < 0 for l in self.lambda_grid):
            raise ValueError("lambda grid must be non-empty and non-negative")
        self.lambda_grid = tuple(sorted(float(l) for l in self.lambda_grid))
        if self.family in ADDITION_ONLY_FAMILIES:
            self.addition_only = True

    @property
    def label(self) -> str:
        if self.family in ("pgd", "orth_pgd"):
            return f"{self.family}-l{norm_name(self.p)}"
        if self.family == "mimicry":
            return f"mimicry-x{self.n_ben}"
        return self.family


@dataclass
class AttackResult:
    """Batched attack outcome; row ``i`` belongs to input example ``i``."""
    x_adv: np.ndarray
    criterion_trace: np.ndarray            # (steps + 1, n)
    j_final: np.ndarray
    evaded_f: Optional[np.ndarray] = None
    evaded_g: Optional[np.ndarray] = None
    chosen_lambda: Optional[np.ndarray] = None

    @property
    def n(self) -> int:
        return self.x_adv.shape[0]

    def take(self, idx) -> "AttackResult":
        pick = lambda a: None if a is None else a[idx]
        return AttackResult(self.x_adv[idx], self.criterion_trace[:, idx], self.j_final[idx],
                            pick(self.evaded_f), pick(self.evaded_g), pick(self.chosen_lambda))


def mark_evasion(result: AttackResult, det: Detector) -> AttackResult:
    result.evaded_f = det.f(result.x_adv) == 0
    result.evaded_g = ~det.flagged(result.x_adv)
    return result


def as_batch(x) -> np.ndarray:
    return np.atleast_2d(np.asarray(x, dtype=np.float64))
