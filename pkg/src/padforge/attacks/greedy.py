"""Feature-addition attacks that flip bits greedily (Grosse, BCA, BGA)."""
from __future__ import annotations

from typing import Callable, Optional

import numpy as np

from .core import AttackResult, Criterion, ManipulationSpace, as_batch, box_bounds


def greedy_flip_attack(variant: str, criterion: Criterion, x, space: ManipulationSpace,
                       steps: int = 100,
                       stop_fn: Optional[Callable[[np.ndarray], np.ndarray]] = None) -> AttackResult:
    """Flip 0 -> 1 on addable features guided by dJ/dx.

    ``grosse`` and ``bca`` flip the single feature with the largest positive
    partial derivative per iteration; ``bga`` flips every feature whose
    partial derivative reaches ``||grad||_2 / sqrt(d)``. An example stops
    once ``stop_fn`` reports it evaded or no feature qualifies.
    """
    if variant not in ("grosse", "bca", "bga"):
        raise ValueError(f"unknown greedy variant {variant!r}")
    X = as_batch(x).copy()
    n, d = X.shape
    _, hi = box_bounds(X, space, addition_only=True)
    active = np.ones(n, dtype=bool)
    j = criterion.value(X)
    trace = [j.copy()]
    for _ in range(steps):
        if stop_fn is not None and active.any():
            idx = np.flatnonzero(active)
            active[idx[stop_fn(X[idx])]] = False
        if not active.any():
            break
        idx = np.flatnonzero(active)
        _, g = criterion.value_and_grad(X[idx])
        open_ = (X[idx] == 0) & (hi[idx] == 1) & (g > 0)
        if variant == "bga":
            thr = np.linalg.norm(g, axis=1, keepdims=True) / np.sqrt(d)
            flip = open_ & (g >= thr)
        else:
            masked = np.where(open_, g, -np.inf)
            best = np.argmax(masked, axis=1)
            flip = np.zeros_like(open_)
            has = open_.any(axis=1)
            flip[np.flatnonzero(has), best[has]] = True
        stuck = ~flip.any(axis=1)
        X[idx] = np.where(flip, 1.0, X[idx])
        active[idx[stuck]] = False
        j = j.copy()
        j[idx] = criterion.value(X[idx])
        trace.append(j)
    return AttackResult(X, np.array(trace), criterion.value(X))
