"""Projected-gradient attack families over the feasible box.

All functions take a :class:`Criterion` and a batch ``x`` of binary
feature vectors. The perturbation is kept continuous during the search and
rounded only when a candidate is scored or the loop ends. Criterion traces
record ``J(round(x + delta_t))`` for ``t = 0..T``.
"""
from __future__ import annotations

from typing import Optional, Sequence

import numpy as np

from ..numerics import make_rng
from .core import (DEFAULT_ALPHAS, AttackResult, Criterion, ManipulationSpace,
                   as_batch, box_bounds, feasible_grad, normalized_direction,
                   parse_norm, project, random_thresholds, round_discretize)

SMA_ORDER = (1.0, 2.0, np.inf)


def _setup(x, space, addition_only, start):
    X = as_batch(x)
    lo, hi = box_bounds(X, space, addition_only)
    x0 = X if start is None else project(as_batch(start), lo, hi)
    return X, lo, hi, x0


def _step(delta, grad, x0, lo, hi, p, alpha):
    g = feasible_grad(grad, x0 + delta, lo, hi)
    e = normalized_direction(g, p)
    return project(delta + alpha * e, lo - x0, hi - x0)


def _finish(criterion, x0, delta, lo, hi, trace, thresholds=0.5):
    x_adv = project(round_discretize(x0 + delta, thresholds), lo, hi)
    return AttackResult(x_adv, np.array(trace), criterion.value(x_adv))


def pgd_attack(criterion: Criterion, x, space: ManipulationSpace, p=np.inf,
               alpha: Optional[float] = None, steps: int = 100,
               addition_only: bool = False, start=None) -> AttackResult:
    """PGD-l_p ascent on the criterion from ``delta = 0``.

    ``start`` restarts the search from another point while the box is still
    derived from the original ``x``.
    """
    p = parse_norm(p)
    alpha = DEFAULT_ALPHAS[p] if alpha is None else alpha
    X, lo, hi, x0 = _setup(x, space, addition_only, start)
    delta = np.zeros_like(x0)
    trace = [criterion.value(round_discretize(x0))]
    for _ in range(steps):
        _, g = criterion.value_and_grad(x0 + delta)
        delta = _step(delta, g, x0, lo, hi, p, alpha)
        trace.append(criterion.value(round_discretize(x0 + delta)))
    return _finish(criterion, x0, delta, lo, hi, trace)


def sma_attack(criterion: Criterion, x, space: ManipulationSpace, steps: int = 100,
               alphas: Optional[dict] = None, addition_only: bool = False,
               start=None, norms: Sequence = SMA_ORDER, return_choices: bool = False):
    """Stepwise mixture of PGD-l1/l2/linf.

    Every step builds one candidate per norm from the shared current
    perturbation, scores each by the criterion at its rounded point and
    keeps the best (ties go to the earlier norm in ``norms``).
    """
    alphas = {**DEFAULT_ALPHAS, **({} if alphas is None else
                                   {parse_norm(k): v for k, v in alphas.items()})}
    norms = [parse_norm(p) for p in norms]
    X, lo, hi, x0 = _setup(x, space, addition_only, start)
    n = X.shape[0]
    rows = np.arange(n)
    delta = np.zeros_like(x0)
    trace = [criterion.value(round_discretize(x0))]
    choices = []
    for _ in range(steps):
        _, g = criterion.value_and_grad(x0 + delta)
        cands = np.stack([_step(delta, g, x0, lo, hi, p, alphas[p]) for p in norms])
        scores = np.stack([criterion.value(round_discretize(x0 + c)) for c in cands])
        pick = np.argmax(scores, axis=0)
        delta = cands[pick, rows]
        trace.append(scores[pick, rows])
        choices.append(pick)
    res = _finish(criterion, x0, delta, lo, hi, trace)
    if return_choices:
        return res, np.array(choices, dtype=np.int64).reshape(steps, n)
    return res


def rfgsm_attack(criterion: Criterion, x, space: ManipulationSpace, epsilon: float = 0.02,
                 steps: int = 100, random_round: bool = True, addition_only: bool = True,
                 seed: int = 0, example_ids=None) -> AttackResult:
    """Iterated FGSM (sign steps of size ``epsilon``) with optional random rounding.

    Random thresholds for row ``i`` come from stream ``example_ids[i]`` of
    ``seed``, so results do not depend on how a batch is split.
    """
    X, lo, hi, x0 = _setup(x, space, addition_only, None)
    delta = np.zeros_like(x0)
    trace = [criterion.value(round_discretize(x0))]
    for _ in range(steps):
        _, g = criterion.value_and_grad(x0 + delta)
        delta = project(delta + epsilon * np.sign(g), lo - x0, hi - x0)
        trace.append(criterion.value(round_discretize(x0 + delta)))
    thresholds = 0.5
    if random_round:
        ids = np.arange(X.shape[0]) if example_ids is None else np.asarray(example_ids)
        thresholds = np.stack([random_thresholds(make_rng(seed, int(i)), X.shape[1]) for i in ids])
    return _finish(criterion, x0, delta, lo, hi, trace, thresholds)


def orthogonal_direction(g_main, g_other) -> np.ndarray:
    """Component of ``g_main`` orthogonal to ``g_other`` (row-wise)."""
    g_main = np.atleast_2d(g_main)
    g_other = np.atleast_2d(g_other)
    nn = np.sum(g_other * g_other, axis=1, keepdims=True)
    coef = np.where(nn < 1e-24, 0.0, np.sum(g_main * g_other, axis=1, keepdims=True)
                    / np.where(nn < 1e-24, 1.0, nn))
    return g_main - coef * g_other


def orthogonal_pgd(criterion: Criterion, x, space: ManipulationSpace, p=np.inf,
                   alpha: Optional[float] = None, steps: int = 100,
                   addition_only: bool = False, start=None) -> AttackResult:
    """Alternate F-ascent orthogonal to grad psi with psi-descent orthogonal to grad F.

    The returned point is the rounded iterate with the highest criterion
    value over the whole run.
    """
    p = parse_norm(p)
    alpha = DEFAULT_ALPHAS[p] if alpha is None else alpha
    X, lo, hi, x0 = _setup(x, space, addition_only, start)
    n = X.shape[0]
    delta = np.zeros_like(x0)
    best_x = round_discretize(x0)
    best_j = criterion.value(best_x)
    trace = [best_j]
    for t in range(steps):
        xc = x0 + delta
        _, gF = criterion.f_parts(xc)
        parts = criterion.psi_parts(xc)
        gpsi = np.zeros_like(gF) if parts is None else parts[1]
        if t % 2 == 0:
            direction = orthogonal_direction(gF, gpsi)
        else:
            direction = -orthogonal_direction(gpsi, gF)
        delta = _step(delta, direction, x0, lo, hi, p, alpha)
        xr = project(round_discretize(x0 + delta), lo, hi)
        j = criterion.value(xr)
        better = j > best_j
        best_x = np.where(better[:, None], xr, best_x)
        best_j = np.where(better, j, best_j)
        trace.append(j)
    return AttackResult(best_x, np.array(trace), best_j)


def _default_members(alphas, steps):
    alphas = {**DEFAULT_ALPHAS, **({} if alphas is None else alphas)}
    return [(p, alphas[p], steps) for p in SMA_ORDER]


def max_ma(criterion: Criterion, x, space: ManipulationSpace, members=None,
           steps: int = 100, alphas: Optional[dict] = None, addition_only: bool = False,
           start=None, orthogonal: bool = False) -> AttackResult:
    """Run every member attack from ``start`` and keep the best per example.

    ``members`` is a sequence of ``(p, alpha, steps)``; the default is
    PGD-l1, PGD-l2 and PGD-linf. The start point itself is a candidate, so
    the selected criterion value never drops below it.
    """
    members = _default_members(alphas, steps) if members is None else members
    X = as_batch(x)
    lo, hi = box_bounds(X, space, addition_only)
    x0 = X if start is None else project(as_batch(start), lo, hi)
    attack = orthogonal_pgd if orthogonal else pgd_attack
    cands = [round_discretize(x0)]
    for p, a, T in members:
        cands.append(attack(criterion, X, space, p, a, T, addition_only, start=x0).x_adv)
    cands = np.stack(cands)
    scores = np.stack([criterion.value(c) for c in cands])
    pick = np.argmax(scores, axis=0)
    rows = np.arange(X.shape[0])
    best = cands[pick, rows]
    j = scores[pick, rows]
    trace = np.stack([scores[0], j])
    return AttackResult(best, trace, j)


def i_max_ma(criterion: Criterion, x, space: ManipulationSpace, repeats: int = 5,
             **kwargs) -> AttackResult:
    """Iterated MaxMA; each round restarts from the previous round's best."""
    if repeats < 1:
        raise ValueError("repeats must be >= 1")
    X = as_batch(x)
    cur = None
    trace = None
    res = None
    for _ in range(repeats):
        res = max_ma(criterion, X, space, start=cur, **kwargs)
        cur = res.x_adv
        trace = [res.criterion_trace[0]] if trace is None else trace
        trace.append(res.j_final)
    res.criterion_trace = np.stack(trace)
    return res
