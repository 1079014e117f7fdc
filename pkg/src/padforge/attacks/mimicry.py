"""Query-only mimicry: copy benign guide examples inside the feasible box."""
from __future__ import annotations

import numpy as np

from ..models import Detector, mlp_malware_prob
from ..numerics import make_rng
from .core import AttackResult, ManipulationSpace, ModelCriterion, as_batch, box_bounds, project


def draw_guides(pool_size: int, n_ben: int, seed: int, example_id: int) -> np.ndarray:
    rng = make_rng(seed, int(example_id))
    if n_ben <= pool_size:
        return rng.choice(pool_size, size=n_ben, replace=False)
    return rng.choice(pool_size, size=n_ben, replace=True)


def mimicry_attack(x, benign_pool, space: ManipulationSpace, det: Detector, n_ben: int = 1,
                   mode: str = "oblivious", addition_only: bool = False, seed: int = 0,
                   example_ids=None) -> AttackResult:
    """Move each malware vector toward ``n_ben`` benign guides.

    The first candidate (in draw order) that evades ``f`` (and ``g`` in
    adaptive mode) is returned. Otherwise the candidate with the lowest
    malware probability wins, ties broken by lower adversary score.
    """
    pool = as_batch(benign_pool)
    if pool.shape[0] == 0:
        raise ValueError("benign pool is empty")
    X = as_batch(x)
    n, d = X.shape
    lo, hi = box_bounds(X, space, addition_only)
    ids = np.arange(n) if example_ids is None else np.asarray(example_ids)
    guides = np.stack([pool[draw_guides(pool.shape[0], n_ben, seed, i)] for i in ids])
    cands = project(guides, lo[:, None, :], hi[:, None, :])       # (n, n_ben, d)
    flat = cands.reshape(-1, d)
    prob = mlp_malware_prob(det.mlp, flat).reshape(n, n_ben)
    psi = det.psi(flat).reshape(n, n_ben)
    ok = det.f(flat).reshape(n, n_ben) == 0
    if mode == "adaptive":
        ok &= ~det.flagged(flat).reshape(n, n_ben)
    chosen = np.empty(n, dtype=np.int64)
    for i in range(n):
        hits = np.flatnonzero(ok[i])
        if hits.size:
            chosen[i] = hits[0]
        else:
            chosen[i] = np.lexsort((psi[i], prob[i]))[0]
    x_adv = cands[np.arange(n), chosen]
    crit = ModelCriterion.for_detector(det, 0.0)
    j0, j1 = crit.value(X), crit.value(x_adv)
    return AttackResult(x_adv, np.stack([j0, j1]), j1)
