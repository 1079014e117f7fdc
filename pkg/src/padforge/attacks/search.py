"""Penalty search for adaptive attacks and the family dispatcher."""
from __future__ import annotations

import json
from typing import Callable, Optional

import numpy as np

from ..models import Detector
from .core import (AttackConfig, AttackResult, ManipulationSpace, ModelCriterion,
                   as_batch, mark_evasion)
from .gradient import i_max_ma, max_ma, orthogonal_pgd, pgd_attack, rfgsm_attack, sma_attack
from .greedy import greedy_flip_attack
from .mimicry import mimicry_attack

ORTHOGONAL_FAMILIES = ("orth_pgd", "orth_maxma", "orth_imaxma")


def lambda_search(run: Callable[[float, np.ndarray], AttackResult], X, det: Detector,
                  grid) -> AttackResult:
    """Try each penalty in ascending order and keep the first full evasion per example.

    ``run(lam, rows)`` attacks ``X[rows]``. Rows that already evade both
    detectors drop out of later penalties. For rows that never fully evade,
    the candidate with the lowest adversary score among those fooling ``f``
    wins; failing that, the candidate with the highest classifier loss.
    """
    X = as_batch(X)
    n = X.shape[0]
    grid = sorted(float(g) for g in grid)
    if not grid:
        raise ValueError("empty lambda grid")
    oblivious = ModelCriterion.for_detector(det, 0.0)
    out_x = X.copy()
    out_j = np.full(n, -np.inf)
    out_lam = np.full(n, np.nan)
    out_trace = [None] * n
    done = np.zeros(n, dtype=bool)
    best_psi = np.full(n, np.inf)
    have_f = np.zeros(n, dtype=bool)
    best_F = np.full(n, -np.inf)
    for lam in grid:
        rows = np.flatnonzero(~done)
        if rows.size == 0:
            break
        res = run(lam, rows)
        ev_f = det.f(res.x_adv) == 0
        ev_g = ~det.flagged(res.x_adv)
        psi = det.psi(res.x_adv)
        F = oblivious.value(res.x_adv)
        for k, i in enumerate(rows):
            take = False
            if ev_f[k] and ev_g[k]:
                take, done[i] = True, True
            elif ev_f[k]:
                take = (not have_f[i]) or psi[k] < best_psi[i]
                if take:
                    have_f[i], best_psi[i] = True, psi[k]
            elif not have_f[i]:
                take = F[k] > best_F[i]
                if take:
                    best_F[i] = F[k]
            if take:
                out_x[i] = res.x_adv[k]
                out_j[i] = res.j_final[k]
                out_lam[i] = lam
                out_trace[i] = res.criterion_trace[:, k]
    width = max(len(t) for t in out_trace)
    trace = np.full((width, n), np.nan)
    for i, t in enumerate(out_trace):
        trace[:len(t), i] = t
    return AttackResult(out_x, trace, out_j, chosen_lambda=out_lam)


def _family_runner(cfg: AttackConfig, space: ManipulationSpace, det: Detector,
                   X: np.ndarray, ids: np.ndarray, adaptive: bool):
    fam = cfg.family

    def stop_fn(Xs):
        ev = det.f(Xs) == 0
        if adaptive:
            ev &= ~det.flagged(Xs)
        return ev

    def run(lam: float, rows: np.ndarray) -> AttackResult:
        crit = ModelCriterion(det.mlp, det.icnn if adaptive else None, lam)
        Xr = X[rows]
        ao = cfg.addition_only
        if fam in ("grosse", "bca", "bga"):
            return greedy_flip_attack(fam, crit, Xr, space, cfg.steps, stop_fn)
        if fam == "rfgsm":
            return rfgsm_attack(crit, Xr, space, cfg.epsilon, cfg.steps, cfg.random_round,
                                ao, cfg.seed, ids[rows])
        if fam == "pgd":
            return pgd_attack(crit, Xr, space, cfg.p, cfg.alphas[cfg.p], cfg.steps, ao)
        if fam == "sma":
            return sma_attack(crit, Xr, space, cfg.steps, cfg.alphas, ao)
        if fam == "maxma":
            return max_ma(crit, Xr, space, steps=cfg.steps, alphas=cfg.alphas, addition_only=ao)
        if fam == "imaxma":
            return i_max_ma(crit, Xr, space, cfg.repeats, steps=cfg.steps, alphas=cfg.alphas,
                            addition_only=ao)
        if fam == "orth_pgd":
            return orthogonal_pgd(crit, Xr, space, cfg.p, cfg.alphas[cfg.p], cfg.steps, ao)
        if fam == "orth_maxma":
            return max_ma(crit, Xr, space, steps=cfg.steps, alphas=cfg.alphas,
                          addition_only=ao, orthogonal=True)
        if fam == "orth_imaxma":
            return i_max_ma(crit, Xr, space, cfg.repeats, steps=cfg.steps, alphas=cfg.alphas,
                            addition_only=ao, orthogonal=True)
        raise ValueError(f"unknown attack family {fam!r}")
    return run


def run_attack(det: Detector, X, space: ManipulationSpace, cfg: AttackConfig,
               benign_pool=None, example_ids=None) -> AttackResult:
    """Attack every row of ``X`` and fill in the evasion flags.

    Oblivious attacks use the classifier loss only. Adaptive attacks use a
    fixed penalty when ``cfg.lam`` is set and search ``cfg.lambda_grid``
    otherwise. Against a detector without an adversary score both modes
    coincide.
    """
    X = as_batch(X)
    if X.shape[1] != det.d or space.d != det.d:
        raise ValueError(f"dimension mismatch: data {X.shape[1]}, space {space.d}, model {det.d}")
    ids = np.arange(X.shape[0]) if example_ids is None else np.asarray(example_ids)
    adaptive = cfg.mode == "adaptive" and det.has_guard
    if cfg.family in ORTHOGONAL_FAMILIES and not adaptive:
        raise ValueError("orthogonal attacks need adaptive mode and an adversary detector")
    if cfg.family == "mimicry":
        if benign_pool is None:
            raise ValueError("mimicry needs a benign pool")
        res = mimicry_attack(X, benign_pool, space, det, cfg.n_ben,
                             "adaptive" if adaptive else "oblivious",
                             cfg.addition_only, cfg.seed, ids)
        return mark_evasion(res, det)
    run = _family_runner(cfg, space, det, X, ids, adaptive)
    all_rows = np.arange(X.shape[0])
    if not adaptive:
        res = run(0.0, all_rows)
        res.chosen_lambda = np.zeros(X.shape[0])
    elif cfg.lam is not None:
        res = run(cfg.lam, all_rows)
        res.chosen_lambda = np.full(X.shape[0], float(cfg.lam))
    else:
        res = lambda_search(run, X, det, cfg.lambda_grid)
    return mark_evasion(res, det)


def attack_records(result: AttackResult, X, cfg: AttackConfig, indices=None) -> list:
    """One JSON-ready dict per attacked example."""
    X = as_batch(X)
    idx = np.arange(X.shape[0]) if indices is None else np.asarray(indices)
    added = ((result.x_adv == 1) & (X == 0)).sum(axis=1)
    removed = ((result.x_adv == 0) & (X == 1)).sum(axis=1)
    recs = []
    for k in range(X.shape[0]):
        lam = None if result.chosen_lambda is None else float(result.chosen_lambda[k])
        recs.append({
            "index": int(idx[k]),
            "family": cfg.label,
            "mode": cfg.mode,
            "evaded_f": bool(result.evaded_f[k]),
            "evaded_g": bool(result.evaded_g[k]),
            "chosen_lambda": None if lam is None or np.isnan(lam) else lam,
            "J_final": float(result.j_final[k]),
            "flips_added": int(added[k]),
            "flips_removed": int(removed[k]),
        })
    return recs


def write_jsonl(records, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for r in records:
            fh.write(json.dumps(r, sort_keys=True) + "\n")
