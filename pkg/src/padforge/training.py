"""Outer minimization: PAD-SMA and the baseline defenses.

All defenses share one loop. Per batch the loss is::

    F(x, y) + G_clean + beta1 * F(x_adv, 1) + beta2 * G(x_adv, pert=1)

where ``G_clean`` is BCE at pert=0 on the batch plus BCE at pert=1 on
salt-and-pepper copies, and ``x_adv`` exists only for malware rows. Every
term is a batch mean. Adversarial examples are treated as constants when
differentiating with respect to the parameters.
"""
from __future__ import annotations

import csv
import math
import os
import time
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .attacks.core import DEFAULT_ALPHAS, ManipulationSpace, ModelCriterion, parse_norm
from .attacks.gradient import max_ma, rfgsm_attack, sma_attack
from .models import (IcnnParams, MlpParams, icnn_loss_and_grads, init_params,
                     mlp_loss_and_grads, project_nonneg, save_checkpoint)
from .numerics import NumericError, make_rng

DEFENSES = ("dnn", "at_rfgsm", "at_maxma", "pad_sma")
TERMS = ("F_clean", "G_clean", "F_adv", "G_adv")

# rng stream ids under the training seed
_STREAM_MLP, _STREAM_ICNN, _STREAM_SHUFFLE, _STREAM_NOISE = 10, 11, 12, 13


@dataclass
class TrainConfig:
    defense: str = "pad_sma"
    epochs: int = 30
    batch: int = 128
    lr: float = 0.001
    optimizer: str = "adam"
    beta1: float = 0.1
    beta2: float = 1.0
    beta: Optional[float] = None       # adversarial weight for at_* (defaults per defense)
    lam: float = 1.0
    steps: int = 50
    alphas: dict = field(default_factory=lambda: dict(DEFAULT_ALPHAS))
    epsilon: float = 0.02               # rFGSM step
    mlp_widths: tuple = (200, 200)
    icnn_widths: tuple = (200, 200)
    noise: bool = True
    cotrain_icnn: bool = False          # dnn only
    track_grad_norm: bool = False
    seed: int = 0

    def __post_init__(self):
        self.defense = self.defense.replace("-", "_")
        if self.defense not in DEFENSES:
            raise ValueError(f"unknown defense {self.defense!r}")
        if self.epochs < 0 or self.batch < 1 or self.lr < 0 or self.steps < 0:
            raise ValueError("epochs >= 0, batch >= 1, lr >= 0 and steps >= 0 required")
        if self.beta1 < 0 or self.beta2 < 0 or self.lam < 0:
            raise ValueError("beta1, beta2 and lam must be non-negative")
        if self.optimizer not in ("adam", "sgd"):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")
        if self.beta is None:
            self.beta = 0.01 if self.defense == "at_maxma" else 1.0
        if self.beta < 0:
            raise ValueError("beta must be non-negative")
        self.mlp_widths = tuple(int(w) for w in self.mlp_widths)
        self.icnn_widths = tuple(int(w) for w in self.icnn_widths)
        self.alphas = {parse_norm(k): float(v) for k, v in self.alphas.items()}

    @property
    def uses_icnn(self) -> bool:
        return self.defense == "pad_sma" or (self.defense == "dnn" and self.cotrain_icnn)

    def term_weights(self) -> tuple[float, float]:
        """Weights of ``(F_adv, G_adv)``."""
        if self.defense == "pad_sma":
            return self.beta1, self.beta2
        if self.defense == "dnn":
            return 0.0, 0.0
        return self.beta, 0.0


@dataclass
class AdamState:
    m: list
    v: list
    t: int = 0

    @classmethod
    def like(cls, arrays):
        return cls([np.zeros_like(a, dtype=np.float64) for a in arrays],
                   [np.zeros_like(a, dtype=np.float64) for a in arrays], 0)


def adam_step(params: list, grads: list, state: AdamState, lr: float, beta_m: float = 0.9,
              beta_v: float = 0.999, eps: float = 1e-8):
    """Bias-corrected Adam update. Returns ``(new_params, new_state)``; inputs are untouched."""
    t = state.t + 1
    new_p, new_m, new_v = [], [], []
    for p, g, m, v in zip(params, grads, state.m, state.v):
        g = np.asarray(g, dtype=np.float64)
        m = beta_m * m + (1.0 - beta_m) * g
        v = beta_v * v + (1.0 - beta_v) * g * g
        m_hat = m / (1.0 - beta_m ** t)
        v_hat = v / (1.0 - beta_v ** t)
        new_p.append(p - lr * m_hat / (np.sqrt(v_hat) + eps))
        new_m.append(m)
        new_v.append(v)
    return new_p, AdamState(new_m, new_v, t)


def sgd_step(params: list, grads: list, lr: float) -> list:
    return [p - lr * np.asarray(g, dtype=np.float64) for p, g in zip(params, grads)]


def salt_pepper(x, rng) -> np.ndarray:
    """Set a uniformly random subset of ceil(d/2) coordinates of every row to 1."""
    X = np.array(np.atleast_2d(x), dtype=np.float64)
    n, d = X.shape
    k = math.ceil(d / 2)
    for i in range(n):
        X[i, rng.permutation(d)[:k]] = 1.0
    return X if np.ndim(x) == 2 else X[0]


# ---------------------------------------------------------------- state

def _pack(mlp: MlpParams, icnn: Optional[IcnnParams]) -> list:
    out = [a for a in mlp.arrays()]
    if icnn is not None:
        out += [np.asarray(a, dtype=np.float64) for a in icnn.named_arrays().values()]
    return out


def _unpack(arrays: list, mlp_like: MlpParams, icnn_like: Optional[IcnnParams]):
    k = len(MlpParams.NAMES)
    mlp = MlpParams(*arrays[:k])
    icnn = None
    if icnn_like is not None:
        names = list(icnn_like.named_arrays().keys())
        icnn = IcnnParams.from_named(dict(zip(names, arrays[k:])))
    return mlp, icnn


@dataclass
class TrainState:
    mlp: MlpParams
    icnn: Optional[IcnnParams]
    opt: Optional[AdamState] = None
    epoch: int = 0
    step: int = 0
    history: list = field(default_factory=list)     # per optimizer step: dict of terms
    epoch_log: list = field(default_factory=list)   # per epoch: mean terms
    skipped: int = 0
    grad_norms: list = field(default_factory=list)


def init_state(cfg: TrainConfig, d: int) -> TrainState:
    mlp = init_params("mlp", d, cfg.mlp_widths, rng=make_rng(cfg.seed, _STREAM_MLP))
    icnn = None
    if cfg.uses_icnn:
        icnn = init_params("icnn", d, cfg.icnn_widths, rng=make_rng(cfg.seed, _STREAM_ICNN))
    st = TrainState(mlp, icnn)
    if cfg.optimizer == "adam":
        st.opt = AdamState.like(_pack(mlp, icnn))
    return st


# ---------------------------------------------------------------- loss

def objective_and_grads(mlp: MlpParams, icnn: Optional[IcnnParams], X, y, X_noise, X_adv,
                        w_fadv: float, w_gadv: float):
    """Batch objective with fixed noised/adversarial inputs.

    ``X_noise`` may be ``None`` (no pert=1 noise term); ``X_adv`` holds the
    adversarial versions of the malware rows and may be empty. Returns
    ``(total, terms, grads)`` where ``grads`` lines up with the packed
    parameter list.
    """
    terms = dict.fromkeys(TERMS, 0.0)
    f_clean, gm, _, _ = mlp_loss_and_grads(mlp, X, y, reduction="mean")
    terms["F_clean"] = f_clean
    gm_arr = gm.arrays()
    has_adv = X_adv is not None and len(X_adv) > 0
    if has_adv and w_fadv != 0.0:
        f_adv, ga, _, _ = mlp_loss_and_grads(mlp, X_adv, 1, reduction="mean")
        terms["F_adv"] = f_adv
        gm_arr = [a + w_fadv * b for a, b in zip(gm_arr, ga.arrays())]
    grads = list(gm_arr)
    if icnn is not None:
        g0, gi, _, _ = icnn_loss_and_grads(icnn, X, 0, reduction="mean")
        gi_arr = list(gi.named_arrays().values())
        g_clean = g0
        if X_noise is not None:
            g1, gn, _, _ = icnn_loss_and_grads(icnn, X_noise, 1, reduction="mean")
            g_clean += g1
            gi_arr = [a + b for a, b in zip(gi_arr, gn.named_arrays().values())]
        terms["G_clean"] = g_clean
        if has_adv and w_gadv != 0.0:
            g_adv, gg, _, _ = icnn_loss_and_grads(icnn, X_adv, 1, reduction="mean")
            terms["G_adv"] = g_adv
            gi_arr = [a + w_gadv * b for a, b in zip(gi_arr, gg.named_arrays().values())]
        grads += [np.asarray(a, dtype=np.float64) for a in gi_arr]
    total = terms["F_clean"] + terms["G_clean"] + w_fadv * terms["F_adv"] + w_gadv * terms["G_adv"]
    return total, terms, grads


def inner_maximize(cfg: TrainConfig, mlp: MlpParams, icnn: Optional[IcnnParams], X_mal,
                   space: ManipulationSpace, seed: int = 0, example_ids=None) -> np.ndarray:
    """Adversarial versions of malware rows against a snapshot of the parameters."""
    if X_mal.shape[0] == 0:
        return X_mal.copy()
    if cfg.defense == "pad_sma":
        crit = ModelCriterion(mlp, icnn, cfg.lam)
        return sma_attack(crit, X_mal, space, cfg.steps, cfg.alphas).x_adv
    crit = ModelCriterion(mlp, None, 0.0)
    if cfg.defense == "at_rfgsm":
        x_adv = rfgsm_attack(crit, X_mal, space, cfg.epsilon, cfg.steps, True,
                             addition_only=False, seed=seed, example_ids=example_ids).x_adv
        # random rounding can land below the start; keep the stronger point
        worse = crit.value(x_adv) < crit.value(X_mal)
        return np.where(worse[:, None], X_mal, x_adv)
    if cfg.defense == "at_maxma":
        return max_ma(crit, X_mal, space, steps=cfg.steps, alphas=cfg.alphas).x_adv
    raise ValueError(f"defense {cfg.defense!r} has no inner maximizer")


def full_gradient_norm(state: TrainState, cfg: TrainConfig, X, y, space) -> float:
    """Norm of the full-batch gradient of the training objective (no noise term)."""
    w_f, w_g = cfg.term_weights()
    mal = np.flatnonzero(y == 1)
    X_adv = None
    if (w_f or w_g) and space is not None:
        X_adv = inner_maximize(cfg, state.mlp, state.icnn, X[mal], space, cfg.seed, mal)
    _, _, grads = objective_and_grads(state.mlp, state.icnn, X, y, None, X_adv, w_f, w_g)
    return float(np.sqrt(sum(float(np.sum(g * g)) for g in grads)))


# ---------------------------------------------------------------- loop

def train(X, y, cfg: TrainConfig, space: Optional[ManipulationSpace] = None,
          state: Optional[TrainState] = None, log_path=None, checkpoint_dir=None,
          checkpoint_every: int = 0, warn=None) -> TrainState:
    """Run ``cfg.epochs`` epochs of the configured defense."""
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=np.int64)
    n, d = X.shape
    if len(np.unique(y)) < 2:
        raise ValueError("training data must contain both classes")
    w_f, w_g = cfg.term_weights()
    if (w_f or w_g) and space is None:
        raise ValueError(f"defense {cfg.defense} needs a manipulation space")
    st = init_state(cfg, d) if state is None else state
    shuffle_rng = make_rng(cfg.seed, _STREAM_SHUFFLE)
    noise_rng = make_rng(cfg.seed, _STREAM_NOISE)
    use_noise = cfg.noise and st.icnn is not None
    log_fh = None
    writer = None
    if log_path is not None:
        log_fh = open(log_path, "w", newline="", encoding="utf-8")
        writer = csv.writer(log_fh, lineterminator="\n")
        writer.writerow(["epoch", *TERMS, "total", "skipped", "grad_norm", "wall_time"])
    try:
        for _ in range(cfg.epochs):
            t0 = time.perf_counter()
            perm = shuffle_rng.permutation(n)
            sums = dict.fromkeys(TERMS + ("total",), 0.0)
            used = 0
            for start in range(0, n, cfg.batch):
                rows = perm[start:start + cfg.batch]
                Xb, yb = X[rows], y[rows]
                if len(np.unique(yb)) < 2:
                    st.skipped += 1
                    if warn is not None:
                        warn(f"epoch {st.epoch}: single-class batch skipped")
                    continue
                X_noise = salt_pepper(Xb, noise_rng) if use_noise else None
                X_adv = None
                if w_f or w_g:
                    mal = np.flatnonzero(yb == 1)
                    X_adv = inner_maximize(cfg, st.mlp, st.icnn, Xb[mal], space,
                                           seed=cfg.seed * 1_000_003 + st.step,
                                           example_ids=rows[mal])
                total, terms, grads = objective_and_grads(st.mlp, st.icnn, Xb, yb, X_noise,
                                                          X_adv, w_f, w_g)
                if not np.isfinite(total):
                    raise NumericError(f"non-finite loss at epoch {st.epoch}, step {st.step}")
                params = _pack(st.mlp, st.icnn)
                if cfg.optimizer == "adam":
                    params, st.opt = adam_step(params, grads, st.opt, cfg.lr)
                else:
                    params = sgd_step(params, grads, cfg.lr)
                st.mlp, st.icnn = _unpack(params, st.mlp, st.icnn)
                if st.icnn is not None:
                    st.icnn = project_nonneg(st.icnn)
                st.step += 1
                rec = dict(terms, total=total)
                st.history.append(rec)
                for k in sums:
                    sums[k] += rec[k]
                used += 1
            st.epoch += 1
            row = {k: (v / used if used else float("nan")) for k, v in sums.items()}
            gn = full_gradient_norm(st, cfg, X, y, space) if cfg.track_grad_norm else float("nan")
            if cfg.track_grad_norm:
                st.grad_norms.append(gn)
            row.update(epoch=st.epoch, skipped=st.skipped, grad_norm=gn)
            st.epoch_log.append(row)
            if writer is not None:
                writer.writerow([st.epoch, *[repr(row[k]) for k in TERMS], repr(row["total"]),
                                 st.skipped, repr(gn), f"{time.perf_counter() - t0:.3f}"])
                log_fh.flush()
            if checkpoint_dir is not None and checkpoint_every and st.epoch % checkpoint_every == 0:
                save_checkpoint(os.path.join(checkpoint_dir, f"epoch{st.epoch:04d}.ckpt"),
                                st.mlp, st.icnn, extra={"epoch": st.epoch, "defense": cfg.defense})
    finally:
        if log_fh is not None:
            log_fh.close()
    return st


def pad_sma_train(X, y, cfg: TrainConfig, space: ManipulationSpace, **kwargs) -> TrainState:
    if cfg.defense != "pad_sma":
        raise ValueError("pad_sma_train needs defense='pad_sma'")
    return train(X, y, cfg, space, **kwargs)


def baseline_train(X, y, cfg: TrainConfig, space: Optional[ManipulationSpace] = None,
                   **kwargs) -> TrainState:
    if cfg.defense not in ("dnn", "at_rfgsm", "at_maxma"):
        raise ValueError(f"{cfg.defense!r} is not a baseline defense")
    return train(X, y, cfg, space, **kwargs)
