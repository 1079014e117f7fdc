"""Malware classifier (smooth MLP) and adversary detector (input-convex net).

Both networks work on batches: inputs are ``(n, d)`` float arrays, and a
single ``(d,)`` vector is accepted wherever a batch is. Gradients are
computed by hand-written backpropagation.

ICNN layout (``l`` convex layers)::

    z1      = elu(x @ skip[0] + bias[0])
    z_{i+1} = elu(z_i @ hidden[i-1] + x @ skip[i] + bias[i])      hidden >= 0
    psi     = z_l @ w_out + x @ w_x + b_out                       w_out >= 0
"""
from __future__ import annotations

import io
import json
import zipfile
from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np

from .numerics import (elu, elu_grad, log_sigmoid, make_rng, sigmoid,
                       softmax, softmax_cross_entropy)

CHECKPOINT_VERSION = 1
ACTIVATION = "elu"


class ContractError(ValueError):
    """Input violates a model contract (shape mismatch, negative constrained weight)."""


def _as_batch(x, d: int) -> tuple[np.ndarray, bool]:
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    x = np.atleast_2d(x)
    if x.shape[1] != d:
        raise ContractError(f"input dimension {x.shape[1]} != model dimension {d}")
    return x, single


# ---------------------------------------------------------------- MLP

@dataclass
class MlpParams:
    W1: np.ndarray
    b1: np.ndarray
    W2: np.ndarray
    b2: np.ndarray
    W3: np.ndarray
    b3: np.ndarray

    NAMES = ("W1", "b1", "W2", "b2", "W3", "b3")

    @property
    def d(self) -> int:
        return self.W1.shape[0]

    @property
    def widths(self) -> tuple[int, int]:
        return self.W1.shape[1], self.W2.shape[1]

    def arrays(self) -> list[np.ndarray]:
        return [getattr(self, n) for n in self.NAMES]

    @classmethod
    def from_arrays(cls, arrays):
        return cls(*[np.array(a, dtype=np.float64) for a in arrays])

    def copy(self) -> "MlpParams":
        return MlpParams.from_arrays(self.arrays())

    @classmethod
    def zeros(cls, d: int, widths=(200, 200)) -> "MlpParams":
        h1, h2 = widths
        return cls(np.zeros((d, h1)), np.zeros(h1), np.zeros((h1, h2)),
                   np.zeros(h2), np.zeros((h2, 2)), np.zeros(2))


def _mlp_hidden(params: MlpParams, x: np.ndarray):
    a1 = x @ params.W1 + params.b1
    h1 = elu(a1)
    a2 = h1 @ params.W2 + params.b2
    h2 = elu(a2)
    return a1, h1, a2, h2


def mlp_forward(params: MlpParams, x) -> np.ndarray:
    """Logits of shape ``(n, 2)`` (or ``(2,)`` for a single vector)."""
    xb, single = _as_batch(x, params.d)
    *_, h2 = _mlp_hidden(params, xb)
    logits = h2 @ params.W3 + params.b3
    return logits[0] if single else logits


def mlp_predict(params: MlpParams, x) -> np.ndarray:
    logits = np.atleast_2d(mlp_forward(params, x))
    return (logits[:, 1] > logits[:, 0]).astype(np.int64)


def mlp_malware_prob(params: MlpParams, x) -> np.ndarray:
    return softmax(np.atleast_2d(mlp_forward(params, x)))[:, 1]


def mlp_loss_and_grads(params: MlpParams, x, y, reduction: str = "sum",
                       need_params: bool = True):
    """Cross-entropy loss with exact gradients.

    Returns ``(loss, grad_params, grad_x, per_example_loss)``. ``loss`` is the
    sum (or mean) over the batch; ``grad_x`` has one row per example and,
    under ``reduction="sum"``, row ``i`` is the gradient of example ``i``'s
    own loss. ``grad_params`` is ``None`` when ``need_params`` is false.
    """
    xb, single = _as_batch(x, params.d)
    n = xb.shape[0]
    a1, h1, a2, h2 = _mlp_hidden(params, xb)
    logits = h2 @ params.W3 + params.b3
    per_ex, dlogits = softmax_cross_entropy(logits, np.broadcast_to(y, (n,)))
    if reduction == "mean":
        dlogits = dlogits / n
        loss = float(per_ex.mean())
    elif reduction == "sum":
        loss = float(per_ex.sum())
    else:
        raise ValueError(f"unknown reduction {reduction!r}")
    dh2 = dlogits @ params.W3.T
    da2 = dh2 * elu_grad(a2)
    dh1 = da2 @ params.W2.T
    da1 = dh1 * elu_grad(a1)
    gx = da1 @ params.W1.T
    grads = None
    if need_params:
        grads = MlpParams(xb.T @ da1, da1.sum(0), h1.T @ da2, da2.sum(0),
                          h2.T @ dlogits, dlogits.sum(0))
    if single:
        gx = gx[0]
    return loss, grads, gx, per_ex


# ---------------------------------------------------------------- ICNN

@dataclass
class IcnnParams:
    skip: list            # unconstrained input weights, one (d, h_i) per layer
    bias: list            # (h_i,) per layer
    hidden: list          # non-negative (h_i, h_{i+1}) between layers
    w_out: np.ndarray     # non-negative (h_l,)
    w_x: np.ndarray       # unconstrained (d,)
    b_out: float = 0.0

    @property
    def d(self) -> int:
        return self.skip[0].shape[0]

    @property
    def widths(self) -> tuple[int, ...]:
        return tuple(s.shape[1] for s in self.skip)

    def named_arrays(self) -> dict[str, np.ndarray]:
        out = {}
        for i, s in enumerate(self.skip):
            out[f"skip{i}"] = s
        for i, b in enumerate(self.bias):
            out[f"bias{i}"] = b
        for i, h in enumerate(self.hidden):
            out[f"hidden{i}"] = h
        out["w_out"] = self.w_out
        out["w_x"] = self.w_x
        out["b_out"] = np.array(self.b_out)
        return out

    def constrained_names(self) -> list[str]:
        return [f"hidden{i}" for i in range(len(self.hidden))] + ["w_out"]

    @classmethod
    def from_named(cls, arrays: dict) -> "IcnnParams":
        n = sum(1 for k in arrays if k.startswith("skip"))
        f = lambda k: np.array(arrays[k], dtype=np.float64)
        return cls([f(f"skip{i}") for i in range(n)], [f(f"bias{i}") for i in range(n)],
                   [f(f"hidden{i}") for i in range(n - 1)], f("w_out"), f("w_x"),
                   float(arrays["b_out"]))

    def arrays(self) -> list[np.ndarray]:
        return list(self.named_arrays().values())

    def copy(self) -> "IcnnParams":
        return IcnnParams.from_named(self.named_arrays())

    def is_valid(self) -> bool:
        return all(np.all(h >= 0) for h in self.hidden) and bool(np.all(self.w_out >= 0))

    @classmethod
    def zeros(cls, d: int, widths=(200, 200)) -> "IcnnParams":
        return cls([np.zeros((d, w)) for w in widths], [np.zeros(w) for w in widths],
                   [np.zeros((a, b)) for a, b in zip(widths[:-1], widths[1:])],
                   np.zeros(widths[-1]), np.zeros(d), 0.0)


def _icnn_layers(params: IcnnParams, x: np.ndarray):
    pre, act = [], []
    z = None
    for i, (U, b) in enumerate(zip(params.skip, params.bias)):
        a = x @ U + b
        if i > 0:
            a = a + z @ params.hidden[i - 1]
        z = elu(a)
        pre.append(a)
        act.append(z)
    return pre, act


def icnn_score(params: IcnnParams, x, check: bool = True) -> np.ndarray:
    """Raw convex score psi(x); shape ``(n,)`` or scalar."""
    if check and not params.is_valid():
        raise ContractError("negative entry in a constrained ICNN weight")
    xb, single = _as_batch(x, params.d)
    _, act = _icnn_layers(params, xb)
    psi = act[-1] @ params.w_out + xb @ params.w_x + params.b_out
    return float(psi[0]) if single else psi


def _icnn_backward(params: IcnnParams, xb, pre, act, dpsi, need_params: bool):
    """Backpropagate ``dpsi`` (n,) through the ICNN."""
    gx = np.outer(dpsi, params.w_x)
    dz = np.outer(dpsi, params.w_out)
    L = len(params.skip)
    g_skip, g_bias, g_hidden = [None] * L, [None] * L, [None] * (L - 1)
    for i in range(L - 1, -1, -1):
        da = dz * elu_grad(pre[i])
        gx = gx + da @ params.skip[i].T
        if need_params:
            g_skip[i] = xb.T @ da
            g_bias[i] = da.sum(0)
        if i > 0:
            if need_params:
                g_hidden[i - 1] = act[i - 1].T @ da
            dz = da @ params.hidden[i - 1].T
    grads = None
    if need_params:
        grads = IcnnParams(g_skip, g_bias, g_hidden, act[-1].T @ dpsi,
                           xb.T @ dpsi, float(dpsi.sum()))
    return gx, grads


def icnn_score_and_grad(params: IcnnParams, x):
    """``(psi, d psi / dx)`` for each row."""
    xb, single = _as_batch(x, params.d)
    pre, act = _icnn_layers(params, xb)
    psi = act[-1] @ params.w_out + xb @ params.w_x + params.b_out
    gx, _ = _icnn_backward(params, xb, pre, act, np.ones(xb.shape[0]), False)
    if single:
        return float(psi[0]), gx[0]
    return psi, gx


def icnn_loss_and_grads(params: IcnnParams, x, pert, reduction: str = "sum",
                        need_params: bool = True):
    """Binary cross-entropy of ``sigmoid(psi)`` against the ``pert`` label.

    Returns ``(loss, grad_params, grad_x, per_example_loss)`` with the same
    conventions as :func:`mlp_loss_and_grads`.
    """
    xb, single = _as_batch(x, params.d)
    n = xb.shape[0]
    pert = np.broadcast_to(np.asarray(pert, dtype=np.float64), (n,))
    pre, act = _icnn_layers(params, xb)
    psi = act[-1] @ params.w_out + xb @ params.w_x + params.b_out
    per_ex = -(pert * log_sigmoid(psi) + (1.0 - pert) * log_sigmoid(-psi))
    dpsi = sigmoid(psi) - pert
    if reduction == "mean":
        dpsi = dpsi / n
        loss = float(per_ex.mean())
    elif reduction == "sum":
        loss = float(per_ex.sum())
    else:
        raise ValueError(f"unknown reduction {reduction!r}")
    gx, grads = _icnn_backward(params, xb, pre, act, dpsi, need_params)
    if single:
        gx = gx[0]
    return loss, grads, gx, per_ex


def project_nonneg(params: IcnnParams) -> IcnnParams:
    """Clamp the constrained ICNN weights at zero; everything else is shared."""
    hidden = [h if np.all(h >= 0) else np.maximum(h, 0.0) for h in params.hidden]
    w_out = params.w_out if np.all(params.w_out >= 0) else np.maximum(params.w_out, 0.0)
    return replace(params, hidden=hidden, w_out=w_out)


# ---------------------------------------------------------------- init

def _glorot(rng, fan_in, fan_out, shape):
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape)


def init_params(kind: str, d: int, widths=(200, 200), rng=None, seed: int = 0):
    """Glorot-uniform weights, zero biases. Constrained ICNN blocks get |draw|."""
    if d < 1 or any(w < 1 for w in widths):
        raise ValueError("dimensions must be positive")
    rng = make_rng(seed) if rng is None else rng
    if kind == "mlp":
        if len(widths) != 2:
            raise ValueError("the MLP has exactly two hidden layers")
        h1, h2 = widths
        return MlpParams(_glorot(rng, d, h1, (d, h1)), np.zeros(h1),
                         _glorot(rng, h1, h2, (h1, h2)), np.zeros(h2),
                         _glorot(rng, h2, 2, (h2, 2)), np.zeros(2))
    if kind == "icnn":
        skip = [_glorot(rng, d, w, (d, w)) for w in widths]
        hidden = [np.abs(_glorot(rng, a, b, (a, b))) for a, b in zip(widths[:-1], widths[1:])]
        w_out = np.abs(_glorot(rng, widths[-1], 1, (widths[-1],)))
        w_x = _glorot(rng, d, 1, (d,))
        return IcnnParams(skip, [np.zeros(w) for w in widths], hidden, w_out, w_x, 0.0)
    raise ValueError(f"unknown model kind {kind!r}")


# ---------------------------------------------------------------- detector bundle

@dataclass
class Detector:
    """A malware classifier optionally guarded by an adversary detector.

    ``icnn is None`` models a plain classifier (the adversary score is taken
    as identically zero and never flags anything).
    """
    mlp: MlpParams
    icnn: Optional[IcnnParams] = None
    tau: float = float("inf")

    @property
    def d(self) -> int:
        return self.mlp.d

    @property
    def has_guard(self) -> bool:
        return self.icnn is not None

    def f(self, x) -> np.ndarray:
        return mlp_predict(self.mlp, x)

    def psi(self, x) -> np.ndarray:
        xb = np.atleast_2d(np.asarray(x, dtype=np.float64))
        if self.icnn is None:
            return np.zeros(xb.shape[0])
        return icnn_score(self.icnn, xb)

    def flagged(self, x) -> np.ndarray:
        if self.icnn is None:
            return np.zeros(np.atleast_2d(x).shape[0], dtype=bool)
        return self.psi(x) > self.tau


# ---------------------------------------------------------------- checkpoints

def _npy_bytes(a: np.ndarray) -> bytes:
    buf = io.BytesIO()
    np.lib.format.write_array(buf, np.array(a, order="C"), allow_pickle=False)
    return buf.getvalue()


def save_checkpoint(path, mlp: MlpParams, icnn: Optional[IcnnParams] = None,
                    tau: Optional[float] = None, extra: Optional[dict] = None) -> None:
    """Write a versioned zip of ``.npy`` arrays plus ``meta.json``.

    Entry timestamps are pinned so identical parameters give identical bytes.
    """
    arrays = {f"mlp/{n}": getattr(mlp, n) for n in MlpParams.NAMES}
    if icnn is not None:
        arrays.update({f"icnn/{k}": v for k, v in icnn.named_arrays().items()})
    meta = {
        "version": CHECKPOINT_VERSION,
        "d": mlp.d,
        "activation": ACTIVATION,
        "mlp_widths": list(mlp.widths),
        "icnn_widths": list(icnn.widths) if icnn is not None else None,
        "constrained": [f"icnn/{k}" for k in icnn.constrained_names()] if icnn is not None else [],
        "shapes": {k: list(np.shape(v)) for k, v in arrays.items()},
        "tau": tau,
        "extra": extra or {},
    }
    with zipfile.ZipFile(path, "w", compression=zipfile.ZIP_DEFLATED) as zf:
        def put(name, data):
            info = zipfile.ZipInfo(name, date_time=(1980, 1, 1, 0, 0, 0))
            info.compress_type = zipfile.ZIP_DEFLATED
            zf.writestr(info, data)
        put("meta.json", json.dumps(meta, indent=1, sort_keys=True))
        for k in sorted(arrays):
            put(k + ".npy", _npy_bytes(np.asarray(arrays[k], dtype=np.float64)))


def load_checkpoint(path):
    """Return ``(mlp, icnn_or_None, meta)``."""
    with zipfile.ZipFile(path) as zf:
        meta = json.loads(zf.read("meta.json"))
        if meta.get("version") != CHECKPOINT_VERSION:
            raise ContractError(f"unsupported checkpoint version {meta.get('version')}")
        arrays = {}
        for name in zf.namelist():
            if name.endswith(".npy"):
                arrays[name[:-4]] = np.lib.format.read_array(io.BytesIO(zf.read(name)))
    for k, shape in meta["shapes"].items():
        if list(arrays[k].shape) != shape:
            raise ContractError(f"array {k} has shape {arrays[k].shape}, expected {shape}")
    mlp = MlpParams.from_arrays([arrays[f"mlp/{n}"] for n in MlpParams.NAMES])
    icnn = None
    if meta["icnn_widths"] is not None:
        icnn = IcnnParams.from_named({k[5:]: v for k, v in arrays.items() if k.startswith("icnn/")})
        if not icnn.is_valid():
            raise ContractError("checkpoint violates the ICNN non-negativity constraint")
    return mlp, icnn, meta
