"""Sparse binary datasets: text format, synthetic generator, splits, manipulation spaces.

Dataset file::

    d=<int>
    <label> idx idx idx ...

one example per line with ascending feature indices. Manipulation-space
file::

    addable: 0 1 2
    removable: 5 6
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .attacks.core import ManipulationSpace
from .numerics import make_rng


class DataFormatError(ValueError):
    pass


@dataclass
class Dataset:
    d: int
    indices: list           # list of sorted int tuples
    labels: np.ndarray      # int (n,)
    name: str = "dataset"
    provenance: str = ""

    def __post_init__(self):
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if len(self.indices) != self.labels.shape[0]:
            raise ValueError("indices and labels differ in length")
        if np.any((self.labels != 0) & (self.labels != 1)):
            raise ValueError("labels must be 0 or 1")
        for k, idx in enumerate(self.indices):
            if len(idx) and (min(idx) < 0 or max(idx) >= self.d):
                raise ValueError(f"example {k}: index out of range [0, {self.d})")
            if len(set(idx)) != len(idx):
                raise ValueError(f"example {k}: duplicate index")

    def __len__(self):
        return self.labels.shape[0]

    @property
    def X(self) -> np.ndarray:
        out = np.zeros((len(self), self.d))
        for k, idx in enumerate(self.indices):
            out[k, list(idx)] = 1.0
        return out

    @property
    def y(self) -> np.ndarray:
        return self.labels

    def class_counts(self) -> tuple[int, int]:
        return int(np.sum(self.labels == 0)), int(np.sum(self.labels == 1))

    def subset(self, rows, name: Optional[str] = None) -> "Dataset":
        rows = np.asarray(rows, dtype=np.int64)
        return Dataset(self.d, [self.indices[r] for r in rows], self.labels[rows],
                       name or self.name, self.provenance)

    @classmethod
    def from_dense(cls, X, y, name="dataset", provenance="") -> "Dataset":
        X = np.asarray(X)
        if not np.all((X == 0) | (X == 1)):
            raise ValueError("dense features must be binary")
        idx = [tuple(int(i) for i in np.flatnonzero(row)) for row in X]
        return cls(X.shape[1], idx, y, name, provenance)


def save_dataset(ds: Dataset, path) -> None:
    lines = [f"d={ds.d}"]
    for lab, idx in zip(ds.labels, ds.indices):
        lines.append(" ".join([str(int(lab))] + [str(i) for i in sorted(idx)]))
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("\n".join(lines) + "\n")


def load_dataset(path, name: Optional[str] = None) -> Dataset:
    with open(path, encoding="utf-8") as fh:
        lines = fh.read().splitlines()
    if not lines or not lines[0].startswith("d="):
        raise DataFormatError(f"{path}:1: expected header 'd=<int>'")
    try:
        d = int(lines[0][2:])
    except ValueError:
        raise DataFormatError(f"{path}:1: bad dimension {lines[0][2:]!r}") from None
    if d < 1:
        raise DataFormatError(f"{path}:1: dimension must be positive")
    indices, labels = [], []
    for lineno, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        tok = line.split()
        try:
            vals = [int(t) for t in tok]
        except ValueError:
            raise DataFormatError(f"{path}:{lineno}: non-integer token") from None
        lab, idx = vals[0], vals[1:]
        if lab not in (0, 1):
            raise DataFormatError(f"{path}:{lineno}: label must be 0 or 1, got {lab}")
        for pos, i in enumerate(idx, start=1):
            if i < 0 or i >= d:
                raise DataFormatError(f"{path}:{lineno}: index {i} at position {pos} outside [0, {d})")
        if len(set(idx)) != len(idx):
            raise DataFormatError(f"{path}:{lineno}: duplicate index")
        if idx != sorted(idx):
            raise DataFormatError(f"{path}:{lineno}: indices not ascending")
        indices.append(tuple(idx))
        labels.append(lab)
    return Dataset(d, indices, np.array(labels, dtype=np.int64), name or str(path), f"file:{path}")


# ---------------------------------------------------------------- synthetic

@dataclass
class SyntheticSpec:
    p_benign: np.ndarray
    p_malware: np.ndarray
    n_benign: int = 2000
    n_malware: int = 2000
    seed: int = 0
    name: str = "synthetic"

    def __post_init__(self):
        self.p_benign = np.asarray(self.p_benign, dtype=np.float64)
        self.p_malware = np.asarray(self.p_malware, dtype=np.float64)
        for fname in ("p_benign", "p_malware"):
            p = getattr(self, fname)
            if p.ndim != 1:
                raise ValueError(f"{fname} must be a vector")
            if not np.all(np.isfinite(p)) or np.any(p < 0) or np.any(p > 1):
                raise ValueError(f"{fname} entries must lie in [0, 1]")
        if self.p_benign.shape != self.p_malware.shape:
            raise ValueError("p_benign and p_malware must have equal length")
        if self.n_benign < 0 or self.n_malware < 0:
            raise ValueError("class counts must be non-negative")

    @property
    def d(self) -> int:
        return self.p_benign.shape[0]


# drebin-mini layout
MINI_D = 64
MINI_MALWARE_FEATURES = range(0, 8)
MINI_BENIGN_FEATURES = range(8, 16)
MINI_REMOVABLE = range(0, 4)


def drebin_mini_spec(seed: int = 0, n_per_class: int = 2000, p_signal: float = 0.8,
                     p_cross: float = 0.05, p_noise: float = 0.1) -> SyntheticSpec:
    """Eight malware-indicative and eight benign-indicative features over noise."""
    for name, v in (("p_signal", p_signal), ("p_cross", p_cross), ("p_noise", p_noise)):
        if not (0.0 <= v <= 1.0):
            raise ValueError(f"{name} must lie in [0, 1], got {v}")
    pb = np.full(MINI_D, p_noise)
    pm = np.full(MINI_D, p_noise)
    pm[list(MINI_MALWARE_FEATURES)] = p_signal
    pb[list(MINI_MALWARE_FEATURES)] = p_cross
    pm[list(MINI_BENIGN_FEATURES)] = p_cross
    pb[list(MINI_BENIGN_FEATURES)] = p_signal
    return SyntheticSpec(pb, pm, n_per_class, n_per_class, seed, "drebin-mini")


def drebin_mini_space() -> ManipulationSpace:
    """Benign-indicative and noise features may be added; four API-like ones removed."""
    return ManipulationSpace.from_indices(MINI_D, addable=range(8, MINI_D),
                                          removable=MINI_REMOVABLE)


def generate_synthetic(spec: SyntheticSpec) -> Dataset:
    rng = make_rng(spec.seed)
    xb = rng.random((spec.n_benign, spec.d)) < spec.p_benign
    xm = rng.random((spec.n_malware, spec.d)) < spec.p_malware
    X = np.vstack([xb, xm]).astype(np.float64)
    y = np.concatenate([np.zeros(spec.n_benign, np.int64), np.ones(spec.n_malware, np.int64)])
    return Dataset.from_dense(X, y, spec.name, f"synthetic seed={spec.seed}")


# ---------------------------------------------------------------- split

@dataclass
class SplitSpec:
    ratios: tuple = (0.6, 0.2, 0.2)
    seed: int = 0

    def __post_init__(self):
        r = np.asarray(self.ratios, dtype=np.float64)
        if r.shape != (3,) or np.any(r <= 0) or abs(r.sum() - 1.0) > 1e-9:
            raise ValueError("split ratios must be three positive numbers summing to 1")


def split(ds: Dataset, spec: SplitSpec = SplitSpec()):
    """Seeded permutation, then contiguous train/val/test cuts (order-dependent)."""
    n = len(ds)
    perm = make_rng(spec.seed, 1).permutation(n)
    n_tr = int(round(spec.ratios[0] * n))
    n_va = int(round(spec.ratios[1] * n))
    n_tr = min(n_tr, n)
    n_va = min(n_va, n - n_tr)
    parts = (perm[:n_tr], perm[n_tr:n_tr + n_va], perm[n_tr + n_va:])
    return tuple(ds.subset(p, f"{ds.name}/{tag}") for p, tag in zip(parts, ("train", "val", "test")))


# ---------------------------------------------------------------- manipulation space

def load_manipulation_space(path, d: int) -> ManipulationSpace:
    lists = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            key, sep, rest = line.partition(":")
            key = key.strip().lower()
            if not sep or key not in ("addable", "removable"):
                raise DataFormatError(f"{path}:{lineno}: expected 'addable:' or 'removable:'")
            try:
                vals = [int(t) for t in rest.split()]
            except ValueError:
                raise DataFormatError(f"{path}:{lineno}: non-integer index") from None
            for pos, i in enumerate(vals, start=1):
                if i < 0 or i >= d:
                    raise DataFormatError(f"{path}:{lineno}: index {i} at position {pos} outside [0, {d})")
            lists.setdefault(key, []).extend(vals)
    return ManipulationSpace.from_indices(d, lists.get("addable", []), lists.get("removable", []))


def save_manipulation_space(space: ManipulationSpace, path) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("addable: " + " ".join(str(i) for i in np.flatnonzero(space.addable)) + "\n")
        fh.write("removable: " + " ".join(str(i) for i in np.flatnonzero(space.removable)) + "\n")
