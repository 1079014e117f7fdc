"""Threshold calibration, the guarded prediction rule, metrics and robustness grids."""
from __future__ import annotations

import csv
import enum
import json
from dataclasses import asdict, dataclass, field
from typing import Optional

import numpy as np

from .attacks.core import AttackConfig, ManipulationSpace
from .attacks.search import run_attack
from .models import Detector

DEFAULT_K = 5.0


class Verdict(enum.IntEnum):
    BENIGN = 0
    MALICIOUS = 1
    NOT_SURE = 2


def calibrate_tau(val_scores, k: float = DEFAULT_K) -> float:
    """Smallest observed score with at most ``k`` percent of scores strictly above it."""
    s = np.sort(np.asarray(val_scores, dtype=np.float64).ravel())
    if s.size == 0:
        raise ValueError("no validation scores")
    if not (0 <= k < 100):
        raise ValueError("k must lie in [0, 100)")
    if not np.all(np.isfinite(s)):
        raise ValueError("validation scores must be finite")
    allowed = k / 100.0 * s.size + 1e-9
    # count strictly above s[i] is n - (index past the last copy of s[i])
    above = s.size - np.searchsorted(s, s, side="right")
    ok = np.flatnonzero(above <= allowed)
    return float(s[ok[0]])


def predict(f_label, psi, tau) -> np.ndarray:
    """Guarded decision: f's label when psi <= tau, else malicious or not-sure."""
    f_label = np.asarray(f_label)
    psi = np.asarray(psi, dtype=np.float64)
    flagged = psi > tau
    out = np.where(flagged, np.where(f_label == 1, Verdict.MALICIOUS, Verdict.NOT_SURE),
                   np.where(f_label == 1, Verdict.MALICIOUS, Verdict.BENIGN))
    return out.astype(np.int64)


def detector_predict(det: Detector, X) -> np.ndarray:
    return predict(det.f(X), det.psi(X), det.tau)


@dataclass
class MetricsReport:
    FNR: float
    FPR: float
    Acc: float
    bAcc: float
    F1: float
    TP: int
    TN: int
    FP: int
    FN: int
    abstained: int = 0
    abstained_benign: int = 0
    abstained_malware: int = 0
    evaluated: int = 0
    degenerate: list = field(default_factory=list)

    def as_dict(self) -> dict:
        return asdict(self)


def _ratio(num, den, name, flags):
    if den == 0:
        flags.append(name)
        return 0.0
    return 100.0 * num / den


def compute_metrics(predictions, labels, abstain_policy: str = "count_as_malicious_for_malware") -> MetricsReport:
    """Confusion-matrix rates in percent.

    ``exclude`` drops every not-sure prediction. ``count_as_malicious_for_malware``
    counts a not-sure on malware as caught and drops not-sure on benign.
    Dropped rows are reported in ``abstained*``. Zero denominators give 0
    and are listed in ``degenerate``.
    """
    pred = np.asarray(predictions, dtype=np.int64)
    lab = np.asarray(labels, dtype=np.int64)
    if pred.shape != lab.shape:
        raise ValueError("predictions and labels differ in length")
    if abstain_policy not in ("exclude", "count_as_malicious_for_malware"):
        raise ValueError(f"unknown abstain policy {abstain_policy!r}")
    ns = pred == Verdict.NOT_SURE
    ab_b = int(np.sum(ns & (lab == 0)))
    ab_m = int(np.sum(ns & (lab == 1)))
    pred = pred.copy()
    keep = ~ns
    if abstain_policy == "count_as_malicious_for_malware":
        pred[ns & (lab == 1)] = Verdict.MALICIOUS
        keep = ~(ns & (lab == 0))
    p, l = pred[keep], lab[keep]
    tp = int(np.sum((p == 1) & (l == 1)))
    tn = int(np.sum((p == 0) & (l == 0)))
    fp = int(np.sum((p == 1) & (l == 0)))
    fn = int(np.sum((p == 0) & (l == 1)))
    flags: list = []
    fnr = _ratio(fn, tp + fn, "FNR", flags)
    fpr = _ratio(fp, fp + tn, "FPR", flags)
    acc = _ratio(tp + tn, tp + tn + fp + fn, "Acc", flags)
    tpr = _ratio(tp, tp + fn, "TPR", flags)
    tnr = _ratio(tn, tn + fp, "TNR", flags)
    prec = _ratio(tp, tp + fp, "precision", flags)
    f1 = 0.0 if prec + tpr == 0 else 2 * prec * tpr / (prec + tpr)
    if prec + tpr == 0:
        flags.append("F1")
    return MetricsReport(fnr, fpr, acc, (tpr + tnr) / 2, f1, tp, tn, fp, fn,
                         ab_b + ab_m, ab_b, ab_m, int(keep.sum()), sorted(set(flags)))


def clean_metrics(det: Detector, X, y, abstain_policy: str = "count_as_malicious_for_malware") -> MetricsReport:
    return compute_metrics(detector_predict(det, X), y, abstain_policy)


def caught(det: Detector, X_adv) -> np.ndarray:
    """Malware still handled: labelled malicious by f or flagged by the adversary score."""
    return (det.f(X_adv) == 1) | det.flagged(X_adv)


def robust_accuracy(det: Detector, cfg: AttackConfig, malware_X, space: ManipulationSpace,
                    benign_pool=None, example_ids=None, return_result: bool = False):
    """Percentage of attacked malware that is still caught (denominator: all rows)."""
    X = np.atleast_2d(np.asarray(malware_X, dtype=np.float64))
    if X.shape[0] == 0:
        raise ValueError("empty malware set")
    res = run_attack(det, X, space, cfg, benign_pool, example_ids)
    acc = 100.0 * float(np.mean(caught(det, res.x_adv)))
    return (acc, res) if return_result else acc


# ---------------------------------------------------------------- results matrix

@dataclass
class ResultsMatrix:
    attacks: list
    defenses: list
    cells: dict = field(default_factory=dict)    # (attack, defense) -> accuracy

    def set(self, attack: str, defense: str, value: float):
        if attack not in self.attacks:
            self.attacks.append(attack)
        if defense not in self.defenses:
            self.defenses.append(defense)
        self.cells[(attack, defense)] = float(value)

    def get(self, attack: str, defense: str) -> Optional[float]:
        return self.cells.get((attack, defense))

    def to_json(self) -> str:
        rows = {a: {d: self.get(a, d) for d in self.defenses} for a in self.attacks}
        return json.dumps({"attacks": self.attacks, "defenses": self.defenses, "accuracy": rows},
                          indent=1, sort_keys=True)

    def write_csv(self, path) -> None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["attack", *self.defenses])
            for a in self.attacks:
                w.writerow([a, *["" if self.get(a, d) is None else f"{self.get(a, d):.3f}"
                                 for d in self.defenses]])

    def format_table(self) -> str:
        width = max([len(a) for a in self.attacks] + [6])
        head = "attack".ljust(width) + "".join(d.rjust(12) for d in self.defenses)
        lines = [head, "-" * len(head)]
        for a in self.attacks:
            vals = ["-" if self.get(a, d) is None else f"{self.get(a, d):.2f}" for d in self.defenses]
            lines.append(a.ljust(width) + "".join(v.rjust(12) for v in vals))
        return "\n".join(lines)


def evaluate_grid(detectors: dict, attacks: list, malware_X, space: ManipulationSpace,
                  benign_pool=None) -> ResultsMatrix:
    """Robust accuracy for every (attack, defense) pair; attacks are AttackConfigs."""
    mat = ResultsMatrix([], [])
    for name, det in detectors.items():
        for cfg in attacks:
            if cfg.family.startswith("orth") and not det.has_guard:
                continue
            label = f"{cfg.label}/{cfg.mode}"
            mat.set(label, name, robust_accuracy(det, cfg, malware_X, space, benign_pool))
    return mat
