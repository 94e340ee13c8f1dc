"""Label evaluation: confusion counts, MCC, precision/recall/F1.

Accuracy and ROC-AUC are provided for completeness but overstate performance
on heavily imbalanced anomaly labels; prefer MCC. Labels are compared point by
point, no point-adjust or range-based credit is applied.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass

import numpy as np
from scipy.stats import rankdata


@dataclass(frozen=True)
class Confusion:
    tp: int
    tn: int
    fp: int
    fn: int

    def __post_init__(self):
        if min(self.tp, self.tn, self.fp, self.fn) < 0:
            raise ValueError("confusion counts must be non-negative")

    @property
    def total(self) -> int:
        return self.tp + self.tn + self.fp + self.fn


def _binary(x, name: str) -> np.ndarray:
    a = np.asarray(x)
    if a.ndim != 1:
        raise ValueError(f"{name} must be one-dimensional")
    if not np.isin(a, (0, 1)).all():
        raise ValueError(f"{name} must contain only 0/1 values")
    return a.astype(bool)


def confusion(pred, truth) -> Confusion:
    p, t = _binary(pred, "pred"), _binary(truth, "truth")
    if p.shape != t.shape:
        raise ValueError(f"length mismatch: pred {p.shape[0]} vs truth {t.shape[0]}")
    tp = int(np.count_nonzero(p & t))
    fp = int(np.count_nonzero(p & ~t))
    fn = int(np.count_nonzero(~p & t))
    return Confusion(tp, len(p) - tp - fp - fn, fp, fn)


def mcc(c: Confusion) -> float:
    """Matthews correlation; 0 when any marginal is empty."""
    denom = (c.tp + c.fp) * (c.tp + c.fn) * (c.tn + c.fp) * (c.tn + c.fn)
    if denom == 0:
        return 0.0
    value = (c.tp * c.tn - c.fp * c.fn) / math.sqrt(denom)
    return max(-1.0, min(1.0, value))


def precision_recall_f1(c: Confusion) -> tuple[float, float, float]:
    p = c.tp / (c.tp + c.fp) if c.tp + c.fp else 0.0
    r = c.tp / (c.tp + c.fn) if c.tp + c.fn else 0.0
    f1 = 2 * p * r / (p + r) if p + r else 0.0
    return p, r, f1


def accuracy(c: Confusion) -> float:
    return (c.tp + c.tn) / c.total if c.total else 0.0


def roc_auc(scores, truth) -> float:
    """Mann-Whitney rank statistic on raw scores (ties count one half)."""
    s = np.asarray(scores, dtype=float).ravel()
    t = _binary(truth, "truth")
    n_pos = int(t.sum())
    n_neg = len(t) - n_pos
    if n_pos == 0 or n_neg == 0:
        raise ValueError("ROC-AUC needs both classes in truth")
    ranks = rankdata(s)
    return float((ranks[t].sum() - n_pos * (n_pos + 1) / 2) / (n_pos * n_neg))


METRICS = {
    "mcc": mcc,
    "f1": lambda c: precision_recall_f1(c)[2],
    "precision": lambda c: precision_recall_f1(c)[0],
    "recall": lambda c: precision_recall_f1(c)[1],
    "accuracy": accuracy,
}


@dataclass
class EvalReport:
    """One evaluated labelling: provenance plus confusion and derived metrics."""

    dataset: str
    model: str
    threshold_method: str
    combination: str
    confusion: Confusion
    config: dict | None = None
    loss: str | None = None
    seed: int | None = None

    @property
    def mcc(self) -> float:
        return mcc(self.confusion)

    def to_dict(self) -> dict:
        p, r, f1 = precision_recall_f1(self.confusion)
        d = asdict(self)
        d.update(mcc=self.mcc, precision=p, recall=r, f1=f1)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "EvalReport":
        keys = ("dataset", "model", "threshold_method", "combination", "config", "loss", "seed")
        return cls(confusion=Confusion(**d["confusion"]), **{k: d.get(k) for k in keys})

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)


def evaluate(pred, truth, **provenance) -> EvalReport:
    return EvalReport(confusion=confusion(pred, truth), **provenance)
