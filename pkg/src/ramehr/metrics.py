"""Multi-label evaluation: accuracy, AUROC, AUPR, macro-F1.

Area metrics are computed per label and macro-averaged; a label whose
metric is undefined (single-class ground truth) is left out of the mean.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from scipy.stats import rankdata


class UndefinedMetric(ValueError):
    pass


def auroc(scores, labels) -> float:
    """Mann-Whitney AUROC; tied scores count one half."""
    s = np.asarray(scores, dtype=np.float64)
    y = np.asarray(labels).astype(bool)
    n_pos = int(y.sum())
    n_neg = y.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise UndefinedMetric("AUROC needs at least one positive and one negative")
    ranks = rankdata(s, method="average")
    u = ranks[y].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def aupr(scores, labels) -> float:
    """Step-wise average precision: sum over thresholds of precision * recall gain.

    Tied scores form one threshold.
    """
    s = np.asarray(scores, dtype=np.float64)
    y = np.asarray(labels).astype(bool)
    n_pos = int(y.sum())
    if n_pos == 0:
        raise UndefinedMetric("AUPR needs at least one positive")
    order = np.argsort(-s, kind="stable")
    s_sorted, y_sorted = s[order], y[order]
    tp = np.cumsum(y_sorted)
    fp = np.cumsum(~y_sorted)
    # last index of each run of equal scores
    ends = np.flatnonzero(np.r_[s_sorted[1:] != s_sorted[:-1], True])
    tp, fp = tp[ends], fp[ends]
    precision = tp / (tp + fp)
    recall_gain = np.diff(np.r_[0, tp]) / n_pos
    return float(np.sum(precision * recall_gain))


def acc_f1(scores, labels, threshold: float = 0.5) -> tuple[float, float]:
    """Micro accuracy over all cells and macro F1 over label columns (0/0 counts as 0)."""
    if not 0.0 < threshold < 1.0:
        raise ValueError("threshold must lie in (0, 1)")
    s = np.asarray(scores, dtype=np.float64)
    y = np.asarray(labels).astype(bool)
    if s.ndim == 1:
        s, y = s[:, None], y[:, None]
    pred = s >= threshold
    acc = float((pred == y).mean())
    f1s = [_f1(pred[:, j], y[:, j]) for j in range(y.shape[1])]
    return acc, float(np.mean(f1s))


def _f1(pred: np.ndarray, y: np.ndarray) -> float:
    tp = int((pred & y).sum())
    fp = int((pred & ~y).sum())
    fn = int((~pred & y).sum())
    denom = 2 * tp + fp + fn
    return 0.0 if denom == 0 else 2 * tp / denom


@dataclass
class EvalReport:
    acc: float
    auroc: float
    aupr: float
    macro_f1: float
    per_label: list[dict] = field(default_factory=list)

    def to_json(self) -> dict:
        return _nan_to_none(asdict(self))

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_json(), indent=2, sort_keys=True) + "\n", encoding="utf-8")


def _nan_to_none(obj):
    if isinstance(obj, float) and math.isnan(obj):
        return None
    if isinstance(obj, dict):
        return {k: _nan_to_none(v) for k, v in obj.items()}
    if isinstance(obj, list):
        return [_nan_to_none(v) for v in obj]
    return obj


def _safe(fn, s, y) -> float:
    try:
        return fn(s, y)
    except UndefinedMetric:
        return math.nan


def evaluate(scores, labels, threshold: float = 0.5, label_names=None) -> EvalReport:
    s = np.asarray(scores, dtype=np.float64)
    y = np.asarray(labels)
    if s.ndim == 1:
        s, y = s[:, None], y[:, None]
    if s.shape != y.shape:
        raise ValueError(f"scores {s.shape} and labels {y.shape} differ in shape")
    names = list(label_names) if label_names is not None else [str(j) for j in range(y.shape[1])]
    per_label = []
    for j in range(y.shape[1]):
        pred = s[:, j] >= threshold
        per_label.append({
            "label": names[j],
            "auroc": _safe(auroc, s[:, j], y[:, j]),
            "aupr": _safe(aupr, s[:, j], y[:, j]),
            "f1": _f1(pred, y[:, j].astype(bool)),
            "positives": int(y[:, j].sum()),
        })
    acc, f1 = acc_f1(s, y, threshold)

    def macro(key):
        vals = [p[key] for p in per_label if not math.isnan(p[key])]
        return float(np.mean(vals)) if vals else math.nan

    return EvalReport(acc=acc, auroc=macro("auroc"), aupr=macro("aupr"), macro_f1=f1, per_label=per_label)
