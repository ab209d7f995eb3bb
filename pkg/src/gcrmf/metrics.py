"""Detection metrics: windowed F1/FPR and Precision@K under score thresholds."""
from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import Mapping, Optional

import numpy as np

from .errors import InputError

DEFAULT_THRESHOLDS = (0.5, 0.6, 0.7, 0.8, 0.9)


@dataclass
class WindowMetrics:
    window: Optional[int]
    precision: float
    recall: float
    f1: float
    fpr: float
    tp: int = 0
    fp: int = 0
    fn: int = 0
    tn: int = 0

    def as_dict(self):
        return asdict(self)


@dataclass
class PrecisionAtK:
    threshold: float
    K: int
    precision_at_k: Optional[float]
    flagged: bool = False  # K == 0: no alert clears the threshold

    def as_dict(self):
        return asdict(self)


def _as_mapping(x) -> dict:
    if isinstance(x, Mapping):
        return {int(k): int(v) for k, v in x.items()}
    arr = np.asarray(x).astype(np.int64)
    return {i: int(v) for i, v in enumerate(arr)}


def compute_f1(predictions, truth, window=None) -> WindowMetrics:
    """Binary detection metrics over the labeled node set.

    ``predictions`` and ``truth`` map node -> 0/1 (arrays are indexed by node
    id). Truth entries of -1 (Unknown) are excluded along with the matching
    prediction. Zero denominators give 0.
    """
    pred = _as_mapping(predictions)
    every = _as_mapping(truth)
    true = {k: v for k, v in every.items() if v >= 0}
    stray = set(pred) - set(every)
    missing = set(true) - set(pred)
    if stray or missing:
        raise InputError(
            f"predictions and truth cover different nodes "
            f"(missing {sorted(missing)[:5]}, unknown to truth {sorted(stray)[:5]})"
        )
    tp = fp = fn = tn = 0
    for k, t in true.items():
        p = pred[k]
        if p and t:
            tp += 1
        elif p:
            fp += 1
        elif t:
            fn += 1
        else:
            tn += 1
    precision = tp / (tp + fp) if tp + fp else 0.0
    recall = tp / (tp + fn) if tp + fn else 0.0
    f1 = 2 * precision * recall / (precision + recall) if precision + recall else 0.0
    fpr = fp / (fp + tn) if fp + tn else 0.0
    return WindowMetrics(window, precision, recall, f1, fpr, tp, fp, fn, tn)


def rank_alerts(scores, nodes=None) -> list[tuple[int, float]]:
    """``(node, score)`` by descending score, ties by ascending node id."""
    scores = np.asarray(scores, dtype=np.float64)
    nodes = np.arange(len(scores)) if nodes is None else np.asarray(nodes, dtype=np.int64)
    order = np.lexsort((nodes, -scores))
    return [(int(nodes[i]), float(scores[i])) for i in order]


def precision_at_k(ranked, truth, thresholds=DEFAULT_THRESHOLDS) -> list[PrecisionAtK]:
    """For each threshold, K = alerts scoring at least it; share of illicit among them.

    ``ranked`` must already be in deterministic order (see ``rank_alerts``);
    ``truth`` maps node -> 1 for illicit (anything else counts as not illicit).
    """
    truth = _as_mapping(truth) if not isinstance(truth, (set, frozenset)) else {n: 1 for n in truth}
    out = []
    for theta in thresholds:
        top = [n for n, s in ranked if s >= theta]
        if not top:
            out.append(PrecisionAtK(float(theta), 0, None, True))
            continue
        hits = sum(1 for n in top if truth.get(n, 0) == 1)
        out.append(PrecisionAtK(float(theta), len(top), hits / len(top)))
    return out


def quartiles(values) -> dict:
    v = np.asarray([x for x in values if x is not None], dtype=np.float64)
    if len(v) == 0:
        return {"median": None, "q1": None, "q3": None, "n": 0}
    q1, med, q3 = np.percentile(v, [25, 50, 75])
    return {"median": float(med), "q1": float(q1), "q3": float(q3), "n": int(len(v))}
