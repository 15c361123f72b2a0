"""Classification metrics and the inter/intra class distance ratio."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy.spatial.distance import cdist
from scipy.stats import rankdata
from sklearn.metrics import f1_score, precision_recall_fscore_support


def accuracy(y_true, y_pred) -> float:
    y_true = np.asarray(y_true)
    if y_true.size == 0:
        return float("nan")
    return float(np.mean(y_true == np.asarray(y_pred)))


def macro_f1(y_true, y_pred) -> float:
    """Unweighted mean of per-class F1 over the classes present in ``y_true`` or ``y_pred``."""
    return float(f1_score(y_true, y_pred, average="macro", zero_division=0))


def binary_auc(scores, positive) -> float:
    """Mann-Whitney AUC; tied scores get half credit. ``nan`` if one side is empty."""
    scores = np.asarray(scores, dtype=np.float64)
    positive = np.asarray(positive, dtype=bool)
    n_pos = int(positive.sum())
    n_neg = positive.size - n_pos
    if n_pos == 0 or n_neg == 0:
        return float("nan")
    ranks = rankdata(scores)
    return float((ranks[positive].sum() - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg))


def macro_auc(prob, y_true) -> float:
    """One-vs-rest AUC averaged over classes that have both positives and negatives."""
    prob = np.asarray(prob)
    y_true = np.asarray(y_true)
    aucs = [binary_auc(prob[:, c], y_true == c) for c in range(prob.shape[1])]
    aucs = [a for a in aucs if not math.isnan(a)]
    return float(np.mean(aucs)) if aucs else float("nan")


@dataclass
class MetricsRecord:
    accuracy: float
    macro_f1: float
    roc_auc: float
    precision: list = field(default_factory=list)
    recall: list = field(default_factory=list)
    distance_ratio: float | None = None
    meta: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return asdict(self)


def compute_metrics(prob, labels, mask, num_classes: int | None = None) -> MetricsRecord:
    prob = np.asarray(prob)
    labels = np.asarray(labels)
    mask = np.asarray(mask, dtype=bool)
    num_classes = prob.shape[1] if num_classes is None else num_classes
    y = labels[mask]
    p = prob[mask]
    pred = p.argmax(axis=1)
    prec, rec, _, _ = precision_recall_fscore_support(
        y, pred, labels=np.arange(num_classes), zero_division=0
    )
    return MetricsRecord(
        accuracy=accuracy(y, pred),
        macro_f1=macro_f1(y, pred),
        roc_auc=macro_auc(p, y),
        precision=[float(v) for v in prec],
        recall=[float(v) for v in rec],
    )


@dataclass
class DistanceRatio:
    """``value`` is ``nan`` when ``degenerate`` (zero mean intra-class distance)."""

    value: float
    mean_inter: float
    mean_intra: float
    degenerate: bool = False
    excluded_classes: list = field(default_factory=list)


def distance_ratio(H, labels) -> DistanceRatio:
    """Mean over classes of the distance to all other classes, over the mean intra-class distance.

    Classes with fewer than two members are left out of both means.
    """
    H = np.asarray(H, dtype=np.float64)
    labels = np.asarray(labels)
    D = cdist(H, H)
    inter, intra, excluded = [], [], []
    for c in np.unique(labels):
        inside = labels == c
        k = int(inside.sum())
        if k < 2 or k == labels.size:
            excluded.append(int(c))
            continue
        block = D[np.ix_(inside, inside)]
        intra.append(block.sum() / (k * (k - 1)))
        inter.append(D[np.ix_(inside, ~inside)].mean())
    if not intra:
        return DistanceRatio(float("nan"), float("nan"), float("nan"), True, excluded)
    mean_inter = float(np.mean(inter))
    mean_intra = float(np.mean(intra))
    if mean_intra == 0.0:
        return DistanceRatio(float("nan"), mean_inter, mean_intra, True, excluded)
    return DistanceRatio(mean_inter / mean_intra, mean_inter, mean_intra, False, excluded)
