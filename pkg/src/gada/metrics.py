"""Video-level classification metrics."""
from __future__ import annotations

import math
from dataclasses import dataclass
from fractions import Fraction
from typing import Sequence

import numpy as np
from scipy.stats import rankdata


@dataclass(frozen=True)
class ScoredVideo:
    video_id: str
    label: int
    score: float
    predicted: int | None = None

    def __post_init__(self):
        if not math.isfinite(self.score):
            raise ValueError(f"video {self.video_id}: score must be finite")


@dataclass(frozen=True)
class MetricsReport:
    auc: float
    threshold: float
    sensitivity: float
    specificity: float
    accuracy: float
    n_pos: int
    n_neg: int


def _unpack(scored: Sequence[ScoredVideo]) -> tuple[np.ndarray, np.ndarray]:
    labels = np.array([s.label for s in scored], dtype=int)
    scores = np.array([s.score for s in scored], dtype=float)
    return labels, scores


def _require_both_classes(labels: np.ndarray) -> None:
    if not (np.any(labels == 1) and np.any(labels == 0)):
        raise ValueError("need at least one positive and one negative video")


def auc_score(labels, scores) -> float:
    """Mann-Whitney AUC: P(score_pos > score_neg) with ties counted 1/2."""
    labels = np.asarray(labels, dtype=int)
    scores = np.asarray(scores, dtype=float)
    _require_both_classes(labels)
    n_pos = int(labels.sum())
    n_neg = len(labels) - n_pos
    ranks = rankdata(scores)
    u = ranks[labels == 1].sum() - n_pos * (n_pos + 1) / 2
    return float(u / (n_pos * n_neg))


def auc(scored: Sequence[ScoredVideo]) -> float:
    return auc_score(*_unpack(scored))


def _balanced_accuracy(labels: np.ndarray, scores: np.ndarray, threshold: float) -> float:
    pred = scores >= threshold
    sens = np.mean(pred[labels == 1])
    spec = np.mean(~pred[labels == 0])
    return (sens + spec) / 2


def candidate_thresholds(scores: np.ndarray) -> np.ndarray:
    """-inf, midpoints between adjacent distinct scores, +inf (ascending)."""
    distinct = np.unique(scores)
    return np.concatenate([[-np.inf], (distinct[:-1] + distinct[1:]) / 2, [np.inf]])


def select_threshold_scores(labels, scores) -> float:
    labels = np.asarray(labels, dtype=int)
    scores = np.asarray(scores, dtype=float)
    _require_both_classes(labels)
    cands = candidate_thresholds(scores)
    values = [_balanced_accuracy(labels, scores, t) for t in cands]
    return float(cands[int(np.argmax(values))])  # argmax returns the first, i.e. lowest, maximizer


def select_threshold(val_scored: Sequence[ScoredVideo]) -> float:
    """Threshold maximizing (sensitivity + specificity) / 2; ties go to the lowest threshold."""
    return select_threshold_scores(*_unpack(val_scored))


def confusion_metrics(scored: Sequence[ScoredVideo], threshold: float) -> MetricsReport:
    labels, scores = _unpack(scored)
    pred = scores >= threshold
    pos, neg = labels == 1, labels == 0
    tp, fn = int(np.sum(pred & pos)), int(np.sum(~pred & pos))
    tn, fp = int(np.sum(~pred & neg)), int(np.sum(pred & neg))
    both = tp + fn > 0 and tn + fp > 0
    return MetricsReport(
        auc=auc_score(labels, scores) if both else float("nan"),
        threshold=float(threshold),
        sensitivity=tp / (tp + fn) if tp + fn else float("nan"),
        specificity=tn / (tn + fp) if tn + fp else float("nan"),
        accuracy=(tp + tn) / len(labels) if len(labels) else float("nan"),
        n_pos=int(pos.sum()),
        n_neg=int(neg.sum()),
    )


def mcnemar_exact(b: int, c: int) -> float:
    """Two-sided exact McNemar test on the discordant counts ``b`` and ``c``.

    ``p = min(1, 2 * P(X <= min(b, c)))`` with ``X ~ Binomial(b + c, 1/2)``,
    summed exactly in rational arithmetic.
    """
    if b < 0 or c < 0:
        raise ValueError("discordant counts must be nonnegative")
    n = b + c
    if n == 0:
        return 1.0
    tail = Fraction(sum(math.comb(n, k) for k in range(min(b, c) + 1)), 2 ** n)
    return float(min(Fraction(1), 2 * tail))


def discordant_counts(labels, pred_a, pred_b) -> tuple[int, int]:
    """(only A correct, only B correct) over paired predictions."""
    labels = np.asarray(labels)
    ok_a = np.asarray(pred_a) == labels
    ok_b = np.asarray(pred_b) == labels
    return int(np.sum(ok_a & ~ok_b)), int(np.sum(~ok_a & ok_b))
