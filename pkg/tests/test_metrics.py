from fractions import Fraction
from math import comb

import numpy as np
import pytest
from hypothesis import given, strategies as st
from scipy.stats import binomtest

from gada.metrics import (
    ScoredVideo, auc, auc_score, confusion_metrics, discordant_counts, mcnemar_exact, select_threshold,
    select_threshold_scores,
)


def scored(scores, labels):
    return [ScoredVideo(f"v{i}", int(l), float(s)) for i, (s, l) in enumerate(zip(scores, labels))]


def pairwise_auc(labels, scores) -> Fraction:
    pos = [s for s, l in zip(scores, labels) if l == 1]
    neg = [s for s, l in zip(scores, labels) if l == 0]
    wins = sum(Fraction(1) if p > n else Fraction(1, 2) if p == n else Fraction(0) for p in pos for n in neg)
    return wins / (len(pos) * len(neg))


def random_instance(rng, max_n=200):
    n = int(rng.integers(2, max_n + 1))
    labels = rng.integers(0, 2, n)
    labels[:2] = [0, 1]
    # coarse grid so ties are common
    scores = rng.integers(0, int(rng.integers(2, 30)), n) / 10.0
    return labels, scores


def test_auc_examples():
    assert auc(scored([0.1, 0.4, 0.35, 0.8], [0, 0, 1, 1])) == 0.75
    assert auc(scored([0.1, 0.2, 0.8, 0.9], [0, 0, 1, 1])) == 1.0
    assert auc(scored([0.5] * 6, [0, 1] * 3)) == 0.5


def test_auc_needs_both_classes():
    with pytest.raises(ValueError):
        auc(scored([0.1, 0.2], [1, 1]))


def test_auc_matches_pairwise_oracle():
    rng = np.random.default_rng(0)
    for _ in range(100):
        labels, scores = random_instance(rng)
        assert auc_score(labels, scores) == float(pairwise_auc(labels, scores))


@given(st.lists(st.tuples(st.floats(-5, 5), st.integers(0, 1)), min_size=2, max_size=40))
def test_auc_monotone_invariance(rows):
    labels = [l for _, l in rows]
    if len(set(labels)) < 2:
        return
    scores = np.array([s for s, _ in rows])
    base = auc_score(labels, scores)
    # an exactly order-preserving map: distinct values onto a random increasing sequence
    distinct, inverse = np.unique(scores, return_inverse=True)
    ladder = np.cumsum(np.random.default_rng(len(rows)).uniform(0.1, 10.0, len(distinct)))
    assert auc_score(labels, ladder[inverse]) == base
    assert auc_score(labels, -ladder[inverse]) == pytest.approx(1 - base, abs=1e-12)


def test_select_threshold_example():
    labels, scores = [0, 0, 1, 1], [0.2, 0.6, 0.4, 0.9]
    t = select_threshold(scored(scores, labels))
    assert t == pytest.approx(0.3)
    rep = confusion_metrics(scored(scores, labels), t)
    assert (rep.sensitivity + rep.specificity) / 2 == 0.75


def test_select_threshold_separated_and_degenerate():
    data = scored([0.1, 0.2, 0.7, 0.9], [0, 0, 1, 1])
    t = select_threshold(data)
    assert 0.2 < t <= 0.7
    rep = confusion_metrics(data, t)
    assert rep.sensitivity == rep.specificity == 1.0
    flat = scored([0.4] * 4, [0, 1, 0, 1])
    rep = confusion_metrics(flat, select_threshold(flat))
    assert rep.sensitivity == 1.0 and rep.specificity == 0.0


def balanced_accuracy(labels, scores, t):
    pred = scores >= t
    return (pred[labels == 1].mean() + (~pred[labels == 0]).mean()) / 2


def test_select_threshold_matches_dense_grid():
    rng = np.random.default_rng(1)
    for _ in range(100):
        labels, scores = random_instance(rng, 60)
        t = select_threshold_scores(labels, scores)
        grid = np.concatenate([np.linspace(scores.min() - 1, scores.max() + 1, 4001), np.unique(scores)])
        best = max(balanced_accuracy(labels, scores, g) for g in grid)
        assert balanced_accuracy(labels, scores, t) == pytest.approx(best, abs=1e-12)


def test_confusion_counts():
    # 2 TP, 1 FN, 3 TN, 1 FP at threshold 0.5
    data = scored([0.9, 0.6, 0.1, 0.2, 0.3, 0.4, 0.7], [1, 1, 1, 0, 0, 0, 0])
    rep = confusion_metrics(data, 0.5)
    assert rep.sensitivity == pytest.approx(2 / 3) and rep.specificity == pytest.approx(3 / 4)
    assert rep.accuracy == pytest.approx(5 / 7)
    assert (rep.n_pos, rep.n_neg) == (3, 4)


def test_confusion_extreme_thresholds():
    data = scored([0.1, 0.5, 0.9], [0, 1, 1])
    low, high = confusion_metrics(data, -np.inf), confusion_metrics(data, np.inf)
    assert (low.sensitivity, low.specificity) == (1.0, 0.0)
    assert (high.sensitivity, high.specificity) == (0.0, 1.0)


def test_ties_predicted_positive():
    assert confusion_metrics(scored([0.5, 0.2], [1, 0]), 0.5).sensitivity == 1.0


def test_mcnemar_examples():
    assert mcnemar_exact(0, 0) == 1.0
    assert mcnemar_exact(7, 7) == 1.0
    expected = 2 * sum(comb(20, k) for k in range(6)) / 2 ** 20
    assert 2 * 21700 / 1048576 == expected
    assert mcnemar_exact(5, 15) == pytest.approx(0.041390, abs=1e-6)
    assert mcnemar_exact(5, 15) == pytest.approx(binomtest(5, 20, 0.5).pvalue, abs=1e-12)


@given(st.integers(0, 60), st.integers(0, 60))
def test_mcnemar_symmetric_and_in_unit_interval(b, c):
    p = mcnemar_exact(b, c)
    assert p == mcnemar_exact(c, b) and 0 < p <= 1
    if b + c:
        assert p == pytest.approx(binomtest(b, b + c, 0.5).pvalue, rel=1e-9)


def test_mcnemar_rejects_negative():
    with pytest.raises(ValueError):
        mcnemar_exact(-1, 3)


def test_discordant_counts():
    assert discordant_counts([1, 0, 1, 0], [1, 0, 0, 1], [0, 0, 1, 1]) == (1, 1)
    assert discordant_counts([1, 1, 0], [1, 1, 0], [0, 0, 0]) == (2, 0)


def test_score_must_be_finite():
    with pytest.raises(ValueError):
        ScoredVideo("v", 1, float("nan"))
