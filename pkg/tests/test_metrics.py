import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from saber.errors import SingleClassError
from saber.metrics import detection_report, fpr_at_tpr, per_type_auroc, pr_auc, roc_auc, roc_curve


def auroc_concordance(scores, labels):
    """Probability a random positive outscores a random negative, ties count half."""
    pos = [s for s, y in zip(scores, labels) if y]
    neg = [s for s, y in zip(scores, labels) if not y]
    total = sum(1.0 if p > n else 0.5 if p == n else 0.0 for p, n in itertools.product(pos, neg))
    return total / (len(pos) * len(neg))


def aupr_enumerate(scores, labels):
    """Step-wise PR area from every distinct threshold, counted by brute force."""
    scores, labels = np.asarray(scores), np.asarray(labels, bool)
    P = labels.sum()
    area, prev_recall = 0.0, 0.0
    for thr in sorted(set(scores.tolist()), reverse=True):
        pred = scores >= thr
        tp = int(np.sum(pred & labels))
        fp = int(np.sum(pred & ~labels))
        recall = tp / P
        area += (recall - prev_recall) * (tp / (tp + fp))
        prev_recall = recall
    return area


def fpr95_enumerate(scores, labels):
    scores, labels = np.asarray(scores), np.asarray(labels, bool)
    best = 1.0
    for thr in set(scores.tolist()) | {np.inf}:
        pred = scores >= thr
        if np.sum(pred & labels) / labels.sum() >= 0.95:
            best = min(best, np.sum(pred & ~labels) / (~labels).sum())
    return best


def _instance(rng):
    n = int(rng.integers(2, 51))
    labels = rng.random(n) < rng.uniform(0.1, 0.9)
    labels[0], labels[1] = True, False
    # coarse grid so ties are common
    scores = rng.integers(0, int(rng.integers(2, 12)), n) / 3.0
    return scores, labels


def test_oracles_on_random_instances():
    rng = np.random.default_rng(0)
    for _ in range(200):
        s, y = _instance(rng)
        assert abs(roc_auc(s, y) - auroc_concordance(s, y)) <= 1e-12
        assert abs(pr_auc(s, y) - aupr_enumerate(s, y)) <= 1e-12
        assert abs(pr_auc(s, y, positive_class=False) - aupr_enumerate(-s, ~y)) <= 1e-12
        assert abs(fpr_at_tpr(s, y) - fpr95_enumerate(s, y)) <= 1e-12


def test_perfect_scorer():
    y = np.array([0, 0, 1, 0, 1, 1], bool)
    s = y.astype(float) + np.linspace(0, 0.1, 6)
    assert roc_auc(s, y) == 1.0
    assert pr_auc(s, y) == 1.0
    assert pr_auc(s, y, positive_class=False) == 1.0
    assert fpr_at_tpr(s, y) == 0.0


def test_inverted_and_constant_scorers():
    y = np.array([0, 1, 0, 1], bool)
    assert roc_auc(-y.astype(float), y) == 0.0
    assert fpr_at_tpr(-y.astype(float), y) == 1.0
    assert roc_auc(np.zeros(4), y) == 0.5
    assert pr_auc(np.zeros(4), y) == 0.5


def test_worked_example():
    s = [0.9, 0.8, 0.7, 0.6]
    y = [True, False, True, False]
    assert roc_auc(s, y) == 0.75
    # recall 0.5 at precision 1, then recall 1 at precision 2/3
    assert pr_auc(s, y) == pytest.approx(0.5 + 0.5 * 2 / 3, abs=1e-15)
    fpr, tpr, thr = roc_curve(s, y)
    np.testing.assert_array_equal(fpr, [0, 0, 0.5, 0.5, 1])
    np.testing.assert_array_equal(tpr, [0, 0.5, 0.5, 1, 1])
    assert thr[0] == np.inf


@settings(max_examples=50, deadline=None)
@given(st.lists(st.tuples(st.integers(-5, 5), st.booleans()), min_size=2, max_size=40))
def test_monotone_transform_invariance(pairs):
    s = np.array([p[0] for p in pairs], float)
    y = np.array([p[1] for p in pairs])
    if y.all() or not y.any():
        return
    t = np.exp(s / 2) * 3 + 1
    assert roc_auc(s, y) == pytest.approx(roc_auc(t, y), abs=1e-12)
    assert pr_auc(s, y) == pytest.approx(pr_auc(t, y), abs=1e-12)
    assert 0 <= fpr_at_tpr(s, y) <= 1


@settings(max_examples=50, deadline=None)
@given(st.lists(st.tuples(st.integers(-5, 5), st.booleans()), min_size=2, max_size=40))
def test_auroc_symmetry(pairs):
    s = np.array([p[0] for p in pairs], float)
    y = np.array([p[1] for p in pairs])
    if y.all() or not y.any():
        return
    assert roc_auc(s, y) + roc_auc(-s, y) == pytest.approx(1.0, abs=1e-12)


def test_single_class_raises():
    with pytest.raises(SingleClassError):
        roc_auc([1.0, 2.0], [True, True])
    with pytest.raises(SingleClassError):
        pr_auc([1.0, 2.0], [False, False])


def test_bad_inputs():
    with pytest.raises(ValueError):
        roc_auc([1.0], [True, False])
    with pytest.raises(ValueError):
        roc_auc([1.0, np.nan], [True, False])


def test_detection_report_drops_ignored():
    s = [0.1, 5.0, 0.2, 0.9, 0.95]
    labels = ["normal", "ignored", "normal", "abnormal", "abnormal"]
    rep = detection_report(s, labels)
    assert rep == {"auroc": 1.0, "aupr_abnormal": 1.0, "aupr_normal": 1.0, "fpr_at_95_tpr": 0.0}


def test_per_type_auroc():
    s = [0.1, 0.2, 0.9, 0.15, 0.3]
    labels = ["normal", "normal", "abnormal", "abnormal", "ignored"]
    types = [None, None, "wrong_way", "tailgating", "tailgating"]
    out = per_type_auroc(s, labels, types)
    assert out == {"tailgating": 0.5, "wrong_way": 1.0}
    assert per_type_auroc([1.0], ["abnormal"], ["x"]) == {}
