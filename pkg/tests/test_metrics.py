import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from structureflow.metrics import (MMD_SCALES, auroc, average_precision, common_subsample, energy_distance,
                                   mmd2, structure_scores, w2)
from structureflow.numerics import Prng


def pairwise_auroc(scores, labels):
    pos = [s for s, y in zip(scores, labels) if y]
    neg = [s for s, y in zip(scores, labels) if not y]
    total = sum(1.0 if p > n else 0.5 if p == n else 0.0 for p in pos for n in neg)
    return total / (len(pos) * len(neg))


def threshold_ap(scores, labels):
    """Sweep every distinct threshold: AP = sum (R_k - R_{k-1}) P_k."""
    scores, labels = np.asarray(scores), np.asarray(labels, bool)
    ap, prev_recall = 0.0, 0.0
    for thr in sorted(set(scores.tolist()), reverse=True):
        pred = scores >= thr
        tp = np.sum(pred & labels)
        recall = tp / labels.sum()
        ap += (recall - prev_recall) * tp / pred.sum()
        prev_recall = recall
    return ap


def test_identical_clouds_zero():
    x = Prng(0).normal((40, 3))
    assert w2(x, x) < 1e-9 and mmd2(x, x) < 1e-12 and energy_distance(x, x) < 1e-9


def test_singletons():
    x, y = np.array([[0.0, 0.0]]), np.array([[3.0, 4.0]])
    assert w2(x, y) == pytest.approx(5.0)
    assert w2(x, y, squared=True) == pytest.approx(25.0)
    assert energy_distance(np.array([0.0]), np.array([1.0])) == pytest.approx(2.0)
    r = 0.8
    for s in (0.5, 1.0, 3.0):
        want = 2 - 2 * np.exp(-r * r / (2 * s * s))
        assert mmd2(np.array([0.0]), np.array([r]), scales=(s,)) == pytest.approx(want, abs=1e-14)
    want = np.mean([2 - 2 * np.exp(-r * r / (2 * s * s)) for s in MMD_SCALES])
    assert mmd2(np.array([0.0]), np.array([r])) == pytest.approx(want)


def test_w2_matches_permutation_oracle():
    prng = Prng(1)
    x, y = prng.normal((4, 2)), prng.normal((4, 2))
    c = ((x[:, None] - y[None]) ** 2).sum(-1)
    best = min(c[range(4), list(p)].sum() for p in itertools.permutations(range(4))) / 4
    assert abs(w2(x, y) - np.sqrt(best)) < 1e-9


def test_common_subsample_sizes():
    p, q = common_subsample(np.zeros((700, 2)), np.ones((600, 2)), cap=512)
    assert len(p) == len(q) == 512
    p, q = common_subsample(np.zeros((30, 2)), np.ones((20, 2)))
    assert len(p) == len(q) == 20


def test_empty_cloud_rejected():
    with pytest.raises(ValueError):
        w2(np.zeros((0, 2)), np.zeros((3, 2)))


@settings(max_examples=30, deadline=None)
@given(st.integers(1, 8), st.integers(1, 8), st.integers(0, 999))
def test_distances_nonnegative(n, m, seed):
    prng = Prng(seed)
    p, q = prng.normal((n, 2)), prng.normal((m, 2)) * 2
    assert mmd2(p, q) >= 0 and energy_distance(p, q) >= 0 and w2(p, q) >= 0


def test_toy_structure_scores_match_oracles():
    scores = np.array([0.9, 0.8, 0.8, 0.3, 0.2, 0.2])
    labels = np.array([1, 0, 1, 1, 0, 0], bool)
    assert auroc(scores, labels) == pytest.approx(pairwise_auroc(scores, labels))
    assert average_precision(scores, labels) == pytest.approx(threshold_ap(scores, labels))


@settings(max_examples=60, deadline=None)
@given(st.lists(st.tuples(st.integers(0, 4), st.booleans()), min_size=2, max_size=25))
def test_scores_match_oracles_with_ties(pairs):
    scores = np.array([p[0] for p in pairs], float)
    labels = np.array([p[1] for p in pairs])
    if labels.all() or not labels.any():
        return
    assert auroc(scores, labels) == pytest.approx(pairwise_auroc(scores, labels), abs=1e-12)
    assert average_precision(scores, labels) == pytest.approx(threshold_ap(scores, labels), abs=1e-12)


def test_perfect_and_constant_predictions():
    truth = np.array([[0, 1, 0], [0, 0, -0.7], [0.6, 0, 0]])
    sc = structure_scores(np.abs(truth), truth)
    assert sc.auroc == 1.0 and sc.ap == 1.0
    assert sc.ratios() == {"ap_ratio": pytest.approx(1 / sc.prevalence), "auroc_ratio": 2.0}
    assert structure_scores(np.ones((3, 3)), truth).auroc == 0.5


def test_diagonal_excluded():
    truth = np.array([[1.0, 1.0], [0.0, 1.0]])
    sc = structure_scores(np.array([[-5.0, 1.0], [0.0, -5.0]]), truth)
    assert sc.num_evaluated_edges == 2 and sc.num_positives == 1 and sc.auroc == 1.0


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000))
def test_monotone_transform_invariance(seed):
    prng = Prng(seed)
    truth = (prng.random((6, 6)) < 0.3).astype(float)
    np.fill_diagonal(truth, 0)
    if truth.sum() == 0:
        truth[0, 1] = 1
    pred = prng.random((6, 6))
    a = structure_scores(pred, truth)
    b = structure_scores(np.exp(3 * pred) + 7, truth)
    assert a.auroc == b.auroc and a.ap == b.ap


def test_undefined_without_both_classes():
    with pytest.raises(ValueError):
        structure_scores(np.ones((3, 3)), np.zeros((3, 3)))
    with pytest.raises(ValueError):
        structure_scores(np.ones((3, 3)), np.ones((2, 2)))


def test_random_predictor_auroc_near_half():
    prng = Prng(4)
    d = 150
    truth = (prng.random((d, d)) < 0.05).astype(float)
    vals = [structure_scores(prng.random((d, d)), truth).ratios()["auroc_ratio"] for _ in range(5)]
    assert abs(np.mean(vals) - 1.0) < 0.03


def test_w2_symmetry_and_triangle():
    prng = Prng(5)
    for _ in range(5):
        p, q, r = (prng.normal((20, 2)) + prng.normal(2) for _ in range(3))
        assert abs(w2(p, q) - w2(q, p)) < 1e-9
        assert w2(p, r) <= w2(p, q) + w2(q, r) + 1e-9
        assert mmd2(p, q) == pytest.approx(mmd2(q, p), abs=1e-15)
        assert energy_distance(p, q) == pytest.approx(energy_distance(q, p), abs=1e-15)


def test_stated_monotone_transforms():
    prng = Prng(6)
    truth = (prng.random((8, 8)) < 0.3).astype(float)
    pred = prng.normal((8, 8))
    a = structure_scores(pred, truth)
    for f in (lambda x: 2 * x, lambda x: x ** 3):
        b = structure_scores(f(pred), truth)
        assert (a.auroc, a.ap) == (b.auroc, b.ap)


def test_graph_against_itself():
    truth = np.abs(Prng(7).normal((6, 6))) * (Prng(8).random((6, 6)) < 0.4)
    assert structure_scores(truth, truth).auroc == 1.0
