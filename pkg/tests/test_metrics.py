import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from oracles import brute_auroc, brute_balanced_accuracy, brute_confusion
from samil.errors import DomainError, ShapeError
from samil.metrics import (
    attention_relevance_curve,
    auroc,
    balanced_accuracy,
    confusion_matrix,
    screening_aurocs,
)


def test_balanced_accuracy_examples():
    y = np.array([0, 1, 2] * 4)
    assert balanced_accuracy(y, y) == 1.0
    assert balanced_accuracy(y, np.zeros_like(y)) == pytest.approx(1 / 3)
    assert balanced_accuracy([0, 0, 1, 2], [0, 1, 1, 2]) == pytest.approx(0.8333, abs=1e-4)


def test_balanced_accuracy_needs_every_class():
    with pytest.raises(DomainError):
        balanced_accuracy([0, 0, 1], [0, 0, 1])


def test_auroc_examples():
    assert auroc([0.1, 0.2, 0.8, 0.9], [0, 0, 1, 1]) == 1.0
    assert auroc([0.5] * 6, [0, 1, 0, 1, 1, 0]) == 0.5
    assert auroc([0.1, 0.4, 0.35, 0.8], [0, 0, 1, 1]) == 0.75


def test_auroc_single_class():
    with pytest.raises(DomainError):
        auroc([0.1, 0.2], [1, 1])


def test_confusion_examples():
    y = np.array([0, 1, 2, 2, 1])
    np.testing.assert_array_equal(confusion_matrix(y, y), np.diag([1, 2, 2]))
    cm = confusion_matrix([0, 1, 2, 2], [0, 2, 2, 1])
    np.testing.assert_array_equal(cm, [[1, 0, 0], [0, 0, 1], [0, 1, 1]])
    assert cm.sum() == 4


def test_invalid_labels():
    with pytest.raises(DomainError):
        confusion_matrix([0, 3], [0, 1])
    with pytest.raises(ShapeError):
        confusion_matrix([0, 1], [0])


def test_randomized_against_brute_force(rng):
    for _ in range(200):
        n = int(rng.integers(3, 25))
        y = np.r_[0, 1, 2, rng.integers(0, 3, n - 3)]
        p = rng.integers(0, 3, n)
        assert confusion_matrix(y, p).tolist() == brute_confusion(y, p)
        assert balanced_accuracy(y, p) == brute_balanced_accuracy(y, p)
        s = rng.integers(0, 5, n) / 4.0  # coarse grid forces ties
        b = np.r_[0, 1, rng.integers(0, 2, n - 2)]
        assert auroc(s, b) == brute_auroc(s, b)


@given(st.lists(st.integers(0, 2), min_size=3, max_size=30), st.permutations([0, 1, 2]), st.integers(0, 2**31))
def test_balanced_accuracy_relabel_invariant(y, perm, seed):
    y = np.array(y + [0, 1, 2])
    p = np.random.default_rng(seed).integers(0, 3, y.size)
    perm = np.array(perm)
    assert balanced_accuracy(perm[y], perm[p]) == pytest.approx(balanced_accuracy(y, p), abs=1e-15)


@given(st.lists(st.floats(-5, 5), min_size=2, max_size=30), st.integers(0, 2**31))
def test_auroc_monotone_invariant(scores, seed):
    s = np.array(scores)
    y = np.random.default_rng(seed).integers(0, 2, s.size)
    y[0], y[1] = 0, 1
    # a strictly monotone map that float rounding cannot collapse: distinct values -> spaced ranks
    mapped = np.searchsorted(np.unique(s), s) * 7.5 - 3.0
    assert auroc(mapped, y) == auroc(s, y)


def test_confusion_rows_sum_to_class_counts(rng):
    y, p = rng.integers(0, 3, 50), rng.integers(0, 3, 50)
    np.testing.assert_array_equal(confusion_matrix(y, p).sum(axis=1), np.bincount(y, minlength=3))


def test_screening_tasks():
    y = np.array([0, 1, 2, 0, 1, 2])
    probs = np.eye(3)[y] * 0.9 + 0.1 / 3
    out = screening_aurocs(probs, y)
    assert out == {"no_vs_some": 1.0, "significant_vs_not": 1.0, "early_vs_significant": 1.0}
    assert np.isnan(screening_aurocs(probs[:2], y[:2])["early_vs_significant"])


def test_curve_examples():
    ones = [np.ones(4), np.ones(2)]
    np.testing.assert_array_equal(attention_relevance_curve([np.arange(4.0), np.arange(2.0)], ones, 3), [1, 1, 1])
    one_hot = [np.eye(5)[i] for i in range(3)]
    assert attention_relevance_curve(one_hot, one_hot, 1)[0] == 1.0


def test_curve_hand_fixture():
    atts = [np.array([0.1, 0.6, 0.3]), np.array([0.5, 0.5])]
    rels = [np.array([0.2, 1.0, 0.0]), np.array([0.4, 0.8])]
    # study 1 ranks: idx1 (1.0), idx2 (0.0), idx0 (0.2); study 2 tie -> idx0 (0.4), idx1 (0.8)
    curve = attention_relevance_curve(atts, rels, 4)
    np.testing.assert_allclose(curve[:3], [0.7, 0.4, 0.2])
    assert np.isnan(curve[3])


def test_curve_oracle_attention_is_non_increasing(rng):
    rels = [rng.integers(0, 2, int(rng.integers(5, 20))).astype(float) for _ in range(30)]
    atts = [r + 1e-3 * rng.uniform(size=r.size) for r in rels]
    curve = attention_relevance_curve(atts, rels, 5)
    assert np.all(np.diff(curve) <= 1e-12) and np.all((curve >= 0) & (curve <= 1))


def test_curve_empty_split():
    with pytest.raises(DomainError):
        attention_relevance_curve([], [], 3)
