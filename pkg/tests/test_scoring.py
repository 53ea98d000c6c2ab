import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from dmprune.model_ir import BundleError
from dmprune.scoring import (count_grid, mask_at_count, perturbation_at_count,
                             prune_order, ratio_to_count, sigma_subvector,
                             taylor_scores)


def test_taylor_scores_worked_values():
    w = np.array([1.0, -2.0, 3.0])
    g = np.array([0.5, 0.1, 0.0])
    assert np.array_equal(taylor_scores(w, g), [0.5, 0.2, 0.0])


def test_taylor_scores_shape_mismatch():
    with pytest.raises(BundleError):
        taylor_scores(np.zeros(3), np.zeros(4))


def test_prune_order_ascending_score():
    assert np.array_equal(prune_order(np.array([0.5, 0.2, 0.9])), [1, 0, 2])


def test_prune_order_tie_lowest_index_first():
    assert np.array_equal(prune_order(np.array([0.3, 0.3])), [0, 1])


def test_prune_order_zero_weights_break_ties_first():
    s = np.array([0.0, 0.0, 0.0])
    w = np.array([1.0, 0.0, -2.0])
    # among equal scores, already-zero weights come first, then index order
    assert np.array_equal(prune_order(s, w), [1, 0, 2])


def test_prune_order_weight_shape_mismatch():
    with pytest.raises(BundleError):
        prune_order(np.zeros(3), np.zeros(4))


def test_ratio_to_count_rounds_half_up():
    assert ratio_to_count(0.5, 3) == 2
    assert ratio_to_count(0.0, 10) == 0
    assert ratio_to_count(1.0, 10) == 10
    with pytest.raises(BundleError):
        ratio_to_count(1.5, 10)


def test_count_grid_endpoints_and_dedup():
    g = count_grid(3, 20)
    assert g[0] == 0 and g[-1] == 3
    assert len(g) == len(set(g.tolist()))
    assert np.array_equal(count_grid(10, 5), [0, 2, 4, 6, 8, 10])


def test_mask_at_count():
    order = np.array([1, 0, 2])
    m = mask_at_count(order, 1, (3,))
    assert np.array_equal(m.bits, [1, 0, 1])
    with pytest.raises(BundleError):
        mask_at_count(order, 4, (3,))


def test_perturbation_zeroes_selected_weights():
    w = np.array([1.0, -2.0, 3.0])
    order = np.array([0, 2, 1])
    p1 = perturbation_at_count(w, order, 1)
    assert np.array_equal(p1.delta, [-1.0, 0.0, 0.0])
    assert np.array_equal(p1.support, [0])
    p3 = perturbation_at_count(w, order, 3)
    assert np.array_equal(p3.delta, -w)


def test_sigma_subvector_is_increment():
    order = np.array([0, 2, 1])
    idx, val = sigma_subvector(np.array([1.0, -2.0, 3.0]), order, 1, 2)
    assert np.array_equal(idx, [2])
    assert np.array_equal(val, [-3.0])
    with pytest.raises(BundleError):
        sigma_subvector(np.zeros(3), order, 2, 1)


def test_sigma_subvectors_telescope():
    rng = np.random.default_rng(5)
    w = rng.standard_normal(12)
    order = prune_order(taylor_scores(w, rng.standard_normal(12)))
    acc = np.zeros_like(w)
    for k in range(len(w)):
        idx, val = sigma_subvector(w, order, k, k + 1)
        acc[idx] += val
        assert np.array_equal(acc, perturbation_at_count(w, order, k + 1).delta)


@settings(max_examples=60, deadline=None)
@given(arrays(np.float64, st.integers(1, 30),
              elements=st.floats(-1e6, 1e6)))
def test_masks_are_nested(scores):
    order = prune_order(scores)
    d = len(scores)
    prev = np.ones(d, dtype=bool)
    for k in range(d + 1):
        bits = mask_at_count(order, k, (d,)).bits
        assert bits.sum() == d - k
        assert np.all(bits <= prev)  # pruned set only grows
        prev = bits


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 2 ** 31 - 1))
def test_order_is_permutation_sorted_by_score(seed):
    rng = np.random.default_rng(seed)
    s = rng.standard_normal(17) ** 2
    order = prune_order(s)
    assert sorted(order) == list(range(17))
    assert np.all(np.diff(s[order]) >= 0)
