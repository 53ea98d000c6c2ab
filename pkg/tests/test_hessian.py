import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dmprune.hessian import (auto_kappa, cross_form, densify,
                             empirical_fisher, quad_form)
from dmprune.model_ir import BundleError


def test_dense_fisher_single_row():
    f = empirical_fisher(np.array([[1.0, 2.0]]), kappa=0.0, mode="dense")
    assert np.array_equal(f.dense, [[1.0, 2.0], [2.0, 4.0]])


def test_dense_fisher_averages_over_samples():
    g = np.eye(2) * 0.5
    f = empirical_fisher(g, kappa=0.0, mode="dense")
    assert np.array_equal(f.dense, np.eye(2) * 0.125)


def test_kappa_added_on_diagonal_only():
    f = empirical_fisher(np.array([[1.0, 2.0]]), kappa=0.1, mode="dense")
    assert np.array_equal(f.dense, [[1.1, 2.0], [2.0, 4.1]])


def test_auto_kappa_value():
    g = np.array([[1.0, 2.0], [3.0, 0.0]])
    assert auto_kappa(g) == 1e-6 * (1 + 4 + 9 + 0) / 4


def test_quad_form_dense_worked_value():
    f = empirical_fisher(np.array([[1.0, 2.0]]), kappa=0.0, mode="dense")
    assert quad_form(f, [0], [1.0]) == 1.0
    assert quad_form(f, [0, 1], [1.0, 1.0]) == 9.0


def test_quad_form_factor_worked_value():
    # F = 0.5*I + 9 for G=[[3]]; v=[2] gives 4*0.5 + 9*4 = 38
    f = empirical_fisher(np.array([[3.0]]), kappa=0.5, mode="factor")
    assert quad_form(f, [0], [2.0]) == 38.0


def test_cross_form_worked_value():
    f = empirical_fisher(np.array([[1.0, 2.0]]), kappa=0.0, mode="dense")
    assert cross_form(f, [0], [1.0], [1], [1.0]) == 2.0


def test_cross_form_matches_quad_form_when_equal_args():
    rng = np.random.default_rng(2)
    g = rng.standard_normal((4, 6))
    for mode in ("dense", "factor"):
        f = empirical_fisher(g, kappa=0.3, mode=mode)
        idx = np.array([1, 3, 5])
        val = rng.standard_normal(3)
        assert np.isclose(cross_form(f, idx, val, idx, val),
                          quad_form(f, idx, val), rtol=1e-14)


def test_cross_form_symmetric():
    rng = np.random.default_rng(4)
    g = rng.standard_normal((3, 8))
    for mode in ("dense", "factor"):
        f = empirical_fisher(g, kappa=0.01, mode=mode)
        iu, vu = np.array([0, 2, 4]), rng.standard_normal(3)
        iv, vv = np.array([2, 5]), rng.standard_normal(2)
        assert np.isclose(cross_form(f, iu, vu, iv, vv),
                          cross_form(f, iv, vv, iu, vu), rtol=1e-14)


def test_quad_form_nonnegative():
    rng = np.random.default_rng(6)
    g = rng.standard_normal((5, 10))
    for mode in ("dense", "factor"):
        f = empirical_fisher(g, kappa=0.0, mode=mode)
        for _ in range(50):
            k = rng.integers(1, 10)
            idx = rng.choice(10, size=k, replace=False)
            assert quad_form(f, idx, rng.standard_normal(k)) >= -1e-12


def test_modes_agree():
    rng = np.random.default_rng(8)
    g = rng.standard_normal((6, 12))
    fd = empirical_fisher(g, kappa=0.2, mode="dense")
    ff = empirical_fisher(g, kappa=0.2, mode="factor")
    assert np.allclose(densify(ff), fd.dense, rtol=0, atol=1e-14)
    for _ in range(100):
        k = rng.integers(1, 12)
        idx = rng.choice(12, size=k, replace=False)
        val = rng.standard_normal(k)
        assert np.isclose(quad_form(fd, idx, val), quad_form(ff, idx, val),
                          rtol=1e-12, atol=1e-14)


def test_dense_cap_enforced():
    g = np.zeros((1, 10))
    with pytest.raises(BundleError, match="dense-mode cap"):
        empirical_fisher(g, kappa=0.0, mode="dense", dense_cap=8)


def test_bad_inputs_rejected():
    with pytest.raises(BundleError):
        empirical_fisher(np.zeros(3), kappa=0.0)          # not 2d
    with pytest.raises(BundleError):
        empirical_fisher(np.zeros((2, 3)), kappa=-1.0)    # negative kappa
    with pytest.raises(BundleError):
        empirical_fisher(np.zeros((2, 3)), kappa=0.0, mode="sparse")
    f = empirical_fisher(np.zeros((2, 3)), kappa=0.0)
    with pytest.raises(BundleError):
        quad_form(f, [0, 1], [1.0])                       # length mismatch
    with pytest.raises(BundleError):
        quad_form(f, [3], [1.0])                          # out of range


def test_empty_sparse_vector_gives_zero():
    f = empirical_fisher(np.ones((2, 3)), kappa=1.0)
    assert quad_form(f, [], []) == 0.0
    assert cross_form(f, [], [], [0], [1.0]) == 0.0


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2 ** 31 - 1), st.sampled_from(["dense", "factor"]))
def test_quad_form_matches_dense_algebra(seed, mode):
    rng = np.random.default_rng(seed)
    n, d = int(rng.integers(1, 6)), int(rng.integers(1, 10))
    g = rng.standard_normal((n, d))
    kappa = float(rng.uniform(0, 0.5))
    f = empirical_fisher(g, kappa=kappa, mode=mode)
    full = densify(f)
    k = int(rng.integers(1, d + 1))
    idx = rng.choice(d, size=k, replace=False)
    val = rng.standard_normal(k)
    v = np.zeros(d)
    v[idx] = val
    assert np.isclose(quad_form(f, idx, val), v @ full @ v,
                      rtol=1e-11, atol=1e-12)
