import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dmprune.distortion import (DistortionCurve, cross_term_diagnostic,
                                delta_curve_direct, delta_curve_incremental,
                                q_direct)
from dmprune.hessian import densify, empirical_fisher, quad_form
from dmprune.model_ir import BundleError
from dmprune.refnet import build_gradient_bundle, default_spec, init_params, \
    synth_calibration, to_model_bundle
from dmprune.scoring import perturbation_at_count, prune_order, taylor_scores


def fisher_from_dense(dense, kappa=0.0):
    """Exact-factor trick: F = kappa*I + C^T C with C the Cholesky-like root."""
    dense = np.asarray(dense, dtype=np.float64)
    vals, vecs = np.linalg.eigh(dense)
    vals = np.clip(vals, 0.0, None)
    root = vecs @ np.diag(np.sqrt(vals)) @ vecs.T
    f = empirical_fisher(root, kappa=kappa, mode="dense")
    f.dense = dense + kappa * np.eye(dense.shape[0])
    return f


def test_q_direct_reconciled_worked_example():
    # g = [0.5, 1], W = [2, 1], F = diag(1, 2), prune order [0, 1]:
    # k=1: -0.5*2 + 0.5*1*4           = 1
    # k=2: (-0.5*2 - 1*1) + 0.5*(4+2) = 1
    w = np.array([2.0, 1.0])
    g = np.array([0.5, 1.0])
    f = fisher_from_dense(np.diag([1.0, 2.0]))
    order = np.array([0, 1])
    for curve_fn in (delta_curve_direct, delta_curve_incremental):
        c = curve_fn(w, g, f, order, [0, 1, 2])
        assert np.allclose(c.q, [0.0, 1.0, 1.0], atol=1e-15)
        assert np.allclose(c.delta, [0.0, 1.0, 1.0], atol=1e-15)


def test_q_direct_single_weight():
    w = np.array([1.0])
    g = np.array([1.0])
    f = empirical_fisher(np.array([[2.0]]), kappa=0.0, mode="dense")
    pert = perturbation_at_count(w, np.array([0]), 1)
    # -1 + 0.5*4 = 1
    assert q_direct(g, f, pert) == 1.0


def test_zero_gradients_zero_q():
    w = np.arange(1.0, 5.0)
    g = np.zeros(4)
    f = empirical_fisher(np.zeros((2, 4)), kappa=0.0, mode="factor")
    c = delta_curve_direct(w, g, f, np.arange(4), [0, 2, 4])
    assert np.array_equal(c.q, [0.0, 0.0, 0.0])


def test_direct_matches_dense_oracle():
    # independent oracle: q = g.dW + 0.5 dW^T F dW with full dense algebra
    rng = np.random.default_rng(7)
    d = 3
    w = rng.standard_normal(d)
    g = rng.standard_normal(d)
    rows = rng.standard_normal((4, d))
    f = empirical_fisher(rows, kappa=0.05, mode="factor")
    full = densify(f)
    order = prune_order(taylor_scores(w, g))
    c = delta_curve_direct(w, g, f, order, [0, 1, 2, 3])
    for i, k in enumerate([0, 1, 2, 3]):
        dw = np.zeros(d)
        dw[order[:k]] = -w[order[:k]]
        expect = g @ dw + 0.5 * dw @ full @ dw
        assert np.isclose(c.q[i], expect, rtol=1e-13, atol=1e-15)


def test_incremental_matches_direct_mid_size():
    rng = np.random.default_rng(11)
    d, n = 50, 8
    w = rng.standard_normal(d)
    g = rng.standard_normal(d)
    rows = rng.standard_normal((n, d))
    order = prune_order(taylor_scores(w, g))
    counts = np.unique(np.floor(np.arange(11) * d / 10 + 0.5).astype(int))
    for mode in ("dense", "factor"):
        f = empirical_fisher(rows, kappa=0.01, mode=mode)
        cd = delta_curve_direct(w, g, f, order, counts)
        ci = delta_curve_incremental(w, g, f, order, counts)
        scale = np.max(np.abs(cd.q)) or 1.0
        assert np.max(np.abs(cd.q - ci.q)) / scale < 1e-9


def test_delta_modes():
    w = np.array([2.0, 1.0])
    g = np.array([-1.0, 0.5])
    f = empirical_fisher(np.zeros((1, 2)), kappa=0.0, mode="dense")
    order = np.array([0, 1])
    c2 = delta_curve_direct(w, g, f, order, [0, 1, 2], delta_mode="squared")
    ca = delta_curve_direct(w, g, f, order, [0, 1, 2], delta_mode="abs")
    assert np.allclose(c2.delta, c2.q ** 2)
    assert np.allclose(ca.delta, np.abs(ca.q))
    with pytest.raises(BundleError):
        delta_curve_direct(w, g, f, order, [0, 2], delta_mode="cubed")


def test_full_prune_consistency():
    # pruning everything leaves dW = -W exactly, any grid route
    rng = np.random.default_rng(13)
    d = 20
    w = rng.standard_normal(d)
    g = rng.standard_normal(d)
    f = empirical_fisher(rng.standard_normal((5, d)), kappa=0.1)
    order = prune_order(taylor_scores(w, g))
    full = densify(f)
    expect = g @ (-w) + 0.5 * w @ full @ w
    for counts in ([0, d], [0, 7, d], list(range(d + 1))):
        c = delta_curve_incremental(w, g, f, order, counts)
        assert np.isclose(c.q[-1], expect, rtol=1e-12)


def test_curve_validation():
    kw = dict(layer_id=0, method="direct")
    with pytest.raises(BundleError, match="start at count 0"):
        DistortionCurve(counts=[1, 2], alphas=[0.5, 1.0], q=[0, 0],
                        delta=[0, 0], **kw)
    with pytest.raises(BundleError, match="strictly increasing"):
        DistortionCurve(counts=[0, 2, 2], alphas=[0, 0.5, 0.5],
                        q=[0, 0, 0], delta=[0, 0, 0], **kw)
    with pytest.raises(BundleError, match="q\\(0\\) = delta\\(0\\) = 0"):
        DistortionCurve(counts=[0, 1], alphas=[0, 1], q=[1, 2],
                        delta=[1, 4], **kw)
    with pytest.raises(BundleError, match="length mismatch"):
        DistortionCurve(counts=[0, 1], alphas=[0], q=[0, 1],
                        delta=[0, 1], **kw)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2 ** 31 - 1), st.sampled_from(["dense", "factor"]))
def test_incremental_equals_direct_property(seed, mode):
    rng = np.random.default_rng(seed)
    d = int(rng.integers(2, 40))
    n = int(rng.integers(1, 8))
    w = rng.standard_normal(d)
    g = rng.standard_normal(d)
    f = empirical_fisher(rng.standard_normal((n, d)),
                         kappa=float(rng.uniform(0, 0.2)), mode=mode)
    order = prune_order(taylor_scores(w, g))
    n_pts = int(rng.integers(2, 8))
    counts = np.unique(np.concatenate(
        [[0, d], rng.integers(0, d + 1, size=n_pts)]))
    cd = delta_curve_direct(w, g, f, order, counts)
    ci = delta_curve_incremental(w, g, f, order, counts)
    scale = max(np.max(np.abs(cd.q)), 1e-15)
    assert np.max(np.abs(cd.q - ci.q)) / scale < 1e-9


def test_cross_term_zero_weights():
    out = cross_term_diagnostic(np.zeros(10), np.ones(10),
                                np.zeros(12), np.ones(12),
                                trials=20, seed=1)
    assert out["ratio"] == 0.0


def test_cross_term_zero_grads_on_support():
    # gradients vanish everywhere, so every a_i is 0 and the ratio is 0
    out = cross_term_diagnostic(np.ones(10), np.zeros(10),
                                np.ones(12), np.zeros(12),
                                trials=20, seed=2)
    assert out["mean_cross"] == 0.0
    assert out["ratio"] == 0.0


def test_cross_term_refnet_layers_finite():
    spec = default_spec()
    params = init_params(spec, seed=3)
    model = to_model_bundle(spec, params)
    calib = synth_calibration(spec, n=8, seed=4)
    grads = build_gradient_bundle(spec, params, calib, (1.0, 1.0))
    a, b = model.layers[0], model.layers[1]
    out = cross_term_diagnostic(a.weight, grads.grads[a.layer_id].avg_grad,
                                b.weight, grads.grads[b.layer_id].avg_grad,
                                alpha=0.25, trials=100, seed=3,
                                layer_ids=(a.layer_id, b.layer_id))
    assert out["trials"] == 100
    assert np.isfinite(out["ratio"])
    assert abs(out["ratio"]) <= 1.0 + 1e-12
    assert out["layer_i"] == a.layer_id and out["layer_j"] == b.layer_id
