import numpy as np
import pytest

from dmprune.model_ir import BundleError, ModelBundle
from dmprune.refnet import (RefNetSpec, backward_scalarized,
                            build_gradient_bundle, default_spec, finetune,
                            forward, from_model_bundle, init_params,
                            is_refnet_bundle, probe_vector, scalarize,
                            synth_calibration, to_model_bundle,
                            true_distortion)
from dmprune.refnet import _forward_cache, draw_safe_input


def test_parameter_count():
    spec = default_spec()
    assert spec.n_params() == 5912
    params = init_params(spec, seed=42)
    assert sum(w.size for w in params.values()) == 5912


def test_zero_weights_give_zero_box_and_half_conf():
    spec = default_spec()
    params = {name: np.zeros(shape) for name, shape in
              zip(spec.layer_names(), spec.weight_shapes())}
    pb, pc = forward(spec, params, np.ones(spec.in_shape))
    assert np.array_equal(pb, np.zeros((4, 7)))
    assert np.array_equal(pc, np.full((4, 3), 0.5))


def test_zero_input_same_outputs():
    spec = default_spec()
    params = init_params(spec, seed=42)
    pb, pc = forward(spec, params, np.zeros(spec.in_shape))
    assert np.array_equal(pb, np.zeros((4, 7)))
    assert np.array_equal(pc, np.full((4, 3), 0.5))


def test_scalarize_sums():
    pb = np.arange(6.0).reshape(2, 3)
    pc = np.full((2, 2), 0.5)
    assert scalarize(pb, pc, (1.0, 0.0)) == 15.0
    assert scalarize(pb, pc, (0.0, 2.0)) == 4.0
    assert scalarize(pb, pc, (1.0, 1.0)) == 17.0
    with pytest.raises(BundleError):
        scalarize(pb, pc, (-1.0, 0.0))


def test_scalarize_probe_route():
    pb = np.array([[1.0, 2.0]])
    pc = np.array([[0.25]])
    v = np.array([2.0, -1.0, 4.0])
    assert scalarize(pb, pc, probe=v) == 2 - 2 + 1
    with pytest.raises(BundleError, match="probe length"):
        scalarize(pb, pc, probe=np.ones(5))


def test_probe_vector_shape_and_determinism():
    spec = RefNetSpec(n_boxes=2, box_dim=4, n_classes=3)
    v = probe_vector(spec, seed=5)
    assert v.shape == (2 * (4 + 3),)
    assert np.array_equal(v, probe_vector(spec, seed=5))
    assert not np.array_equal(v, probe_vector(spec, seed=6))


def test_custom_spec_conf_at_zero_weights():
    spec = RefNetSpec(n_boxes=2, n_classes=3)
    params = {name: np.zeros(shape) for name, shape in
              zip(spec.layer_names(), spec.weight_shapes())}
    _, pc = forward(spec, params, np.zeros(spec.in_shape))
    # sigmoid(0) = 0.5, summed over 2*3 entries
    assert scalarize(np.zeros((2, 7)), pc, (0.0, 1.0)) == 3.0


def test_identity_activation_zero_input_trunk_grads_vanish():
    spec = RefNetSpec(activation="identity")
    params = init_params(spec, seed=0)
    grads = backward_scalarized(spec, params, np.zeros(spec.in_shape))
    # with x = 0 every patch is zero, so conv weight grads are exactly 0
    assert np.array_equal(grads["trunk.0"], np.zeros_like(params["trunk.0"]))
    assert np.array_equal(grads["trunk.1"], np.zeros_like(params["trunk.1"]))


def test_box_head_gradient_closed_form():
    spec = default_spec()
    params = init_params(spec, seed=1)
    x = np.random.default_rng(2).standard_normal(spec.in_shape)
    lam = (0.7, 0.0)
    grads = backward_scalarized(spec, params, x, lam)
    feat = _forward_cache(spec, params, x)["feat"]
    expect = 0.7 * np.outer(np.ones(spec.n_boxes * spec.box_dim), feat)
    assert np.allclose(grads["box_head"], expect, rtol=0, atol=1e-15)


def test_probe_gradient_finite_difference():
    spec = default_spec()
    params = init_params(spec, seed=3)
    x = draw_safe_input(spec, params, seed=30)
    v = probe_vector(spec, seed=9)
    grads = backward_scalarized(spec, params, x, probe=v)

    def u(p):
        return scalarize(*forward(spec, p, x), probe=v)

    rng = np.random.default_rng(10)
    for name in ("trunk.0", "box_head", "conf_head"):
        w = params[name]
        flat = rng.integers(0, w.size)
        eps = 1e-6
        for sign in (1.0, -1.0):
            p2 = {k: v2.copy() for k, v2 in params.items()}
            p2[name].reshape(-1)[flat] += sign * eps
            if sign > 0:
                up = u(p2)
            else:
                um = u(p2)
        fd = (up - um) / (2 * eps)
        an = grads[name].reshape(-1)[flat]
        assert abs(an - fd) <= 1e-6 * max(1.0, abs(fd))


def test_gradient_bundle_single_sample_avg_equals_row():
    spec = default_spec()
    params = init_params(spec, seed=4)
    calib = synth_calibration(spec, n=1, seed=5)
    gb = build_gradient_bundle(spec, params, calib)
    for lg in gb.grads.values():
        assert np.array_equal(lg.per_sample[0], lg.avg_grad.reshape(-1))


def test_gradient_bundle_duplicate_sample_invariance():
    spec = default_spec()
    params = init_params(spec, seed=4)
    one = synth_calibration(spec, n=1, seed=6)
    from dmprune.model_ir import CalibrationSet
    two = CalibrationSet(inputs=np.repeat(one.inputs, 2, axis=0), seed=6)
    g1 = build_gradient_bundle(spec, params, one)
    g2 = build_gradient_bundle(spec, params, two)
    for lid in g1.grads:
        assert np.allclose(g1.grads[lid].avg_grad, g2.grads[lid].avg_grad,
                           rtol=0, atol=0)


def test_true_distortion_zero_for_identical_params():
    spec = default_spec()
    params = init_params(spec, seed=7)
    calib = synth_calibration(spec, n=4, seed=8)
    assert true_distortion(spec, params, params, calib) == 0.0
    with pytest.raises(BundleError, match="cannot both be zero"):
        true_distortion(spec, params, params, calib, lam=(0.0, 0.0))


def test_model_bundle_roundtrip():
    spec = default_spec()
    params = init_params(spec, seed=11)
    bundle = to_model_bundle(spec, params, seed=11)
    assert is_refnet_bundle(bundle)
    spec2, params2 = from_model_bundle(bundle)
    assert spec2 == spec
    for name in params:
        assert np.array_equal(params[name], params2[name])


def test_from_model_bundle_rejects_non_refnet():
    from dmprune.model_ir import LayerRecord
    rec = LayerRecord(layer_id=0, name="w", kind="dense",
                      weight=np.ones((2, 2)), flops_per_weight=1.0,
                      prunable=True)
    plain = ModelBundle(layers=[rec], meta={})
    assert not is_refnet_bundle(plain)
    with pytest.raises(BundleError, match="does not describe a refnet"):
        from_model_bundle(plain)


def test_synth_calibration_seeding():
    spec = default_spec()
    a = synth_calibration(spec, n=3, seed=1)
    b = synth_calibration(spec, n=3, seed=1)
    c = synth_calibration(spec, n=3, seed=2)
    assert np.array_equal(a.inputs, b.inputs)
    assert not np.array_equal(a.inputs, c.inputs)
    assert a.inputs.shape == (3, 3, 16, 16)
    with pytest.raises(BundleError):
        synth_calibration(spec, n=0, seed=1)


def finetune_setup(prune_frac=0.0, seed=20):
    spec = default_spec()
    dense = init_params(spec, seed=seed)
    rng = np.random.default_rng(seed + 1)
    masks = {}
    params = {}
    for name, w in dense.items():
        bits = np.ones(w.shape, dtype=bool)
        if prune_frac > 0:
            k = int(np.floor(prune_frac * w.size + 0.5))
            idx = rng.choice(w.size, size=k, replace=False)
            bits.reshape(-1)[idx] = False
        masks[name] = bits
        params[name] = w * bits
    inputs = synth_calibration(spec, n=8, seed=seed + 2).inputs
    return spec, dense, params, masks, inputs


def test_finetune_zero_epochs_only_masks():
    spec, dense, params, masks, inputs = finetune_setup(0.3)
    out = finetune(spec, params, masks, dense, inputs, epochs=0, lr=0.1)
    for name in params:
        assert np.array_equal(out[name], params[name])


def test_finetune_tiny_lr_leaves_params_within_float_eps():
    spec, dense, params, masks, inputs = finetune_setup(0.0, seed=21)
    start = init_params(spec, seed=22)
    out = finetune(spec, start, masks, dense, inputs, epochs=3, lr=1e-30)
    for name in start:
        assert np.max(np.abs(out[name] - start[name])) < 1e-12


def test_finetune_reduces_distill_loss():
    spec, dense, params, masks, inputs = finetune_setup(0.3, seed=23)
    hist = []
    finetune(spec, params, masks, dense, inputs, epochs=50, lr=0.1,
             history=hist)
    assert hist[-1] < hist[0]
    assert all(b <= a + 1e-300 for a, b in zip(hist, hist[1:]))


def test_finetune_respects_masks():
    spec, dense, params, masks, inputs = finetune_setup(0.4, seed=24)
    out = finetune(spec, params, masks, dense, inputs, epochs=20, lr=0.1)
    for name in out:
        assert np.all(out[name][~masks[name]] == 0.0)


def test_finetune_divergence_raises():
    spec, dense, params, masks, inputs = finetune_setup(0.3, seed=25)
    with pytest.raises(RuntimeError, match="diverged"):
        finetune(spec, params, masks, dense, inputs, epochs=5, lr=1e6)


def test_finetune_argument_validation():
    spec, dense, params, masks, inputs = finetune_setup(0.0, seed=26)
    with pytest.raises(BundleError):
        finetune(spec, params, masks, dense, inputs, epochs=-1, lr=0.1)
    with pytest.raises(BundleError):
        finetune(spec, params, masks, dense, inputs, epochs=1, lr=0.0)
