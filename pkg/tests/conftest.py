import numpy as np
import pytest

from dmprune import refnet as rn
from dmprune.model_ir import (GradientBundle, LayerGrads, LayerRecord,
                              ModelBundle)


@pytest.fixture(scope="session", autouse=True)
def _artifacts_to_tmp(tmp_path_factory):
    # keep check byproducts (fidelity table) out of the working tree
    import os
    if "DMPRUNE_ARTIFACTS_DIR" not in os.environ:
        os.environ["DMPRUNE_ARTIFACTS_DIR"] = str(
            tmp_path_factory.mktemp("artifacts"))


@pytest.fixture(scope="session")
def spec():
    return rn.default_spec()


@pytest.fixture(scope="session")
def demo(spec):
    """Seeded demo instance: (params, calib, model, grads), seed 42."""
    params = rn.init_params(spec, 42)
    calib = rn.synth_calibration(spec, 16, 43)
    model = rn.to_model_bundle(spec, params, seed=42)
    grads = rn.build_gradient_bundle(spec, params, calib)
    return params, calib, model, grads


@pytest.fixture()
def tiny_bundle():
    """(model, grads): two layers with easy flops arithmetic, c=(4,2), D=(10,20)."""
    rng = np.random.default_rng(0)
    layers = [
        LayerRecord(layer_id=0, name="a", kind="dense",
                    weight=rng.standard_normal((2, 5)), flops_per_weight=4.0,
                    prunable=True),
        LayerRecord(layer_id=1, name="b", kind="dense",
                    weight=rng.standard_normal((4, 5)), flops_per_weight=2.0,
                    prunable=True),
    ]
    model = ModelBundle(layers=layers, meta={})
    gmap = {}
    for rec in layers:
        rows = rng.standard_normal((4, rec.dim))
        gmap[rec.layer_id] = LayerGrads(
            avg_grad=rows.mean(axis=0).reshape(rec.weight.shape),
            per_sample=rows)
    grads = GradientBundle(grads=gmap, lambda_used=(1.0, 1.0), n_samples=4)
    return model, grads
