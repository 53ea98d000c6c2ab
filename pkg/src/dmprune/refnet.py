"""Miniature two-headed detection network used as the built-in test model.

Architecture: a ReLU conv trunk (stride 2, zero-padding 1, hard-coded) over
a (3, 16, 16) input, flattened into a linear box-regression head and a
sigmoid confidence head. The default configuration has 5912 weights. The
net is bias-free: layer outputs are pure weight transforms, so a model
bundle holding the weight tensors reconstructs the net exactly.

Forward, the scalarization u = lambda_b * sum(p_b) + lambda_c * sum(p_c),
and its analytic weight gradients are all hand-coded numpy; the gradients
are exact for the piecewise-linear trunk (ReLU subgradient 0 at 0) and the
smooth heads, and drive both the calibration gradient bundles and the
self-distillation finetune loop.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np
from scipy.special import expit

from .model_ir import (BundleError, CalibrationSet, GradientBundle,
                       LayerGrads, LayerRecord, ModelBundle, as_f64,
                       check_finite, dump_json)

STRIDE = 2
PAD = 1
ACTIVATIONS = ("relu", "identity")

__all__ = [
    "RefNetSpec", "CalibrationSet", "default_spec", "init_params", "forward",
    "scalarize", "backward_scalarized", "vjp", "build_gradient_bundle",
    "to_model_bundle", "from_model_bundle", "is_refnet_bundle",
    "true_distortion", "finetune", "distill_loss", "synth_calibration",
    "draw_safe_input",
]


@dataclass
class RefNetSpec:
    """Shapes and activation of the reference net.

    trunk entries are conv weight shapes (out_ch, in_ch, kh, kw); the two
    heads are dense layers from the flattened trunk output to
    n_boxes*box_dim (box) and n_boxes*n_classes (confidence, sigmoid).
    """

    in_shape: tuple = (3, 16, 16)
    trunk: tuple = ((8, 3, 3, 3), (8, 8, 3, 3))
    n_boxes: int = 4
    box_dim: int = 7
    n_classes: int = 3
    activation: str = "relu"

    def __post_init__(self):
        self.in_shape = tuple(int(v) for v in self.in_shape)
        self.trunk = tuple(tuple(int(v) for v in s) for s in self.trunk)
        if self.activation not in ACTIVATIONS:
            raise BundleError(f"unknown activation: {self.activation!r}")
        if len(self.trunk) < 2:
            raise BundleError("trunk needs at least two conv layers")
        self.stage_shapes()  # raises if shapes do not compose

    def stage_shapes(self) -> list[tuple]:
        """Feature-map shape after each trunk conv."""
        c, h, w = self.in_shape
        shapes = []
        for (o, ci, kh, kw) in self.trunk:
            if ci != c:
                raise BundleError(f"trunk channels do not compose: {ci} != {c}")
            h = (h + 2 * PAD - kh) // STRIDE + 1
            w = (w + 2 * PAD - kw) // STRIDE + 1
            if h < 1 or w < 1:
                raise BundleError("trunk shrinks the feature map to nothing")
            c = o
            shapes.append((c, h, w))
        return shapes

    @property
    def feat_dim(self) -> int:
        c, h, w = self.stage_shapes()[-1]
        return c * h * w

    def layer_names(self) -> list[str]:
        return [f"trunk.{i}" for i in range(len(self.trunk))] + [
            "box_head", "conf_head"]

    def weight_shapes(self) -> list[tuple]:
        return list(self.trunk) + [
            (self.n_boxes * self.box_dim, self.feat_dim),
            (self.n_boxes * self.n_classes, self.feat_dim),
        ]

    def layer_kinds(self) -> list[str]:
        return ["conv2d"] * len(self.trunk) + ["dense", "dense"]

    def flops_per_weight(self) -> list[float]:
        vals = [2.0 * h * w for (_, h, w) in self.stage_shapes()]
        return vals + [2.0, 2.0]

    def n_params(self) -> int:
        return sum(int(np.prod(s)) for s in self.weight_shapes())

    def to_dict(self) -> dict:
        return {
            "in_shape": list(self.in_shape),
            "trunk": [list(s) for s in self.trunk],
            "n_boxes": self.n_boxes,
            "box_dim": self.box_dim,
            "n_classes": self.n_classes,
            "activation": self.activation,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "RefNetSpec":
        return cls(in_shape=tuple(d["in_shape"]),
                   trunk=tuple(tuple(s) for s in d["trunk"]),
                   n_boxes=int(d["n_boxes"]), box_dim=int(d["box_dim"]),
                   n_classes=int(d["n_classes"]),
                   activation=str(d["activation"]))


def default_spec() -> RefNetSpec:
    return RefNetSpec()


def init_params(spec: RefNetSpec, seed: int = 42) -> dict[str, np.ndarray]:
    """Seeded gaussian init scaled by 1/sqrt(fan_in). Bias-free."""
    rng = np.random.default_rng(seed)
    params = {}
    for name, shape in zip(spec.layer_names(), spec.weight_shapes()):
        fan_in = int(np.prod(shape[1:]))
        params[name] = rng.standard_normal(shape) / np.sqrt(fan_in)
    return params


# --- conv primitives ----------------------------------------------------


def _conv_forward(x, W):
    c, h, w = x.shape
    o, ci, kh, kw = W.shape
    if ci != c:
        raise BundleError("conv input channels mismatch")
    ho = (h + 2 * PAD - kh) // STRIDE + 1
    wo = (w + 2 * PAD - kw) // STRIDE + 1
    xp = np.pad(x, ((0, 0), (PAD, PAD), (PAD, PAD)))
    cols = np.empty((c, kh, kw, ho, wo))
    for u in range(kh):
        for v in range(kw):
            cols[:, u, v] = xp[:, u:u + STRIDE * (ho - 1) + 1:STRIDE,
                               v:v + STRIDE * (wo - 1) + 1:STRIDE]
    cols = cols.reshape(c * kh * kw, ho * wo)
    z = (W.reshape(o, -1) @ cols).reshape(o, ho, wo)
    return z, cols


def _conv_grad_input(gz, W, x_shape):
    c, h, w = x_shape
    o, ci, kh, kw = W.shape
    ho, wo = gz.shape[1:]
    gcols = (W.reshape(o, -1).T @ gz.reshape(o, -1)).reshape(ci, kh, kw, ho, wo)
    gxp = np.zeros((c, h + 2 * PAD, w + 2 * PAD))
    for u in range(kh):
        for v in range(kw):
            gxp[:, u:u + STRIDE * (ho - 1) + 1:STRIDE,
                v:v + STRIDE * (wo - 1) + 1:STRIDE] += gcols[:, u, v]
    return gxp[:, PAD:PAD + h, PAD:PAD + w]


def _forward_cache(spec: RefNetSpec, params, x):
    x = as_f64(x)
    if x.shape != spec.in_shape:
        raise BundleError(f"input shape mismatch: {x.shape}")
    a = x
    convs = []
    for i in range(len(spec.trunk)):
        W = params[f"trunk.{i}"]
        z, cols = _conv_forward(a, W)
        if spec.activation == "relu":
            act = np.where(z > 0.0, z, 0.0)
        else:
            act = z
        convs.append({"in_shape": a.shape, "z": z, "cols": cols})
        a = act
    f = a.reshape(-1)
    pb = (params["box_head"] @ f).reshape(spec.n_boxes, spec.box_dim)
    logits = params["conf_head"] @ f
    pc = expit(logits).reshape(spec.n_boxes, spec.n_classes)
    return {"convs": convs, "feat": f, "feat_shape": a.shape,
            "pb": pb, "pc": pc}


def forward(spec: RefNetSpec, params, x):
    """Single-sample forward pass. Returns (p_b, p_c)."""
    cache = _forward_cache(spec, params, x)
    return cache["pb"], cache["pc"]


def scalarize(p_b, p_c, lam=(1.0, 1.0), probe=None) -> float:
    if probe is not None:
        v = as_f64(probe).reshape(-1)
        y = np.concatenate([as_f64(p_b).reshape(-1), as_f64(p_c).reshape(-1)])
        if v.shape != y.shape:
            raise BundleError("probe length does not match output size")
        return float(v @ y)
    lb, lc = float(lam[0]), float(lam[1])
    if lb < 0.0 or lc < 0.0:
        raise BundleError("lambda weights must be nonnegative")
    return float(lb * np.sum(p_b) + lc * np.sum(p_c))


def probe_vector(spec: RefNetSpec, seed: int):
    """Fixed Gaussian probe over the concatenated (p_b, p_c) outputs.

    Alternative scalarization u = v.y for sensitivity studies; v is drawn
    once from the stated seed and reused for every sample.
    """
    rng = np.random.default_rng(seed)
    return rng.standard_normal(spec.n_boxes * (spec.box_dim + spec.n_classes))


def vjp(spec: RefNetSpec, params, x, g_pb, g_pc):
    """Weight gradients for upstream cotangents on (p_b, p_c).

    g_pc applies to the post-sigmoid confidences; the sigmoid jacobian is
    folded in here.
    """
    cache = _forward_cache(spec, params, x)
    f = cache["feat"]
    pc_flat = cache["pc"].reshape(-1)
    g_pb = as_f64(g_pb).reshape(-1)
    glogits = as_f64(g_pc).reshape(-1) * pc_flat * (1.0 - pc_flat)
    grads = {
        "box_head": np.outer(g_pb, f),
        "conf_head": np.outer(glogits, f),
    }
    gf = params["box_head"].T @ g_pb + params["conf_head"].T @ glogits
    ga = gf.reshape(cache["feat_shape"])
    for i in reversed(range(len(spec.trunk))):
        c = cache["convs"][i]
        if spec.activation == "relu":
            gz = np.where(c["z"] > 0.0, ga, 0.0)
        else:
            gz = ga
        W = params[f"trunk.{i}"]
        o = W.shape[0]
        grads[f"trunk.{i}"] = (gz.reshape(o, -1) @ c["cols"].T).reshape(W.shape)
        if i > 0:
            ga = _conv_grad_input(gz, W, c["in_shape"])
    return grads


def backward_scalarized(spec: RefNetSpec, params, x, lam=(1.0, 1.0),
                        probe=None):
    """Exact d u / d W for u = lambda_b*sum(p_b) + lambda_c*sum(p_c).

    With a probe vector the objective is u = probe . concat(p_b, p_c)
    instead and lam is ignored.
    """
    nb = spec.n_boxes * spec.box_dim
    if probe is not None:
        v = as_f64(probe).reshape(-1)
        if v.shape[0] != nb + spec.n_boxes * spec.n_classes:
            raise BundleError("probe length does not match output size")
        return vjp(spec, params, x, v[:nb], v[nb:])
    lb, lc = float(lam[0]), float(lam[1])
    if lb < 0.0 or lc < 0.0:
        raise BundleError("lambda weights must be nonnegative")
    g_pb = np.full(nb, lb)
    g_pc = np.full(spec.n_boxes * spec.n_classes, lc)
    return vjp(spec, params, x, g_pb, g_pc)


def synth_calibration(spec: RefNetSpec, n: int, seed: int) -> CalibrationSet:
    """Standard-normal calibration inputs, shape (n, *in_shape)."""
    if n < 1:
        raise BundleError("calibration set needs at least one sample")
    rng = np.random.default_rng(seed)
    return CalibrationSet(inputs=rng.standard_normal((n,) + spec.in_shape),
                          seed=seed)


def build_gradient_bundle(spec: RefNetSpec, params, calib: CalibrationSet,
                          lam=(1.0, 1.0), probe=None) -> GradientBundle:
    """Per-sample scalarized gradients plus their average, per layer."""
    names = spec.layer_names()
    rows = {name: [] for name in names}
    for i in range(calib.n):
        grads = backward_scalarized(spec, params, calib.inputs[i], lam, probe)
        for name in names:
            rows[name].append(grads[name].reshape(-1))
    out = {}
    for lid, name in enumerate(names):
        mat = np.stack(rows[name])
        avg = mat.mean(axis=0).reshape(params[name].shape)
        out[lid] = LayerGrads(avg_grad=avg, per_sample=mat)
    return GradientBundle(grads=out, lambda_used=(float(lam[0]), float(lam[1])),
                          n_samples=calib.n)


def to_model_bundle(spec: RefNetSpec, params, *, seed: int | None = None,
                    extra_meta: dict | None = None) -> ModelBundle:
    names = spec.layer_names()
    kinds = spec.layer_kinds()
    flops = spec.flops_per_weight()
    layers = []
    for lid, name in enumerate(names):
        layers.append(LayerRecord(layer_id=lid, name=name, kind=kinds[lid],
                                  weight=params[name],
                                  flops_per_weight=flops[lid], prunable=True))
    meta = {"model": "refnet",
            "refnet_spec": dump_json(spec.to_dict()).strip()}
    if seed is not None:
        meta["seed"] = str(int(seed))
    if extra_meta:
        meta.update(extra_meta)
    return ModelBundle(layers=layers, meta=meta)


def is_refnet_bundle(bundle: ModelBundle) -> bool:
    return bundle.meta.get("model") == "refnet" and "refnet_spec" in bundle.meta


def from_model_bundle(bundle: ModelBundle):
    """Rebuild (spec, params) from a refnet model bundle."""
    if not is_refnet_bundle(bundle):
        raise BundleError("bundle does not describe a refnet")
    spec = RefNetSpec.from_dict(json.loads(bundle.meta["refnet_spec"]))
    params = {}
    by_name = {rec.name: rec for rec in bundle.layers}
    for name, shape in zip(spec.layer_names(), spec.weight_shapes()):
        if name not in by_name:
            raise BundleError(f"refnet bundle missing layer: {name}")
        w = by_name[name].weight
        if w.shape != tuple(shape):
            raise BundleError(f"refnet layer shape mismatch: {name}")
        params[name] = w.copy()
    return spec, params


def true_distortion(spec: RefNetSpec, dense_params, pruned_params,
                    calib: CalibrationSet, lam=(1.0, 1.0)) -> float:
    """Mean squared scalarized output gap over the calibration set."""
    if float(lam[0]) == 0.0 and float(lam[1]) == 0.0:
        raise BundleError("lambda weights cannot both be zero")
    total = 0.0
    for i in range(calib.n):
        x = calib.inputs[i]
        ub = scalarize(*forward(spec, dense_params, x), lam)
        up = scalarize(*forward(spec, pruned_params, x), lam)
        total += (ub - up) ** 2
    return total / calib.n


def distill_loss(spec: RefNetSpec, params, targets, inputs) -> float:
    """Mean over samples of the squared output gap against fixed targets."""
    total = 0.0
    for i in range(inputs.shape[0]):
        pb, pc = forward(spec, params, inputs[i])
        tb, tc = targets[i]
        total += float(np.sum((pb - tb) ** 2) + np.sum((pc - tc) ** 2))
    return total / inputs.shape[0]


def _apply_masks(params, masks):
    out = {}
    for name, w in params.items():
        if masks and name in masks and masks[name] is not None:
            out[name] = w * masks[name]
        else:
            out[name] = w.copy()
    return out


def finetune(spec: RefNetSpec, params, masks, dense_params, train_inputs,
             epochs: int, lr: float, *, history: list | None = None):
    """Self-distillation toward the dense net's outputs, masks held fixed.

    Plain full-batch gradient descent on the mean squared output gap. A
    step that increases the loss is rejected and the step size halved;
    recorded losses are therefore nonincreasing. A candidate loss above
    10x the initial loss raises. Pruned positions are re-zeroed after
    every accepted step. masks maps layer name -> bool array (missing or
    None = unmasked).
    """
    if epochs < 0:
        raise BundleError(f"negative epoch count: {epochs}")
    if not lr > 0.0:
        raise BundleError(f"step size must be positive: {lr}")
    inputs = as_f64(train_inputs)
    if inputs.ndim == len(spec.in_shape):
        inputs = inputs[None]
    check_finite(inputs, "finetune inputs")
    targets = [forward(spec, dense_params, inputs[i])
               for i in range(inputs.shape[0])]
    cur = _apply_masks(params, masks)
    n = inputs.shape[0]
    loss = distill_loss(spec, cur, targets, inputs)
    initial = loss
    lr0 = lr
    if history is not None:
        history.append(loss)
    for _ in range(epochs):
        grads = {name: np.zeros_like(w) for name, w in cur.items()}
        for i in range(n):
            pb, pc = forward(spec, cur, inputs[i])
            tb, tc = targets[i]
            g = vjp(spec, cur, inputs[i], 2.0 * (pb - tb) / n,
                    2.0 * (pc - tc) / n)
            for name in grads:
                grads[name] += g[name]
        stepped = {name: cur[name] - lr * grads[name] for name in cur}
        stepped = _apply_masks(stepped, masks)
        new_loss = distill_loss(spec, stepped, targets, inputs)
        if new_loss > 10.0 * initial + 1e-300:
            raise RuntimeError(
                f"finetune diverged: loss {new_loss:g} exceeds 10x initial {initial:g}")
        if new_loss > loss:
            lr *= 0.5
            if lr < 1e-12 * lr0:
                break
        else:
            cur = stepped
            loss = new_loss
        if history is not None:
            history.append(loss)
    return cur


def draw_safe_input(spec: RefNetSpec, params, seed: int,
                    margin: float = 1e-4, max_tries: int = 100):
    """Random input whose conv pre-activations all sit >= margin from 0.

    Finite-difference probes of the piecewise-linear trunk are only valid
    away from ReLU kinks; redraw until the margin holds.
    """
    for attempt in range(max_tries):
        rng = np.random.default_rng(seed + attempt)
        x = rng.standard_normal(spec.in_shape)
        if spec.activation != "relu":
            return x
        cache = _forward_cache(spec, params, x)
        gap = min(float(np.min(np.abs(c["z"]))) for c in cache["convs"])
        if gap >= margin:
            return x
    raise RuntimeError(f"no kink-free input found in {max_tries} draws")
