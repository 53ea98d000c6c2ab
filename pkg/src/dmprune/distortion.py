"""Per-layer detection-distortion curves from a second-order expansion.

For the perturbation dW induced by pruning the first k weights in saliency
order, the scalarized-output change is modeled as

    q(k) = g_bar . dW + 0.5 * dW^T F dW

and the curve entry is delta(k) = q(k)**2 ("squared" mode, the default) or
|q(k)| ("abs" mode), with delta(0) = 0 always. Because masks are nested,
consecutive grid points differ by a small subvector sigma, and q can be
carried forward with three terms touching only sigma's support:

    q(k) = q(k-1) + g_bar.sigma + 0.5*sigma^T F sigma + dW(k-1)^T F sigma

which is algebraically identical to the direct form (F symmetric). The
incremental path is what the pipeline uses; the direct path exists as a
cross-check and both must agree to 1e-9 relative.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .hessian import FisherMatrix, quad_form
from .model_ir import BundleError, as_f64
from .scoring import perturbation_at_count

DELTA_MODES = ("squared", "abs")


@dataclass
class DistortionCurve:
    layer_id: int
    counts: np.ndarray      # ascending, counts[0] == 0
    alphas: np.ndarray      # counts / D
    q: np.ndarray
    delta: np.ndarray       # delta[0] == 0
    method: str             # "direct" | "incremental"

    def __post_init__(self):
        self.counts = np.ascontiguousarray(self.counts, dtype=np.int64)
        self.alphas = as_f64(self.alphas)
        self.q = as_f64(self.q)
        self.delta = as_f64(self.delta)
        self.validate()

    def validate(self) -> None:
        n = self.counts.size
        if not (self.alphas.size == self.q.size == self.delta.size == n):
            raise BundleError("curve arrays length mismatch")
        if n == 0 or self.counts[0] != 0:
            raise BundleError("curve must start at count 0")
        if np.any(np.diff(self.counts) <= 0):
            raise BundleError("curve counts must be strictly increasing")
        if self.delta[0] != 0.0 or self.q[0] != 0.0:
            raise BundleError("curve must have q(0) = delta(0) = 0")


def _apply_mode(q: np.ndarray, delta_mode: str) -> np.ndarray:
    if delta_mode == "squared":
        return q * q
    if delta_mode == "abs":
        return np.abs(q)
    raise BundleError(f"unknown delta mode: {delta_mode!r}")


def _prep(weight, avg_grad, order, counts):
    w = as_f64(weight).ravel()
    g = as_f64(avg_grad).ravel()
    if w.shape != g.shape:
        raise BundleError("weight/gradient shape mismatch")
    order = np.ascontiguousarray(order, dtype=np.int64)
    counts = np.ascontiguousarray(counts, dtype=np.int64)
    if counts[0] != 0 or np.any(np.diff(counts) <= 0) or counts[-1] > w.size:
        raise BundleError("counts must be ascending from 0 and at most D")
    return w, g, order, counts


def q_direct(avg_grad, fisher: FisherMatrix, pert) -> float:
    """g_bar . dW + 0.5 * dW^T F dW evaluated on the perturbation support."""
    g = as_f64(avg_grad).ravel()
    idx = pert.support
    val = pert.values
    return float(g[idx] @ val + 0.5 * quad_form(fisher, idx, val))


def delta_curve_direct(weight, avg_grad, fisher: FisherMatrix, order, counts,
                       *, delta_mode: str = "squared",
                       layer_id: int = 0) -> DistortionCurve:
    """Recompute q from scratch at every grid count."""
    w, g, order, counts = _prep(weight, avg_grad, order, counts)
    qs = np.zeros(counts.size)
    for i, k in enumerate(counts):
        if k == 0:
            continue
        pert = perturbation_at_count(w, order, int(k), layer_id=layer_id)
        qs[i] = q_direct(g, fisher, pert)
    return DistortionCurve(layer_id=layer_id, counts=counts,
                           alphas=counts / w.size, q=qs,
                           delta=_apply_mode(qs, delta_mode), method="direct")


def delta_curve_incremental(weight, avg_grad, fisher: FisherMatrix, order,
                            counts, *, delta_mode: str = "squared",
                            layer_id: int = 0) -> DistortionCurve:
    """Carry q across the nested grid, touching only each step's subvector.

    Factor mode keeps the running per-sample dot products r_n = g_n . dW,
    so a step of width d costs O(d*N). Dense mode uses submatrix products,
    O(d * (d + k_prev)) per step.
    """
    w, g, order, counts = _prep(weight, avg_grad, order, counts)
    qs = np.zeros(counts.size)
    q = 0.0
    if fisher.mode == "factor":
        G = fisher.factors
        n = fisher.n_samples
        r = np.zeros(n)
        for i in range(1, counts.size):
            k_prev, k_next = int(counts[i - 1]), int(counts[i])
            idx = order[k_prev:k_next]
            sig = -w[idx]
            t = G[:, idx] @ sig
            term1 = g[idx] @ sig
            term2 = 0.5 * (fisher.kappa * (sig @ sig) + (t @ t) / n)
            term3 = (r @ t) / n     # kappa part vanishes: supports disjoint
            q += term1 + term2 + term3
            qs[i] = q
            r += t
    else:
        H = fisher.dense
        prev_idx = np.empty(0, dtype=np.int64)
        prev_val = np.empty(0)
        for i in range(1, counts.size):
            k_prev, k_next = int(counts[i - 1]), int(counts[i])
            idx = order[k_prev:k_next]
            sig = -w[idx]
            term1 = g[idx] @ sig
            term2 = 0.5 * float(sig @ H[np.ix_(idx, idx)] @ sig)
            if prev_idx.size:
                term3 = float(prev_val @ H[np.ix_(prev_idx, idx)] @ sig)
            else:
                term3 = 0.0
            q += term1 + term2 + term3
            qs[i] = q
            prev_idx = np.concatenate([prev_idx, idx])
            prev_val = np.concatenate([prev_val, sig])
    return DistortionCurve(layer_id=layer_id, counts=counts,
                           alphas=counts / w.size, q=qs,
                           delta=_apply_mode(qs, delta_mode),
                           method="incremental")


def curve_rows(curve: DistortionCurve):
    """(layer_id, k, alpha, q, delta) rows for CSV export."""
    for i in range(curve.counts.size):
        yield (curve.layer_id, int(curve.counts[i]), float(curve.alphas[i]),
               float(curve.q[i]), float(curve.delta[i]))


def cross_term_diagnostic(weight_i, avg_grad_i, weight_j, avg_grad_j, *,
                          alpha: float = 0.25, trials: int = 100,
                          seed: int = 0, layer_ids=(0, 1)) -> dict:
    """Empirical check that cross-layer first-order terms average out.

    Draws `trials` independent uniform random masks at ratio alpha in each
    layer, computes a = g_bar . dW per layer, and reports
    mean(a_i * a_j) / sqrt(mean(a_i^2) * mean(a_j^2)). Near-zero ratios
    support treating layer distortions as additive. Diagnostic only; no
    thresholds are enforced.
    """
    if not 0.0 <= alpha <= 1.0:
        raise BundleError(f"ratio out of range: {alpha}")
    wi, gi = as_f64(weight_i).ravel(), as_f64(avg_grad_i).ravel()
    wj, gj = as_f64(weight_j).ravel(), as_f64(avg_grad_j).ravel()
    ki = int(np.floor(alpha * wi.size + 0.5))
    kj = int(np.floor(alpha * wj.size + 0.5))
    rng = np.random.default_rng(seed)
    ai = np.zeros(trials)
    aj = np.zeros(trials)
    for t in range(trials):
        pi = rng.choice(wi.size, size=ki, replace=False)
        pj = rng.choice(wj.size, size=kj, replace=False)
        ai[t] = -gi[pi] @ wi[pi]
        aj[t] = -gj[pj] @ wj[pj]
    mean_cross = float(np.mean(ai * aj))
    norm_i = float(np.mean(ai * ai))
    norm_j = float(np.mean(aj * aj))
    denom = float(np.sqrt(norm_i * norm_j))
    ratio = mean_cross / denom if denom > 0.0 else 0.0
    return {
        "layer_i": int(layer_ids[0]),
        "layer_j": int(layer_ids[1]),
        "alpha": float(alpha),
        "trials": int(trials),
        "seed": int(seed),
        "mean_cross": mean_cross,
        "norm_i": norm_i,
        "norm_j": norm_j,
        "ratio": float(ratio),
    }
