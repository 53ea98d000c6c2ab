"""First-order Taylor saliency and the nested masks/perturbations it induces.

The saliency of a weight is |w * g| with g the calibration-averaged gradient
of the scalarized output. Pruning at count k removes the k least salient
weights; the resulting perturbation is -w on the pruned support and 0
elsewhere, so masks at increasing k are nested by construction.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .model_ir import BundleError, PruneMask, as_f64, check_finite


@dataclass
class Perturbation:
    """Weight delta from pruning: delta = masked_weight - weight.

    support holds the sorted flat indices where delta may be nonzero;
    values are the corresponding delta entries (always -w there).
    """

    layer_id: int
    delta: np.ndarray
    support: np.ndarray

    @property
    def values(self) -> np.ndarray:
        return self.delta.ravel()[self.support]


def taylor_scores(weight, avg_grad) -> np.ndarray:
    """Elementwise |w * g|, flattened."""
    w = as_f64(weight).ravel()
    g = as_f64(avg_grad).ravel()
    if w.shape != g.shape:
        raise BundleError("weight/gradient shape mismatch")
    s = np.abs(w * g)
    check_finite(s, "taylor scores")
    return s


def prune_order(scores, weight=None) -> np.ndarray:
    """Flat indices sorted by ascending score; ties by ascending index.

    With `weight` given, exact score ties put already-zero weights first
    (then index), so re-pruning a pruned layer consumes its zeros before
    touching live weights that merely have dead gradients.
    """
    s = as_f64(scores).ravel()
    if weight is None:
        return np.argsort(s, kind="stable").astype(np.int64)
    w = as_f64(weight).ravel()
    if w.shape != s.shape:
        raise BundleError("weight/score shape mismatch")
    # lexsort is stable: full ties stay in ascending index order
    return np.lexsort((w != 0.0, s)).astype(np.int64)


def _check_count(order: np.ndarray, k: int) -> None:
    if not 0 <= k <= order.size:
        raise BundleError(f"count out of range: {k}")


def ratio_to_count(alpha: float, dim: int) -> int:
    """k = round(alpha * dim), half away from zero."""
    if not 0.0 <= alpha <= 1.0:
        raise BundleError(f"ratio out of range: {alpha}")
    return int(np.floor(alpha * dim + 0.5))


def count_grid(dim: int, k_points: int) -> np.ndarray:
    """Counts round(j*dim/k_points) for j = 0..k_points, deduplicated."""
    if k_points < 1:
        raise BundleError(f"grid needs at least one step: {k_points}")
    js = np.arange(k_points + 1, dtype=np.float64)
    counts = np.floor(js * dim / k_points + 0.5).astype(np.int64)
    return np.unique(counts)


def mask_at_count(order, k: int, shape, *, layer_id: int = 0) -> PruneMask:
    order = np.ascontiguousarray(order, dtype=np.int64)
    _check_count(order, k)
    bits = np.ones(order.size, dtype=bool)
    bits[order[:k]] = False
    return PruneMask(layer_id=layer_id, bits=bits.reshape(shape), order=order.copy())


def perturbation_at_count(weight, order, k: int, *, layer_id: int = 0) -> Perturbation:
    w = as_f64(weight)
    order = np.ascontiguousarray(order, dtype=np.int64)
    _check_count(order, k)
    support = np.sort(order[:k])
    delta = np.zeros_like(w)
    delta.ravel()[support] = -w.ravel()[support]
    return Perturbation(layer_id=layer_id, delta=delta, support=support)


def sigma_subvector(weight, order, k_prev: int, k_next: int):
    """Perturbation increment between two nested counts.

    Returns (indices, values) with indices = order[k_prev:k_next] in order
    position (not sorted) and values = -w at those indices.
    """
    w = as_f64(weight).ravel()
    order = np.ascontiguousarray(order, dtype=np.int64)
    if not 0 <= k_prev <= k_next <= order.size:
        raise BundleError(f"count order violation: {k_prev} .. {k_next}")
    idx = order[k_prev:k_next]
    return idx, -w[idx]
