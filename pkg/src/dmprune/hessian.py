"""Empirical Fisher curvature proxy and sparse quadratic forms against it.

F = kappa*I + (1/N) * sum_n g_n g_n^T, built from the per-sample gradient
rows of the scalarized output. Dense mode materializes the D x D matrix
(capped at D <= 4096); factor mode keeps only the N x D row matrix and
evaluates products lazily, which is what large layers use. Both modes are
built once per layer and reused across every pruning ratio.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .model_ir import BundleError, as_f64, check_finite

DENSE_CAP = 4096


@dataclass
class FisherMatrix:
    layer_id: int
    dim: int
    kappa: float
    mode: str                      # "dense" | "factor"
    n_samples: int
    dense: np.ndarray | None = None
    factors: np.ndarray | None = None   # N x D gradient rows


def auto_kappa(per_sample_grads) -> float:
    """Default dampening: 1e-6 * mean(diag(G^T G / N)) = 1e-6 * mean(G**2)."""
    g = as_f64(per_sample_grads)
    if g.size == 0:
        return 0.0
    return 1e-6 * float(np.mean(g * g))


def empirical_fisher(per_sample_grads, kappa: float, mode: str = "factor",
                     *, layer_id: int = 0, dense_cap: int = DENSE_CAP) -> FisherMatrix:
    g = as_f64(per_sample_grads)
    if g.ndim != 2 or g.shape[0] < 1:
        raise BundleError("per-sample gradients must be an N x D matrix")
    check_finite(g, "per-sample gradients")
    if not kappa >= 0.0:
        raise BundleError(f"negative dampening: {kappa}")
    n, d = g.shape
    if mode == "dense":
        if d > dense_cap:
            raise BundleError(
                f"dimension {d} exceeds dense-mode cap {dense_cap}")
        dense = g.T @ g / n
        dense[np.diag_indices(d)] += kappa
        return FisherMatrix(layer_id=layer_id, dim=d, kappa=float(kappa),
                            mode="dense", n_samples=n, dense=dense)
    if mode == "factor":
        return FisherMatrix(layer_id=layer_id, dim=d, kappa=float(kappa),
                            mode="factor", n_samples=n, factors=g.copy())
    raise BundleError(f"unknown fisher mode: {mode!r}")


def _check_sparse(fisher: FisherMatrix, idx, val):
    idx = np.ascontiguousarray(idx, dtype=np.int64)
    val = as_f64(val).ravel()
    if idx.shape != val.shape:
        raise BundleError("sparse vector index/value length mismatch")
    if idx.size and (idx.min() < 0 or idx.max() >= fisher.dim):
        raise BundleError("sparse vector index out of range")
    return idx, val


def quad_form(fisher: FisherMatrix, idx, val) -> float:
    """v^T F v for a sparse v given as (flat indices, values)."""
    idx, val = _check_sparse(fisher, idx, val)
    if idx.size == 0:
        return 0.0
    if fisher.mode == "dense":
        sub = fisher.dense[np.ix_(idx, idx)]
        return float(val @ sub @ val)
    t = fisher.factors[:, idx] @ val
    return float(fisher.kappa * (val @ val) + (t @ t) / fisher.n_samples)


def cross_form(fisher: FisherMatrix, idx_u, val_u, idx_v, val_v) -> float:
    """u^T F v for sparse u, v. Symmetric in its arguments."""
    idx_u, val_u = _check_sparse(fisher, idx_u, val_u)
    idx_v, val_v = _check_sparse(fisher, idx_v, val_v)
    if idx_u.size == 0 or idx_v.size == 0:
        return 0.0
    if fisher.mode == "dense":
        return float(val_u @ fisher.dense[np.ix_(idx_u, idx_v)] @ val_v)
    tu = fisher.factors[:, idx_u] @ val_u
    tv = fisher.factors[:, idx_v] @ val_v
    common, iu, iv = np.intersect1d(idx_u, idx_v, return_indices=True)
    overlap = float(val_u[iu] @ val_v[iv]) if common.size else 0.0
    return float(fisher.kappa * overlap + (tu @ tv) / fisher.n_samples)


def densify(fisher: FisherMatrix) -> np.ndarray:
    """Materialize F as a dense matrix regardless of mode (test helper)."""
    if fisher.mode == "dense":
        return fisher.dense.copy()
    g = fisher.factors
    dense = g.T @ g / fisher.n_samples
    dense[np.diag_indices(fisher.dim)] += fisher.kappa
    return dense
