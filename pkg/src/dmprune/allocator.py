"""Globally optimal layerwise sparsity allocation over distortion curves.

Given per-layer curves delta_i(k) on nested count grids, pick one grid
point per layer minimizing total predicted distortion subject to a budget:

  * prune-count mode: sum_i k_i = T exactly (dynamic program over counts,
    g_i[j] = min_k g_{i-1}[j-k] + delta_i(k));
  * FLOPs-ratio mode: kept FLOPs <= R * dense FLOPs, run as a knapsack over
    integer units u_i(k) = round(k * c_i / quantum). The reported ratio is
    exact (unquantized); optimality is over the quantized grid and the
    worst-case budget overshoot is quantum * l / total_flops.

Ties during the min-scan break toward the smaller k at the current layer,
so the backtracked allocation is the lexicographic minimum of
(total_delta, total_units, k_last, ..., k_first) among optima.
brute_force_allocate enumerates the same search space with the same
feasibility rule and tie-break, as an independent oracle.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .distortion import DistortionCurve
from .model_ir import BundleError

MAX_BUDGET_UNITS = 5_000_000
BRUTE_FORCE_CAP = 10_000_000


@dataclass
class AllocEntry:
    layer_id: int
    name: str
    dim: int
    count: int
    alpha: float
    delta: float


@dataclass
class AllocationResult:
    budget_mode: str            # "prune_count" | "flops_ratio"
    budget_spec: float
    quantum: float | None
    entries: list[AllocEntry]
    total_delta: float
    achieved_flops_ratio: float
    traceback: list | None = field(default=None, repr=False)

    def counts(self) -> list[int]:
        return [e.count for e in self.entries]

    def to_dict(self) -> dict:
        out = {
            "budget_mode": self.budget_mode,
            "budget_spec": float(self.budget_spec),
        }
        if self.quantum is not None:
            out["quantum"] = float(self.quantum)
        out["layers"] = [
            {"layer_id": e.layer_id, "name": e.name, "D": e.dim, "k": e.count,
             "alpha": float(e.alpha), "delta": float(e.delta)}
            for e in self.entries
        ]
        out["total_delta"] = float(self.total_delta)
        out["achieved_flops_ratio"] = float(self.achieved_flops_ratio)
        return out


def _check_instance(curves, sizes, costs, names):
    if not curves:
        raise BundleError("allocation needs at least one curve")
    for cv in curves:
        if not isinstance(cv, DistortionCurve):
            raise BundleError("allocation inputs must be DistortionCurve")
        if np.any(cv.delta < 0.0) or not np.all(np.isfinite(cv.delta)):
            raise BundleError(f"curve {cv.layer_id} has invalid delta values")
    if sizes is None:
        sizes = [int(cv.counts[-1]) for cv in curves]
    sizes = [int(s) for s in sizes]
    if costs is None:
        costs = [1.0] * len(curves)
    costs = [float(c) for c in costs]
    if not (len(sizes) == len(costs) == len(curves)):
        raise BundleError("curves/sizes/costs length mismatch")
    for cv, s in zip(curves, sizes):
        if cv.counts[-1] > s:
            raise BundleError(f"curve {cv.layer_id} exceeds layer size {s}")
    if any(c < 0 for c in costs):
        raise BundleError("negative layer cost")
    if names is None:
        names = [f"layer{cv.layer_id:03d}" for cv in curves]
    return sizes, costs, list(names)


def _resolve_quantum(costs, sizes, quantum):
    total = sum(c * s for c, s in zip(costs, sizes))
    if total <= 0.0:
        raise BundleError("total FLOPs is zero; FLOPs budget is undefined")
    if quantum is None:
        positive = [c for c in costs if c > 0]
        quantum = max(min(positive), total / 1e6)
        quantum = min(quantum, 0.01 * total)
    quantum = float(quantum)
    if quantum <= 0.0:
        raise BundleError("quantum must be positive")
    if quantum > 0.01 * total:
        raise BundleError(
            f"quantum too coarse: {quantum:g} exceeds 1% of total FLOPs {total:g}")
    return quantum, total


def _units(counts: np.ndarray, cost: float, quantum: float) -> np.ndarray:
    return np.floor(counts.astype(np.float64) * cost / quantum + 0.5).astype(np.int64)


def _result(curves, sizes, costs, names, picks, *, budget_mode, budget_spec,
            quantum, traceback):
    entries = []
    total_delta = 0.0
    kept_flops = 0.0
    dense_flops = 0.0
    for cv, size, cost, name, pi in zip(curves, sizes, costs, names, picks):
        k = int(cv.counts[pi])
        d = float(cv.delta[pi])
        total_delta += d
        kept_flops += (size - k) * cost
        dense_flops += size * cost
        entries.append(AllocEntry(layer_id=cv.layer_id, name=name, dim=size,
                                  count=k, alpha=k / size if size else 0.0,
                                  delta=d))
    ratio = kept_flops / dense_flops if dense_flops > 0 else 1.0
    return AllocationResult(budget_mode=budget_mode, budget_spec=budget_spec,
                            quantum=quantum, entries=entries,
                            total_delta=total_delta,
                            achieved_flops_ratio=ratio, traceback=traceback)


def _dp(weight_lists, delta_lists, n_states: int):
    """Exact-total DP. Returns (g, choices) with choices[i][j] = grid index."""
    g = np.full(n_states, np.inf)
    g[0] = 0.0
    choices = np.full((len(weight_lists), n_states), -1, dtype=np.int32)
    for i, (ws, ds) in enumerate(zip(weight_lists, delta_lists)):
        gn = np.full(n_states, np.inf)
        ch = choices[i]
        for pi in range(len(ws)):
            w = int(ws[pi])
            if w >= n_states:
                continue
            cand = g[: n_states - w] + float(ds[pi])
            seg = gn[w:]
            better = cand < seg
            seg[better] = cand[better]
            ch[w:][better] = pi
        g = gn
    return g, choices


def _backtrack(weight_lists, choices, j_final: int):
    picks = []
    trace = []
    j = int(j_final)
    for i in reversed(range(len(weight_lists))):
        pi = int(choices[i, j])
        if pi < 0:
            raise BundleError("backtrack hit an unreachable state")
        picks.append(pi)
        trace.append({"layer_index": i, "state": j, "grid_index": pi})
        j -= int(weight_lists[i][pi])
    if j != 0:
        raise BundleError("backtrack did not land on the zero state")
    picks.reverse()
    trace.reverse()
    return picks, trace


def dp_allocate_counts(curves, total_prune: int, *, sizes=None, costs=None,
                       names=None) -> AllocationResult:
    """Minimize total delta with sum of pruned counts exactly total_prune."""
    sizes, costs, names = _check_instance(curves, sizes, costs, names)
    T = int(total_prune)
    max_total = sum(int(cv.counts[-1]) for cv in curves)
    if T < 0 or T > max_total:
        raise BundleError(f"infeasible prune count: {T} (grid max {max_total})")
    weight_lists = [cv.counts for cv in curves]
    delta_lists = [cv.delta for cv in curves]
    g, choices = _dp(weight_lists, delta_lists, T + 1)
    if not np.isfinite(g[T]):
        raise BundleError(f"infeasible prune count: {T} not reachable on the grid")
    picks, trace = _backtrack(weight_lists, choices, T)
    return _result(curves, sizes, costs, names, picks,
                   budget_mode="prune_count", budget_spec=float(T),
                   quantum=None, traceback=trace)


def dp_allocate_flops(curves, costs, sizes, flops_ratio: float, *,
                      quantum=None, names=None) -> AllocationResult:
    """Minimize total delta with kept FLOPs <= flops_ratio * dense FLOPs."""
    sizes, costs, names = _check_instance(curves, sizes, costs, names)
    R = float(flops_ratio)
    if not 0.0 < R <= 1.0:
        raise BundleError(f"flops ratio out of range: {R}")
    quantum, total = _resolve_quantum(costs, sizes, quantum)
    unit_lists = [_units(cv.counts, c, quantum) for cv, c in zip(curves, costs)]
    u_max = sum(int(u[-1]) for u in unit_lists)
    if u_max > MAX_BUDGET_UNITS:
        raise BundleError(
            f"quantum too fine: budget units {u_max} exceed {MAX_BUDGET_UNITS}")
    u_req = int(math.ceil((1.0 - R) * total / quantum - 1e-9))
    if u_req > u_max:
        raise BundleError(
            f"infeasible flops ratio: {R} needs more pruning than the grids allow")
    delta_lists = [cv.delta for cv in curves]
    g, choices = _dp(unit_lists, delta_lists, u_max + 1)
    tail = g[u_req:]
    if not np.any(np.isfinite(tail)):
        raise BundleError(f"infeasible flops ratio: {R} not reachable on the grid")
    j_final = u_req + int(np.argmin(tail))
    picks, trace = _backtrack(unit_lists, choices, j_final)
    return _result(curves, sizes, costs, names, picks,
                   budget_mode="flops_ratio", budget_spec=R,
                   quantum=quantum, traceback=trace)


def brute_force_allocate(curves, *, total_prune=None, flops_ratio=None,
                         sizes=None, costs=None, quantum=None,
                         names=None) -> AllocationResult:
    """Exhaustive search over the grid product; oracle for the DP.

    Applies the same feasibility rule and tie-break as the DP, so results
    match it allocation for allocation, not just in the optimum value.
    """
    if (total_prune is None) == (flops_ratio is None):
        raise BundleError("specify exactly one of total_prune or flops_ratio")
    sizes, costs, names = _check_instance(curves, sizes, costs, names)
    space = 1
    for cv in curves:
        space *= cv.counts.size
        if space > BRUTE_FORCE_CAP:
            raise BundleError(f"search space too large: over {BRUTE_FORCE_CAP}")

    delta_tot = np.zeros(1)
    for cv in curves:
        delta_tot = np.add.outer(delta_tot, cv.delta)
    delta_tot = delta_tot.reshape(-1)
    shape = tuple(cv.counts.size for cv in curves)

    if total_prune is not None:
        T = int(total_prune)
        count_tot = np.zeros(1, dtype=np.int64)
        for cv in curves:
            count_tot = np.add.outer(count_tot, cv.counts)
        feasible = count_tot.reshape(-1) == T
        units_tot = None
        mode, spec, q = "prune_count", float(T), None
        infeasible_msg = f"infeasible prune count: {T} not reachable on the grid"
    else:
        R = float(flops_ratio)
        if not 0.0 < R <= 1.0:
            raise BundleError(f"flops ratio out of range: {R}")
        q, total = _resolve_quantum(costs, sizes, quantum)
        u_req = int(math.ceil((1.0 - R) * total / q - 1e-9))
        units_tot = np.zeros(1, dtype=np.int64)
        for cv, c in zip(curves, costs):
            units_tot = np.add.outer(units_tot, _units(cv.counts, c, q))
        units_tot = units_tot.reshape(-1)
        feasible = units_tot >= u_req
        mode, spec = "flops_ratio", R
        infeasible_msg = f"infeasible flops ratio: {R} not reachable on the grid"

    if not np.any(feasible):
        raise BundleError(infeasible_msg)
    masked = np.where(feasible, delta_tot, np.inf)
    dmin = masked.min()
    cand = np.flatnonzero(masked == dmin)
    if units_tot is not None:
        umin = units_tot[cand].min()
        cand = cand[units_tot[cand] == umin]
    if cand.size > 1:
        grid_idx = np.unravel_index(cand, shape)
        count_cols = [cv.counts[gi] for cv, gi in zip(curves, grid_idx)]
        # lexsort: last key is primary, so feed k_first .. k_last
        best = np.lexsort(tuple(count_cols))[0]
        flat = cand[best]
    else:
        flat = cand[0]
    picks = [int(pi) for pi in np.unravel_index(flat, shape)]
    return _result(curves, sizes, costs, names, picks, budget_mode=mode,
                   budget_spec=spec, quantum=q, traceback=None)


def uniform_allocate(curves, costs, sizes, flops_ratio: float, *,
                     quantum=None, names=None) -> AllocationResult:
    """Smallest grid-uniform pruning ratio meeting the FLOPs budget.

    Baseline for dominance comparisons; a feasible point of the same grid
    and budget rule as dp_allocate_flops, never below its optimum.
    """
    sizes, costs, names = _check_instance(curves, sizes, costs, names)
    R = float(flops_ratio)
    if not 0.0 < R <= 1.0:
        raise BundleError(f"flops ratio out of range: {R}")
    q, total = _resolve_quantum(costs, sizes, quantum)
    u_req = int(math.ceil((1.0 - R) * total / q - 1e-9))
    cand_alphas = sorted({float(k) / s for cv, s in zip(curves, sizes)
                          for k in cv.counts})
    for alpha in cand_alphas:
        picks = []
        for cv, s in zip(curves, sizes):
            ge = np.flatnonzero(cv.counts / s >= alpha - 1e-12)
            picks.append(int(ge[0]) if ge.size else cv.counts.size - 1)
        units = sum(int(_units(cv.counts[pi:pi + 1], c, q)[0])
                    for cv, c, pi in zip(curves, costs, picks))
        if units >= u_req:
            return _result(curves, sizes, costs, names, picks,
                           budget_mode="flops_ratio", budget_spec=R,
                           quantum=q, traceback=None)
    raise BundleError(f"infeasible flops ratio: {R} not reachable on the grid")
