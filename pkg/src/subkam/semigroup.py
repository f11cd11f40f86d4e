"""Discrete Lax-Oleinik semigroup on grid functions.

One step is the min-plus product with a short-time kernel:
(L_delta u)(x) = min over admitted sources y of u(y) + h_delta(y, x),
with the discounted variant u(y) exp(-lam delta) + h^lam_delta(y, x).
Steps are Jacobi (frozen input, separate output buffer), so batched
evolutions are deterministic regardless of chunking.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .geometry import InvalidInputError, Lagrangian
from .grids import SpatialGrid
from .tonelli import KernelTable

_CHUNK_ELEMS = 40_000_000  # cap on batch * entries per reduceat sweep


class GridMismatchError(ValueError):
    pass


@dataclass
class GridFunction:
    """Scalar field on the spatial grid (flat node order)."""

    grid: SpatialGrid
    values: np.ndarray
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=float)
        if self.values.shape != (self.grid.count,):
            raise InvalidInputError("values must have one entry per node")
        if not np.all(np.isfinite(self.values)):
            raise InvalidInputError("grid function values must be finite")

    def copy(self):
        return GridFunction(self.grid, self.values.copy(), dict(self.meta))

    def to_csv(self):
        d = self.grid.space.dim
        lines = [",".join([f"x{i+1}" for i in range(d)] + ["value"])]
        for node, val in zip(self.grid.nodes, self.values):
            lines.append(",".join(format(c, ".17g") for c in node)
                         + "," + format(val, ".17g"))
        return "\n".join(lines) + "\n"


def _check_grids(kernel: KernelTable, values: np.ndarray):
    if values.shape[-1] != kernel.grid.count:
        raise GridMismatchError(
            f"function has {values.shape[-1]} nodes, kernel {kernel.grid.count}")


def lo_step_values(kernel: KernelTable, values: np.ndarray, factor=1.0) -> np.ndarray:
    """Min-plus kernel application on raw arrays; `values` may carry
    leading batch axes.  factor scales the incoming values (discounting)."""
    _check_grids(kernel, values)
    seg = kernel.segment_starts()
    vals = np.atleast_2d(values)
    B = vals.shape[0]
    E = kernel.num_entries
    out = np.empty((B, kernel.grid.count))
    rows = max(1, min(B, _CHUNK_ELEMS // max(E, 1)))
    for i in range(0, B, rows):
        sl = slice(i, min(i + rows, B))
        gathered = factor * vals[sl][:, kernel.src] + kernel.cost
        out[sl] = np.minimum.reduceat(gathered, seg, axis=1)
    return out.reshape(values.shape)


def lo_step(kernel: KernelTable, u: GridFunction) -> GridFunction:
    """One undiscounted Lax-Oleinik step.  Monotone and commutes with
    adding constants (exactly, being a finite min of sums)."""
    if kernel.lam != 0.0:
        raise InvalidInputError("lo_step requires an undiscounted kernel")
    return GridFunction(u.grid, lo_step_values(kernel, u.values), dict(u.meta))


def lo_step_discounted(kernel: KernelTable, u: GridFunction) -> GridFunction:
    """One discounted step; a sup-norm contraction with factor
    exp(-lam delta)."""
    if kernel.lam <= 0.0:
        raise InvalidInputError("discounted step requires a kernel with lambda > 0")
    fac = np.exp(-kernel.lam * kernel.delta)
    return GridFunction(u.grid, lo_step_values(kernel, u.values, factor=fac), dict(u.meta))


@dataclass
class DiscountedResult:
    lam: float
    u: GridFunction
    contraction_residual: float
    iterations: int


def solve_discounted(kernel: KernelTable, lam, tol=1e-9, max_iters=200_000) -> DiscountedResult:
    """Banach iteration from u = 0 for the discounted fixed point.
    Stops when the sup-change is below tol * (1 - exp(-lam delta)), so
    the fixed-point error is below tol."""
    if lam <= 0:
        raise InvalidInputError("lambda must be positive")
    if abs(kernel.lam - lam) > 1e-12:
        raise InvalidInputError("kernel was built for a different lambda")
    fac = np.exp(-lam * kernel.delta)
    gate = tol * (1.0 - fac)
    u = np.zeros(kernel.grid.count)
    for it in range(1, max_iters + 1):
        nxt = lo_step_values(kernel, u, factor=fac)
        change = float(np.abs(nxt - u).max())
        u = nxt
        if change <= gate:
            return DiscountedResult(lam, GridFunction(kernel.grid, u,
                                                      {"lambda": lam, "iterations": it}),
                                    change, it)
    raise RuntimeError(f"discounted solve did not contract below {gate} "
                       f"in {max_iters} iterations (last change {change})")


@dataclass
class CriticalResult:
    c_estimate: float
    u: GridFunction
    fixed_point_residual: float
    iterations: int
    drift_history: np.ndarray
    converged: bool
    diagnostics: dict = field(default_factory=dict)


def solve_critical(kernel: KernelTable, tol=1e-8, max_iters=20_000, anchor=0,
                   window=None) -> CriticalResult:
    """Iterate u <- L_delta u, reading the critical value off the anchor
    drift and normalizing each iterate to 0 at the anchor.

    The drift is averaged over a trailing window (equal to the raw
    anchor drift once convergent; well-defined under min-plus limit
    cycles).  Stops when both the windowed drift and the normalized
    profile are Cauchy within tol."""
    if kernel.lam != 0.0:
        raise InvalidInputError("critical solve requires an undiscounted kernel")
    n = kernel.grid.count
    if not (0 <= anchor < n):
        raise InvalidInputError("anchor out of range")
    W = window or max(8, int(round(1.0 / kernel.delta)))
    u = np.zeros(n)
    anchor_vals = [0.0]
    drift_hist = []
    w_prev = np.zeros(n)
    ring = []
    ring_cap = 64
    converged = False
    sup_change = np.inf
    c_prev = None
    it = 0
    for it in range(1, max_iters + 1):
        u = lo_step_values(kernel, u)
        anchor_vals.append(float(u[anchor]))
        w = u - u[anchor]
        sup_change = float(np.abs(w - w_prev).max())
        w_prev = w
        ring.append(w)
        if len(ring) > ring_cap:
            ring.pop(0)
        if it >= W:
            c_win = -(anchor_vals[-1] - anchor_vals[-1 - W]) / (W * kernel.delta)
            drift_hist.append(c_win)
            if c_prev is not None and abs(c_win - c_prev) <= tol and sup_change <= tol:
                converged = True
                c_prev = c_win
                break
            c_prev = c_win
    if c_prev is None:
        c_prev = -(anchor_vals[-1] - anchor_vals[0]) / (it * kernel.delta)
    c = float(c_prev)
    w = u - u[anchor]
    residual = float(np.abs(lo_step_values(kernel, w) + c * kernel.delta - w).max())
    diagnostics = {"sup_change": sup_change, "window": W}
    if not converged and len(ring) > 2:
        gaps = [float(np.abs(ring[-1] - ring[-1 - p]).max()) for p in range(1, len(ring))]
        p = int(np.argmin(gaps)) + 1
        diagnostics["cycle_period"] = p
        diagnostics["cycle_gap"] = gaps[p - 1]
    return CriticalResult(c, GridFunction(kernel.grid, w, {"anchor": anchor, "c": c}),
                          residual, it, np.asarray(drift_hist), converged, diagnostics)


@dataclass
class EvolutionRecord:
    times: np.ndarray
    sup_changes: np.ndarray
    dist_to_limit: np.ndarray
    final: GridFunction
    nondecreasing: bool
    limit_gap: float


def lo_long_time(u0: GridFunction, kernel: KernelTable, c, T_max,
                 barrier_table=None, tol=1e-9) -> EvolutionRecord:
    """Track t -> L_t u0 + c t up to T_max; when a barrier table H[z, x]
    is supplied, also track the sup distance to the predicted limit
    min_z u0(z) + H(z, x)."""
    steps = int(round(T_max / kernel.delta))
    v = u0.values.copy()
    limit = None
    if barrier_table is not None:
        limit = np.min(u0.values[:, None] + barrier_table, axis=0)
    sup_changes = np.empty(steps)
    dists = np.full(steps, np.nan)
    nondecreasing = True
    for k in range(steps):
        nxt = lo_step_values(kernel, v) + c * kernel.delta
        if np.min(nxt - v) < -tol:
            nondecreasing = False
        sup_changes[k] = float(np.abs(nxt - v).max())
        if limit is not None:
            dists[k] = float(np.abs(nxt - limit).max())
        v = nxt
    final = GridFunction(kernel.grid, v, dict(u0.meta, evolved_T=T_max))
    gap = float(dists[-1]) if limit is not None else np.nan
    times = kernel.delta * (1 + np.arange(steps))
    return EvolutionRecord(times, sup_changes, dists, final, nondecreasing, gap)


@dataclass
class VanishingDiscountRecord:
    lams: np.ndarray
    shifted: list
    sup_diffs: np.ndarray
    candidate_gaps: np.ndarray
    iterations: np.ndarray


def vanishing_discount(kernels_by_lam: dict, c, tol=1e-9, candidate=None,
                       max_iters=400_000) -> VanishingDiscountRecord:
    """Tabulate u_lam + c/lam along a decreasing discount sequence,
    reporting consecutive sup-norm differences and, when given, the
    distance to a candidate limit."""
    lams = np.array(sorted(kernels_by_lam, reverse=True), dtype=float)
    shifted, iters = [], []
    for lam in lams:
        res = solve_discounted(kernels_by_lam[lam], lam, tol=tol, max_iters=max_iters)
        shifted.append(res.u.values + c / lam)
        iters.append(res.iterations)
    sup_diffs = np.array([np.abs(shifted[i + 1] - shifted[i]).max()
                          for i in range(len(lams) - 1)])
    gaps = np.full(len(lams), np.nan)
    if candidate is not None:
        gaps = np.array([np.abs(s - candidate).max() for s in shifted])
    return VanishingDiscountRecord(lams, shifted, sup_diffs, gaps, np.asarray(iters))


# -- certificates ----------------------------------------------------------

def discounted_bounds_report(result: DiscountedResult, lagr: Lagrangian) -> dict:
    """Nodewise min L <= lam u_lam <= A(0) slack."""
    lu = result.lam * result.u.values
    return {
        "lower_slack": float((lu - lagr.min_value).min()),
        "upper_slack": float((lagr.bound_A(0.0) - lu).min()),
        "min_lambda_u": float(lu.min()),
        "max_lambda_u": float(lu.max()),
        "bound_lower": lagr.min_value,
        "bound_upper": lagr.bound_A(0.0),
    }


def lipschitz_report(values: np.ndarray, grid: SpatialGrid, lagr: Lagrangian,
                     n_pairs=200, seed=0, constant=None) -> dict:
    """Sampled |u(x)-u(y)| <= K d(x,y) check with the uniform constant
    K = A(1) - min L (flat torus: d is the chart quotient metric = CC)."""
    rng = np.random.default_rng(seed)
    K = constant if constant is not None else lagr.bound_A(1.0) - lagr.min_value
    i = rng.integers(0, grid.count, size=n_pairs)
    j = rng.integers(0, grid.count, size=n_pairs)
    d = grid.space.quotient_distance(grid.nodes[i], grid.nodes[j])
    du = np.abs(values[i] - values[j])
    mask = d > 0
    worst = float((du[mask] - K * d[mask]).max()) if mask.any() else 0.0
    return {"constant": float(K), "worst_violation": worst, "pairs": int(mask.sum())}


def kernel_cap_report(kernel: KernelTable, values: np.ndarray) -> dict:
    """Speeds used by the argmin transitions of one Lax-Oleinik step;
    validates that the a-priori cap is inactive."""
    gathered = values[kernel.src] + kernel.cost
    seg = kernel.segment_starts()
    mins = np.minimum.reduceat(gathered, seg, axis=0)
    is_arg = np.abs(gathered - mins[kernel.tgt]) <= 1e-12 + 1e-9 * np.abs(mins[kernel.tgt])
    disp = kernel.displacements()
    speeds = np.linalg.norm(disp[:, : kernel.grid.space.rank], axis=1) / kernel.delta
    used = speeds[is_arg]
    return {
        "max_speed_used": float(used.max()) if used.size else 0.0,
        "v_max": kernel.v_max,
        "fraction_near_cap": float((used > 0.95 * kernel.v_max).mean()) if used.size else 0.0,
    }
