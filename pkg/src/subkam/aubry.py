"""Peierls barrier, Mane potential, Aubry set, and certificates for
candidate weak KAM solutions.

Barriers are computed by point-source Lax-Oleinik iteration with the
critical drift added per step, so the iterate at step k is directly
h_{k delta}(z, .) + c k delta.  The liminf over time is approximated by
the minimum over a late window [T0, T1] with a stabilization
diagnostic.

For mechanical Lagrangians (min L + c = 0) an equivalent critical-graph
route is available: with nonnegative reduced edge costs
w = h_delta + c delta the min-plus limit of the iteration equals
min over critical nodes q of Phi(x, q) + Phi(q, x), where Phi is the
shortest-path distance; this makes the all-nodes diagonal affordable at
desk scale and is cross-validated against the slice route in tests.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
from scipy.sparse.csgraph import dijkstra

from .geometry import InvalidInputError, Lagrangian, energy, integrate
from .semigroup import GridFunction, lo_step_values
from .tonelli import KernelTable, MinimizeOptions, kernel_pair_minimizer

_BATCH_ELEMS = 40_000_000


@dataclass
class BarrierSlice:
    source: int
    values: np.ndarray           # window minimum of h_t(z,.) + c t
    window: tuple
    oscillation: float           # max over nodes of the window spread
    phi: np.ndarray              # running min over all t <= T1
    t_star: np.ndarray           # minimizing time per target
    flagged: bool = False

    def to_csv(self):
        lines = ["source,target,value,phi,t_star"]
        for j in range(self.values.shape[0]):
            lines.append(f"{self.source},{j},{format(self.values[j], '.17g')},"
                         f"{format(self.phi[j], '.17g')},{format(self.t_star[j], '.17g')}")
        return "\n".join(lines) + "\n"


@dataclass
class PotentialTable:
    sources: np.ndarray
    values: np.ndarray           # (n_sources, n_nodes)
    t_star: np.ndarray

    def to_csv(self):
        lines = ["source,target,value,t_star"]
        for i, s in enumerate(self.sources):
            for j in range(self.values.shape[1]):
                lines.append(f"{int(s)},{j},{format(self.values[i, j], '.17g')},"
                             f"{format(self.t_star[i, j], '.17g')}")
        return "\n".join(lines) + "\n"


@dataclass
class AubryMask:
    mask: np.ndarray
    tol: float
    h_diag: np.ndarray
    method: str = "slices"

    def to_csv(self, grid):
        d = grid.space.dim
        lines = [",".join([f"x{i+1}" for i in range(d)] + ["h_diag", "in_set"])]
        for node, hv, m in zip(grid.nodes, self.h_diag, self.mask):
            lines.append(",".join(format(c, ".17g") for c in node)
                         + f",{format(hv, '.17g')},{int(m)}")
        return "\n".join(lines) + "\n"


def default_ceiling(kernel: KernelTable, c, T1):
    """Finite stand-in for the +inf point-source initialization; exceeds
    any value h_t + ct can take on the window, so it never binds after
    the source influence has spread."""
    finite = kernel.cost[np.isfinite(kernel.cost)]
    per_step = max(abs(float(finite.max())), abs(float(finite.min()))) / kernel.delta
    return 4.0 * (1.0 + (T1 + 1.0) * (abs(c) + per_step))


def _barrier_batch(kernel: KernelTable, c, sources, T0, T1, ceiling=None):
    """Shared point-source evolution: returns (window_min, window_spread,
    phi_running, t_star) arrays over (n_sources, n_nodes)."""
    if T0 <= 0 or T1 <= T0:
        raise InvalidInputError("need 0 < T0 < T1")
    sources = np.asarray(sources, dtype=int)
    n = kernel.grid.count
    K0 = max(1, int(round(T0 / kernel.delta)))
    K1 = int(round(T1 / kernel.delta))
    B = ceiling if ceiling is not None else default_ceiling(kernel, c, T1)
    rows = max(1, min(sources.size, _BATCH_ELEMS // max(kernel.num_entries, 1)))
    wmin = np.empty((sources.size, n))
    wspread = np.empty((sources.size, n))
    phi = np.full((sources.size, n), np.inf)
    tstar = np.zeros((sources.size, n))
    for lo in range(0, sources.size, rows):
        sl = slice(lo, min(lo + rows, sources.size))
        u = np.full((sl.stop - sl.start, n), B)
        u[np.arange(sl.stop - sl.start), sources[sl]] = 0.0
        lo_min = np.full_like(u, np.inf)
        lo_max = np.full_like(u, -np.inf)
        ph = phi[sl]
        ts = tstar[sl]
        for k in range(1, K1 + 1):
            u = lo_step_values(kernel, u) + c * kernel.delta
            better = u < ph
            ph[better] = u[better]
            ts[better] = k * kernel.delta
            if k >= K0:
                np.minimum(lo_min, u, out=lo_min)
                np.maximum(lo_max, u, out=lo_max)
        wmin[sl] = lo_min
        wspread[sl] = lo_max - lo_min
        phi[sl] = ph
        tstar[sl] = ts
    return wmin, wspread, phi, tstar


def barrier_slice(kernel: KernelTable, c, source, T0, T1, ceiling=None,
                  oscillation_threshold=1e-3) -> BarrierSlice:
    """Peierls barrier h(z, .) for one source node, with the Mane
    potential as a by-product.  Flagged (not raised) when the window
    oscillation exceeds the threshold."""
    wmin, wspread, phi, tstar = _barrier_batch(kernel, c, [source], T0, T1, ceiling)
    osc = float(wspread[0].max())
    return BarrierSlice(int(source), wmin[0], (T0, T1), osc, phi[0], tstar[0],
                        flagged=osc > oscillation_threshold)


def barrier_table(kernel: KernelTable, c, sources, T0, T1, ceiling=None):
    """Barrier rows h(z, .) for many sources; returns (values, spread,
    phi, t_star) stacked over sources."""
    return _barrier_batch(kernel, c, sources, T0, T1, ceiling)


def mane_potential(kernel: KernelTable, c, x, y, t_grid=None, T1=8.0):
    """Phi(x, y) = min over the time grid of h_t(x, y) + c t, with times
    snapped to kernel multiples; by default every multiple of delta up
    to T1 is used.  Returns (value, minimizing time)."""
    grid = kernel.grid
    xi = int(x) if np.isscalar(x) or isinstance(x, (int, np.integer)) else int(grid.index_of(x))
    yi = int(y) if np.isscalar(y) or isinstance(y, (int, np.integer)) else int(grid.index_of(y))
    if t_grid is not None:
        T1 = max(t_grid)
    _, _, phi, tstar = _barrier_batch(kernel, c, [xi], min(kernel.delta, T1 / 2), T1)
    if t_grid is None:
        return float(phi[0, yi]), float(tstar[0, yi])
    # restricted grid: redo the scan on the requested times only
    ks = sorted({max(1, int(round(t / kernel.delta))) for t in t_grid})
    n = kernel.grid.count
    B = default_ceiling(kernel, c, T1)
    u = np.full((1, n), B)
    u[0, xi] = 0.0
    best, tbest = np.inf, kernel.delta
    for k in range(1, ks[-1] + 1):
        u = lo_step_values(kernel, u) + c * kernel.delta
        if k in ks and u[0, yi] < best:
            best, tbest = float(u[0, yi]), k * kernel.delta
    return best, tbest


def _dedup_min(src, tgt, w, n):
    order = np.lexsort((tgt, src))
    s, t, ww = src[order], tgt[order], w[order]
    key = s.astype(np.int64) * n + t
    starts = np.flatnonzero(np.concatenate([[True], key[1:] != key[:-1]]))
    wmin = np.minimum.reduceat(ww, starts)
    return s[starts], t[starts], wmin


def critical_graph_diagonal(kernel: KernelTable, c, crit_tol=None):
    """Diagonal barrier via shortest paths on reduced costs
    w = h_delta + c delta >= 0 (mechanical case).  Returns (h_diag,
    phi_from_crit, phi_to_crit, crit_nodes)."""
    n = kernel.grid.count
    red = kernel.cost + c * kernel.delta
    finite = np.isfinite(red)
    neg = float(red[finite].min())
    if neg < -1e-6:
        raise InvalidInputError(
            f"critical-graph route needs min L + c >= 0 (found reduced cost {neg:.3e})")
    red = np.clip(red, 0.0, None)
    selfmask = (kernel.src == kernel.tgt) & np.all(kernel.dcell == 0, axis=1)
    selfw = np.full(n, np.inf)
    selfw[kernel.src[selfmask]] = red[selfmask]
    if crit_tol is None:
        crit_tol = max(1e-9, 1e-6 * kernel.delta)
    crit = np.flatnonzero(selfw <= crit_tol)
    if crit.size == 0:
        crit = np.array([int(np.argmin(selfw))])
    s, t, w = _dedup_min(kernel.src[finite], kernel.tgt[finite], red[finite], n)
    g = sp.csr_matrix((w, (s, t)), shape=(n, n))
    fwd = dijkstra(g, directed=True, indices=crit)      # Phi(q, .)
    bwd = dijkstra(g.T.tocsr(), directed=True, indices=crit)  # Phi(., q)
    h_diag = np.min(bwd + fwd, axis=0)
    return h_diag, fwd, bwd, crit


def aubry_set(kernel: KernelTable, c, tol_aubry, method="auto", T0=4.0, T1=8.0,
              max_slice_nodes=2048) -> AubryMask:
    """Thresholded diagonal-barrier mask.

    method: "slices" (point-source iteration per node), "critical-graph"
    (shortest paths on reduced costs; exact min-plus limit for the
    mechanical case), or "auto" (critical-graph when valid and the grid
    is large)."""
    n = kernel.grid.count
    if method == "auto":
        finite = kernel.cost[np.isfinite(kernel.cost)]
        mechanical_ok = float(finite.min()) + c * kernel.delta >= -1e-6
        method = "critical-graph" if (mechanical_ok and n > max_slice_nodes) else "slices"
    if method == "critical-graph":
        h_diag, _, _, _ = critical_graph_diagonal(kernel, c)
    elif method == "slices":
        wmin, _, _, _ = _barrier_batch(kernel, c, np.arange(n), T0, T1)
        h_diag = wmin[np.arange(n), np.arange(n)]
    else:
        raise InvalidInputError(f"unknown aubry method {method!r}")
    return AubryMask(h_diag <= tol_aubry, float(tol_aubry), h_diag, method)


# -- certificates ----------------------------------------------------------

def _random_horizontal_paths(lagr, rng, n_paths, T, steps):
    """Smooth random control signals, started at random grid-free points."""
    paths = []
    m = lagr.space.rank
    ts = (np.arange(steps) + 0.5) / steps
    for _ in range(n_paths):
        x0 = rng.random(lagr.space.dim)
        u = np.zeros((steps, m))
        for j in range(m):
            for mode in range(1, 4):
                u[:, j] += rng.normal(0, 0.5 / mode) * np.cos(
                    2 * np.pi * mode * ts + rng.random() * 2 * np.pi)
        paths.append(integrate(lagr.space, x0, u, T / steps))
    return paths


def calibration_check(u: GridFunction, c, kernel: KernelTable, lagr: Lagrangian,
                      n_paths=20, path_T=1.0, seed=0, tol=1e-6,
                      chain_length=None) -> dict:
    """(a) domination of u by L + c on every kernel pair and on sampled
    horizontal paths; (b) existence of backward kernel-argmin chains
    realizing near-equality.  Violations are listed, never raised."""
    from .geometry import action as path_action

    vals = u.values
    slack = vals[kernel.tgt] - vals[kernel.src] - kernel.cost - c * kernel.delta
    slack = np.where(np.isfinite(kernel.cost), slack, -np.inf)
    worst_idx = int(np.argmax(slack))
    pair_violation = float(slack[worst_idx])
    offenders = np.flatnonzero(slack > tol)

    rng = np.random.default_rng(seed)
    lip = lagr.bound_A(1.0) + c
    path_viol = -np.inf
    for path in _random_horizontal_paths(lagr, rng, n_paths, path_T, 32):
        a = path_action(lagr, path, 0.0) + c * (path.t1 - path.t0)
        i0 = kernel.grid.nearest_index(path.states[0])
        i1 = kernel.grid.nearest_index(path.states[-1])
        snap = lip * kernel.grid.h  # endpoint snapping allowance
        path_viol = max(path_viol, float(vals[i1] - vals[i0] - a - snap))

    # backward chains: per-node argmin of u(y) + cost + c delta
    gathered = vals[kernel.src] + kernel.cost + c * kernel.delta
    seg = kernel.segment_starts()
    mins = np.minimum.reduceat(gathered, seg)
    defect = vals - mins  # <= 0 up to residual; equality = calibration
    arg_entry = np.full(kernel.grid.count, kernel.num_entries, dtype=np.int64)
    is_min = gathered <= mins[kernel.tgt] + 1e-12
    # first minimizing entry per segment (deterministic)
    np.minimum.at(arg_entry, kernel.tgt[is_min], np.flatnonzero(is_min))
    L = chain_length or max(4, int(round(1.0 / kernel.delta)))
    start = int(np.argmax(vals))
    chain = [start]
    total_defect = 0.0
    for _ in range(L):
        e = arg_entry[chain[-1]]
        if e >= kernel.num_entries:
            break
        total_defect += float(vals[chain[-1]] - vals[kernel.src[e]]
                              - kernel.cost[e] - c * kernel.delta)
        chain.append(int(kernel.src[e]))
    return {
        "pair_violation": pair_violation,
        "num_pair_violations": int(offenders.size),
        "worst_pair": {"tgt": int(kernel.tgt[worst_idx]), "src": int(kernel.src[worst_idx])},
        "path_violation": path_viol,
        "calibration_defect": float(np.abs(defect).max()),
        "chain": chain,
        "chain_total_defect": total_defect,
        "chain_per_step_bound": tol * max(len(chain) - 1, 1),
        "passed": pair_violation <= tol and path_viol <= tol,
    }


def extract_calibrated_chain(u: GridFunction, c, kernel: KernelTable, lagr: Lagrangian,
                             start, length, opts: MinimizeOptions | None = None):
    """Backward kernel-argmin chain from `start`, with each hop re-solved
    for its realized path; returns (node list, list of MinimizerResult)."""
    vals = u.values
    gathered = vals[kernel.src] + kernel.cost + c * kernel.delta
    seg = kernel.segment_starts()
    mins = np.minimum.reduceat(gathered, seg)
    chain = [int(start)]
    entries = []
    for _ in range(length):
        x = chain[-1]
        lo = seg[x]
        hi = seg[x + 1] if x + 1 < kernel.grid.count else kernel.num_entries
        k = lo + int(np.argmin(gathered[lo:hi]))
        entries.append(k)
        chain.append(int(kernel.src[k]))
    paths = [kernel_pair_minimizer(kernel, lagr, k, opts) for k in entries]
    return chain, paths


def energy_check(paths, lagr: Lagrangian, c) -> float:
    """Max |E - c| along the steps of the supplied calibrated/semi-static
    candidate hops (each a MinimizerResult path)."""
    worst = 0.0
    for res in paths:
        p = res.path
        e = energy(lagr, p.states[:-1], p.controls)
        worst = max(worst, float(np.abs(e - c).max()))
    return worst


def viscosity_residual(u: GridFunction, c, kernel: KernelTable, lagr: Lagrangian,
                       seed=0, n_paths=20, tol=1e-6) -> dict:
    """Necessary-condition scores for u as a critical viscosity solution.

    subsolution score: positive part of u(end) - u(start) - A_{L+c} over
    kernel pairs and sampled horizontal segments; supersolution score:
    positive part of min_y [u(y) + h_delta + c delta] - u(x) (defect of
    the best backward segment).  Certifies necessary conditions only.
    """
    from .geometry import action as path_action

    vals = u.values
    slack = vals[kernel.tgt] - vals[kernel.src] - kernel.cost - c * kernel.delta
    slack = np.where(np.isfinite(kernel.cost), slack, -np.inf)
    sub_score = float(np.maximum(slack, 0.0).max())
    rng = np.random.default_rng(seed)
    lip = lagr.bound_A(1.0) + c
    for path in _random_horizontal_paths(lagr, rng, n_paths, 0.5, 16):
        a = path_action(lagr, path, 0.0) + c * (path.t1 - path.t0)
        i0 = kernel.grid.nearest_index(path.states[0])
        i1 = kernel.grid.nearest_index(path.states[-1])
        sub_score = max(sub_score, float(vals[i1] - vals[i0] - a - lip * kernel.grid.h))

    gathered = vals[kernel.src] + kernel.cost + c * kernel.delta
    mins = np.minimum.reduceat(gathered, kernel.segment_starts())
    super_defect = mins - vals
    super_score = float(np.maximum(super_defect, 0.0).max())
    return {
        "subsolution_score": max(sub_score, 0.0),
        "supersolution_score": super_score,
        "worst_supersolution_node": int(np.argmax(super_defect)),
        "sub_ok": sub_score <= tol,
        "super_ok": super_score <= tol,
        "tol": tol,
    }
