"""Closed (vakonomic) occupation-measure linear programming: Mather
measures, rotation vectors, effective Lagrangian/Hamiltonian, and the
homogenization experiment.

The LP lives on a product phase grid (spatial nodes x control nodes);
closedness is enforced against a truncated basis of identification-
invariant trigonometric test functions, so the optimum is a certified
relaxation (lower bound of the action minimum over closed measures,
hence an upper bound of -c through the truncation)."""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field

import numpy as np

from .geometry import HEISENBERG, InvalidInputError, Lagrangian
from .grids import SpatialGrid
from .simplex import LPInfeasibleError, solve_standard_form
from .tonelli import KernelTable


@dataclass
class PhaseGrid:
    """Spatial nodes x control ball |u| <= v_max with a uniform per-axis
    control grid containing u = 0 exactly (odd resolution)."""

    grid: SpatialGrid
    v_max: float
    control_resolution: int
    controls: np.ndarray = field(init=False)

    def __post_init__(self):
        if self.control_resolution % 2 == 0 or self.control_resolution < 3:
            raise InvalidInputError("control resolution must be odd and >= 3")
        rank = self.grid.space.rank
        axis = np.linspace(-self.v_max, self.v_max, self.control_resolution)
        mesh = np.meshgrid(*([axis] * rank), indexing="ij")
        pts = np.stack([m.ravel() for m in mesh], axis=-1)
        keep = np.linalg.norm(pts, axis=1) <= self.v_max + 1e-12
        self.controls = pts[keep]

    @property
    def num_vars(self):
        return self.grid.count * self.controls.shape[0]

    def spatial_index(self):
        return np.repeat(np.arange(self.grid.count), self.controls.shape[0])

    def control_index(self):
        return np.tile(np.arange(self.controls.shape[0]), self.grid.count)


class ClosednessBasis:
    """Identification-invariant trigonometric test functions with exact
    gradients: cos/sin(2 pi k.x) for integer k, 0 < |k|_inf <= k_max,
    over the invariant coordinates (all axes on the torus, (x, y) on the
    Heisenberg model)."""

    def __init__(self, space, k_max=3):
        self.space = space
        self.k_max = int(k_max)
        self.coords_dim = 2 if space.kind == HEISENBERG else space.dim
        ks = []
        rng = range(-self.k_max, self.k_max + 1)
        for k in itertools.product(*([rng] * self.coords_dim)):
            k = np.array(k)
            if not k.any():
                continue
            nz = k[np.nonzero(k)[0][0]]
            if nz < 0:  # one representative per +-k pair
                continue
            ks.append(k)
        self.wave_vectors = np.array(ks, dtype=float)

    @property
    def size(self):
        return 2 * self.wave_vectors.shape[0]

    def gradients(self, points):
        """Gradient rows for every basis element at `points`
        ((n_basis, n_points, coords_dim)); cos-type then sin-type."""
        pts = np.asarray(points)[..., : self.coords_dim]
        ph = 2.0 * np.pi * pts @ self.wave_vectors.T  # (P, K)
        dcos = -np.sin(ph)[..., None] * (2.0 * np.pi * self.wave_vectors)
        dsin = np.cos(ph)[..., None] * (2.0 * np.pi * self.wave_vectors)
        out = np.concatenate([np.moveaxis(dcos, -2, 0), np.moveaxis(dsin, -2, 0)], axis=0)
        return out


@dataclass
class LPInstance:
    objective: np.ndarray
    constraints: np.ndarray
    rhs: np.ndarray
    phase: PhaseGrid
    num_rotation_rows: int = 0
    meta: dict = field(default_factory=dict)


@dataclass
class MeasureSolution:
    weights: np.ndarray
    objective: float
    rotation: np.ndarray
    dual: np.ndarray
    reduced_costs: np.ndarray
    iterations: int
    phase: PhaseGrid


def build_lp(lagr: Lagrangian, phase: PhaseGrid, basis: ClosednessBasis,
             rotation_target=None) -> LPInstance:
    """Closed-measure LP: one probability row, one closedness row per
    basis element, optional rotation rows pinning the homology pairing.

    Column (i, j) pairs spatial node i with control node j; the
    closedness entry is grad phi(x_i) . (F(x_i) u_j), which reduces to
    the invariant-coordinate pairing grad phi . u for both models."""
    space = lagr.space
    grid = phase.grid
    nc = phase.controls.shape[0]
    n = phase.num_vars
    g = basis.gradients(grid.nodes)        # (K, nodes, cdim)
    u_inv = phase.controls[:, : basis.coords_dim]  # frame pairing with coord forms
    rows = [np.ones(n)]
    for krow in range(g.shape[0]):
        row = g[krow] @ u_inv.T            # (nodes, nc)
        rows.append(row.reshape(-1))
    A = np.stack(rows)
    closed_norms = np.abs(A[1:]).max(axis=1)
    if np.any(closed_norms < 1e-12):
        raise InvalidInputError("degenerate test basis: zero closedness row")
    rhs = np.zeros(A.shape[0])
    rhs[0] = 1.0
    nrot = 0
    if rotation_target is not None:
        rotation_target = np.atleast_1d(np.asarray(rotation_target, dtype=float))
        nrot = rotation_target.size
        if nrot != space.rank:
            raise InvalidInputError(f"rotation target needs {space.rank} components")
        rot = np.stack([np.tile(phase.controls[:, r], grid.count) for r in range(nrot)])
        A = np.vstack([A, rot])
        rhs = np.concatenate([rhs, rotation_target])
    lvals = lagr.value(np.repeat(grid.nodes, nc, axis=0), np.tile(phase.controls, (grid.count, 1)))
    return LPInstance(lvals, A, rhs, phase, nrot, {"k_max": basis.k_max})


def solve_lp(lp: LPInstance) -> MeasureSolution:
    """Optimal basic feasible solution by the in-package revised simplex
    (Bland pivoting); optimality certified by the returned reduced
    costs >= -1e-9."""
    res = solve_standard_form(lp.constraints, lp.rhs, lp.objective)
    w = res.x
    rot = rotation_of_weights(lp.phase, w)
    return MeasureSolution(w, res.objective, rot, res.dual, res.reduced_costs,
                           res.iterations, lp.phase)


def rotation_of_weights(phase: PhaseGrid, weights):
    """rho_r = sum of weights times the coordinate-form pairing (the
    control components in invariant coordinates)."""
    nc = phase.controls.shape[0]
    wv = np.asarray(weights).reshape(phase.grid.count, nc)
    return wv.sum(axis=0) @ phase.controls


def rotation_vector(sol: MeasureSolution) -> np.ndarray:
    return rotation_of_weights(sol.phase, sol.weights)


def mather_lp(lagr: Lagrangian, phase: PhaseGrid, basis: ClosednessBasis) -> MeasureSolution:
    """Unpinned closed-measure minimum; objective approximates -c(L)
    from below (truncated basis relaxation)."""
    return solve_lp(build_lp(lagr, phase, basis))


@dataclass
class BetaPoint:
    h: np.ndarray
    value: float
    feasible: bool
    solution: MeasureSolution | None = None


def beta(lagr: Lagrangian, phase: PhaseGrid, basis: ClosednessBasis, h) -> BetaPoint:
    """Effective Lagrangian at rotation h: LP with pinned rotation rows;
    infeasible targets are reported as outside the numerical rotation
    set."""
    h = np.atleast_1d(np.asarray(h, dtype=float))
    if np.any(np.abs(h) > phase.v_max + 1e-12):
        return BetaPoint(h, np.inf, False)
    try:
        sol = solve_lp(build_lp(lagr, phase, basis, rotation_target=h))
    except LPInfeasibleError:
        return BetaPoint(h, np.inf, False)
    return BetaPoint(h, sol.objective, True, sol)


def beta_table(lagr: Lagrangian, phase: PhaseGrid, basis: ClosednessBasis, h_grid):
    """Tabulated effective Lagrangian over a rotation grid (1-D grids
    pin each axis in turn only for rank 1; general rank takes vector
    rows)."""
    rows = []
    for h in h_grid:
        pt = beta(lagr, phase, basis, h)
        rows.append((np.atleast_1d(pt.h), pt.value, pt.feasible))
    return rows


@dataclass
class EffectiveHamiltonianRecord:
    class_coefficients: np.ndarray
    lp_value: float
    semigroup_value: float | None
    discrepancy: float | None
    lp_solution: MeasureSolution


def effective_hamiltonian(lagr: Lagrangian, phase: PhaseGrid, basis: ClosednessBasis,
                          c_vec, semigroup_c=None) -> EffectiveHamiltonianRecord:
    """Effective Hamiltonian at the class with coefficients c_vec:
    -min of the closed-measure action for L minus the one-form.  The
    caller may supply the independently computed critical value of the
    same shifted Lagrangian for the consistency record."""
    c_vec = np.atleast_1d(np.asarray(c_vec, dtype=float))
    shifted = lagr.with_one_form(lagr.one_form + c_vec)
    sol = mather_lp(shifted, phase, basis)
    lp_value = -sol.objective
    disc = None if semigroup_c is None else abs(lp_value - semigroup_c)
    return EffectiveHamiltonianRecord(c_vec, lp_value, semigroup_c, disc, sol)


# -- homogenization --------------------------------------------------------

def clamp_linear_growth(f, growth):
    """Wrap f with |f(q)| <= |f(0)| + growth |q| enforced by clamping."""
    f0 = float(np.abs(np.asarray(f(0.0))))

    def clamped(q):
        q = np.asarray(q, dtype=float)
        cap = f0 + growth * np.abs(q)
        return np.clip(f(q), -cap, cap)

    return clamped


def _cover_stencil(kernel: KernelTable):
    """Group 1-D kernel entries by cell displacement: cost arrays over
    source nodes (periodic in the quotient)."""
    if kernel.grid.space.dim != 1:
        raise InvalidInputError("cover evolution implemented for 1-D torus kernels")
    n = kernel.grid.count
    stext = {}
    for d in np.unique(kernel.dcell[:, 0]):
        m = kernel.dcell[:, 0] == d
        costs = np.full(n, np.inf)
        costs[kernel.src[m]] = kernel.cost[m]
        stext[int(d)] = costs
    return stext


def _cover_evolve(kernel: KernelTable, u, j0, steps):
    """Lax-Oleinik steps on the abelian cover (real line), using the
    quotient kernel costs keyed by source node mod n; u is indexed by
    cover cell j0 + i."""
    n = kernel.grid.count
    sten = _cover_stencil(kernel)
    size = u.shape[0]
    src_mod = np.mod(j0 + np.arange(size), n)
    cost_by_d = {d: c[src_mod] for d, c in sten.items()}
    for _ in range(steps):
        out = np.full(size, np.inf)
        for d, costs in cost_by_d.items():
            # contribution of sources i to targets i + d
            lo = max(0, d)
            hi = min(size, size + d)
            tgt = slice(lo, hi)
            srcs = slice(lo - d, hi - d)
            np.minimum(out[tgt], u[srcs] + costs[srcs], out[tgt])
        u = out
    return u


@dataclass
class HomogenizationRow:
    eps: float
    z: float
    t: float
    u_eps: float
    u_limit: float
    gap: float
    truncated: bool = False


def hopf_lax_limit(f, beta_rows, z, t, refine=16):
    """Effective Hopf-Lax value min over f(z - t h) + t L_eff(h).

    The tabulated effective Lagrangian is convex, so it is refined by
    piecewise-linear interpolation (error <= table-spacing^2 / 8) before
    the minimization; a bare table-resolution scan would carry
    first-order error whenever the minimizer sits at a kink of f."""
    hs = np.array([float(h[0]) for h, _, feas in beta_rows if feas])
    ls = np.array([lval for _, lval, feas in beta_rows if feas])
    order = np.argsort(hs)
    hs, ls = hs[order], ls[order]
    hfine = np.linspace(hs[0], hs[-1], refine * (hs.size - 1) + 1)
    lfine = np.interp(hfine, hs, ls)
    vals = f(z - t * hfine) + t * lfine
    return float(np.min(vals))


def homogenize(lagr: Lagrangian, kernel: KernelTable, beta_rows, f, eps_list,
               probes, growth=1.0, max_steps=100_000,
               max_cover_nodes=4_000_000) -> list[HomogenizationRow]:
    """Compare the rescaled cover evolution u_eps with the effective
    Hopf-Lax limit at probe points (z, t).

    u_eps(x, t) = min over cover starts y of f_eps(y) + eps * (minimal
    action from y to x in time t / eps), realized by iterated quotient
    kernels with winding bookkeeping on the cover; f_eps(y) = f(eps G y)
    with G the identity lift.  Probes snap to cover nodes and kernel
    step multiples; over-budget eps values are returned with the
    truncation flag."""
    if lagr.space.dim != 1 or lagr.space.kind == HEISENBERG:
        raise InvalidInputError("homogenization experiment runs on flat torus covers (dim 1)")
    fcl = clamp_linear_growth(f, growth)
    h = kernel.grid.h
    vmax_rot = max(abs(float(hh[0])) for hh, _, feas in beta_rows if feas)
    rows = []
    for eps in eps_list:
        for (z, t) in probes:
            steps = int(round(t / (eps * kernel.delta)))
            t_eff = steps * eps * kernel.delta
            jprobe = int(round(z / (eps * h)))
            z_eff = jprobe * eps * h
            reach = vmax_rot * t_eff / eps + 1.0
            jlo = int(np.floor(jprobe - reach / h)) - 1
            jhi = int(np.ceil(jprobe + reach / h)) + 1
            size = jhi - jlo + 1
            if steps > max_steps or size > max_cover_nodes:
                rows.append(HomogenizationRow(eps, z_eff, t_eff, np.nan, np.nan,
                                              np.nan, truncated=True))
                continue
            ycover = (jlo + np.arange(size)) * h
            u = fcl(eps * ycover) / eps
            u = _cover_evolve(kernel, u, jlo, steps)
            u_eps = eps * float(u[jprobe - jlo])
            u_lim = hopf_lax_limit(fcl, beta_rows, z_eff, t_eff)
            rows.append(HomogenizationRow(float(eps), z_eff, t_eff, u_eps, u_lim,
                                          abs(u_eps - u_lim)))
    return rows


def homogenization_csv(rows):
    lines = ["eps,z,t,u_eps,u_limit,gap,truncated"]
    for r in rows:
        lines.append(f"{r.eps},{format(r.z, '.17g')},{format(r.t, '.17g')},"
                     f"{format(r.u_eps, '.17g')},{format(r.u_limit, '.17g')},"
                     f"{format(r.gap, '.17g')},{int(r.truncated)}")
    return "\n".join(lines) + "\n"
