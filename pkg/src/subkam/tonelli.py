"""Fixed-endpoint action minimization over horizontal paths and the
short-time minimal-action kernels consumed by the Lax-Oleinik machinery.

The minimizer is a direct transcription over piecewise-constant frame
controls: a geometric penalty schedule on the quotient endpoint error,
each stage descended by gradient descent with backtracking line search,
followed by a feasibility polish (Newton endpoint correction plus
projected gradient descent) so reported costs are actions of paths that
hit the endpoint exactly.

Discounted costs follow the backward convention: a pair cost at
discount lam is the minimal value of the discounted action over paths
on [-T, 0], so kernel entries compose as
u(x) <- min_y u(y) exp(-lam delta) + cost(y, x).
"""

from __future__ import annotations

import hashlib
import io
import json
import os
from dataclasses import dataclass, asdict, field

import numpy as np

from .geometry import (
    HEISENBERG,
    HorizontalPath,
    InvalidInputError,
    Lagrangian,
    integrate,
)
from .grids import SpatialGrid

KERNEL_FORMAT_VERSION = "1"


class KernelBuildError(RuntimeError):
    def __init__(self, message, report=None):
        super().__init__(message)
        self.report = report or {}


@dataclass
class MinimizeOptions:
    """Knobs for the penalized descent.  Fixed seed implies fully
    deterministic output.  tol_stationarity is measured on gradient/dt
    (the sup norm of the discrete Euler-Lagrange residual), so its
    meaning does not degrade with the step count."""

    steps_per_unit: int = 64
    min_steps: int = 2
    penalty_start: float = 100.0
    penalty_factor: float = 10.0
    penalty_stages: int = 4
    stage_iterations: int = 40
    polish_iterations: int = 60
    tol_stationarity: float = 1e-4
    tol_endpoint: float = 1e-7
    multistarts: int = 4
    seed: int = 0

    def __post_init__(self):
        if self.tol_stationarity <= 0 or self.tol_endpoint <= 0:
            raise InvalidInputError("tolerances must be positive")
        if self.multistarts < 1:
            raise InvalidInputError("multistarts must be >= 1")


@dataclass
class MinimizerResult:
    path: HorizontalPath
    action_value: float
    endpoint_error: float
    stationarity_norm: float
    converged: bool


# -- batched transcription core -------------------------------------------

def _forward(space, lagr, x0, controls, dt, t0, lam):
    """States (B, N+1, dim) and discounted action (B,) by left-endpoint
    quadrature."""
    B, N, m = controls.shape
    states = np.empty((B, N + 1, space.dim))
    states[:, 0] = x0
    for k in range(N):
        states[:, k + 1] = space.step(states[:, k], controls[:, k], dt)
    tk = t0 + dt * np.arange(N)
    w = np.exp(lam * tk) if lam != 0.0 else np.ones(N)
    kin = 0.5 * np.einsum("bkm,bkm->bk", controls, controls)
    lvals = kin - lagr.potential.value(states[:, :-1]) - controls @ lagr.one_form
    act = dt * (lvals @ w)
    return states, act


def _objective(space, lagr, x0, controls, dt, t0, lam, targets, rho):
    states, act = _forward(space, lagr, x0, controls, dt, t0, lam)
    r = states[:, -1] - targets
    return act + rho * np.einsum("bd,bd->b", r, r), states, act


def _gradient(space, lagr, states, controls, dt, t0, lam, targets, rho):
    """Gradient of action + rho |s_N - target|^2 w.r.t. controls,
    by reverse accumulation through the exact one-step flow."""
    B, N, m = controls.shape
    tk = t0 + dt * np.arange(N)
    w = np.exp(lam * tk) if lam != 0.0 else np.ones(N)
    grad = np.empty_like(controls)
    lam_adj = 2.0 * rho * (states[:, -1] - targets)
    for k in range(N - 1, -1, -1):
        A, Bj = space.step_jacobians(states[:, k], controls[:, k], dt)
        grad[:, k] = dt * w[k] * (controls[:, k] - lagr.one_form)
        grad[:, k] += np.einsum("bdm,bd->bm", Bj, lam_adj)
        lam_adj = np.einsum("bde,bd->be", A, lam_adj) - dt * w[k] * lagr.potential.gradient(states[:, k])
    return grad


def _endpoint_jacobian(space, states, controls, dt):
    """d s_N / d controls, shape (B, dim, N*m)."""
    B, N, m = controls.shape
    dim = space.dim
    J = np.empty((B, dim, N, m))
    M = np.broadcast_to(np.eye(dim), (B, dim, dim)).copy()
    for k in range(N - 1, -1, -1):
        A, Bj = space.step_jacobians(states[:, k], controls[:, k], dt)
        J[:, :, k, :] = np.einsum("bde,bem->bdm", M, Bj)
        M = np.einsum("bde,bef->bdf", M, A)
    return J.reshape(B, dim, N * m)


def _solve_gram(J, rhs, reg=1e-12):
    """Solve (J J^T + reg I) y = rhs batched; rhs shape (B, dim)."""
    G = np.einsum("bdk,bek->bde", J, J)
    tr = np.trace(G, axis1=1, axis2=2)
    G = G + (reg * (1.0 + tr))[:, None, None] * np.eye(J.shape[1])
    return np.linalg.solve(G, rhs[..., None])[..., 0]


def _gd(space, lagr, x0, controls, dt, t0, lam, targets, rho, iters, gtol):
    """Backtracking gradient descent on the penalized objective.
    Operates in place on a compacted active set."""
    B = controls.shape[0]
    alpha = np.full(B, 1.0)
    f, states, _ = _objective(space, lagr, x0, controls, dt, t0, lam, targets, rho)
    g = _gradient(space, lagr, states, controls, dt, t0, lam, targets, rho)
    active = np.arange(B)
    for _ in range(iters):
        # stationarity in Euler-Lagrange-residual units (gradient / dt)
        gn = np.abs(g[active]).max(axis=(1, 2)) / dt
        keep = gn > gtol
        active = active[keep]
        if active.size == 0:
            break
        idx = active
        d = -g[idx]
        slope = -np.einsum("bkm,bkm->b", g[idx], g[idx])
        a = alpha[idx].copy()
        trial = controls[idx] + a[:, None, None] * d
        ftr, _, _ = _objective(space, lagr, x0[idx], trial, dt, t0, lam, targets[idx], rho)
        need = ftr > f[idx] + 1e-4 * a * slope
        for _bt in range(30):
            if not need.any():
                break
            a[need] *= 0.5
            sub = np.nonzero(need)[0]
            trial[sub] = controls[idx[sub]] + a[sub, None, None] * d[sub]
            fsub, _, _ = _objective(space, lagr, x0[idx[sub]], trial[sub], dt, t0, lam,
                                    targets[idx[sub]], rho)
            ftr[sub] = fsub
            need[sub] = fsub > f[idx[sub]] + 1e-4 * a[sub] * slope[sub]
        ok = ~need
        moved = idx[ok]
        controls[moved] = trial[ok]
        f[moved] = ftr[ok]
        alpha[idx] = np.where(ok, np.minimum(a * 2.0, 1e6), np.maximum(a, 1e-16))
        # stalled elements leave the active set
        active = np.concatenate([moved, idx[~ok][alpha[idx[~ok]] > 1e-15]])
        if moved.size:
            _, st_m, _ = _objective(space, lagr, x0[moved], controls[moved], dt, t0, lam,
                                    targets[moved], rho)
            g[moved] = _gradient(space, lagr, st_m, controls[moved], dt, t0, lam,
                                 targets[moved], rho)
    return controls, f


def _newton_endpoint(space, lagr, x0, controls, dt, targets, sweeps=3, tol=1e-12):
    """Least-norm control corrections driving s_N to the target."""
    for _ in range(sweeps):
        states, _ = _forward(space, lagr, x0, controls, dt, 0.0, 0.0)
        r = targets - states[:, -1]
        err = np.abs(r).max(axis=1)
        run = err > tol
        if not run.any():
            break
        J = _endpoint_jacobian(space, states[run], controls[run], dt)
        y = _solve_gram(J, r[run])
        duf = np.einsum("bdk,bd->bk", J, y)
        controls[run] += duf.reshape(controls[run].shape)
    return controls


def _polish(space, lagr, x0, controls, dt, t0, lam, targets, iters, gtol, xtol):
    """Projected gradient descent on the endpoint-preserving manifold.

    Returns (controls, action, endpoint_err, projected_gradient_norm).
    """
    B = controls.shape[0]
    alpha = np.full(B, 1.0)
    rho_merit = 1e5
    controls = _newton_endpoint(space, lagr, x0, controls, dt, targets, tol=0.1 * xtol)
    active = np.arange(B)
    pg = np.full(B, np.inf)
    for _ in range(iters):
        idx = active
        if idx.size == 0:
            break
        states, act = _forward(space, lagr, x0[idx], controls[idx], dt, t0, lam)
        g = _gradient(space, lagr, states, controls[idx], dt, t0, lam, targets[idx], 0.0)
        J = _endpoint_jacobian(space, states, controls[idx], dt)
        gf = g.reshape(idx.size, -1)
        y = _solve_gram(J, np.einsum("bdk,bk->bd", J, gf))
        gp = gf - np.einsum("bdk,bd->bk", J, y)
        gpn = np.abs(gp).max(axis=1) / dt  # Euler-Lagrange-residual units
        pg[idx] = gpn
        keep = gpn > gtol
        idx = idx[keep]
        active = idx
        if idx.size == 0:
            break
        gp = gp[keep].reshape((idx.size,) + controls.shape[1:])
        slope = -np.einsum("bkm,bkm->b", gp, gp)
        f0, _, _ = _objective(space, lagr, x0[idx], controls[idx], dt, t0, lam,
                              targets[idx], rho_merit)
        a = alpha[idx].copy()
        trial = controls[idx] - a[:, None, None] * gp
        ftr, _, _ = _objective(space, lagr, x0[idx], trial, dt, t0, lam, targets[idx], rho_merit)
        need = ftr > f0 + 1e-4 * a * slope
        for _bt in range(30):
            if not need.any():
                break
            a[need] *= 0.5
            sub = np.nonzero(need)[0]
            trial[sub] = controls[idx[sub]] - a[sub, None, None] * gp[sub]
            fsub, _, _ = _objective(space, lagr, x0[idx[sub]], trial[sub], dt, t0, lam,
                                    targets[idx[sub]], rho_merit)
            ftr[sub] = fsub
            need[sub] = fsub > f0[sub] + 1e-4 * a[sub] * slope[sub]
        ok = ~need
        moved = idx[ok]
        controls[moved] = trial[ok]
        alpha[idx] = np.where(ok, np.minimum(a * 2.0, 1e6), np.maximum(a, 1e-16))
        active = np.concatenate([moved, idx[~ok][alpha[idx[~ok]] > 1e-15]])
        if moved.size:
            controls[moved] = _newton_endpoint(space, lagr, x0[moved], controls[moved],
                                               dt, targets[moved], tol=0.1 * xtol)
    controls = _newton_endpoint(space, lagr, x0, controls, dt, targets, tol=0.1 * xtol)
    states, act = _forward(space, lagr, x0, controls, dt, t0, lam)
    err = np.linalg.norm(states[:, -1] - targets, axis=1)
    return controls, act, err, pg


def _minimize_batch(space, lagr, x0, targets, T, lam, controls, opts,
                    stage_schedule=None):
    """Full pipeline on a batch with fixed chart targets.

    Returns (controls, action, endpoint_err, pgnorm)."""
    N = controls.shape[1]
    dt = T / N
    t0 = -T
    rhos = stage_schedule
    if rhos is None:
        rhos = [opts.penalty_start * opts.penalty_factor**j
                for j in range(opts.penalty_stages)]
    for rho in rhos:
        controls, _ = _gd(space, lagr, x0, controls, dt, t0, lam, targets, rho,
                          opts.stage_iterations, 10.0 * opts.tol_stationarity)
    return _polish(space, lagr, x0, controls, dt, t0, lam, targets,
                   opts.polish_iterations, opts.tol_stationarity, opts.tol_endpoint)


# -- public single-pair operations ----------------------------------------

def _straight_controls(space, disp, T, N):
    u = np.zeros((N, space.rank))
    u[:] = disp[: space.rank] / T
    return u


def minimize_endpoint(lagr: Lagrangian, x, y, T, lam=0.0, opts=None) -> MinimizerResult:
    """Best multistart penalized minimizer of the discounted action over
    horizontal paths from x to y in time T (time interval [-T, 0]).

    The endpoint is matched in the quotient: the best representative of
    y is re-selected at every penalty stage.  Never raises on
    non-convergence; the caller reads the `converged` flag.
    """
    if T <= 0:
        raise InvalidInputError("T must be positive")
    opts = opts or MinimizeOptions()
    space = lagr.space
    x0 = space.canonicalize(np.asarray(x, dtype=float))
    ycan = space.canonicalize(np.asarray(y, dtype=float))
    N = max(opts.min_steps, int(round(opts.steps_per_unit * T)))
    dt = T / N
    rng = np.random.default_rng(opts.seed)

    disp = space.quotient_displacement(x0, ycan)
    base = _straight_controls(space, disp, T, N)
    starts = [base]
    scale = 0.5 * (1.0 + np.linalg.norm(disp) / T)
    for _ in range(opts.multistarts - 1):
        starts.append(base + rng.normal(0.0, scale, size=base.shape))
    S = len(starts)
    controls = np.stack(starts)
    x0b = np.repeat(x0[None, :], S, axis=0)

    reps = space.representatives(ycan)  # (R, dim)

    def pick_targets(endpoints):
        diff = reps[None, :, :] - endpoints[:, None, :]
        k = np.argmin(np.einsum("brd,brd->br", diff, diff), axis=1)
        return reps[k]

    rhos = [opts.penalty_start * opts.penalty_factor**j for j in range(opts.penalty_stages)]
    targets = pick_targets(np.repeat(ycan[None, :] - disp + disp, S, axis=0) * 0 + x0b + 0.0)
    # initial target: representative nearest the straight-line endpoint
    states, _ = _forward(space, lagr, x0b, controls, dt, -T, lam)
    targets = pick_targets(states[:, -1])
    for rho in rhos:
        controls, _ = _gd(space, lagr, x0b, controls, dt, -T, lam, targets, rho,
                          opts.stage_iterations, 10.0 * opts.tol_stationarity)
        states, _ = _forward(space, lagr, x0b, controls, dt, -T, lam)
        targets = pick_targets(states[:, -1])
    controls, act, err, pg = _polish(space, lagr, x0b, controls, dt, -T, lam, targets,
                                     opts.polish_iterations, opts.tol_stationarity,
                                     opts.tol_endpoint)
    conv = (err <= opts.tol_endpoint) & (pg <= opts.tol_stationarity)

    # winner: converged first, lowest action, then lexicographic controls
    order = sorted(
        range(S),
        key=lambda s: (not conv[s], round(act[s], 12), tuple(np.round(controls[s].ravel(), 12))),
    )
    s = order[0]
    path = integrate(space, x0, controls[s], dt, t0=-T)
    return MinimizerResult(
        path=path,
        action_value=float(act[s]),
        endpoint_error=float(err[s]),
        stationarity_norm=float(pg[s]),
        converged=bool(conv[s]),
    )


def minimal_action(lagr, x, y, T, lam=0.0, opts=None) -> float:
    """Minimal (discounted) action h^lam_T(x, y); upper bound realized by
    a feasible discrete path."""
    return minimize_endpoint(lagr, x, y, T, lam, opts).action_value


def default_v_max(lagr: Lagrangian, grid: SpatialGrid, delta: float) -> float:
    """A-priori speed cap for kernel admissibility: generous multiple of
    the calibrated-curve speed bound plus one-cell-per-step resolution."""
    rng = lagr.potential.max_value - lagr.potential.min_value
    return 4.0 * np.sqrt(2.0 * rng + 1.0) + 2.0 * grid.h / delta


# -- kernel table ----------------------------------------------------------

@dataclass
class KernelTable:
    """Short-time costs h^lam_delta(source, target) between admissible
    grid-node pairs, with the chart cell displacement of each entry.

    Entries are sorted lexicographically by (target, source,
    displacement); every node carries at least its self-pair."""

    grid: SpatialGrid
    delta: float
    lam: float
    v_max: float
    tgt: np.ndarray
    src: np.ndarray
    dcell: np.ndarray
    cost: np.ndarray
    config_hash: str = ""
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self._seg = None

    @property
    def num_entries(self):
        return self.tgt.shape[0]

    def segment_starts(self):
        """reduceat boundaries: entries grouped contiguously by target."""
        if self._seg is None:
            self._seg = np.searchsorted(self.tgt, np.arange(self.grid.count))
        return self._seg

    def displacements(self):
        return self.dcell.astype(float) * self.grid.h

    def transpose(self):
        """Table for the reversed graph (evolution toward sources)."""
        order = np.lexsort(tuple(-self.dcell[:, d] for d in range(self.dcell.shape[1] - 1, -1, -1))
                           + (self.tgt, self.src))
        t = KernelTable(self.grid, self.delta, self.lam, self.v_max,
                        self.src[order].copy(), self.tgt[order].copy(),
                        (-self.dcell[order]).copy(), self.cost[order].copy(),
                        self.config_hash, dict(self.meta, transposed=True))
        return t

    def entry_index(self, tgt, src):
        """Indices of all entries for a (target, source) node pair."""
        lo = np.searchsorted(self.tgt, tgt, "left")
        hi = np.searchsorted(self.tgt, tgt, "right")
        sub = np.nonzero(self.src[lo:hi] == src)[0]
        return lo + sub

    # -- serialization ---------------------------------------------------

    def header(self):
        return {
            "version": KERNEL_FORMAT_VERSION,
            "config_hash": self.config_hash,
            "space": self.grid.space.kind,
            "dim": self.grid.space.dim,
            "grid": list((self.grid.n,) * self.grid.space.dim),
            "delta": self.delta,
            "lambda": self.lam,
            "v_max": self.v_max,
            "meta": self.meta,
        }

    def to_bytes(self, fmt="binary"):
        head = json.dumps(self.header(), sort_keys=True)
        if fmt == "binary":
            buf = io.BytesIO()
            buf.write(head.encode() + b"\n")
            for arr in (self.tgt, self.src, self.dcell, self.cost):
                np.lib.format.write_array(buf, np.ascontiguousarray(arr), version=(1, 0))
            return buf.getvalue()
        if fmt == "csv":
            out = io.StringIO()
            out.write(head + "\n")
            dim = self.dcell.shape[1]
            out.write("tgt,src," + ",".join(f"d{i+1}" for i in range(dim)) + ",cost\n")
            for i in range(self.num_entries):
                cells = ",".join(str(int(c)) for c in self.dcell[i])
                out.write(f"{int(self.tgt[i])},{int(self.src[i])},{cells},"
                          f"{format(self.cost[i], '.17g')}\n")
            return out.getvalue().encode()
        raise InvalidInputError(f"unknown kernel format {fmt!r}")

    @staticmethod
    def from_bytes(data, space, fmt="binary"):
        if fmt == "binary":
            buf = io.BytesIO(data)
            head = json.loads(buf.readline().decode())
            tgt = np.lib.format.read_array(buf)
            src = np.lib.format.read_array(buf)
            dcell = np.lib.format.read_array(buf)
            cost = np.lib.format.read_array(buf)
        else:
            text = data.decode()
            lines = text.splitlines()
            head = json.loads(lines[0])
            rows = [ln.split(",") for ln in lines[2:] if ln]
            dim = head["dim"]
            tgt = np.array([int(r[0]) for r in rows], dtype=np.int64)
            src = np.array([int(r[1]) for r in rows], dtype=np.int64)
            dcell = np.array([[int(c) for c in r[2:2 + dim]] for r in rows], dtype=np.int16)
            cost = np.array([float(r[2 + dim]) for r in rows])
        grid = SpatialGrid(space, head["grid"][0])
        kt = KernelTable(grid, head["delta"], head["lambda"], head["v_max"],
                         tgt, src, dcell, cost, head["config_hash"], head.get("meta", {}))
        return kt


def kernel_config_hash(lagr: Lagrangian, resolution, delta, lam, v_max, opts: MinimizeOptions):
    payload = {
        "version": KERNEL_FORMAT_VERSION,
        "space": lagr.space.kind,
        "dim": lagr.space.dim,
        "potential": {
            "wave_vectors": lagr.potential.wave_vectors.tolist(),
            "amplitudes": lagr.potential.amplitudes.tolist(),
            "phases": lagr.potential.phases.tolist(),
        },
        "one_form": lagr.one_form.tolist(),
        "resolution": int(resolution),
        "delta": float(delta),
        "lambda": float(lam),
        "v_max": float(v_max),
        "opts": asdict(opts),
    }
    return hashlib.sha256(json.dumps(payload, sort_keys=True).encode()).hexdigest()


def _torus_offsets(dim, radius_cells, h, radius_chart):
    rng = np.arange(-radius_cells, radius_cells + 1)
    grids = np.meshgrid(*([rng] * dim), indexing="ij")
    offs = np.stack([g.ravel() for g in grids], axis=-1)
    keep = np.linalg.norm(offs * h, axis=1) <= radius_chart + 1e-12
    return offs[keep]


def _enumerate_entries(lagr, grid, delta, v_max):
    """Admissible (tgt, src, dcell) triples plus per-entry chart targets,
    z-mismatch of the straight lift, and the warm-start displacement."""
    space = grid.space
    h = grid.h
    n = grid.n
    radius = v_max * delta
    coords = grid.nodes
    src_all = np.arange(grid.count, dtype=np.int64)
    ent_tgt, ent_src, ent_dcell, ent_zmiss = [], [], [], []
    if space.kind != HEISENBERG:
        offs = _torus_offsets(space.dim, int(np.floor(radius / h)), h, radius)
        mi = grid.multi_index(src_all)
        for off in offs:
            cells = np.mod(mi + off, n)
            tgt = np.ravel_multi_index(np.moveaxis(cells, -1, 0), grid.shape)
            ent_tgt.append(tgt)
            ent_src.append(src_all)
            ent_dcell.append(np.broadcast_to(off.astype(np.int16), (grid.count, space.dim)))
            ent_zmiss.append(np.zeros(grid.count))
    else:
        offs = _torus_offsets(2, int(np.floor(radius / h)), h, radius)
        x_src = coords[:, 0]
        for off in offs:
            dx, dy = off[0] * h, off[1] * h
            dxy = np.hypot(dx, dy)
            zwin = min(0.25 * radius**2,
                       0.9 * (radius**2 - dxy**2) / (4.0 * np.pi))
            if zwin <= 0:
                continue
            nat = x_src * dy + 0.5 * dx * dy  # straight-lift z displacement
            kmid = np.round(nat / h).astype(int)
            ew = int(np.floor(zwin / h)) + 1
            for e in range(-ew, ew + 1):
                kc = kmid + e
                zmiss = kc * h - nat
                keep = np.abs(zmiss) <= zwin + 1e-15
                if not keep.any():
                    continue
                srcs = src_all[keep]
                tau = coords[srcs] + np.stack(
                    [np.full(srcs.size, dx), np.full(srcs.size, dy), kc[keep] * h], axis=-1)
                tgt = grid.index_of(space.canonicalize(tau), atol=1e-6)
                dc = np.empty((srcs.size, 3), dtype=np.int16)
                dc[:, 0] = off[0]
                dc[:, 1] = off[1]
                dc[:, 2] = kc[keep]
                ent_tgt.append(tgt)
                ent_src.append(srcs)
                ent_dcell.append(dc)
                ent_zmiss.append(zmiss[keep])
    tgt = np.concatenate(ent_tgt)
    src = np.concatenate(ent_src)
    dcell = np.concatenate([np.asarray(d, dtype=np.int16) for d in ent_dcell])
    zmiss = np.concatenate(ent_zmiss)
    order = np.lexsort(tuple(dcell[:, d] for d in range(dcell.shape[1] - 1, -1, -1))
                       + (src, tgt))
    return tgt[order], src[order], dcell[order], zmiss[order]


def _spiral_start(base, zmiss, dt, N):
    """Second warm start closing a z mismatch with one control loop of the
    right enclosed area and orientation."""
    amp = np.sqrt(4.0 * np.pi * np.abs(zmiss)) / (N * dt)
    phases = 2.0 * np.pi * (np.arange(N) + 0.5) / N
    out = base.copy()
    out[:, :, 0] += amp[:, None] * np.cos(phases)
    out[:, :, 1] += np.sign(zmiss)[:, None] * amp[:, None] * np.sin(phases)
    return out


def build_kernel(lagr: Lagrangian, resolution, delta, lam=0.0, opts=None,
                 v_max=None, cache_dir=None, fmt="binary", workers=1,
                 max_failure_fraction=0.01) -> KernelTable:
    """Build (or load from cache) the short-time minimal-action table.

    Pairs are admitted by chart displacement within v_max*delta in the
    frame-reachable directions; on the Heisenberg model the vertical
    window is the ball-box allowance intersected with an isoperimetric
    reachability bound.  Each admitted cost is minimized from a
    straight/lifted warm start (plus an area-matched loop start when the
    straight lift misses the vertical target).
    """
    if delta <= 0:
        raise InvalidInputError("delta must be positive")
    if resolution < 8:
        raise InvalidInputError("grid resolution must be >= 8 per axis")
    opts = opts or MinimizeOptions()
    space = lagr.space
    grid = SpatialGrid(space, resolution)
    if v_max is None:
        v_max = default_v_max(lagr, grid, delta)
    chash = kernel_config_hash(lagr, resolution, delta, lam, v_max, opts)

    cache_path = None
    if cache_dir is not None:
        ext = "kbin" if fmt == "binary" else "kcsv"
        cache_path = os.path.join(cache_dir, f"kernel-{chash[:16]}.{ext}")
        if os.path.exists(cache_path):
            with open(cache_path, "rb") as fh:
                kt = KernelTable.from_bytes(fh.read(), space, fmt)
            if kt.config_hash == chash:
                kt.meta = dict(kt.meta, cache_hit=True)
                return kt

    tgt, src, dcell, zmiss = _enumerate_entries(lagr, grid, delta, v_max)
    E = tgt.shape[0]
    N = max(opts.min_steps, int(round(opts.steps_per_unit * delta)))
    dt = delta / N

    disp = dcell.astype(float) * grid.h
    x0 = grid.nodes[src]
    targets = x0 + disp
    cost = np.empty(E)
    err = np.empty(E)

    def run_chunk(sl):
        xs = x0[sl]
        ts = targets[sl]
        base = np.repeat((disp[sl, : space.rank] / delta)[:, None, :], N, axis=1)
        c1, a1, e1, _ = _minimize_batch(space, lagr, xs, ts, delta, lam, base.copy(), opts)
        if space.kind == HEISENBERG:
            zm = zmiss[sl]
            hard = np.abs(zm) > 0.05 * grid.h
            if hard.any():
                alt = _spiral_start(base[hard], zm[hard], dt, N)
                c2, a2, e2, _ = _minimize_batch(space, lagr, xs[hard], ts[hard], delta,
                                                lam, alt, opts)
                better = (e2 <= opts.tol_endpoint) & ((a2 < a1[hard]) | (e1[hard] > opts.tol_endpoint))
                sub = np.nonzero(hard)[0][better]
                a1[sub] = a2[better]
                e1[sub] = e2[better]
        return a1, e1

    chunk = 200_000
    slices = [slice(i, min(i + chunk, E)) for i in range(0, E, chunk)]
    if workers > 1 and len(slices) > 1:
        from concurrent.futures import ThreadPoolExecutor

        with ThreadPoolExecutor(max_workers=workers) as ex:
            results = list(ex.map(run_chunk, slices))
    else:
        results = [run_chunk(sl) for sl in slices]
    for sl, (a, e) in zip(slices, results):
        cost[sl] = a
        err[sl] = e

    bad = err > max(opts.tol_endpoint, 1e-9)
    frac = bad.mean() if E else 0.0
    if frac > max_failure_fraction:
        worst = np.argsort(err)[-10:][::-1]
        raise KernelBuildError(
            f"{frac:.2%} of kernel pairs failed endpoint convergence",
            report={
                "failed_fraction": float(frac),
                "worst_pairs": [
                    {"tgt": int(tgt[i]), "src": int(src[i]),
                     "dcell": dcell[i].tolist(), "endpoint_error": float(err[i])}
                    for i in worst
                ],
            },
        )
    cost = np.where(bad, np.inf, cost)

    kt = KernelTable(grid, float(delta), float(lam), float(v_max), tgt, src, dcell, cost,
                     chash, {"failed_fraction": float(frac), "num_steps": N,
                             "cache_hit": False})
    if cache_path is not None:
        os.makedirs(cache_dir, exist_ok=True)
        tmp = cache_path + ".tmp"
        with open(tmp, "wb") as fh:
            fh.write(kt.to_bytes(fmt))
        os.replace(tmp, cache_path)
    return kt


def kernel_pair_minimizer(kernel: KernelTable, lagr: Lagrangian, entry, opts=None):
    """Re-run the pair minimization for one kernel entry, returning the
    realized path (for chain reconstruction and energy checks)."""
    opts = opts or MinimizeOptions()
    space = lagr.space
    grid = kernel.grid
    i = int(entry)
    x0 = grid.nodes[kernel.src[i]][None, :]
    dispv = kernel.dcell[i].astype(float) * grid.h
    target = (x0[0] + dispv)[None, :]
    N = max(opts.min_steps, int(round(opts.steps_per_unit * kernel.delta)))
    base = np.repeat((dispv[: space.rank] / kernel.delta)[None, None, :], N, axis=1)
    controls, act, err, pg = _minimize_batch(space, lagr, x0, target, kernel.delta,
                                             kernel.lam, base.copy(), opts)
    path = integrate(space, x0[0], controls[0], kernel.delta / N, t0=-kernel.delta)
    return MinimizerResult(path, float(act[0]), float(err[0]), float(pg[0]),
                           bool(err[0] <= opts.tol_endpoint))
