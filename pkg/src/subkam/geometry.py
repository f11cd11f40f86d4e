"""Model spaces, horizontal frames, Lagrangians and horizontal paths.

Two compact models are supported:

* ``flat_torus`` in dimension 1-3: trivial frame, coordinate-wise mod-1
  identifications.
* ``heisenberg``: the polarized Heisenberg nilmanifold, chart [0,1)^3,
  frame X1 = dx, X2 = dy + x dz, lattice action
  (a,b,c).(x,y,z) = (x+a, y+b, z+c+a*y).

Lagrangians are mechanical with a constant-coefficient closed one-form:
L(x,u) = 0.5|u|^2 - U(x) - w.u in frame coordinates, with U a finite
trigonometric sum in identification-invariant coordinates.
"""

from __future__ import annotations

import io
from dataclasses import dataclass, field

import numpy as np

FLAT_TORUS = "flat_torus"
HEISENBERG = "heisenberg"


class InvalidInputError(ValueError):
    pass


class ModelSpace:
    """A compact sub-Riemannian model: chart [0,1)^dim + identifications.

    Points are row vectors; all methods accept arrays of shape
    (..., dim) and broadcast over leading axes.
    """

    def __init__(self, kind, dim):
        if kind == FLAT_TORUS:
            if dim not in (1, 2, 3):
                raise InvalidInputError("flat torus supports dim 1..3")
            self.rank = dim
        elif kind == HEISENBERG:
            if dim != 3:
                raise InvalidInputError("heisenberg space has dim 3")
            self.rank = 2
        else:
            raise InvalidInputError(f"unknown space kind {kind!r}")
        self.kind = kind
        self.dim = dim

    def __repr__(self):
        return f"ModelSpace({self.kind!r}, dim={self.dim})"

    # -- identifications -------------------------------------------------

    def canonicalize(self, raw):
        """Map chart points to the fundamental domain [0,1)^dim.

        Identification-equivalent inputs map to the same output;
        idempotent.  Non-finite coordinates raise InvalidInputError.
        """
        raw = np.asarray(raw, dtype=float)
        if raw.shape[-1] != self.dim:
            raise InvalidInputError(f"expected last axis {self.dim}, got {raw.shape}")
        if not np.all(np.isfinite(raw)):
            raise InvalidInputError("non-finite coordinates")
        # snap band: points within 1e-12 of a face identify with it, so
        # accumulated roundoff cannot split one quotient point in two
        snap = 1e-12
        if self.kind == FLAT_TORUS:
            out = raw - np.floor(raw + snap)
            return np.where(out < 0.0, 0.0, out)
        x, y, z = raw[..., 0], raw[..., 1], raw[..., 2]
        a = np.floor(x + snap)
        b = np.floor(y + snap)
        z0 = z - a * (y - b)
        c = np.floor(z0 + snap)
        out = np.stack([x - a, y - b, z0 - c], axis=-1)
        return np.where(out < 0.0, 0.0, out)

    def lattice_shifts(self):
        """Integer shift tuples whose action covers all representatives
        within chart distance 1 of the fundamental domain."""
        rng = (-1, 0, 1)
        grids = np.meshgrid(*([rng] * self.dim), indexing="ij")
        return np.stack([g.ravel() for g in grids], axis=-1).astype(float)

    def apply_shift(self, points, shifts):
        """Deck transformation of `points` by integer `shifts` (broadcast)."""
        points = np.asarray(points, dtype=float)
        shifts = np.asarray(shifts, dtype=float)
        if self.kind == FLAT_TORUS:
            return points + shifts
        out = points + shifts
        # z picks up a*y from the polarized action
        out = out.copy()
        out[..., 2] += shifts[..., 0] * points[..., 1]
        return out

    def representatives(self, points):
        """All nearby representatives of `points`: shape (..., n_shifts, dim)."""
        points = np.asarray(points, dtype=float)
        shifts = self.lattice_shifts()  # (S, dim)
        pts = points[..., None, :]
        return self.apply_shift(pts, shifts)

    def quotient_displacement(self, start, end):
        """Chart displacement end_rep - start with end_rep the representative
        of `end` nearest to `start` (Euclidean in the chart)."""
        start = np.asarray(start, dtype=float)
        reps = self.representatives(end)
        diff = reps - start[..., None, :]
        k = np.argmin(np.einsum("...sd,...sd->...s", diff, diff), axis=-1)
        return np.take_along_axis(diff, k[..., None, None], axis=-2)[..., 0, :]

    def quotient_distance(self, a, b):
        """Chart quotient distance min over representatives of |b_rep - a|.

        For the flat torus this is the Carnot-Caratheodory distance; for
        the Heisenberg model it is only the chart Euclidean quotient
        metric (used for endpoint penalties, never as the CC distance).
        """
        d = self.quotient_displacement(a, b)
        return np.sqrt(np.einsum("...d,...d->...", d, d))

    # -- frame and flow --------------------------------------------------

    def frame(self, x):
        """Frame matrix F(x), shape (..., dim, rank); columns orthonormal
        for the declared metric."""
        x = np.asarray(x, dtype=float)
        lead = x.shape[:-1]
        if self.kind == FLAT_TORUS:
            F = np.zeros(lead + (self.dim, self.rank))
            idx = np.arange(self.dim)
            F[..., idx, idx] = 1.0
            return F
        F = np.zeros(lead + (3, 2))
        F[..., 0, 0] = 1.0
        F[..., 1, 1] = 1.0
        F[..., 2, 1] = x[..., 0]
        return F

    def step(self, s, u, dt):
        """Exact one-step flow of xdot = F(x) u with u constant over dt.

        Both models admit closed-form steps (F constant, resp. affine
        with polynomial flow), so the nominal fourth-order one-step
        scheme is exact here.
        """
        s = np.asarray(s, dtype=float)
        u = np.asarray(u, dtype=float)
        if self.kind == FLAT_TORUS:
            return s + u * dt
        out = s.copy()
        out[..., 0] = s[..., 0] + u[..., 0] * dt
        out[..., 1] = s[..., 1] + u[..., 1] * dt
        out[..., 2] = s[..., 2] + s[..., 0] * u[..., 1] * dt + 0.5 * u[..., 0] * u[..., 1] * dt * dt
        return out

    def step_jacobians(self, s, u, dt):
        """(A, B) with A = d step/d s (..., dim, dim), B = d step/d u
        (..., dim, rank)."""
        s = np.asarray(s, dtype=float)
        u = np.asarray(u, dtype=float)
        lead = np.broadcast_shapes(s.shape[:-1], u.shape[:-1])
        A = np.zeros(lead + (self.dim, self.dim))
        idx = np.arange(self.dim)
        A[..., idx, idx] = 1.0
        B = np.zeros(lead + (self.dim, self.rank))
        if self.kind == FLAT_TORUS:
            B[..., idx, idx] = dt
            return A, B
        A[..., 2, 0] = u[..., 1] * dt
        B[..., 0, 0] = dt
        B[..., 1, 1] = dt
        B[..., 2, 0] = 0.5 * u[..., 1] * dt * dt
        B[..., 2, 1] = s[..., 0] * dt + 0.5 * u[..., 0] * dt * dt
        return A, B


class Potential:
    """Finite trigonometric sum U(x) = sum_j amp_j cos(2 pi k_j . x + phase_j).

    Wave vectors are integer, so U is identification-invariant by
    construction.  On the Heisenberg model the terms depend on (x, y)
    only (k_j has length 2).
    """

    def __init__(self, space: ModelSpace, terms, fine_grid=None):
        self.space = space
        self.coords_dim = 2 if space.kind == HEISENBERG else space.dim
        self.wave_vectors = np.zeros((len(terms), self.coords_dim))
        self.amplitudes = np.zeros(len(terms))
        self.phases = np.zeros(len(terms))
        for j, (k, amp, phase) in enumerate(terms):
            k = np.asarray(k, dtype=float)
            if k.shape != (self.coords_dim,):
                raise InvalidInputError(
                    f"wave vector {k} must have length {self.coords_dim}")
            if not np.allclose(k, np.round(k)):
                raise InvalidInputError("wave vectors must be integer")
            self.wave_vectors[j] = np.round(k)
            self.amplitudes[j] = amp
            self.phases[j] = phase
        if fine_grid is None:
            fine_grid = {1: 4096, 2: 768, 3: 96}[self.coords_dim]
        axes = [np.arange(fine_grid) / fine_grid] * self.coords_dim
        mesh = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1).reshape(-1, self.coords_dim)
        vals = self._value_coords(mesh)
        self.max_value = float(vals.max())
        self.min_value = float(vals.min())

    def _value_coords(self, c):
        ph = 2.0 * np.pi * (c @ self.wave_vectors.T) + self.phases
        return np.cos(ph) @ self.amplitudes

    def value(self, x):
        x = np.asarray(x, dtype=float)
        return self._value_coords(x[..., : self.coords_dim])

    def gradient(self, x):
        """dU/dx in chart coordinates, shape (..., dim); zero in the
        Heisenberg vertical coordinate."""
        x = np.asarray(x, dtype=float)
        c = x[..., : self.coords_dim]
        ph = 2.0 * np.pi * (c @ self.wave_vectors.T) + self.phases
        coef = -np.sin(ph) * self.amplitudes * 2.0 * np.pi  # (..., nterms)
        g = coef @ self.wave_vectors  # (..., coords_dim)
        if self.coords_dim == self.space.dim:
            return g
        out = np.zeros(x.shape)
        out[..., : self.coords_dim] = g
        return out

    @property
    def is_zero(self):
        return np.all(self.amplitudes == 0.0)


@dataclass
class Lagrangian:
    """Mechanical Lagrangian L(x,u) = 0.5|u|^2 - U(x) - w.u in frame
    coordinates (u in R^rank, |u| the sub-Riemannian speed).

    `one_form` holds the constant coefficients of the closed one-form
    against the coordinate forms (flat torus: dx_i; Heisenberg: dx, dy),
    which coincide with its frame components for both models.
    """

    space: ModelSpace
    potential: Potential
    one_form: np.ndarray = None

    def __post_init__(self):
        if self.one_form is None:
            self.one_form = np.zeros(self.space.rank)
        self.one_form = np.asarray(self.one_form, dtype=float)
        if self.one_form.shape != (self.space.rank,):
            raise InvalidInputError(
                f"one-form needs {self.space.rank} coefficients")

    def value(self, x, u):
        u = np.asarray(u, dtype=float)
        kin = 0.5 * np.einsum("...m,...m->...", u, u)
        return kin - self.potential.value(x) - u @ self.one_form

    # -- structural constants --------------------------------------------

    @property
    def omega_norm(self):
        return float(np.linalg.norm(self.one_form))

    def bound_A(self, R):
        """A(R) = sup{L(x,u) : |u| <= R} = R^2/2 + |w| R - min U."""
        return 0.5 * R * R + self.omega_norm * R - self.potential.min_value

    def bound_C(self, K):
        """Superlinearity constant with L >= K|u| + C(K):
        C(K) = -max U - (K + |w|)^2 / 2."""
        return -self.potential.max_value - 0.5 * (K + self.omega_norm) ** 2

    @property
    def min_value(self):
        """min over (x,u) of L = -max U - |w|^2/2 (attained at u = w)."""
        return -self.potential.max_value - 0.5 * self.omega_norm**2

    def with_one_form(self, coefficients):
        return Lagrangian(self.space, self.potential, np.asarray(coefficients, float))


@dataclass
class HorizontalPath:
    """Discrete horizontal curve: piecewise-constant frame controls on a
    uniform time grid, states reproduced by the exact one-step flow."""

    space: ModelSpace
    t0: float
    t1: float
    controls: np.ndarray          # (N, rank)
    states: np.ndarray            # (N+1, dim), canonicalized
    lift: np.ndarray              # (N+1, dim), raw chart states
    closed_flag: bool = False

    @property
    def num_steps(self):
        return self.controls.shape[0]

    @property
    def dt(self):
        return (self.t1 - self.t0) / self.num_steps

    def times(self):
        return self.t0 + self.dt * np.arange(self.num_steps + 1)

    def length(self):
        """Sub-Riemannian length sum |u_k| dt."""
        return float(np.linalg.norm(self.controls, axis=1).sum() * self.dt)

    def to_csv(self):
        """CSV text with header t,x1..xd,u1..um; the control columns hold
        the control active on [t_k, t_k+1) and are empty on the last row."""
        d, m = self.space.dim, self.space.rank
        cols = ["t"] + [f"x{i+1}" for i in range(d)] + [f"u{j+1}" for j in range(m)]
        buf = io.StringIO()
        buf.write(",".join(cols) + "\n")
        ts = self.times()
        for k in range(self.num_steps + 1):
            row = [format(ts[k], ".17g")]
            row += [format(v, ".17g") for v in self.states[k]]
            if k < self.num_steps:
                row += [format(v, ".17g") for v in self.controls[k]]
            else:
                row += [""] * m
            buf.write(",".join(row) + "\n")
        return buf.getvalue()


# -- operations ----------------------------------------------------------

def canonicalize(space: ModelSpace, raw):
    return space.canonicalize(raw)


def integrate(space: ModelSpace, x0, controls, dt, t0=0.0):
    """Integrate xdot = F(x) u with piecewise-constant controls.

    Returns a HorizontalPath whose `states` are canonical and whose
    `lift` is the raw (unwrapped) chart trajectory.  Exact for both
    models (constant resp. polynomial one-step flow).
    """
    if dt <= 0:
        raise InvalidInputError("dt must be positive")
    controls = np.atleast_2d(np.asarray(controls, dtype=float))
    if not np.all(np.isfinite(controls)):
        raise InvalidInputError("non-finite controls")
    x0 = space.canonicalize(np.asarray(x0, dtype=float))
    N = controls.shape[0]
    lift = np.zeros((N + 1, space.dim))
    lift[0] = x0
    for k in range(N):
        lift[k + 1] = space.step(lift[k], controls[k], dt)
    states = space.canonicalize(lift)
    closed = bool(np.allclose(states[0], states[-1], atol=1e-12))
    return HorizontalPath(space, t0, t0 + N * dt, controls, states, lift, closed)


def action(lagr: Lagrangian, path: HorizontalPath, lam=0.0):
    """Discounted action by left-endpoint quadrature:
    sum_k exp(lam t_k) L(x_k, u_k) dt."""
    ts = path.times()[:-1]
    lvals = lagr.value(path.states[:-1], path.controls)
    w = np.exp(lam * ts) if lam != 0.0 else 1.0
    return float(np.sum(w * lvals) * path.dt)


def energy(lagr: Lagrangian, x, u):
    """E = dL/du . u - L = 0.5|u|^2 + U(x); the one-form contribution
    cancels identically for a fiberwise-linear term."""
    u = np.asarray(u, dtype=float)
    return 0.5 * np.einsum("...m,...m->...", u, u) + lagr.potential.value(x)


def hamiltonian(lagr: Lagrangian, x, p):
    """H(x,p) = max_u p(F(x)u) - L(x,u) = 0.5|F(x)^T p + w|^2 + U(x)."""
    x = np.asarray(x, dtype=float)
    p = np.asarray(p, dtype=float)
    F = lagr.space.frame(x)
    q = np.einsum("...dm,...d->...m", F, p) + lagr.one_form
    return 0.5 * np.einsum("...m,...m->...", q, q) + lagr.potential.value(x)


# -- JSON configuration --------------------------------------------------

def space_from_config(cfg) -> ModelSpace:
    return ModelSpace(cfg["kind"], int(cfg["dim"]))


def lagrangian_from_config(space_cfg, potential_cfg, one_form_cfg=None) -> Lagrangian:
    space = space_from_config(space_cfg)
    terms = [
        (t["wave_vector"], float(t["amplitude"]), float(t.get("phase", 0.0)))
        for t in potential_cfg.get("terms", [])
    ]
    pot = Potential(space, terms)
    coeffs = None
    if one_form_cfg is not None:
        coeffs = one_form_cfg.get("coefficients")
    return Lagrangian(space, pot, coeffs)
