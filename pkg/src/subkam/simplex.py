"""Self-contained two-phase revised simplex with Bland's anti-cycling
rule, for dense equality-form problems

    min c.x   s.t.  A x = b,  x >= 0.

Designed for desk-scale instances (hundreds of rows, tens of thousands
of columns): the basis inverse is kept explicitly and refreshed
periodically; the pivot column scan is a dense mat-vec.  Pivoting is
pure Bland (entering: smallest eligible index; leaving: ratio test with
smallest basic variable index on ties), so the pivot sequence is fully
deterministic and cycling-free.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


class LPError(RuntimeError):
    pass


class LPInfeasibleError(LPError):
    pass


class LPUnboundedError(LPError):
    pass


@dataclass
class SimplexResult:
    x: np.ndarray
    objective: float
    dual: np.ndarray
    reduced_costs: np.ndarray
    basis: np.ndarray
    iterations: int


def _bland_iterate(A, b, c, basis, binv, tol, max_iters, allowed):
    """Run Bland pivoting to optimality on the current basis.  `allowed`
    masks columns eligible to enter.  Mutates basis/binv; returns
    (xB, iterations)."""
    m, n = A.shape
    xB = binv @ b
    it = 0
    refresh = 0
    while it < max_iters:
        it += 1
        y = basis_cost(c, basis) @ binv
        r = c - y @ A
        elig = np.flatnonzero((r < -tol) & allowed)
        if elig.size == 0:
            return xB, it
        j = int(elig[0])  # Bland: smallest index
        d = binv @ A[:, j]
        pos = d > tol
        if not pos.any():
            raise LPUnboundedError("unbounded direction in simplex")
        ratios = np.full(m, np.inf)
        ratios[pos] = xB[pos] / d[pos]
        rmin = ratios.min()
        ties = np.flatnonzero(ratios <= rmin + tol * (1.0 + abs(rmin)))
        i = int(ties[np.argmin(basis[ties])])  # Bland: smallest basic index
        # pivot: basis[i] leaves, j enters
        basis[i] = j
        piv = d[i]
        binv[i] /= piv
        others = np.arange(m) != i
        binv[others] -= np.outer(d[others], binv[i])
        xB = xB - rmin * d
        xB[i] = rmin
        refresh += 1
        if refresh >= 128:
            refresh = 0
            binv[:] = np.linalg.inv(A[:, basis])
            xB = binv @ b
        np.maximum(xB, 0.0, out=xB)
    raise LPError(f"simplex exceeded {max_iters} iterations")


def basis_cost(c, basis):
    return c[basis]


def solve_standard_form(A, b, c, tol=1e-9, max_iters=200_000) -> SimplexResult:
    """Two-phase revised simplex.  Raises LPInfeasibleError /
    LPUnboundedError; redundant equality rows are tolerated (their
    artificial stays basic at zero)."""
    A = np.asarray(A, dtype=float)
    b = np.asarray(b, dtype=float).copy()
    c = np.asarray(c, dtype=float)
    m, n = A.shape
    A = A.copy()
    flip = b < 0
    A[flip] *= -1.0
    b[flip] *= -1.0

    # phase 1: artificials with unit cost
    A1 = np.hstack([A, np.eye(m)])
    c1 = np.concatenate([np.zeros(n), np.ones(m)])
    basis = np.arange(n, n + m)
    binv = np.eye(m)
    allowed = np.ones(n + m, dtype=bool)
    xB, it1 = _bland_iterate(A1, b, c1, basis, binv, tol, max_iters, allowed)
    phase1_obj = float(c1[basis] @ xB)
    if phase1_obj > 1e-7:
        raise LPInfeasibleError(f"phase-1 objective {phase1_obj:.3e} > 0")

    # drive artificials out of the basis where possible
    for i in range(m):
        if basis[i] >= n:
            row = binv[i] @ A1[:, :n]
            cand = np.flatnonzero(np.abs(row) > 1e-8)
            if cand.size:
                j = int(cand[0])
                d = binv @ A1[:, j]
                basis[i] = j
                piv = d[i]
                binv[i] /= piv
                others = np.arange(m) != i
                binv[others] -= np.outer(d[others], binv[i])
            # else: redundant row; artificial stays basic at level 0

    # phase 2: artificials may not re-enter
    c2 = np.concatenate([c, np.zeros(m)])
    allowed = np.concatenate([np.ones(n, dtype=bool), np.zeros(m, dtype=bool)])
    xB, it2 = _bland_iterate(A1, b, c2, basis, binv, tol, max_iters, allowed)

    x = np.zeros(n + m)
    x[basis] = xB
    if np.any(x[n:] > 1e-7):
        raise LPInfeasibleError("artificial variable positive after phase 2")
    y = c2[basis] @ binv
    r = c2 - y @ A1
    y_orig = np.where(flip, -y, y)  # undo the phase-1 row sign flips
    return SimplexResult(x[:n], float(c @ x[:n]), y_orig, r[:n], basis.copy(), it1 + it2)
