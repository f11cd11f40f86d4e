import numpy as np
import pytest

from subkam.geometry import Lagrangian, Potential
from subkam.semigroup import (
    GridFunction,
    GridMismatchError,
    discounted_bounds_report,
    kernel_cap_report,
    lipschitz_report,
    lo_long_time,
    lo_step,
    lo_step_discounted,
    lo_step_values,
    solve_critical,
    solve_discounted,
    vanishing_discount,
)
from subkam.tonelli import MinimizeOptions, build_kernel
from conftest import bump_lagrangian, free_lagrangian

OPTS = MinimizeOptions(seed=0, multistarts=1)


@pytest.fixture(scope="module")
def free_kernel(request):
    from subkam.geometry import FLAT_TORUS, ModelSpace

    space = ModelSpace(FLAT_TORUS, 1)
    return build_kernel(free_lagrangian(space), 32, 1.0 / 16, opts=OPTS)


@pytest.fixture(scope="module")
def bump_kernel():
    from subkam.geometry import FLAT_TORUS, ModelSpace

    space = ModelSpace(FLAT_TORUS, 1)
    return build_kernel(bump_lagrangian(space), 32, 1.0 / 16, opts=OPTS)


def bump1():
    from subkam.geometry import FLAT_TORUS, ModelSpace

    return bump_lagrangian(ModelSpace(FLAT_TORUS, 1))


class TestLoStep:
    def test_free_constant_fixed(self, free_kernel):
        u = GridFunction(free_kernel.grid, np.full(free_kernel.grid.count, 3.25))
        out = lo_step(free_kernel, u)
        np.testing.assert_allclose(out.values, 3.25, atol=1e-12)

    def test_constant_shift_exact(self, bump_kernel, rng):
        # algebraically exact; float addition reassociation leaves 1 ulp
        u = GridFunction(bump_kernel.grid, rng.normal(size=bump_kernel.grid.count))
        a = lo_step(bump_kernel, GridFunction(bump_kernel.grid, u.values + 5.0))
        b = lo_step(bump_kernel, u)
        np.testing.assert_allclose(a.values, b.values + 5.0, rtol=0, atol=1e-13)

    def test_monotone_and_nonexpansive_exact(self, bump_kernel, rng):
        u = rng.normal(size=bump_kernel.grid.count)
        w = u + np.abs(rng.normal(size=u.size))
        lu = lo_step_values(bump_kernel, u)
        lw = lo_step_values(bump_kernel, w)
        assert np.all(lu <= lw)
        assert np.abs(lu - lw).max() <= np.abs(u - w).max()

    def test_zero_function_bound(self, bump_kernel):
        # (L u)(x) <= -delta U(x) with equality at potential maxima
        lagr = bump1()
        out = lo_step_values(bump_kernel, np.zeros(bump_kernel.grid.count))
        uvals = lagr.potential.value(bump_kernel.grid.nodes)
        assert np.all(out <= -bump_kernel.delta * uvals + 1e-12)
        brute = np.full(bump_kernel.grid.count, np.inf)
        for t, s, cst in zip(bump_kernel.tgt, bump_kernel.src, bump_kernel.cost):
            brute[t] = min(brute[t], cst)
        np.testing.assert_array_equal(out, brute)

    def test_grid_mismatch(self, bump_kernel):
        with pytest.raises(GridMismatchError):
            lo_step_values(bump_kernel, np.zeros(7))

    def test_semigroup_law(self):
        # 2k steps of the delta kernel vs k steps of the 2 delta kernel
        lagr = bump1()
        kd = build_kernel(lagr, 32, 1.0 / 16, opts=OPTS)
        k2d = build_kernel(lagr, 32, 2.0 / 16, opts=OPTS)
        rng = np.random.default_rng(1)
        u = np.cos(2 * np.pi * kd.grid.nodes[:, 0]) * 0.3
        a = lo_step_values(kd, lo_step_values(kd, u))
        b = lo_step_values(k2d, u)
        # composition through off-grid waypoints costs O(h^2 / delta)
        tol = 4 * kd.grid.h**2 / kd.delta + 1e-6
        assert np.abs(a - b).max() <= tol
        # one-sided: the chained min is an upper bound up to solver slack
        assert np.all(b <= a + 1e-6)


class TestDiscounted:
    def test_contraction_bound(self, rng):
        lagr = bump1()
        lam = 0.3
        k = build_kernel(lagr, 32, 1.0 / 16, lam=lam, opts=OPTS)
        a = rng.normal() * np.ones(k.grid.count)
        b = rng.normal() * np.ones(k.grid.count)
        fac = np.exp(-lam * k.delta)
        la = lo_step_values(k, a, factor=fac)
        lb = lo_step_values(k, b, factor=fac)
        assert np.abs(la - lb).max() <= fac * np.abs(a - b).max() + 1e-14

    def test_free_zero_fixed_point(self):
        from subkam.geometry import FLAT_TORUS, ModelSpace

        lagr = free_lagrangian(ModelSpace(FLAT_TORUS, 1))
        lam = 0.5
        k = build_kernel(lagr, 32, 1.0 / 16, lam=lam, opts=OPTS)
        res = solve_discounted(k, lam, tol=1e-10)
        assert np.abs(res.u.values).max() < 1e-8

    def test_bounds_nodewise(self):
        lagr = bump1()
        for lam in (0.4, 0.1):
            k = build_kernel(lagr, 32, 1.0 / 16, lam=lam, opts=OPTS)
            res = solve_discounted(k, lam, tol=1e-9)
            rep = discounted_bounds_report(res, lagr)
            assert rep["lower_slack"] >= -1e-6
            assert rep["upper_slack"] >= -1e-6

    def test_lambda_u_approaches_minus_max_u(self):
        lagr = bump1()
        gaps = []
        for lam in (0.4, 0.2, 0.1, 0.05):
            k = build_kernel(lagr, 32, 1.0 / 16, lam=lam, opts=OPTS)
            res = solve_discounted(k, lam, tol=1e-9)
            gaps.append(np.abs(lam * res.u.values + lagr.potential.max_value).max())
        assert gaps[-1] < 0.15
        assert gaps[-1] <= gaps[0]

    def test_lipschitz_uniform(self):
        lagr = bump1()
        for lam in (0.4, 0.05):
            k = build_kernel(lagr, 32, 1.0 / 16, lam=lam, opts=OPTS)
            res = solve_discounted(k, lam, tol=1e-9)
            rep = lipschitz_report(res.u.values, k.grid, lagr, n_pairs=200, seed=0)
            assert rep["worst_violation"] <= 1e-9

    def test_wrong_lambda_rejected(self, bump_kernel):
        with pytest.raises(Exception):
            solve_discounted(bump_kernel, 0.3)

    def test_degenerate_self_only_fixed_point(self):
        # nodes coupled only to themselves: scalar fixed point
        # u = cost / (1 - exp(-lam delta)) nodewise
        from subkam.geometry import FLAT_TORUS, ModelSpace
        from subkam.grids import SpatialGrid
        from subkam.tonelli import KernelTable

        space = ModelSpace(FLAT_TORUS, 1)
        grid = SpatialGrid(space, 2)
        lam, delta = 0.4, 0.25
        cost = np.array([-0.11, 0.07])
        k = KernelTable(grid, delta, lam, 1.0,
                        tgt=np.array([0, 1]), src=np.array([0, 1]),
                        dcell=np.zeros((2, 1), dtype=np.int16), cost=cost)
        res = solve_discounted(k, lam, tol=1e-12)
        np.testing.assert_allclose(res.u.values, cost / (1 - np.exp(-lam * delta)),
                                   atol=1e-10)


class TestCritical:
    def test_free_zero(self, free_kernel):
        res = solve_critical(free_kernel, tol=1e-10)
        assert res.converged
        assert abs(res.c_estimate) < 1e-9
        assert np.abs(res.u.values).max() < 1e-8
        assert res.fixed_point_residual < 1e-9

    def test_mechanical_c_equals_max_u(self, bump_kernel):
        res = solve_critical(bump_kernel, tol=1e-10)
        assert res.converged
        np.testing.assert_allclose(res.c_estimate, 1.0, rtol=2e-2)
        assert res.u.values[0] == 0.0  # anchored
        # domination certificate on every kernel pair
        w = res.u.values
        slack = (w[bump_kernel.tgt] - w[bump_kernel.src] - bump_kernel.cost
                 - res.c_estimate * bump_kernel.delta)
        assert slack.max() <= 5 * res.fixed_point_residual + 1e-9

    def test_anchor_insensitive(self, bump_kernel):
        cs = [solve_critical(bump_kernel, tol=1e-10, anchor=a).c_estimate
              for a in (0, 7, 19)]
        assert max(cs) - min(cs) <= 1e-8

    def test_one_form_free_motion(self):
        # c(L - c1 dx) = c1^2 / 2 for free motion on the circle
        from subkam.geometry import FLAT_TORUS, ModelSpace

        space = ModelSpace(FLAT_TORUS, 1)
        for c1 in (0.5, 1.0):
            lagr = Lagrangian(space, Potential(space, []), [c1])
            k = build_kernel(lagr, 64, 1.0 / 16, opts=OPTS)
            res = solve_critical(k, tol=1e-10)
            np.testing.assert_allclose(res.c_estimate, 0.5 * c1**2, rtol=3e-2)

    def test_cap_inactive(self, bump_kernel):
        res = solve_critical(bump_kernel, tol=1e-10)
        rep = kernel_cap_report(bump_kernel, res.u.values)
        assert rep["max_speed_used"] <= 0.95 * rep["v_max"]

    def test_boundedness_of_normalized_iterates(self, bump_kernel):
        # no-blowup certificate: normalized iterates stay uniformly bounded
        u = np.zeros(bump_kernel.grid.count)
        bound = 0.0
        for _ in range(200):
            u = lo_step_values(bump_kernel, u)
            w = u - u[0]
            bound = max(bound, np.abs(w).max())
        assert bound < 10.0


class TestLongTime:
    def test_fixed_point_stays(self, bump_kernel):
        res = solve_critical(bump_kernel, tol=1e-10)
        rec = lo_long_time(res.u, bump_kernel, res.c_estimate, T_max=2.0)
        assert rec.sup_changes.max() <= 5 * res.fixed_point_residual + 1e-9

    def test_shift_equivariance(self, bump_kernel, rng):
        res = solve_critical(bump_kernel, tol=1e-10)
        u0 = GridFunction(bump_kernel.grid, res.u.values + 1.7)
        rec = lo_long_time(u0, bump_kernel, res.c_estimate, T_max=1.0)
        np.testing.assert_allclose(rec.final.values, res.u.values + 1.7, atol=1e-7)

    def test_monotone_from_dominated(self, bump_kernel):
        res = solve_critical(bump_kernel, tol=1e-10)
        # a dominated function: u - const is still dominated
        u0 = GridFunction(bump_kernel.grid, res.u.values - 0.5)
        rec = lo_long_time(u0, bump_kernel, res.c_estimate, T_max=1.0)
        assert rec.nondecreasing


class TestVanishingDiscount:
    def test_free_shifted_zero(self):
        from subkam.geometry import FLAT_TORUS, ModelSpace

        lagr = free_lagrangian(ModelSpace(FLAT_TORUS, 1))
        lams = [0.4, 0.2]
        ks = {lam: build_kernel(lagr, 32, 1.0 / 16, lam=lam, opts=OPTS) for lam in lams}
        rec = vanishing_discount(ks, c=0.0, tol=1e-9)
        for s in rec.shifted:
            assert np.abs(s).max() < 1e-7
