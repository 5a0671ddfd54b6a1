"""
Tests for the local rate solvers, occupancies and the path functional.
"""

import dataclasses
import itertools
import math
import sys
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

# Add project root to path
sys.path.insert(0, str(Path(__file__).parent.parent))

import numpy as np
import pytest
import ratefn.rate_solver as rate_solver
from ratefn.local_model import lln_drift, localize, unit_tilt
from ratefn.model import JacksonSpec, ModelError
from ratefn.rate_solver import (
    ConvergenceError,
    PiecewisePath,
    ell,
    inner_dual_solve,
    jensen_gap,
    local_rate,
    path_rate,
    path_rate_segments,
    point_rate,
    rbar_from,
    rho_from_tau,
    tau_for_tilt,
    tau_from_rho,
    tilt_solution,
)
from ratefn.simplex import SimplexResult


def mm1(a, sigma=1.0):
    return JacksonSpec(a=(a,), sigma=(sigma,), routing=((1.0, 0.0),), name=f"mm1_{a}")


class TestEll:
    """Per-direction tilting cost."""

    def test_zero_at_one(self):
        assert ell(1.0) == 0.0

    def test_zero_argument(self):
        assert ell(0.0) == 1.0

    def test_two(self):
        assert ell(2.0) == pytest.approx(2 * math.log(2) - 1)

    def test_negative(self):
        assert ell(-0.1) == math.inf


class TestInnerDual:
    """Dual solve for fixed weights."""

    WEIGHTS = {(1,): 4.0, (-1,): 1.0}

    def test_at_weighted_drift(self):
        sol = inner_dual_solve(self.WEIGHTS, [3.0])
        assert sol.value == pytest.approx(0.0, abs=1e-12)
        assert sol.c[(1,)] == pytest.approx(1.0)
        assert sol.status == "zero"

    def test_zero_velocity(self):
        sol = inner_dual_solve(self.WEIGHTS, [0.0])
        assert sol.value == pytest.approx(1.0, abs=1e-10)
        assert sol.c[(1,)] == pytest.approx(0.5)
        assert sol.c[(-1,)] == pytest.approx(2.0)

    def test_drain(self):
        sol = inner_dual_solve(self.WEIGHTS, [-3.0])
        assert sol.value == pytest.approx(3 * math.log(4), abs=1e-10)
        assert sol.c[(1,)] == pytest.approx(0.25)

    def test_outside_cone(self):
        """Only upward jumps cannot produce a downward velocity."""
        sol = inner_dual_solve({(1,): 2.0, (-1,): 0.0}, [-1.0])
        assert sol.status == "infinite"
        assert sol.value == math.inf

    def test_relative_boundary(self):
        """Zero velocity with only upward jumps costs the full weight and tilts to 0."""
        sol = inner_dual_solve({(1,): 2.0, (-1,): 0.0}, [0.0])
        assert sol.value == pytest.approx(2.0, abs=1e-10)
        assert sol.c[(1,)] == pytest.approx(0.0, abs=1e-12)

    def test_negative_weight(self):
        with pytest.raises(ModelError):
            inner_dual_solve({(1,): -1.0}, [0.0])

    def test_face_mask_is_a_fresh_copy(self, j2_origin):
        V = j2_origin.direction_matrix.astype(float)
        first = rate_solver._minimal_face(V, np.array([0.3, 0.7]))
        expected = first.copy()
        first[:] = False
        assert np.array_equal(rate_solver._minimal_face(V, np.array([0.3, 0.7])), expected)
        assert expected.all()

    def test_face_outside_cone(self):
        V = np.array([[1.0, 0.0], [0.0, 1.0]])
        assert rate_solver._minimal_face(V, np.array([-1.0, 0.0])) is None

    def test_face_lookups_across_threads(self, j2_origin):
        V = j2_origin.direction_matrix.astype(float)
        targets = [np.array([np.cos(a), np.sin(a)]) for a in np.linspace(0.0, 6.0, 64)]
        serial = [rate_solver._minimal_face(V, b).tolist() for b in targets]
        with ThreadPoolExecutor(max_workers=8) as pool:
            parallel = list(pool.map(lambda b: rate_solver._minimal_face(V, b).tolist(), targets))
        assert parallel == serial


class TestJackson:
    """Jackson local rates."""

    @pytest.mark.parametrize("a", [4.0, 9.0, 2.0])
    def test_mm1_identity(self, a):
        """Overloaded M/M/1 held at zero costs (sqrt(a) - sqrt(sigma))^2."""
        sol = local_rate(mm1(a), [0], [0.0])
        assert sol.value == pytest.approx((math.sqrt(a) - 1.0) ** 2, abs=1e-8)

    def test_j1_solution(self, j1):
        sol = local_rate(j1, [0], [0.0])
        assert sol.value == pytest.approx(1.0, abs=1e-8)
        assert sol.tau == pytest.approx([1.0])
        assert sol.c[(1,)] == pytest.approx(0.5, abs=1e-8)
        assert sol.c[(-1,)] == pytest.approx(2.0, abs=1e-8)

    def test_j1s_stable(self, j1s):
        sol = local_rate(j1s, [0], [0.0])
        assert sol.value == pytest.approx(0.0, abs=1e-10)
        assert sol.tau == pytest.approx([0.25], abs=1e-6)
        assert sol.c[(1,)] == pytest.approx(1.0, abs=1e-6)

    def test_j2u_origin(self, j2u):
        sol = local_rate(j2u, [0, 1], [0.0, 0.0])
        assert sol.value == pytest.approx(1.0, abs=1e-6)
        assert sol.tau == pytest.approx([1.0, 1.0], abs=1e-6)

    def test_j2_stable_origin(self, j2):
        sol = local_rate(j2, [0, 1], [0.0, 0.0])
        assert sol.value == pytest.approx(0.0, abs=1e-10)
        assert sol.tau == pytest.approx([0.6, 0.6], abs=1e-4)

    def test_velocity_off_facet(self, j1):
        sol = local_rate(j1, [0], [1.0])
        assert sol.status == "infinite"

    def test_solution_satisfies_constraint(self, j2u):
        """sum_v rbar_v c_v v reproduces beta."""
        model = localize(j2u, [1])
        beta = np.array([0.4, 0.0])
        sol = local_rate(j2u, [1], beta, model)
        rbar = np.array([sol.rbar[v] for v in model.directions])
        c = np.array([sol.c[v] for v in model.directions])
        assert (rbar * c) @ model.direction_matrix == pytest.approx(beta, abs=1e-8)

    def test_beta_shape(self, j2):
        with pytest.raises(ModelError):
            local_rate(j2, [], [0.0])


class TestProcessorSharing:
    """Processor-sharing local rates."""

    def test_interior_drift(self, p2):
        sol = local_rate(p2, [], [-0.5, -0.5])
        assert sol.value == pytest.approx(0.0, abs=1e-10)

    def test_p2u_origin(self, p2u):
        sol = local_rate(p2u, [0, 1], [0.0, 0.0])
        expected = 2 * (math.sqrt(2.0) - math.sqrt(1.5)) ** 2
        assert sol.value == pytest.approx(expected, abs=1e-6)
        assert sol.occupancy[0] == pytest.approx(1.0, abs=1e-6)
        assert sol.tau == pytest.approx([1.5, 1.5], abs=1e-5)

    def test_one_class_empty(self, p2):
        sol = local_rate(p2, [0], [0.0, -0.5])
        assert math.isfinite(sol.value)
        assert sol.value >= 0.0

    def test_stalled_occupancy_descent_raises(self, p2u, monkeypatch):
        def stalled(fun, grad, x0, **kwargs):
            return SimplexResult(np.asarray(x0, dtype=float), fun(x0), 3, False, 0.4)

        monkeypatch.setattr(rate_solver, "minimize_on_simplex", stalled)
        with pytest.raises(ConvergenceError, match="did not converge"):
            local_rate(p2u, [0, 1], [0.0, 0.0])

    def test_closed_form_disagreement_raises(self, p2u, monkeypatch):
        solve = rate_solver._solve_dual

        def shifted(V, w, beta):
            res = solve(V, w, beta)
            return dataclasses.replace(res, value=res.value + 1e-3)

        monkeypatch.setattr(rate_solver, "_solve_dual", shifted)
        with pytest.raises(ConvergenceError, match="disagree"):
            local_rate(p2u, [0, 1], [0.0, 0.0])


class TestZeroOfRate:
    """The untilted interior drift costs nothing."""

    @pytest.mark.parametrize("name", ["j1", "j1s", "j2", "j2u", "j3", "p2", "p2u"])
    def test_zero_at_lln_drift(self, name, request):
        spec = request.getfixturevalue(name)
        model = localize(spec, ())
        beta0 = lln_drift(model, unit_tilt(model))
        assert local_rate(spec, (), beta0, model).value == pytest.approx(0.0, abs=1e-10)


class TestConvexity:
    """Midpoint convexity on the interior and on a boundary facet."""

    @staticmethod
    def midpoint_violations(spec, K, count, seed):
        model = localize(spec, K)
        rng = np.random.default_rng(seed)
        violations = []
        for _ in range(count):
            b1, b2 = rng.uniform(-1.0, 1.0, size=(2, spec.N))
            for k in K:
                b1[k] = b2[k] = 0.0
            values = [local_rate(spec, K, b, model).value for b in (b1, b2, 0.5 * (b1 + b2))]
            if values[2] > 0.5 * (values[0] + values[1]) + 1e-8:
                violations.append((b1.tolist(), b2.tolist(), values))
        return violations

    @pytest.mark.parametrize("name,K", [("j2", ()), ("j2u", (0,)), ("p2", ()), ("p2u", (1,))])
    def test_midpoints(self, name, K, request):
        assert self.midpoint_violations(request.getfixturevalue(name), K, 10, 7) == []

    @pytest.mark.slow
    @pytest.mark.parametrize("name", ["j1", "j1s", "j2", "j2u", "j3", "p2", "p2u"])
    def test_midpoints_every_facet(self, name, request):
        """100 random midpoints on every facet of every fixture."""
        spec = request.getfixturevalue(name)
        for size in range(spec.N + 1):
            for K in itertools.combinations(range(spec.N), size):
                assert self.midpoint_violations(spec, K, 100, 31 + size) == [], K


class TestOccupancy:
    """Product-form occupancies and averaged rates."""

    def test_product_form(self):
        rho = rho_from_tau([0.6, 0.6])
        assert rho == pytest.approx([0.36, 0.24, 0.24, 0.16])

    def test_all_busy(self):
        assert rho_from_tau([1.0, 1.0])[0] == pytest.approx(1.0)

    def test_all_idle(self):
        assert rho_from_tau([0.0, 0.0])[-1] == pytest.approx(1.0)

    def test_tau_round_trip(self):
        rho = rho_from_tau([0.3, 0.8])
        assert tau_from_rho(rho, [0, 1], 2) == pytest.approx([0.3, 0.8])

    def test_out_of_range(self):
        with pytest.raises(ModelError):
            rho_from_tau([1.2])

    def test_interior_occupancy(self, p2):
        model = localize(p2, [0])
        assert rbar_from(model, np.array([1.0, 0.0])) == pytest.approx(model.interior_rates)

    def test_ps_mixture(self, p2):
        model = localize(p2, [0])
        rbar = rbar_from(model, np.array([0.5, 0.5]))
        assert rbar[model.direction_index((0, -1))] == pytest.approx(2.25)

    def test_arrivals_unchanged(self, j2_origin):
        rbar = rbar_from(j2_origin, rho_from_tau([0.2, 0.9]))
        for v in [(1, 0), (0, 1)]:
            assert rbar[j2_origin.direction_index(v)] == pytest.approx(0.3)

    def test_tau_for_unit_tilt(self, j2_origin):
        assert tau_for_tilt(j2_origin, unit_tilt(j2_origin), [0.0, 0.0]) == pytest.approx([0.6, 0.6])

    def test_tilt_solution_velocity(self, j2_origin):
        sol = tilt_solution(j2_origin, unit_tilt(j2_origin), rho_from_tau([0.6, 0.6]))
        assert sol.beta == pytest.approx([0.0, 0.0], abs=1e-12)
        assert sol.value == pytest.approx(0.0)


class TestPointRate:
    """Rate at a point of the orthant."""

    def test_interior(self, j1):
        assert point_rate(j1, [2.0], [-3.0]) == pytest.approx(3 * math.log(4), abs=1e-10)

    def test_boundary_pushing_out(self, j1):
        assert point_rate(j1, [0.0], [1.0]) == math.inf

    def test_boundary(self, j1):
        assert point_rate(j1, [0.0], [0.0]) == pytest.approx(1.0, abs=1e-8)

    def test_outside_orthant(self, j1):
        with pytest.raises(ModelError):
            point_rate(j1, [-1.0], [0.0])


class TestPathRate:
    """Integral of the local rate along piecewise-linear paths."""

    def test_lln_path_free(self, j1s):
        phi = PiecewisePath.from_pairs([[0.0, [4.0]], [1.0, [1.0]]])
        assert path_rate(j1s, phi) == pytest.approx(0.0, abs=1e-10)

    def test_kinked_drain(self, j1s):
        """Drain at speed 2 until empty, then stay: interior cost for half the time."""
        phi = PiecewisePath.from_pairs([[0.0, [1.0]], [0.5, [0.0]], [1.0, [0.0]]])
        x = math.sqrt(5.0) - 1.0
        interior = -2.0 * math.log(x) - (x - 1.0) - 4.0 * (1.0 / x - 1.0)
        assert path_rate(j1s, phi) == pytest.approx(0.5 * interior, abs=1e-6)
        assert path_rate(j1s, phi) == pytest.approx(0.052, abs=1e-3)

    def test_stay_at_origin(self, j1):
        phi = PiecewisePath.from_pairs([[0.0, [0.0]], [1.0, [0.0]]])
        assert path_rate(j1, phi) == pytest.approx(1.0, abs=1e-6)

    def test_segments(self, j1s):
        phi = PiecewisePath.from_pairs([[0.0, [1.0]], [0.5, [0.0]], [1.0, [0.0]]])
        segments = path_rate_segments(j1s, phi)
        assert [s.K for s in segments] == [(), (0,)]

    def test_leaves_orthant(self, j1):
        phi = PiecewisePath.from_pairs([[0.0, [0.0]], [1.0, [-1.0]]])
        with pytest.raises(ModelError):
            path_rate(j1, phi)

    def test_bad_breakpoints(self):
        with pytest.raises(ModelError):
            PiecewisePath.from_pairs([[0.0, [0.0]], [0.7, [1.0]]])


class TestJensen:
    """Facet-wise versus averaged tilting costs."""

    def test_untilted(self, j2_origin):
        rho = rho_from_tau([0.6, 0.6])
        lhs, rhs = jensen_gap(j2_origin, rho, j2_origin.table.copy())
        assert lhs == pytest.approx(0.0, abs=1e-12)
        assert rhs == pytest.approx(0.0, abs=1e-12)

    def test_facet_independent_tilt(self, j2_origin):
        rng = np.random.default_rng(11)
        c = rng.uniform(0.2, 3.0, size=len(j2_origin.directions))
        rho = rng.dirichlet(np.ones(j2_origin.n_facets))
        lhs, rhs = jensen_gap(j2_origin, rho, j2_origin.table * c)
        assert lhs == pytest.approx(rhs, abs=1e-12)

    def test_random_feasible(self, j2_origin):
        rng = np.random.default_rng(3)
        for _ in range(200):
            rho = rng.dirichlet(np.ones(j2_origin.n_facets))
            u = j2_origin.table * rng.uniform(0.0, 4.0, size=j2_origin.table.shape)
            lhs, rhs = jensen_gap(j2_origin, rho, u)
            assert lhs >= rhs - 1e-12

    @pytest.mark.parametrize("name", ["j1", "j1s", "j2", "j2u", "j3", "p2", "p2u"])
    def test_every_fixture(self, name, request):
        """1000 random occupancies and facet-wise rates, plus the equality case."""
        spec = request.getfixturevalue(name)
        model = localize(spec, tuple(range(spec.N)))
        rng = np.random.default_rng(1000 + spec.N)
        for _ in range(1000):
            rho = rng.dirichlet(np.ones(model.n_facets))
            u = model.table * rng.uniform(0.0, 4.0, size=model.table.shape)
            lhs, rhs = jensen_gap(model, rho, u)
            assert lhs >= rhs - 1e-12 * (1.0 + abs(lhs))

            c = rng.uniform(0.2, 3.0, size=len(model.directions))
            lhs, rhs = jensen_gap(model, rho, model.table * c)
            assert lhs == pytest.approx(rhs, abs=1e-12 * (1.0 + abs(lhs)))

    def test_rejects_mass_on_zero_rates(self, j2_origin):
        u = j2_origin.table.copy()
        u[3, 2] = 1.0
        with pytest.raises(ModelError):
            jensen_gap(j2_origin, rho_from_tau([0.5, 0.5]), u)
