"""Solver behavior: convergence, global basin selection, warm starts,
infeasibility certificates, KKT reporting, and active-set classification."""

import numpy as np
import pytest

from regional_nmpc.ocp import make_ocp
from regional_nmpc.sqp import (DEFAULT_OPTIONS, SolverOptions,
                               check_region_regularity, classify_active_sets,
                               kkt_residual, solve_ocp)

# independently computed optima: dense input-grid search (step 2e-2) with 8
# local refinement rounds, active rows read off the returned inputs and the
# terminal ellipsoid slack; values frozen here
BRUTE_TOL = 1e-3
FROZEN = {
    (0.5, 0.5): {"V": 1.153005506, "A": ()},
    (3.0, 3.2): {"V": 31.066506261, "A": (1, 3)},
    (1.2, 2.6): {"V": 14.992158548, "A": (1, 5)},
    (2.0, 2.8): {"V": 20.327952688, "A": (1, 5)},
    (-3.0, -3.2): {"V": 31.066506261, "A": (2, 4)},
    (3.0, 4.0): {"V": 42.002451080, "A": (1, 3, 5)},
    (0.675, 1.65): {"V": 7.214031816, "A": (1, 15)},
}


def solve_at(model, x, **kw):
    return solve_ocp(make_ocp(model, x), **kw)


class TestConvergence:
    @pytest.mark.parametrize("x", sorted(FROZEN))
    def test_matches_independent_optimum(self, model, x):
        ref = FROZEN[x]
        sol = solve_at(model, np.array(x))
        assert sol.converged
        assert sol.kkt_residual <= 1e-8
        assert sol.V == pytest.approx(ref["V"], abs=BRUTE_TOL)
        instance = make_ocp(model, np.array(x))
        info = classify_active_sets(instance, sol)
        assert info.A == ref["A"]

    def test_multistart_escapes_local_basin(self, model):
        # a single descent from U = 0 lands in a basin far above the
        # optimum here; the cold solver must not
        x = np.array([1.2, 2.6])
        cold = solve_at(model, x)
        single = solve_at(model, x, warm_start=np.zeros(3))
        assert cold.converged
        assert cold.V == pytest.approx(FROZEN[(1.2, 2.6)]["V"], abs=BRUTE_TOL)
        if single.converged:
            assert single.V > cold.V + 0.3

    def test_kkt_residual_reported_matches_recomputed(self, model):
        x = np.array([2.0, 2.8])
        instance = make_ocp(model, x)
        sol = solve_ocp(instance)
        res = kkt_residual(instance, sol.U, sol.lam)
        assert res <= 1e-8
        assert res == pytest.approx(sol.kkt_residual, abs=1e-12)

    def test_kkt_residual_detects_perturbation(self, model):
        x = np.array([2.0, 2.8])
        instance = make_ocp(model, x)
        sol = solve_ocp(instance)
        U = sol.U.copy()
        U[1] += 1e-3
        assert kkt_residual(instance, U, sol.lam) > 1e-5

    def test_kkt_residual_shape_check(self, model):
        instance = make_ocp(model, np.array([1.0, 1.0]))
        sol = solve_ocp(instance)
        with pytest.raises(ValueError):
            kkt_residual(instance, sol.U, sol.lam[:3])


class TestWarmStart:
    def test_warm_start_reaches_same_solution(self, model):
        base = solve_at(model, np.array([2.0, 2.0]))
        shifted = make_ocp(model, np.array([2.02, 2.0]))
        warm = solve_ocp(shifted, warm_start=base.U, warm_lam=base.lam)
        cold = solve_ocp(shifted)
        assert warm.converged and cold.converged
        assert warm.V == pytest.approx(cold.V, abs=1e-9)
        assert warm.iterations <= cold.iterations

    def test_out_of_polytope_warm_start_recovers(self, model):
        # infeasible input guesses are pulled back inside and still work
        sol = solve_at(model, np.array([1.0, 1.0]),
                       warm_start=np.array([5.0, -5.0, 5.0]))
        ref = solve_at(model, np.array([1.0, 1.0]))
        assert sol.converged
        assert sol.V == pytest.approx(ref.V, abs=1e-9)

    def test_solution_u0_is_a_copy(self, model):
        sol = solve_at(model, np.array([1.0, 1.0]))
        u = sol.u0(1)
        u[0] = 99.0
        assert sol.U[0] != 99.0


class TestInfeasibility:
    @pytest.mark.parametrize("x", [(5.5, 6.5), (4.0, 0.0), (-4.2, -1.0)])
    def test_certifies_infeasible(self, model, x):
        sol = solve_at(model, np.array(x))
        assert sol.status == "infeasible"
        assert not sol.converged
        assert sol.V == np.inf

    def test_max_iter_reported(self, model):
        sol = solve_at(model, np.array([3.0, 4.0]),
                       options=SolverOptions(max_iter=1))
        assert not sol.converged
        assert sol.status == "max_iter"


class TestClassification:
    def test_partitions_rows(self, model):
        instance = make_ocp(model, np.array([3.0, 3.2]))
        sol = solve_ocp(instance)
        info = classify_active_sets(instance, sol)
        assert sorted(info.A + info.I) == list(range(1, 16))
        assert set(info.W) | set(info.S_strong) == set(info.A)
        assert set(info.W) & set(info.S_strong) == set()
        assert 1 in info.A
        assert info.eps_act == DEFAULT_OPTIONS.eps_act
        assert info.eps_lambda == DEFAULT_OPTIONS.eps_lambda

    def test_regular_at_strict_solution(self, model):
        instance = make_ocp(model, np.array([3.0, 3.2]))
        sol = solve_ocp(instance)
        info = classify_active_sets(instance, sol)
        assert check_region_regularity(instance, sol, info)

    def test_options_defaults_are_pinned(self):
        assert DEFAULT_OPTIONS.tol_kkt == 1e-8
        assert DEFAULT_OPTIONS.eps_act == 1e-6
        assert DEFAULT_OPTIONS.eps_lambda == 1e-8
