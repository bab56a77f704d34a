"""Dense active-set QP solver against KKT conditions and an enumerating
reference solver."""

import numpy as np
import pytest

import oracles
from regional_nmpc.qp import QPInfeasible, solve_qp

SOL_TOL = 1e-8


def _random_qp(rng, n, mrows):
    A = rng.standard_normal((n, n))
    H = A @ A.T + n * np.eye(n)
    g = rng.standard_normal(n)
    C = rng.standard_normal((mrows, n))
    # keep b >= small negative so d = 0 is nearly feasible and the
    # problem stays feasible with probability ~1
    b = rng.uniform(-0.1, 1.0, mrows)
    return H, g, C, b


def _check_kkt(H, g, C, b, d, lam, tol=SOL_TOL):
    assert np.max(C @ d - b) <= tol
    assert np.min(lam) >= -tol
    assert np.max(np.abs(H @ d + g + C.T @ lam)) <= tol * max(1.0, np.max(np.abs(g)))
    assert np.max(np.abs(lam * (C @ d - b))) <= tol * max(1.0, np.max(np.abs(b)))


def test_unconstrained_newton_step():
    H = np.diag([2.0, 8.0])
    g = np.array([2.0, -8.0])
    r = solve_qp(H, g)
    assert np.allclose(r.d, [-1.0, 1.0], atol=1e-12)
    assert r.active == ()


def test_single_active_row():
    # min 0.5 d'd - d1  s.t.  d1 <= 0.25
    H = np.eye(2)
    g = np.array([-1.0, 0.0])
    C = np.array([[1.0, 0.0]])
    b = np.array([0.25])
    r = solve_qp(H, g, C, b)
    assert np.allclose(r.d, [0.25, 0.0], atol=1e-12)
    assert np.allclose(r.lam, [0.75], atol=1e-12)
    assert r.active == (0,)


def test_matches_enumerating_reference():
    rng = np.random.default_rng(101)
    solved = 0
    for _ in range(60):
        n = int(rng.integers(2, 6))
        mrows = int(rng.integers(1, 8))
        H, g, C, b = _random_qp(rng, n, mrows)
        d_ref, lam_ref = oracles.qp_reference(H, g, C, b)
        if d_ref is None:
            continue
        r = solve_qp(H, g, C, b)
        assert np.max(np.abs(r.d - d_ref)) < SOL_TOL * max(1.0, np.max(np.abs(d_ref)))
        assert np.max(np.abs(r.lam - lam_ref)) < 1e-6 * max(1.0, np.max(np.abs(lam_ref)))
        _check_kkt(H, g, C, b, r.d, r.lam)
        solved += 1
    assert solved >= 50


def test_kkt_on_larger_problems():
    rng = np.random.default_rng(202)
    for _ in range(30):
        n = int(rng.integers(5, 15))
        mrows = int(rng.integers(5, 25))
        H, g, C, b = _random_qp(rng, n, mrows)
        r = solve_qp(H, g, C, b)
        _check_kkt(H, g, C, b, r.d, r.lam)


def test_infeasible_problem_raises():
    H = np.eye(1)
    g = np.zeros(1)
    C = np.array([[1.0], [-1.0]])
    b = np.array([-1.0, -1.0])    # d <= -1 and d >= 1
    with pytest.raises(QPInfeasible):
        solve_qp(H, g, C, b)


def test_duplicate_rows_are_handled():
    H = np.eye(2)
    g = np.array([-2.0, 0.0])
    C = np.array([[1.0, 0.0], [1.0, 0.0], [0.5, 0.0]])
    b = np.array([0.5, 0.5, 0.25])
    r = solve_qp(H, g, C, b)
    assert np.allclose(r.d, [0.5, 0.0], atol=1e-10)
    # all three rows are active; the multipliers still satisfy stationarity
    _check_kkt(H, g, C, b, r.d, r.lam, tol=1e-8)


def test_warm_start_reaches_same_solution():
    rng = np.random.default_rng(303)
    for _ in range(20):
        H, g, C, b = _random_qp(rng, 4, 6)
        cold = solve_qp(H, g, C, b)
        warm = solve_qp(H, g, C, b, warm_active=cold.active)
        assert np.max(np.abs(warm.d - cold.d)) < 1e-9
        assert warm.iterations <= cold.iterations


def test_wrong_warm_hypothesis_recovers():
    H = np.eye(2)
    g = np.array([-1.0, -1.0])
    C = np.array([[1.0, 0.0], [0.0, 1.0]])
    b = np.array([2.0, 0.25])
    # hint claims row 0 is active; the solution has only row 1 active
    r = solve_qp(H, g, C, b, warm_active=(0,))
    assert np.allclose(r.d, [1.0, 0.25], atol=1e-10)
    assert r.active == (1,)


def test_zero_gradient_inactive():
    H = np.eye(3)
    g = np.zeros(3)
    C = np.eye(3)
    b = np.ones(3)
    r = solve_qp(H, g, C, b)
    assert np.allclose(r.d, 0.0)
    assert r.active == ()
    assert np.allclose(r.lam, 0.0)
