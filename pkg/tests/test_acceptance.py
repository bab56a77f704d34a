"""Acceptance gate: seven end-to-end checks on the built-in benchmark at
default settings, each reporting one PASS/FAIL line in the run summary.

The offline pipeline behind most criteria runs once per session (see the
default_pipeline fixture); tolerances here are pinned and must not drift.
"""

import numpy as np
import pytest

from regional_nmpc.controller import (SolverContext, control_step, empty_store,
                                      run_closed_loop)
from regional_nmpc.ellipsoids import (contains_many, sample_in_ellipsoid,
                                      verify_ellipsoid)
from regional_nmpc.ocp import eval_constraints, eval_cost, make_ocp
from regional_nmpc.sqp import solve_ocp

import oracles
from conftest import DEFAULT_SEED

FRESH_SEED = 987654321     # never used by the fitting pipeline


def test_criterion_1_feedback_classes(default_pipeline, acceptance):
    classes = default_pipeline["classes"]
    laws = sorted(float(c.u_star[0]) for c in classes)
    runtime = sum(default_pipeline["timings"].values())
    ok = (len(classes) == 2
          and abs(laws[0] - (-1.0)) <= 1e-12
          and abs(laws[1] - 1.0) <= 1e-12
          and runtime < 600.0)
    acceptance(1, "feedback classes",
               ok, f"{len(classes)} classes, laws {laws}, "
                   f"pipeline {runtime:.1f}s (< 600s)")


def test_criterion_2_saturated_set_counts(default_pipeline, acceptance):
    sets = default_pipeline["atlas"].active_sets
    n1 = sum(1 for a in sets if 1 in a)
    n2 = sum(1 for a in sets if 2 in a)
    ok = (n1 == 7 and n2 == 7 and 22 <= len(sets) <= 30)
    acceptance(2, "saturated set counts",
               ok, f"{n1} sets contain row 1, {n2} contain row 2, "
                   f"{len(sets)} distinct (need 7/7, total in [22, 30])")


def test_criterion_3_coverage(default_pipeline, acceptance):
    p = default_pipeline["coverage"]
    hw = default_pipeline["half_width"]
    ok = (p >= 0.35 and hw <= 0.005)
    acceptance(3, "coverage",
               ok, f"coverage {p:.4f} +- {hw:.4f} at 100000 samples "
                   f"(need >= 0.35, half-width <= 0.005)")


def test_criterion_4_closed_loop(default_pipeline, model, acceptance):
    store = default_pipeline["store"]
    with_store = run_closed_loop([3.0, 4.0], 30, store, model)
    without = run_closed_loop([3.0, 4.0], 30, empty_store(model), model)
    skipped = int(np.count_nonzero(~with_store.ocp_solved))
    solved = int(np.count_nonzero(with_store.ocp_solved))
    dev = float(np.max(np.abs(with_store.states - without.states)))
    final = float(np.linalg.norm(with_store.states[-1]))
    ok = (with_store.status == "ok" and without.status == "ok"
          and skipped >= 1 and solved >= 1 and dev <= 1e-6 and final < 0.01)
    acceptance(4, "closed loop from (3,4)",
               ok, f"{skipped} skipped / {solved} solved, store-vs-baseline "
                   f"max dev {dev:.2e} (<= 1e-6), final norm {final:.2e} (< 0.01)")


def test_criterion_5_solver_correctness(default_pipeline, model, acceptance):
    rng = np.random.default_rng(FRESH_SEED)

    # cost gradient and constraint Jacobian vs central differences at 50
    # random (state, input-sequence) points
    grad_worst = 0.0
    for _ in range(50):
        x0 = rng.uniform([-6.0, -7.0], [6.0, 7.0])
        U = rng.uniform(-1.0, 1.0, size=3)
        instance = make_ocp(model, x0)
        _, g = eval_cost(instance, U)
        g_fd = oracles.fd_gradient(lambda u: oracles.cost(x0, u), U)
        grad_worst = max(grad_worst, float(np.max(np.abs(g - g_fd)))
                         / max(1.0, float(np.max(np.abs(g_fd)))))
        _, J = eval_constraints(instance, U)
        J_fd = oracles.fd_jacobian(lambda u: oracles.constraints(x0, u), U)
        grad_worst = max(grad_worst, float(np.max(np.abs(J - J_fd)))
                         / max(1.0, float(np.max(np.abs(J_fd)))))

    # optimal cost vs the input-grid oracle at 20 random feasible states,
    # with the KKT residual bound on every converged solve
    atlas = default_pipeline["atlas"]
    feas_states = atlas.states[atlas.feasible]
    picks = feas_states[rng.choice(len(feas_states), size=20, replace=False)]
    cost_worst = 0.0
    kkt_worst = 0.0
    solved = 0
    for x0 in picks:
        sol = solve_ocp(make_ocp(model, x0))
        if not sol.converged:
            cost_worst = np.inf
            continue
        solved += 1
        kkt_worst = max(kkt_worst, sol.kkt_residual)
        v_ref, _ = oracles.brute_force_optimum(x0, step_size=0.02, rounds=7)
        cost_worst = max(cost_worst, abs(sol.V - v_ref))

    ok = (grad_worst <= 1e-5 and solved == 20
          and cost_worst <= 1e-3 and kkt_worst <= 1e-8)
    acceptance(5, "solver correctness",
               ok, f"gradient rel err {grad_worst:.2e} (<= 1e-5), "
                   f"|V - brute| {cost_worst:.2e} (<= 1e-3) on {solved}/20, "
                   f"KKT {kkt_worst:.2e} (<= 1e-8)")


def test_criterion_6_soundness(default_pipeline, model, acceptance):
    store = default_pipeline["store"]
    reverify_bad = 0
    for k, entry in enumerate(store.entries):
        rep = verify_ellipsoid(entry.ellipsoid, entry.u_star, model, 2000,
                               seed=FRESH_SEED + 17 * k)
        if not rep.verified or rep.violations:
            reverify_bad += 1

    rng = np.random.default_rng(FRESH_SEED + 1)
    atlas = default_pipeline["atlas"]
    feas_states = atlas.states[atlas.feasible]
    picks = feas_states[rng.choice(len(feas_states), size=500, replace=False)]
    dev_worst = 0.0
    for x in picks:
        step = control_step(x, store, SolverContext(model=model))
        ref = solve_ocp(make_ocp(model, x))
        if not ref.converged:
            dev_worst = np.inf
            continue
        dev_worst = max(dev_worst, float(np.max(np.abs(step.u - ref.U[:model.m]))))

    ok = (reverify_bad == 0 and dev_worst <= 1e-6)
    acceptance(6, "store soundness",
               ok, f"{len(store)} ellipsoids re-verified with "
                   f"{reverify_bad} failures at 2000 fresh samples; "
                   f"control_step vs NMPC max dev {dev_worst:.2e} (<= 1e-6) "
                   f"on 500 states")


def test_criterion_7_step_speedup(default_pipeline, model, acceptance):
    store = default_pipeline["store"]
    rng = np.random.default_rng(FRESH_SEED + 2)

    hit_times = []
    for k, entry in enumerate(store.entries):
        for x in sample_in_ellipsoid(entry.ellipsoid, 40, seed=FRESH_SEED + k):
            step = control_step(x, store, SolverContext(model=model))
            assert not step.ocp_solved
            hit_times.append(step.solve_time_us)

    atlas = default_pipeline["atlas"]
    feas = atlas.states[atlas.feasible]
    covered = np.zeros(len(feas), dtype=bool)
    for entry in store.entries:
        covered |= contains_many(entry.ellipsoid, feas)
    uncovered = feas[~covered]
    picks = uncovered[rng.choice(len(uncovered), size=30, replace=False)]
    solve_times = []
    for x in picks:
        step = control_step(x, store, SolverContext(model=model))
        assert step.ocp_solved
        solve_times.append(step.solve_time_us)

    hit_med = float(np.median(hit_times))
    solve_med = float(np.median(solve_times))
    ratio = solve_med / hit_med
    ok = ratio >= 100.0
    acceptance(7, "membership step speedup",
               ok, f"median hit {hit_med:.1f}us vs median fallback solve "
                   f"{solve_med:.1f}us -> {ratio:.0f}x (need >= 100x)")
