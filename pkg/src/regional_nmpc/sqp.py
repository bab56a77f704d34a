"""SQP solver for the condensed OCP, with active-set classification.

The nonlinear program is solved by sequential quadratic programming with a
Gauss-Newton Lagrangian Hessian (cost curvature plus the terminal-row
curvature; dynamics second derivatives omitted), Levenberg regularization,
an l1-merit backtracking line search, and a dual active-set QP subproblem.

When the QP linearization becomes inconsistent the solver switches to an
elastic mode that penalizes slacks on all constraint rows; converging there
with residual violation above ``infeas_tol`` certifies infeasibility.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field, replace

import numpy as np

from .ocp import (OCPInstance, eval_all, eval_constraints, eval_cost_constraints,
                  gauss_newton_hessian, x0_feasible)
from .qp import QPInfeasible, QPNumericalError, solve_qp


@dataclass
class SolverOptions:
    tol_kkt: float = 1e-8
    max_iter: int = 100
    eps_act: float = 1e-6        # active-set detection tolerance (scaled per row)
    eps_lambda: float = 1e-8     # weak/strong multiplier threshold
    mu_init: float = 1e-8        # Levenberg shift, x10 on QP failure
    mu_max: float = 1e2
    elastic_rho: float = 1e6     # slack penalty weight
    elastic_delta: float = 1e6   # quadratic slack term; rho-scaled so the dual
                                 # QP's unconstrained start sits at s = -rho/delta
    infeas_tol: float = 1e-6     # violation at an elastic stationary point => infeasible
    armijo: float = 1e-4
    backtrack: float = 0.5
    max_linesearch: int = 40
    step_tol: float = 1e-12      # hard-mode stationary-step short circuit
    restore_step_tol: float = 1e-6   # elastic stationarity scale (gates the verdict only)
    fd_switch_res: float = 1e-2  # KKT residual below which the exact Hessian takes over
    fd_switch_iter: int = 6      # iteration after which it always does
    feas_tol: float = 1e-9


DEFAULT_OPTIONS = SolverOptions()


@dataclass
class NLPSolution:
    """Solution record of one OCP solve.

    ``status`` is one of converged / infeasible / max_iter /
    regularity_failure.  ``V`` and the multipliers are meaningful only when
    converged (V is +inf on infeasible returns).
    """

    U: np.ndarray
    lam: np.ndarray
    V: float
    status: str
    iterations: int
    kkt_residual: float

    @property
    def converged(self) -> bool:
        return self.status == "converged"

    def u0(self, m: int) -> np.ndarray:
        return self.U[:m].copy()


@dataclass(frozen=True)
class ActiveSetInfo:
    """Partition of the constraint rows at a converged solution.

    Indices are 1-based, matching the constraint numbering used in all
    user-facing output.  A and I partition {1..q}; W (weakly active,
    multiplier ~ 0) and S_strong partition A.
    """

    A: tuple
    I: tuple
    W: tuple
    S_strong: tuple
    eps_act: float
    eps_lambda: float


def _kkt_from_parts(grad, G, JG, lam) -> float:
    stat = grad + JG.T @ lam
    res = float(np.max(np.abs(stat)))
    res = max(res, float(np.max(np.abs(lam * G))))
    res = max(res, float(max(np.max(G), 0.0)))
    res = max(res, float(max(np.max(-lam), 0.0)))
    return res


def kkt_residual(instance: OCPInstance, U, lam) -> float:
    """Max of stationarity, complementarity, primal and dual violations."""
    lam = np.asarray(lam, dtype=float)
    if lam.shape != (instance.q,):
        raise ValueError(f"multiplier vector has shape {lam.shape}, expected ({instance.q},)")
    ev = eval_all(instance, U)
    return _kkt_from_parts(ev.grad, ev.G, ev.JG, lam)


def _scale_warm_start(instance: OCPInstance, U: np.ndarray) -> np.ndarray:
    """Scale each u(k) toward 0 until it satisfies the input polytope."""
    model = instance.model
    U = np.array(U, dtype=float)
    for k in range(model.N):
        u_k = U[k * model.m:(k + 1) * model.m]
        vals = model.G_u @ u_k
        bad = vals > model.w_u
        if np.any(bad):
            t = float(np.min(model.w_u[bad] / vals[bad]))
            u_k *= t
    return U


def _convexified(H: np.ndarray, floor: float = 1e-6) -> np.ndarray:
    """Symmetrize and floor the eigenvalues so the QP Hessian stays PD."""
    Hs = 0.5 * (H + H.T)
    w, Q = np.linalg.eigh(Hs)
    lo = floor * max(1.0, float(w[-1]))
    if w[0] >= lo:
        return Hs
    return Q @ np.diag(np.maximum(w, lo)) @ Q.T


def _extreme_inputs(model: SystemModel) -> list:
    """Single-stage inputs at the polytope's extremes along the +-1 vectors."""
    out = []
    for sign in (1.0, -1.0):
        d = sign * np.ones(model.m)
        den = model.G_u @ d
        pos = den > 1e-12
        if not np.any(pos):
            continue
        t = float(np.min(model.w_u[pos] / den[pos]))
        if t > 1e-9:
            out.append(t * d)
    return out


def _cold_starts(instance: OCPInstance, k_max: int = 6) -> list:
    """Deterministic multistart candidates for one cold solve.

    Scores a per-stage input lattice (fractions of the polytope extremes)
    by rollout cost plus a violation penalty, expanding the rollouts as a
    prefix tree so the scan costs L + L^2 + ... dynamics calls.  Keeps the
    best lattice point per saturation sign pattern and returns the top
    patterns.  The nonconvex dynamics give the condensed problem distinct
    local basins per pattern, and this scan reliably places one start in
    each competitive basin.
    """
    model = instance.model
    exts = _extreme_inputs(model)
    if not exts:
        return []
    levels = [np.zeros(model.m)]
    for e in exts:
        levels += [f * e for f in (1.0, 0.75, 0.5, 0.25)]
    while len(levels) ** model.N > 8000 and len(levels) > 3:
        levels = levels[:1] + [lv for i, lv in enumerate(levels[1:]) if i % 2 == 0]
    scale = max(float(np.max(np.abs(e))) for e in exts)

    # (combo, state, stage cost, state-constraint violation), expanded per stage
    nodes = [((), instance.x0, 0.0, 0.0)]
    for k in range(model.N):
        new = []
        for combo, x, c, v in nodes:
            xc = float(x @ model.Q @ x) if k > 0 else 0.0
            vc = float(np.sum(np.maximum(model.H_x @ x - model.h_x, 0.0))) if k > 0 else 0.0
            for i, u in enumerate(levels):
                xn = np.asarray(model.dynamics(x, u), dtype=float)
                new.append((combo + (i,), xn,
                            c + xc + float(u @ model.R @ u), v + vc))
        nodes = new

    best_per_pattern: dict = {}
    for combo, xN, c, v in nodes:
        term = float(xN @ model.P @ xN)
        score = c + term + 1e3 * (v + max(term - model.alpha, 0.0))
        U = np.concatenate([levels[i] for i in combo])
        key = tuple(np.sign(np.round(U / (0.25 * scale))).astype(int))
        cur = best_per_pattern.get(key)
        if cur is None or score < cur[0]:
            best_per_pattern[key] = (score, U)
    ranked = sorted(best_per_pattern.values(), key=lambda t: t[0])
    return [U for _, U in ranked[:k_max]]


def _prefer(a: NLPSolution | None, b: NLPSolution) -> NLPSolution:
    """Pick the better of two local solutions: converged and cheapest first,
    then an infeasibility certificate, then whatever came first."""
    if a is None:
        return b
    if a.converged:
        return b if (b.converged and b.V < a.V - 1e-12) else a
    if b.converged:
        return b
    if a.status != "infeasible" and b.status == "infeasible":
        return b
    return a


def solve_ocp(instance: OCPInstance, warm_start=None, options: SolverOptions | None = None,
              warm_lam=None, warm_active=None, start_elastic: bool = False) -> NLPSolution:
    """Solve the condensed OCP for the instance's initial state.

    ``warm_start`` (length N*m), ``warm_lam`` (length q) and ``warm_active``
    (0-based QP rows) seed the iteration and select a single local solve.
    Cold solves run a small deterministic multistart instead: U = 0 (always
    strictly input-feasible by the interior-origin assumption) plus the
    input-polytope extremes along the +-1 directions, keeping the best
    converged solution.  The nonlinear dynamics make the condensed problem
    nonconvex, and the extremes reliably bracket the basins that U = 0
    misses.  ``start_elastic`` begins directly in the slack-penalized mode,
    useful when the caller expects infeasibility (e.g. a neighbor sample
    was).

    The Hessian starts as Gauss-Newton (cost curvature plus terminal-row
    curvature) and switches to a finite-difference exact Lagrangian Hessian
    near a solution, where the omitted dynamics curvature would otherwise
    force a slow linear tail.
    """
    opt = options or DEFAULT_OPTIONS
    q, nd = instance.q, instance.nd
    if not np.all(np.isfinite(instance.x0)):
        raise ValueError("x0 must be finite")
    if not x0_feasible(instance):
        return NLPSolution(U=np.zeros(nd), lam=np.zeros(q), V=np.inf,
                           status="infeasible", iterations=0, kkt_residual=np.inf)

    if warm_start is not None:
        U0 = _scale_warm_start(instance, np.asarray(warm_start, dtype=float))
        if U0.shape != (nd,):
            raise ValueError(f"warm start has shape {U0.shape}, expected ({nd},)")
        return _solve_from(instance, U0, opt, warm_lam, warm_active, start_elastic)
    if start_elastic:
        return _solve_from(instance, np.zeros(nd), opt, warm_lam, warm_active, True)
    best = None
    starts = [np.zeros(nd)]
    starts += [U0 for U0 in _cold_starts(instance) if np.max(np.abs(U0)) > 0]
    for U0 in starts:
        best = _prefer(best, _solve_from(instance, U0, opt, warm_lam,
                                         warm_active, False))
    return best


def _solve_from(instance: OCPInstance, U0: np.ndarray, opt: SolverOptions,
                warm_lam, warm_active, start_elastic: bool) -> NLPSolution:
    """One local SQP run from the given starting sequence."""
    q, nd = instance.q, instance.nd
    model = instance.model
    U = U0
    lam = (np.array(warm_lam, dtype=float) if warm_lam is not None else np.zeros(q))
    hint_hard = tuple(warm_active) if warm_active is not None else None
    hint_elastic = None
    all_rows = np.arange(q)
    # input rows are linear and always satisfiable, so they stay hard during
    # restoration; only the state/terminal rows get slacks
    n_in = model.N * model.q_u
    nl = np.arange(n_in, q)
    q_nl = q - n_in
    rho, delta = opt.elastic_rho, opt.elastic_delta

    mu = opt.mu_init
    nu = 1.0
    elastic = bool(start_elastic)
    elastic_exits = 0
    eye_nd = np.eye(nd)
    last_res = np.inf
    prev_step = np.inf

    it = 0
    while it < opt.max_iter:
        it += 1
        ev = eval_all(instance, U)
        viol0_max = float(max(np.max(ev.G), 0.0))
        if not elastic:
            last_res = _kkt_from_parts(ev.grad, ev.G, ev.JG, lam)
            if last_res <= opt.tol_kkt:
                return NLPSolution(U=U, lam=lam, V=ev.V, status="converged",
                                   iterations=it - 1, kkt_residual=last_res)
        elif viol0_max <= 1e-12:
            # restoration reached a feasible point; resume the hard problem
            elastic = False
            elastic_exits += 1
            last_res = _kkt_from_parts(ev.grad, ev.G, ev.JG, lam)
            if last_res <= opt.tol_kkt:
                return NLPSolution(U=U, lam=lam, V=ev.V, status="converged",
                                   iterations=it - 1, kkt_residual=last_res)

        # the exact Hessian takes over close to a solution (quadratic tail);
        # Gauss-Newton carries the global phase
        endgame = (it >= opt.fd_switch_iter
                   or (not elastic and last_res <= opt.fd_switch_res)
                   or (elastic and prev_step <= 1e-2))
        if endgame:
            H = _convexified(_lagrangian_hessian_fd(instance, U, lam, all_rows))
        else:
            H = gauss_newton_hessian(instance, ev, float(lam[-1]))

        # QP subproblem, regularizing on numerical failure; once restoration
        # brings the violation down, retry the hard QP right away
        d = None
        lam_new = None
        pred = 0.0
        while d is None:
            Hreg = H + mu * eye_nd
            try:
                if not elastic or viol0_max <= 1e-2:
                    try:
                        qp = solve_qp(Hreg, ev.grad, ev.JG, -ev.G, warm_active=hint_hard)
                        d, lam_new, hint_hard = qp.d, qp.lam, qp.active
                        pred = -(float(ev.grad @ d) + 0.5 * float(d @ Hreg @ d))
                        if elastic:
                            elastic = False
                            elastic_exits += 1
                            if elastic_exits > 5:
                                return NLPSolution(U=U, lam=lam_new, V=ev.V,
                                                   status="max_iter", iterations=it,
                                                   kkt_residual=last_res)
                    except QPInfeasible:
                        if not elastic:
                            elastic = True
                            prev_step = np.inf
                if d is None:
                    He = np.zeros((nd + q_nl, nd + q_nl))
                    He[:nd, :nd] = Hreg
                    He[nd:, nd:] = delta * np.eye(q_nl)
                    ge = np.concatenate([ev.grad, np.full(q_nl, rho)])
                    Ce = np.zeros((n_in + 2 * q_nl, nd + q_nl))
                    Ce[:n_in, :nd] = ev.JG[:n_in]
                    Ce[n_in:n_in + q_nl, :nd] = ev.JG[nl]
                    Ce[n_in:n_in + q_nl, nd:] = -np.eye(q_nl)
                    Ce[n_in + q_nl:, nd:] = -np.eye(q_nl)
                    be = np.concatenate([-ev.G[:n_in], -ev.G[nl], np.zeros(q_nl)])
                    try:
                        qp = solve_qp(He, ge, Ce, be, warm_active=hint_elastic)
                    except QPInfeasible as exc:
                        # the slack rows make this subproblem feasible by
                        # construction, so a failure here is purely numerical
                        raise QPNumericalError(str(exc)) from exc
                    z = qp.d
                    d, hint_elastic = z[:nd], qp.active
                    lam_new = np.zeros(q)
                    lam_new[:n_in] = qp.lam[:n_in]
                    lam_new[nl] = qp.lam[n_in:n_in + q_nl]
                    # model decrease vs the no-step point (d=0, s=max(G,0))
                    s0 = np.maximum(ev.G[nl], 0.0)
                    m_ref = rho * float(np.sum(s0)) + 0.5 * delta * float(s0 @ s0)
                    m_opt = float(ge @ z) + 0.5 * float(z @ He @ z)
                    pred = m_ref - m_opt
            except QPNumericalError:
                mu = max(mu * 10.0, 1e-8)
                hint_hard = hint_elastic = None
                if mu > opt.mu_max:
                    return NLPSolution(U=U, lam=lam, V=ev.V, status="regularity_failure",
                                       iterations=it, kkt_residual=last_res)

        # stationary step: adopt QP multipliers, decide feasibility in elastic mode
        step_norm = float(np.max(np.abs(d)))
        scale = 1.0 + float(np.max(np.abs(U)))
        if elastic:
            stationary = (step_norm <= opt.restore_step_tol * scale
                          or pred <= 1e-10 * max(1.0, abs(ev.V)))
        else:
            stationary = step_norm <= opt.step_tol * scale
        if stationary:
            lam = lam_new
            prev_step = step_norm
            if elastic:
                if viol0_max > opt.infeas_tol:
                    return NLPSolution(U=U, lam=lam, V=np.inf, status="infeasible",
                                       iterations=it, kkt_residual=last_res)
                elastic = False
                elastic_exits += 1
                if elastic_exits > 5:
                    return NLPSolution(U=U, lam=lam, V=ev.V, status="max_iter",
                                       iterations=it, kkt_residual=last_res)
            continue

        # merit backtracking line search against the model's predicted decrease
        if elastic:
            def merit(V_t, G_t):
                v = np.maximum(G_t[nl], 0.0)
                return V_t + rho * float(np.sum(v)) + 0.5 * delta * float(v @ v)
            phi0 = merit(ev.V, ev.G)
        else:
            # keep the penalty above the current multipliers, but let it come
            # back down after a transient spike or the line search chokes
            lam_inf = 1.1 * float(np.max(lam_new, initial=0.0)) + 1e-3
            nu = lam_inf if (nu < lam_inf or nu > 10.0 * lam_inf) else nu
            viol0 = float(np.sum(np.maximum(ev.G, 0.0)))

            def merit(V_t, G_t):
                return V_t + nu * float(np.sum(np.maximum(G_t, 0.0)))
            phi0 = ev.V + nu * viol0
            pred = pred + nu * viol0        # the hard QP clears all linearized rows
        pred = max(pred, 0.0)
        alpha = 1.0
        accepted = False
        if pred <= 1e-13 * max(1.0, abs(phi0)) and step_norm <= 1e-4 * scale:
            # predicted decrease is below the merit's float resolution; the
            # line search would only reject the step on rounding noise
            accepted = True
        best_alpha, best_phi = 0.0, phi0
        while not accepted:
            if alpha < 0.5 ** opt.max_linesearch:
                break
            V_t, G_t = eval_cost_constraints(instance, U + alpha * d)
            phi_t = merit(V_t, G_t)
            if phi_t <= phi0 - opt.armijo * alpha * pred:
                accepted = True
                break
            if phi_t < best_phi:
                best_alpha, best_phi = alpha, phi_t
            alpha *= opt.backtrack
        if not accepted:
            if best_phi < phi0:
                alpha = best_alpha
            else:
                mu = mu * 10.0
                if mu > opt.mu_max:
                    return NLPSolution(U=U, lam=lam, V=ev.V, status="max_iter",
                                       iterations=it, kkt_residual=last_res)
                continue

        U = U + alpha * d
        lam = lam_new
        prev_step = alpha * step_norm
        mu = max(opt.mu_init, mu * 0.2)

    return NLPSolution(U=U, lam=lam, V=np.inf if elastic else eval_cost_constraints(instance, U)[0],
                       status="max_iter", iterations=it, kkt_residual=last_res)


def classify_active_sets(instance: OCPInstance, solution: NLPSolution,
                         eps_act: float = None, eps_lambda: float = None,
                         options: SolverOptions | None = None) -> ActiveSetInfo:
    """Partition constraints into active/inactive and weakly/strongly active.

    A row is active when its value exceeds ``-eps_act`` scaled by the row's
    gradient norm (min 1); active rows with multipliers at most
    ``eps_lambda`` are weakly active.  Returned indices are 1-based.
    """
    if not solution.converged:
        raise ValueError("active-set classification requires a converged solution")
    opt = options or DEFAULT_OPTIONS
    eps_act = opt.eps_act if eps_act is None else eps_act
    eps_lambda = opt.eps_lambda if eps_lambda is None else eps_lambda

    G, JG = eval_constraints(instance, solution.U)
    scale = np.maximum(1.0, np.linalg.norm(JG, axis=1))
    A, I, W, S = [], [], [], []
    for i in range(instance.q):
        if G[i] >= -eps_act * scale[i]:
            A.append(i + 1)
            if solution.lam[i] <= eps_lambda:
                W.append(i + 1)
            else:
                S.append(i + 1)
        else:
            I.append(i + 1)
    return ActiveSetInfo(A=tuple(A), I=tuple(I), W=tuple(W), S_strong=tuple(S),
                         eps_act=eps_act, eps_lambda=eps_lambda)


def _lagrangian_hessian_fd(instance: OCPInstance, U, lam_active, active0, step=1e-5):
    """Exact Lagrangian Hessian via central differences of the analytic gradient."""
    nd = instance.nd

    def grad_L(Upt):
        ev = eval_all(instance, Upt)
        g = ev.grad.copy()
        if len(active0):
            g += ev.JG[active0].T @ lam_active
        return g

    Hess = np.empty((nd, nd))
    for j in range(nd):
        h = step * (1.0 + abs(U[j]))
        e = np.zeros(nd)
        e[j] = h
        Hess[:, j] = (grad_L(U + e) - grad_L(U - e)) / (2.0 * h)
    return 0.5 * (Hess + Hess.T)


def check_region_regularity(instance: OCPInstance, solution: NLPSolution,
                            active_info: ActiveSetInfo, rank_tol: float = 1e-8) -> bool:
    """Full-rank test of the active-set KKT system's Jacobian at the solution.

    Builds d F_eq / d (U, lambda_A) = [[H_L, JG_A'], [JG_A, 0]] with the exact
    Lagrangian Hessian (finite differences of the analytic gradient) and
    checks the smallest singular value against ``rank_tol`` times the largest.
    """
    if not solution.converged:
        raise ValueError("regularity check requires a converged solution")
    active0 = np.array([i - 1 for i in active_info.A], dtype=int)
    _, JG = eval_constraints(instance, solution.U)
    JG_A = JG[active0] if len(active0) else np.zeros((0, instance.nd))
    lam_A = solution.lam[active0] if len(active0) else np.zeros(0)
    H_L = _lagrangian_hessian_fd(instance, solution.U, lam_A, active0)
    k = len(active0)
    Jac = np.zeros((instance.nd + k, instance.nd + k))
    Jac[:instance.nd, :instance.nd] = H_L
    if k:
        Jac[:instance.nd, instance.nd:] = JG_A.T
        Jac[instance.nd:, :instance.nd] = JG_A
    sv = np.linalg.svd(Jac, compute_uv=False)
    if sv[0] == 0.0:
        return False
    return bool(sv[-1] > rank_tol * sv[0])
