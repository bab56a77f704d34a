"""Condensed single-shooting NLP for a given initial state.

States are eliminated by substituting the dynamics, so the decision variable
is the stacked input sequence ``U = (u(0), ..., u(N-1))`` of length ``N*m``.
Constraint rows keep a fixed documented order:

    rows 0 .. q_u-1          input constraints on u(0)   (always first)
    next (N-1)*q_u rows      input constraints on u(1), ..., u(N-1) by time
    next (N-1)*q_x rows      state constraints on x(1), ..., x(N-1) by time
    last row                 terminal constraint  x(N)' P x(N) - alpha <= 0

The first ``q_u`` rows are ``G_u @ u(0) - w_u`` exactly: linear, and
independent of ``x0`` and of all later inputs.  ``x(0)`` itself is problem
data; its state constraint is a feasibility precheck, not a constraint row.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .model import SystemModel


@dataclass(frozen=True)
class OCPInstance:
    """Immutable evaluation context for one initial state.

    Evaluations are pure and reentrant; distinct instances can be used
    concurrently without coordination.
    """

    model: SystemModel
    x0: np.ndarray
    nd: int                      # decision dimension N*m
    q: int                       # total constraint rows
    index_map: tuple             # row -> ("input"|"state"|"terminal", k, local_row)
    J_input: np.ndarray          # constant Jacobian block of all input rows
    w_input: np.ndarray          # stacked w_u for all input rows
    R_block: np.ndarray          # block-diag(R, ..., R)

    @property
    def terminal_row(self) -> int:
        return self.q - 1


def make_ocp(model: SystemModel, x0) -> OCPInstance:
    """Build the condensed NLP instance for initial state ``x0``."""
    x0 = np.asarray(x0, dtype=float)
    if x0.shape != (model.n,):
        raise ValueError(f"x0 has shape {x0.shape}, expected ({model.n},)")
    N, m, n = model.N, model.m, model.n
    q_u, q_x = model.q_u, model.q_x
    nd = N * m
    q = N * q_u + (N - 1) * q_x + 1

    index_map = []
    for k in range(N):
        index_map += [("input", k, j) for j in range(q_u)]
    for k in range(1, N):
        index_map += [("state", k, j) for j in range(q_x)]
    index_map.append(("terminal", N, 0))

    J_input = np.zeros((N * q_u, nd))
    for k in range(N):
        J_input[k * q_u:(k + 1) * q_u, k * m:(k + 1) * m] = model.G_u
    w_input = np.tile(model.w_u, N)
    R_block = np.kron(np.eye(N), model.R)

    for arr in (x0, J_input, w_input, R_block):
        arr.setflags(write=False)
    return OCPInstance(model=model, x0=x0, nd=nd, q=q, index_map=tuple(index_map),
                       J_input=J_input, w_input=w_input, R_block=R_block)


@dataclass
class OCPEval:
    """All quantities of one point evaluation used by the SQP iteration."""

    U: np.ndarray
    states: np.ndarray           # (N+1, n), row k is x(k)
    sens: np.ndarray             # (N+1, n, nd), d x(k) / d U
    V: float
    grad: np.ndarray             # (nd,)
    G: np.ndarray                # (q,)
    JG: np.ndarray               # (q, nd)


def _check_U(instance: OCPInstance, U) -> np.ndarray:
    U = np.asarray(U, dtype=float)
    if U.shape != (instance.nd,):
        raise ValueError(f"decision vector has shape {U.shape}, expected ({instance.nd},)")
    return U


def _roll(instance: OCPInstance, U: np.ndarray, with_sens: bool):
    model = instance.model
    N, n, m, nd = model.N, model.n, model.m, instance.nd
    states = np.empty((N + 1, n))
    states[0] = instance.x0
    sens = np.zeros((N + 1, n, nd)) if with_sens else None
    f, jx, ju = model.dynamics, model.jacobian_x, model.jacobian_u
    for k in range(N):
        u_k = U[k * m:(k + 1) * m]
        x_k = states[k]
        states[k + 1] = f(x_k, u_k)
        if with_sens:
            A = np.asarray(jx(x_k, u_k), dtype=float)
            sens[k + 1] = A @ sens[k]
            sens[k + 1][:, k * m:(k + 1) * m] += np.asarray(ju(x_k, u_k), dtype=float)
    return states, sens


def rollout(instance: OCPInstance, U) -> np.ndarray:
    """Simulate the dynamics from x0; returns the (N, n) array of x(1..N)."""
    U = _check_U(instance, U)
    states, _ = _roll(instance, U, with_sens=False)
    return states[1:]


def _cost_from_states(instance: OCPInstance, U, states) -> float:
    model = instance.model
    V = float(states[model.N] @ model.P @ states[model.N])
    for k in range(model.N):
        V += float(states[k] @ model.Q @ states[k])
    V += float(U @ instance.R_block @ U)
    return V


def eval_cost(instance: OCPInstance, U) -> tuple[float, np.ndarray]:
    """Cost and its gradient in U, by chain rule through the rollout."""
    U = _check_U(instance, U)
    states, sens = _roll(instance, U, with_sens=True)
    model = instance.model
    V = _cost_from_states(instance, U, states)
    grad = 2.0 * (instance.R_block @ U)
    for k in range(1, model.N):
        grad += 2.0 * (sens[k].T @ (model.Q @ states[k]))
    grad += 2.0 * (sens[model.N].T @ (model.P @ states[model.N]))
    return V, grad


def _constraints_from(instance: OCPInstance, U, states, sens):
    model = instance.model
    N, q_u, q_x = model.N, model.q_u, model.q_x
    G = np.empty(instance.q)
    G[:N * q_u] = instance.J_input @ U - instance.w_input
    base = N * q_u
    for k in range(1, N):
        G[base + (k - 1) * q_x: base + k * q_x] = model.H_x @ states[k] - model.h_x
    Px = model.P @ states[N]
    G[-1] = float(states[N] @ Px) - model.alpha
    if sens is None:
        return G, None
    JG = np.empty((instance.q, instance.nd))
    JG[:N * q_u] = instance.J_input
    for k in range(1, N):
        JG[base + (k - 1) * q_x: base + k * q_x] = model.H_x @ sens[k]
    JG[-1] = 2.0 * (sens[N].T @ Px)
    return G, JG


def eval_constraints(instance: OCPInstance, U) -> tuple[np.ndarray, np.ndarray]:
    """Constraint values G (<= 0 feasible) and Jacobian dG/dU."""
    U = _check_U(instance, U)
    states, sens = _roll(instance, U, with_sens=True)
    return _constraints_from(instance, U, states, sens)


def eval_cost_constraints(instance: OCPInstance, U) -> tuple[float, np.ndarray]:
    """Cheap merit evaluation: (V, G) without any derivatives."""
    U = _check_U(instance, U)
    states, _ = _roll(instance, U, with_sens=False)
    G, _ = _constraints_from(instance, U, states, None)
    return _cost_from_states(instance, U, states), G


def eval_all(instance: OCPInstance, U) -> OCPEval:
    """One fused evaluation of cost, constraints and all first derivatives."""
    U = _check_U(instance, U)
    states, sens = _roll(instance, U, with_sens=True)
    model = instance.model
    V = _cost_from_states(instance, U, states)
    grad = 2.0 * (instance.R_block @ U)
    for k in range(1, model.N):
        grad += 2.0 * (sens[k].T @ (model.Q @ states[k]))
    grad += 2.0 * (sens[model.N].T @ (model.P @ states[model.N]))
    G, JG = _constraints_from(instance, U, states, sens)
    return OCPEval(U=U, states=states, sens=sens, V=V, grad=grad, G=G, JG=JG)


def gauss_newton_hessian(instance: OCPInstance, ev: OCPEval, lam_terminal: float) -> np.ndarray:
    """Gauss-Newton curvature of the Lagrangian.

    Cost curvature plus the terminal-row curvature weighted by its
    multiplier; second derivatives of the dynamics are omitted.  The result
    is positive definite whenever R is (lam_terminal >= 0).
    """
    model = instance.model
    H = 2.0 * instance.R_block.copy()
    for k in range(1, model.N):
        SQ = model.Q @ ev.sens[k]
        H += 2.0 * (ev.sens[k].T @ SQ)
    SP = model.P @ ev.sens[model.N]
    H += (2.0 * (1.0 + max(lam_terminal, 0.0))) * (ev.sens[model.N].T @ SP)
    return H


def x0_feasible(instance: OCPInstance) -> bool:
    """Feasibility precheck of the initial state against the state polytope."""
    model = instance.model
    return bool(np.all(model.H_x @ instance.x0 - model.h_x <= 0.0))
