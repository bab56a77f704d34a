"""Dense convex QP solver: dual active-set method (Goldfarb-Idnani).

Solves  min_d  0.5 d'Hd + g'd  subject to  C d <= b  for positive definite H.
The dual method starts from the unconstrained minimizer and adds violated
constraints one at a time, so no feasible starting point is required and
primal infeasibility is detected as dual unboundedness.  Problems here are
tiny (a few to a few dozen variables), so factorizations are recomputed per
active-set change instead of updated incrementally.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


class QPInfeasible(Exception):
    """The constraint system C d <= b has no solution."""


class QPNumericalError(Exception):
    """Factorization failure or iteration limit; caller should regularize."""


@dataclass
class QPResult:
    d: np.ndarray
    lam: np.ndarray              # full-length multipliers, zeros off the active set
    active: tuple                # 0-based active row indices, sorted
    iterations: int


def _try_warm(H, g, C, b, warm, row_scale, tol):
    """Accept a warm active-set hypothesis if its KKT point checks out."""
    W = sorted(set(int(i) for i in warm if 0 <= int(i) < C.shape[0]))
    nd = H.shape[0]
    k = len(W)
    if k > nd:
        return None
    if k == 0:
        d = np.linalg.solve(H, -g)
        mu = np.empty(0)
    else:
        CW = C[W]
        K = np.block([[H, CW.T], [CW, np.zeros((k, k))]])
        rhs = np.concatenate([-g, b[W]])
        try:
            sol = np.linalg.solve(K, rhs)
        except np.linalg.LinAlgError:
            return None
        d, mu = sol[:nd], sol[nd:]
        # reject garbage from a near-singular bordered system
        stat = H @ d + g + CW.T @ mu
        if np.max(np.abs(stat)) > 1e-9 * max(1.0, np.max(np.abs(g))):
            return None
        if np.min(mu, initial=0.0) < -1e-9:
            return None
    s = C @ d - b
    if np.max(s / row_scale) > tol:
        return None
    lam = np.zeros(C.shape[0])
    if k:
        lam[W] = np.maximum(mu, 0.0)
    return QPResult(d=d, lam=lam, active=tuple(W), iterations=0)


def solve_qp(H, g, C=None, b=None, warm_active=None, tol=1e-11, max_iter=None) -> QPResult:
    """Minimize 0.5 d'Hd + g'd subject to C d <= b.

    Returns the exact minimizer with nonnegative multipliers and exact
    complementary slackness (inactive rows carry zero multipliers).  Raises
    :class:`QPInfeasible` when the constraints are inconsistent and
    :class:`QPNumericalError` on factorization failure or cycling.

    ``warm_active`` is a hint: the hypothesized optimal active set is checked
    first and accepted outright when its KKT point is feasible and dual
    feasible, which is the common case across SQP iterations.
    """
    H = np.asarray(H, dtype=float)
    g = np.asarray(g, dtype=float)
    nd = H.shape[0]
    try:
        Hinv = np.linalg.inv(np.linalg.cholesky(H))
        Hinv = Hinv.T @ Hinv
    except np.linalg.LinAlgError as exc:
        raise QPNumericalError("Hessian not positive definite") from exc

    if C is None or len(C) == 0:
        d = -(Hinv @ g)
        return QPResult(d=d, lam=np.zeros(0), active=(), iterations=0)
    C = np.asarray(C, dtype=float)
    b = np.asarray(b, dtype=float)
    n_rows = C.shape[0]
    row_scale = np.maximum(1.0, np.linalg.norm(C, axis=1))
    if max_iter is None:
        max_iter = 50 * (n_rows + 1)

    if warm_active is not None:
        res = _try_warm(H, g, C, b, warm_active, row_scale, tol)
        if res is not None:
            return res

    d = -(Hinv @ g)
    active: list[int] = []
    u: list[float] = []
    B = np.zeros((nd, 0))          # H^-1 N for the active normals N = -C[active].T
    M = np.zeros((0, 0))           # N' H^-1 N

    def refresh_nb():
        nonlocal B, M
        Nmat = -C[active].T
        B = Hinv @ Nmat
        M = Nmat.T @ B

    iters = 0
    while True:
        iters += 1
        if iters > max_iter:
            raise QPNumericalError("active-set iteration limit exceeded")
        s = C @ d - b
        p = int(np.argmax(s / row_scale))
        if s[p] / row_scale[p] <= tol:
            lam = np.zeros(n_rows)
            for j, uj in zip(active, u):
                lam[j] = uj
            return QPResult(d=d, lam=lam, active=tuple(sorted(active)), iterations=iters)

        n_p = -C[p]
        u_p = 0.0
        while True:
            iters += 1
            if iters > max_iter:
                raise QPNumericalError("active-set iteration limit exceeded")
            Hin = Hinv @ n_p
            if active:
                rhs = B.T @ n_p
                try:
                    r = np.linalg.solve(M, rhs)
                except np.linalg.LinAlgError as exc:
                    raise QPNumericalError("degenerate active set") from exc
                z = Hin - B @ r
            else:
                r = np.empty(0)
                z = Hin
            zn = float(z @ n_p)

            t1 = np.inf
            blocking = -1
            for j, rj in enumerate(r):
                if rj > 1e-14:
                    cand = u[j] / rj
                    if cand < t1:
                        t1, blocking = cand, j
            viol = float(C[p] @ d - b[p])
            dependent = zn <= 1e-12 * max(1.0, float(n_p @ Hin))
            t2 = np.inf if dependent else viol / zn

            t = min(t1, t2)
            if not np.isfinite(t):
                raise QPInfeasible(f"constraint row {p} incompatible with active set")
            if not dependent:
                d = d + t * z
            for j in range(len(u)):
                u[j] -= t * r[j]
            u_p += t

            if t2 <= t1:
                active.append(p)
                u.append(u_p)
                refresh_nb()
                break
            del active[blocking], u[blocking]
            refresh_nb()
