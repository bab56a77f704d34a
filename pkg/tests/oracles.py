"""Independent reference computations for the built-in benchmark.

Everything here is deliberately written from scratch against the plant
equations, without importing package internals, so tests can cross-check
the implementation against a second opinion.
"""

import numpy as np

B = 0.9
P = np.diag([4.0, 10.53])
Q = np.eye(2)
R = 1.0
ALPHA = 1.1
N = 3
X_BOUND = 10.0


def step(x, u):
    return np.array([x[0] + u, B * x[1] + u ** 3])


def rollout(x0, U):
    """States x(1..N) for the scalar-input benchmark plant."""
    xs = []
    x = np.asarray(x0, dtype=float)
    for k in range(N):
        x = step(x, float(U[k]))
        xs.append(x)
    return np.array(xs)


def cost(x0, U):
    x = np.asarray(x0, dtype=float)
    V = float(x @ Q @ x)
    for k in range(N):
        V += R * float(U[k]) ** 2
        x = step(x, float(U[k]))
        if k < N - 1:
            V += float(x @ Q @ x)
    return V + float(x @ P @ x)


def constraints(x0, U):
    """Constraint values G(x0, U) in the package's row order.

    Inputs for u(0..N-1) as (-u-1, u-1) pairs, then states x(1..N-1) as
    (x1-10, x2-10, -x1-10, -x2-10), then the terminal ellipsoid row.
    """
    xs = rollout(x0, U)
    rows = []
    for k in range(N):
        rows.extend([-U[k] - 1.0, U[k] - 1.0])
    for k in range(N - 1):
        x = xs[k]
        rows.extend([x[0] - X_BOUND, x[1] - X_BOUND,
                     -x[0] - X_BOUND, -x[1] - X_BOUND])
    xN = xs[N - 1]
    rows.append(float(xN @ P @ xN) - ALPHA)
    return np.array(rows)


def _batch_cost_terminal(x0, UU):
    x1 = np.stack([x0[0] + UU[:, 0], B * x0[1] + UU[:, 0] ** 3], axis=1)
    x2 = np.stack([x1[:, 0] + UU[:, 1], B * x1[:, 1] + UU[:, 1] ** 3], axis=1)
    x3 = np.stack([x2[:, 0] + UU[:, 2], B * x2[:, 1] + UU[:, 2] ** 3], axis=1)
    term = 4.0 * x3[:, 0] ** 2 + 10.53 * x3[:, 1] ** 2
    V = (float(x0 @ x0) + (x1 ** 2).sum(axis=1) + (x2 ** 2).sum(axis=1)
         + (UU ** 2).sum(axis=1) + term)
    return V, term


def brute_force_optimum(x0, step_size=0.02, rounds=7):
    """Grid search over U in [-1,1]^3 with local refinement.

    Returns (V, U) for the best feasible input sequence, or (None, None)
    when the whole grid violates the terminal constraint.
    """
    x0 = np.asarray(x0, dtype=float)
    g = np.arange(-1.0, 1.0 + 1e-12, step_size)
    UU = np.stack(np.meshgrid(g, g, g, indexing="ij"), axis=-1).reshape(-1, 3)
    V, term = _batch_cost_terminal(x0, UU)
    feas = term <= ALPHA + 1e-9
    if not feas.any():
        return None, None
    idx = int(np.argmin(np.where(feas, V, np.inf)))
    best, best_V = UU[idx], float(V[idx])
    h = step_size
    for _ in range(rounds):
        h /= 10.0
        g = np.linspace(-10 * h, 10 * h, 21)
        d = np.stack(np.meshgrid(g, g, g, indexing="ij"), axis=-1).reshape(-1, 3)
        cand = np.clip(best + d, -1.0, 1.0)
        V, term = _batch_cost_terminal(x0, cand)
        feas = term <= ALPHA + 1e-9
        if feas.any():
            idx = int(np.argmin(np.where(feas, V, np.inf)))
            best, best_V = cand[idx], float(V[idx])
    return best_V, best


def fd_gradient(fun, z, h=1e-6):
    """Central finite-difference gradient of a scalar function."""
    z = np.asarray(z, dtype=float)
    g = np.zeros_like(z)
    for j in range(z.size):
        hz = h * (1.0 + abs(z[j]))
        zp, zm = z.copy(), z.copy()
        zp[j] += hz
        zm[j] -= hz
        g[j] = (fun(zp) - fun(zm)) / (2.0 * hz)
    return g


def fd_jacobian(fun, z, h=1e-6):
    """Central finite-difference Jacobian of a vector function."""
    z = np.asarray(z, dtype=float)
    f0 = np.asarray(fun(z))
    J = np.zeros((f0.size, z.size))
    for j in range(z.size):
        hz = h * (1.0 + abs(z[j]))
        zp, zm = z.copy(), z.copy()
        zp[j] += hz
        zm[j] -= hz
        J[:, j] = (np.asarray(fun(zp)) - np.asarray(fun(zm))) / (2.0 * hz)
    return J


def qp_reference(H, g, C=None, b=None):
    """Solve min 0.5 d'Hd + g'd s.t. Cd <= b by active-set enumeration.

    Exponential in the number of constraints; only for tiny test problems.
    """
    from itertools import combinations

    n = H.shape[0]
    if C is None or C.shape[0] == 0:
        return np.linalg.solve(H, -g), np.zeros(0)
    mrows = C.shape[0]
    best = None
    for k in range(0, min(mrows, n) + 1):
        for rows in combinations(range(mrows), k):
            rows = list(rows)
            Ca = C[rows]
            KKT = np.block([[H, Ca.T], [Ca, np.zeros((k, k))]])
            rhs = np.concatenate([-g, b[rows]])
            try:
                sol = np.linalg.solve(KKT, rhs)
            except np.linalg.LinAlgError:
                continue
            d, lam_a = sol[:n], sol[n:]
            if np.any(lam_a < -1e-10):
                continue
            if np.any(C @ d - b > 1e-9):
                continue
            val = 0.5 * d @ H @ d + g @ d
            if best is None or val < best[0] - 1e-12:
                lam = np.zeros(mrows)
                lam[rows] = lam_a
                best = (val, d, lam)
    if best is None:
        return None, None
    return best[1], best[2]
