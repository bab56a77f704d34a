"""Discrete-time system models: dynamics, derivatives, constraint sets, weights.

A :class:`SystemModel` bundles everything the optimal control problem needs:
the dynamics ``x(k+1) = f(x(k), u(k))``, analytic Jacobian providers, the
input polytope ``G_u @ u <= w_u``, the state polytope ``H_x @ x <= h_x``,
the terminal ellipsoid ``x' P x <= alpha`` and the quadratic weights
``Q, R, P`` with horizon ``N``.  Models are immutable after construction and
all evaluations are pure, so instances can be shared freely between solvers.
"""

from __future__ import annotations

import functools
import hashlib
import json
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

Dynamics = Callable[[np.ndarray, np.ndarray], np.ndarray]
Jacobian = Callable[[np.ndarray, np.ndarray], np.ndarray]

# Registered dynamics families usable from model spec files.
_FAMILIES: dict[str, Callable[[dict], tuple[Dynamics, Jacobian, Jacobian]]] = {}


def _cholesky_ok(M: np.ndarray) -> bool:
    try:
        np.linalg.cholesky(M)
        return True
    except np.linalg.LinAlgError:
        return False


@dataclass(frozen=True)
class SystemModel:
    """Constrained discrete-time nonlinear system with quadratic cost data.

    The constraint polytopes must contain the origin strictly (``w_u > 0``,
    ``h_x > 0``) and the equilibrium ``f(0, 0) = 0`` is required; both are
    checked at construction time.
    """

    n: int
    m: int
    dynamics: Dynamics
    jacobian_x: Jacobian
    jacobian_u: Jacobian
    G_u: np.ndarray
    w_u: np.ndarray
    H_x: np.ndarray
    h_x: np.ndarray
    P: np.ndarray
    alpha: float
    Q: np.ndarray
    R: np.ndarray
    N: int
    spec: dict | None = field(default=None, compare=False)

    def __post_init__(self):
        for name in ("G_u", "w_u", "H_x", "h_x", "P", "Q", "R"):
            arr = np.asarray(getattr(self, name), dtype=float)
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)
        n, m = self.n, self.m
        if n < 1 or m < 1 or self.N < 1:
            raise ValueError("n, m and N must be positive")
        if self.G_u.shape[1] != m or self.w_u.shape != (self.G_u.shape[0],):
            raise ValueError("input polytope dimensions inconsistent with m")
        if self.H_x.shape[1] != n or self.h_x.shape != (self.H_x.shape[0],):
            raise ValueError("state polytope dimensions inconsistent with n")
        if not np.all(self.w_u > 0):
            raise ValueError("input polytope must contain the origin strictly (w_u > 0)")
        if not np.all(self.h_x > 0):
            raise ValueError("state polytope must contain the origin strictly (h_x > 0)")
        for name in ("Q", "R", "P"):
            M = getattr(self, name)
            if not np.allclose(M, M.T, atol=1e-12) or not _cholesky_ok(M):
                raise ValueError(f"{name} must be symmetric positive definite")
        if self.alpha <= 0:
            raise ValueError("terminal level alpha must be positive")
        f0 = np.asarray(self.dynamics(np.zeros(n), np.zeros(m)), dtype=float)
        if f0.shape != (n,) or np.max(np.abs(f0)) > 1e-14:
            raise ValueError("dynamics must satisfy f(0, 0) = 0")

    @property
    def q_u(self) -> int:
        return self.G_u.shape[0]

    @property
    def q_x(self) -> int:
        return self.H_x.shape[0]

    def in_terminal_set(self, x) -> bool:
        x = np.asarray(x, dtype=float)
        return float(x @ self.P @ x) <= self.alpha


def eval_dynamics(model: SystemModel, x, u) -> np.ndarray:
    """Evaluate ``f(x, u)``.  Pure; raises ValueError on dimension mismatch."""
    x = np.asarray(x, dtype=float)
    u = np.asarray(u, dtype=float)
    if x.shape != (model.n,):
        raise ValueError(f"state has shape {x.shape}, expected ({model.n},)")
    if u.shape != (model.m,):
        raise ValueError(f"input has shape {u.shape}, expected ({model.m},)")
    return np.asarray(model.dynamics(x, u), dtype=float)


def eval_jacobians(model: SystemModel, x, u) -> tuple[np.ndarray, np.ndarray]:
    """Return ``(df/dx, df/du)`` at ``(x, u)`` as (n, n) and (n, m) arrays."""
    x = np.asarray(x, dtype=float)
    u = np.asarray(u, dtype=float)
    if x.shape != (model.n,) or u.shape != (model.m,):
        raise ValueError("dimension mismatch in eval_jacobians")
    A = np.asarray(model.jacobian_x(x, u), dtype=float)
    B = np.asarray(model.jacobian_u(x, u), dtype=float)
    return A.reshape(model.n, model.n), B.reshape(model.n, model.m)


def finite_difference_jacobians(dynamics: Dynamics, n: int, m: int, x, u,
                                step: float = 1e-6) -> tuple[np.ndarray, np.ndarray]:
    """Central finite-difference Jacobians of ``dynamics`` at ``(x, u)``."""
    x = np.asarray(x, dtype=float)
    u = np.asarray(u, dtype=float)
    A = np.empty((n, n))
    B = np.empty((n, m))
    for j in range(n):
        e = np.zeros(n)
        e[j] = step
        A[:, j] = (np.asarray(dynamics(x + e, u)) - np.asarray(dynamics(x - e, u))) / (2 * step)
    for j in range(m):
        e = np.zeros(m)
        e[j] = step
        B[:, j] = (np.asarray(dynamics(x, u + e)) - np.asarray(dynamics(x, u - e))) / (2 * step)
    return A, B


def fd_jacobian_providers(dynamics: Dynamics, n: int, m: int,
                          step: float = 1e-6) -> tuple[Jacobian, Jacobian]:
    """Finite-difference fallback providers for models without analytic Jacobians."""

    def jac_x(x, u):
        return finite_difference_jacobians(dynamics, n, m, x, u, step)[0]

    def jac_u(x, u):
        return finite_difference_jacobians(dynamics, n, m, x, u, step)[1]

    return jac_x, jac_u


# ---------------------------------------------------------------------------
# Registered dynamics families
# ---------------------------------------------------------------------------

def _integrator_cubic_f(b, x, u):
    return np.array([x[0] + u[0], b * x[1] + u[0] ** 3])


def _integrator_cubic_jx(b, x, u):
    return np.array([[1.0, 0.0], [0.0, b]])


def _integrator_cubic_ju(b, x, u):
    return np.array([[1.0], [3.0 * u[0] ** 2]])


def _integrator_cubic_family(params: dict):
    b = float(params["b"])
    return (functools.partial(_integrator_cubic_f, b),
            functools.partial(_integrator_cubic_jx, b),
            functools.partial(_integrator_cubic_ju, b))


_FAMILIES["integrator_cubic"] = _integrator_cubic_family


def register_family(name: str, builder) -> None:
    """Register a dynamics family: ``builder(params) -> (f, jac_x, jac_u)``."""
    _FAMILIES[name] = builder


def model_from_spec(spec: dict) -> SystemModel:
    """Build a model from its JSON-style description.

    The description selects a registered dynamics family and carries all
    numeric problem data; matrices are row-major nested lists.  The same
    dictionary is kept on the model and is the basis of :func:`model_hash`.
    """
    family = spec.get("family")
    if family not in _FAMILIES:
        raise ValueError(f"unknown dynamics family: {family!r}")
    f, jx, ju = _FAMILIES[family](spec.get("params", {}))
    sp = spec["state_polytope"]
    if "box" in sp:
        lohi = np.asarray(sp["box"], dtype=float)
        n = lohi.shape[0]
        H = np.vstack([np.eye(n), -np.eye(n)])
        h = np.concatenate([lohi[:, 1], -lohi[:, 0]])
    else:
        H = np.asarray(sp["H"], dtype=float)
        h = np.asarray(sp["h"], dtype=float)
    return SystemModel(
        n=int(spec["n"]), m=int(spec["m"]),
        dynamics=f, jacobian_x=jx, jacobian_u=ju,
        G_u=np.asarray(spec["input_polytope"]["G"], dtype=float),
        w_u=np.asarray(spec["input_polytope"]["w"], dtype=float),
        H_x=H, h_x=h,
        P=np.asarray(spec["P"], dtype=float), alpha=float(spec["alpha"]),
        Q=np.asarray(spec["Q"], dtype=float), R=np.asarray(spec["R"], dtype=float),
        N=int(spec["N"]),
        spec=spec,
    )


def load_model(path) -> SystemModel:
    """Load a model from a JSON spec file."""
    with open(path) as fh:
        return model_from_spec(json.load(fh))


def builtin_example_model() -> SystemModel:
    """Benchmark model: integrator/cubic-input system with box input |u| <= 1.

    Input rows are ordered so that row 1 is ``-u <= 1`` (active at u = -1)
    and row 2 is ``u <= 1`` (active at u = +1).  The state box [-10, 10]^2
    is a surrogate compact set; it is never active on the benchmark results.
    """
    spec = {
        "family": "integrator_cubic",
        "params": {"b": 0.9},
        "n": 2, "m": 1,
        "Q": [[1.0, 0.0], [0.0, 1.0]],
        "R": [[1.0]],
        "P": [[4.0, 0.0], [0.0, 10.53]],
        "alpha": 1.1,
        "N": 3,
        "input_polytope": {"G": [[-1.0], [1.0]], "w": [1.0, 1.0]},
        "state_polytope": {"box": [[-10.0, 10.0], [-10.0, 10.0]]},
    }
    return model_from_spec(spec)


def canonical_json(obj) -> str:
    """Deterministic JSON text (sorted keys, no whitespace)."""
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


def model_hash(model: SystemModel) -> str:
    """Stable identity hash of the model's numeric content."""
    if model.spec is not None:
        payload = canonical_json(model.spec)
    else:
        payload = canonical_json({
            "family": f"custom:{getattr(model.dynamics, '__qualname__', 'anonymous')}",
            "n": model.n, "m": model.m, "N": model.N,
            "G_u": model.G_u.tolist(), "w_u": model.w_u.tolist(),
            "H_x": model.H_x.tolist(), "h_x": model.h_x.tolist(),
            "P": model.P.tolist(), "alpha": model.alpha,
            "Q": model.Q.tolist(), "R": model.R.tolist(),
        })
    return hashlib.sha256(payload.encode()).hexdigest()
