"""Inscribed ellipsoids underestimating a feedback class's region.

Each ellipsoid {x : (x - x_c)' E (x - x_c) <= 1} (closed) is grown inside a
class's sample cloud and certified by sampling verification: states drawn
uniformly inside the ellipsoid must all reproduce the class's input law when
the full OCP is solved.  Fitting is greedy: seed at the cloud's deepest
point, shape from the cloud's second moments, scale by bisection against
verification, shrink by a safety factor, repeat on the uncovered remainder.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.sparse import coo_matrix
from scipy.sparse.csgraph import connected_components
from scipy.spatial import cKDTree

from .model import SystemModel
from .ocp import make_ocp
from .sqp import DEFAULT_OPTIONS, SolverOptions, solve_ocp

LAW_TOL = 1e-6


@dataclass(frozen=True)
class Ellipsoid:
    """Closed ellipsoid (x - x_c)' E (x - x_c) <= 1 with E symmetric PD."""

    E: np.ndarray
    x_c: np.ndarray

    def __post_init__(self):
        E = np.asarray(self.E, dtype=float)
        x_c = np.asarray(self.x_c, dtype=float)
        if E.ndim != 2 or E.shape[0] != E.shape[1] or x_c.shape != (E.shape[0],):
            raise ValueError("ellipsoid dimension mismatch")
        if np.max(np.abs(E - E.T)) > 1e-12:
            raise ValueError("E must be symmetric within 1e-12")
        try:
            np.linalg.cholesky(E)
        except np.linalg.LinAlgError:
            raise ValueError("E must be positive definite") from None
        E.setflags(write=False)
        x_c.setflags(write=False)
        object.__setattr__(self, "E", E)
        object.__setattr__(self, "x_c", x_c)

    @property
    def n(self) -> int:
        return self.x_c.shape[0]

    def value(self, x) -> float:
        d = np.asarray(x, dtype=float) - self.x_c
        return float(d @ self.E @ d)

    def bbox_halfwidths(self) -> np.ndarray:
        return np.sqrt(np.diag(np.linalg.inv(self.E)))


def ellipsoid_contains(e: Ellipsoid, x) -> bool:
    """Membership test; the boundary (value exactly 1) counts as inside."""
    x = np.asarray(x, dtype=float)
    if x.shape != (e.n,):
        raise ValueError(f"state has shape {x.shape}, expected ({e.n},)")
    return e.value(x) <= 1.0


def contains_many(e: Ellipsoid, X: np.ndarray) -> np.ndarray:
    """Vectorized membership over rows of X."""
    d = np.asarray(X, dtype=float) - e.x_c
    return np.einsum("ij,jk,ik->i", d, e.E, d) <= 1.0


def sample_in_ellipsoid(e: Ellipsoid, n_samples: int, seed: int) -> np.ndarray:
    """Uniform draws inside the ellipsoid, deterministic given the seed.

    Unit-ball samples (normal direction, radius U^(1/n)) are mapped through
    the inverse Cholesky factor of E.
    """
    if n_samples < 1:
        raise ValueError("n_samples must be >= 1")
    rng = np.random.default_rng(seed)
    n = e.n
    z = rng.standard_normal((n_samples, n))
    z /= np.linalg.norm(z, axis=1, keepdims=True)
    r = rng.random(n_samples) ** (1.0 / n)
    ball = z * r[:, None]
    L = np.linalg.cholesky(e.E)
    return e.x_c + ball @ np.linalg.inv(L)


@dataclass
class VerificationReport:
    samples_tested: int
    violations: int
    worst_margin: float
    verified: bool
    seed: int
    failure: str = ""

    def as_dict(self) -> dict:
        return {"samples_tested": self.samples_tested, "violations": self.violations,
                "worst_margin": float(self.worst_margin), "verified": self.verified,
                "seed": self.seed, "failure": self.failure}


def verify_ellipsoid(e: Ellipsoid, u_expected, model: SystemModel,
                     n_samples: int, seed: int,
                     options: SolverOptions | None = None,
                     law_tol: float = LAW_TOL,
                     fail_fast: bool = False) -> VerificationReport:
    """Solve the OCP at uniform samples inside e and check the first input.

    A sample violates when its first input differs from ``u_expected`` by
    more than ``law_tol`` in any component; a solver failure marks the
    report unverified with a diagnostic.  Samples chain warm starts in draw
    order for speed, but an apparent law break from a warm-started solve is
    rechecked from the multistart before it counts, so chaining cannot bias
    the verdict.
    """
    opt = options or DEFAULT_OPTIONS
    u_expected = np.asarray(u_expected, dtype=float)
    X = sample_in_ellipsoid(e, n_samples, seed)
    # solve in order along the longest axis; neighboring samples then warm
    # start each other well
    w, Q = np.linalg.eigh(e.E)
    X = X[np.argsort(X @ Q[:, int(np.argmin(w))])]
    violations = 0
    worst = 0.0
    failure = ""
    seed_sol = None
    for x in X:
        instance = make_ocp(model, x)
        cold = seed_sol is None
        if cold:
            sol = solve_ocp(instance, options=opt)
        else:
            hint = tuple(int(i) for i in np.flatnonzero(seed_sol[1] > 1e-9))
            sol = solve_ocp(instance, warm_start=seed_sol[0], options=opt,
                            warm_lam=seed_sol[1], warm_active=hint)
            if not sol.converged:
                cold = True
                sol = solve_ocp(instance, options=opt)
        if sol.converged and not cold:
            # a warm chain can track a non-global KKT branch across a cost
            # fold; only the multistart may certify a law break
            if float(np.max(np.abs(sol.U[:model.m] - u_expected))) > law_tol:
                sol = solve_ocp(instance, options=opt)
        if not sol.converged:
            violations += 1
            worst = np.inf
            if not failure:
                failure = f"solver status {sol.status!r} at x={x.tolist()}"
            if fail_fast:
                break
            seed_sol = None
            continue
        seed_sol = (sol.U, sol.lam)
        margin = float(np.max(np.abs(sol.U[:model.m] - u_expected)))
        worst = max(worst, margin)
        if margin > law_tol:
            violations += 1
            if fail_fast:
                break
    return VerificationReport(samples_tested=n_samples, violations=violations,
                              worst_margin=worst,
                              verified=(violations == 0 and not failure),
                              seed=seed, failure=failure)


@dataclass
class FitParams:
    """Knobs and context for greedy fitting.

    ``complement`` holds every explored state not in the class being fitted
    (other laws, infeasible, unclassified); ellipsoids must keep clear of
    it.  ``window`` bounds the box each stored ellipsoid must stay inside;
    ``spacing`` is the exploration grid spacing, used to connect the cloud.
    """

    complement: np.ndarray = None
    window: tuple = None
    spacing: np.ndarray = None
    seed: int = 20110913
    n_probe: int = 400          # verification samples per bisection probe
    n_verify: int = 2000        # samples for the final certification
    min_gain_frac: float = 0.02
    r_min: float = 1e-3
    gamma: float = 0.98         # safety shrink after bisection
    max_bisect: int = 4


def _largest_component(points: np.ndarray, radius: float) -> np.ndarray:
    """Indices of the largest connected component of the radius graph."""
    k = points.shape[0]
    if k == 1:
        return np.array([0])
    tree = cKDTree(points)
    pairs = tree.query_pairs(radius, output_type="ndarray")
    if len(pairs) == 0:
        return np.array([0])
    data = np.ones(len(pairs))
    graph = coo_matrix((data, (pairs[:, 0], pairs[:, 1])), shape=(k, k))
    n_comp, labels = connected_components(graph, directed=False)
    counts = np.bincount(labels, minlength=n_comp)
    return np.flatnonzero(labels == int(np.argmax(counts)))


def _shape_matrix(points: np.ndarray, r_min: float) -> np.ndarray:
    """Inverse covariance of the points, eigenvalues floored at r_min^2."""
    n = points.shape[1]
    if points.shape[0] < n + 1:
        cov = np.eye(n) * r_min ** 2
    else:
        cov = np.cov(points, rowvar=False)
        cov = np.atleast_2d(cov)
    w, Q = np.linalg.eigh(0.5 * (cov + cov.T))
    w = np.maximum(w, r_min ** 2)
    return Q @ np.diag(1.0 / w) @ Q.T


def _scaled(E0: np.ndarray, center: np.ndarray, t: float) -> Ellipsoid:
    E = 0.5 * (E0 + E0.T) / t ** 2
    return Ellipsoid(E=E, x_c=center.copy())


def _window_limit(E0: np.ndarray, center: np.ndarray, window) -> float:
    """Largest t keeping the scaled ellipsoid's bounding box in the window."""
    if window is None:
        return np.inf
    half = np.sqrt(np.diag(np.linalg.inv(E0)))
    t = np.inf
    for j, (lo, hi) in enumerate(window):
        margin = min(center[j] - lo, hi - center[j])
        if margin <= 0:
            return 0.0
        t = min(t, margin / half[j])
    return t


def fit_inner_ellipsoids(cls, model: SystemModel, max_ellipsoids: int,
                         params: FitParams = None,
                         options: SolverOptions | None = None) -> list:
    """Greedy verified underestimation of one feedback class.

    Repeats: take the largest connected component of the uncovered cloud,
    pick candidate centers at its deepest points (max distance to
    complement), shape each by local second moments, keep the candidate
    whose largest clear ellipsoid covers the most uncovered samples, grow
    it by bisection until verification fails, shrink by gamma, certify.
    Stops at max_ellipsoids, when the cloud is exhausted, or when an
    ellipsoid gains too few samples.  Returns certified ellipsoids paired
    with their reports: [(e, report)].
    """
    p = params or FitParams()
    cloud = np.asarray(cls.sample_cloud, dtype=float)
    if cloud.ndim != 2 or cloud.shape[0] == 0:
        raise ValueError("class sample cloud is empty")
    total = cloud.shape[0]
    min_gain = max(1, int(np.ceil(p.min_gain_frac * total)))
    if p.spacing is not None:
        radius = 1.5 * float(np.max(p.spacing))
    else:
        radius = 1.5 * _median_nn_distance(cloud)
    comp_tree = (cKDTree(p.complement)
                 if p.complement is not None and len(p.complement) else None)

    results = []
    remaining = np.ones(total, dtype=bool)
    attempt = 0
    while len(results) < max_ellipsoids and np.count_nonzero(remaining) >= min_gain:
        pts = cloud[remaining]
        comp_idx = _largest_component(pts, radius)
        component = pts[comp_idx]

        if comp_tree is not None:
            depth, _ = comp_tree.query(component)
        else:
            depth = -np.linalg.norm(component - component.mean(axis=0), axis=1)

        # tournament: deepest well-separated candidate centers, each with a
        # shape from its local second moments, scored by how much of the
        # uncovered cloud the center's largest clear ellipsoid would take
        ext = float(np.linalg.norm(component.max(axis=0) - component.min(axis=0)))
        min_sep = max(3.0 * radius, 0.2 * ext)
        best = None
        for ci in _candidate_centers(component, depth, min_sep):
            center = component[ci]
            dloc = np.linalg.norm(component - center, axis=1)
            r_loc = max(float(np.quantile(dloc, 0.35)), 2.5 * radius)
            local = component[dloc <= r_loc]
            E0 = _shape_matrix(local, p.r_min)
            if comp_tree is not None:
                d = p.complement - center
                t_touch = float(np.sqrt(np.min(np.einsum("ij,jk,ik->i", d, E0, d))))
            else:
                t_touch = np.inf
            t_hi = min(t_touch, _window_limit(E0, center, p.window))
            if not np.isfinite(t_hi):
                t_hi = 1.0
            if t_hi <= 0.0:
                continue
            trial = _scaled(E0, center, p.gamma * t_hi)
            score = int(np.count_nonzero(contains_many(trial, pts)))
            if best is None or score > best[0]:
                best = (score, center, E0, t_hi)
        if best is None:
            break
        _, center, E0, t_hi = best
        t_lo = p.r_min * np.sqrt(float(np.max(np.linalg.eigvalsh(E0))))

        attempt += 1
        probe_seed = p.seed + 1000 * attempt
        t_best = _bisect_scale(E0, center, cls.u_star, model, t_lo, t_hi,
                               p, probe_seed, options)
        accepted = False
        if t_best > 0.0:
            t_final = p.gamma * t_best
            for retry in range(3):
                e = _scaled(E0, center, t_final)
                report = verify_ellipsoid(e, cls.u_star, model, p.n_verify,
                                          seed=probe_seed + 999, options=options)
                if report.verified:
                    covered = contains_many(e, cloud)
                    gain = int(np.count_nonzero(covered & remaining))
                    if gain < min_gain:
                        return [r for r in results]
                    results.append((e, report))
                    remaining &= ~covered
                    accepted = True
                    break
                t_final *= p.gamma
        if not accepted:
            # drop the component and move on; nothing certifiable here
            rem_idx = np.flatnonzero(remaining)
            remaining[rem_idx[comp_idx]] = False
    return results


def _candidate_centers(component: np.ndarray, depth: np.ndarray,
                       min_sep: float, limit: int = 8) -> list:
    """Indices of up to ``limit`` deepest points, pairwise >= min_sep apart."""
    chosen = []
    for i in np.argsort(-depth):
        pt = component[i]
        if all(np.linalg.norm(pt - component[j]) >= min_sep for j in chosen):
            chosen.append(int(i))
            if len(chosen) >= limit:
                break
    return chosen


def _median_nn_distance(points: np.ndarray) -> float:
    tree = cKDTree(points)
    d, _ = tree.query(points, k=min(2, len(points)))
    if d.ndim == 1:
        return 1.0
    return float(np.median(d[:, 1])) or 1.0


def _bisect_scale(E0, center, u_star, model, t_lo, t_hi, p: FitParams,
                  probe_seed: int, options) -> float:
    """Largest scale in [t_lo, t_hi] passing probe verification (0 if none).

    Backs off geometrically from t_hi until a probe passes, then bisects the
    bracket a few times; the safety shrink applied afterwards absorbs the
    remaining scale granularity.
    """
    if t_hi <= t_lo:
        return 0.0

    def probe(t, k):
        e = _scaled(E0, center, t)
        rep = verify_ellipsoid(e, u_star, model, p.n_probe,
                               seed=probe_seed + k, options=options,
                               fail_fast=True)
        return rep.verified

    if probe(t_hi, 0):
        return t_hi
    k = 1
    good, bad = None, t_hi
    t = 0.8 * t_hi
    while t > t_lo:
        if probe(t, k):
            good = t
            break
        bad = t
        t *= 0.8
        k += 1
    if good is None:
        if not probe(t_lo, k):
            return 0.0
        good = t_lo
    for j in range(p.max_bisect):
        mid = 0.5 * (good + bad)
        if probe(mid, k + 1 + j):
            good = mid
        else:
            bad = mid
    return good
