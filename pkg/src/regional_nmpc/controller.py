"""Online regional controller, region store persistence, and statistics.

The controller scans a store of verified (ellipsoid, input law) pairs; on
the first membership hit it applies the stored law with no NLP work,
otherwise it solves the OCP with a shifted warm start.  The store refuses
entries that fail verification and pairs of overlapping ellipsoids carrying
different laws, so scan order never changes the applied input.
"""

from __future__ import annotations

import csv
import hashlib
import json
import time
from dataclasses import dataclass, field

import numpy as np

from .ellipsoids import Ellipsoid, contains_many, ellipsoid_contains, sample_in_ellipsoid
from .model import SystemModel, canonical_json, eval_dynamics, model_hash
from .ocp import make_ocp, x0_feasible
from .sqp import DEFAULT_OPTIONS, NLPSolution, SolverOptions, solve_ocp

STORE_FORMAT = "regional-nmpc-store-v1"


class StoreValidationError(ValueError):
    """Raised when a store file or store build violates an invariant."""


class ControlInfeasibleError(RuntimeError):
    """Fallback OCP reported infeasible or failed; carries the solution."""

    def __init__(self, x, solution: NLPSolution):
        super().__init__(f"OCP {solution.status} at x={np.asarray(x).tolist()}")
        self.x = np.asarray(x, dtype=float)
        self.solution = solution


@dataclass(frozen=True)
class StoreEntry:
    """One verified (ellipsoid, law) pair plus its verification provenance."""

    ellipsoid: Ellipsoid
    u_star: np.ndarray
    A_tilde: tuple
    verification: dict          # seed, n_samples, violations, worst_margin

    def payload(self) -> dict:
        return {
            "E": [[float(v) for v in row] for row in self.ellipsoid.E],
            "x_c": [float(v) for v in self.ellipsoid.x_c],
            "u_star": [float(v) for v in np.atleast_1d(self.u_star)],
            "A_tilde": [int(i) for i in self.A_tilde],
            "verification": {k: (int(v) if k in ("seed", "n_samples", "violations")
                                 else float(v))
                             for k, v in sorted(self.verification.items())
                             if k in ("seed", "n_samples", "violations", "worst_margin")},
        }

    def payload_sha256(self) -> str:
        return hashlib.sha256(canonical_json(self.payload()).encode()).hexdigest()


@dataclass(frozen=True)
class RegionStore:
    """Immutable ordered set of verified entries bound to one model hash."""

    model_hash: str
    entries: tuple
    tolerances: dict = field(default_factory=dict)
    metadata: dict = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.entries)

    def lookup(self, x) -> int:
        """Index of the first entry whose ellipsoid contains x, else -1."""
        for i, entry in enumerate(self.entries):
            if ellipsoid_contains(entry.ellipsoid, x):
                return i
        return -1


def empty_store(model: SystemModel) -> RegionStore:
    return RegionStore(model_hash=model_hash(model), entries=(),
                       tolerances={"law_tol": 1e-6})


def _check_overlaps(entries, n_overlap_samples: int, seed: int) -> None:
    # pairwise sampling test: entries with different laws must not intersect
    for i in range(len(entries)):
        for j in range(len(entries)):
            if i == j:
                continue
            a, b = entries[i], entries[j]
            if np.allclose(a.u_star, b.u_star, atol=1e-9):
                continue
            X = sample_in_ellipsoid(a.ellipsoid, n_overlap_samples,
                                    seed=seed + 7919 * i + j)
            if bool(np.any(contains_many(b.ellipsoid, X))):
                raise StoreValidationError(
                    f"entries {i} and {j} carry different laws but their "
                    f"ellipsoids overlap")


def build_store(model: SystemModel, fitted, tolerances=None, metadata=None,
                n_overlap_samples: int = 256, overlap_seed: int = 5711) -> RegionStore:
    """Assemble entries from fitted classes and enforce store invariants.

    ``fitted`` is a list of (FeedbackClass, [(Ellipsoid, VerificationReport),
    ...]) pairs, as produced by group_by_subset + fit_inner_ellipsoids.
    Unverified ellipsoids are refused; overlapping ellipsoids with
    conflicting laws are refused (first-entry-wins scanning stays benign).
    """
    entries = []
    for cls, pairs in fitted:
        for e, report in pairs:
            if not report.verified or report.violations != 0:
                raise StoreValidationError(
                    f"unverified ellipsoid for class {cls.A_tilde} refused")
            entries.append(StoreEntry(
                ellipsoid=e, u_star=np.atleast_1d(np.asarray(cls.u_star, float)),
                A_tilde=tuple(cls.A_tilde),
                verification={"seed": report.seed,
                              "n_samples": report.samples_tested,
                              "violations": report.violations,
                              "worst_margin": float(report.worst_margin)}))
    _check_overlaps(entries, n_overlap_samples, overlap_seed)
    return RegionStore(model_hash=model_hash(model), entries=tuple(entries),
                       tolerances=dict(tolerances or {"law_tol": 1e-6}),
                       metadata=dict(metadata or {}))


def save_store(store: RegionStore, path) -> None:
    """Deterministic JSON with per-entry payload hashes; no timestamps."""
    doc = {
        "format": STORE_FORMAT,
        "model_hash": store.model_hash,
        "tolerances": store.tolerances,
        "metadata": store.metadata,
        "entries": [dict(entry.payload(), sha256=entry.payload_sha256())
                    for entry in store.entries],
    }
    with open(path, "w") as fh:
        fh.write(canonical_json(doc))
        fh.write("\n")


def load_store(path, model: SystemModel = None) -> RegionStore:
    """Load and re-validate a store; refuses tampered or mismatched files."""
    with open(path) as fh:
        try:
            doc = json.load(fh)
        except json.JSONDecodeError as exc:
            raise StoreValidationError(f"malformed store file: {exc}") from None
    if doc.get("format") != STORE_FORMAT:
        raise StoreValidationError(f"not a store file: format={doc.get('format')!r}")
    if model is not None and doc.get("model_hash") != model_hash(model):
        raise StoreValidationError("store was built for a different model "
                                   "(model hash mismatch)")
    entries = []
    for k, rec in enumerate(doc.get("entries", [])):
        ver = rec.get("verification", {})
        if ver.get("violations", 1) != 0 or ver.get("n_samples", 0) < 1:
            raise StoreValidationError(f"entry {k} is not verified")
        try:
            e = Ellipsoid(E=np.array(rec["E"], dtype=float),
                          x_c=np.array(rec["x_c"], dtype=float))
        except ValueError as exc:
            raise StoreValidationError(f"entry {k}: {exc}") from None
        entry = StoreEntry(ellipsoid=e,
                           u_star=np.array(rec["u_star"], dtype=float),
                           A_tilde=tuple(int(i) for i in rec["A_tilde"]),
                           verification={"seed": int(ver["seed"]),
                                         "n_samples": int(ver["n_samples"]),
                                         "violations": int(ver["violations"]),
                                         "worst_margin": float(ver["worst_margin"])})
        if "sha256" in rec and rec["sha256"] != entry.payload_sha256():
            raise StoreValidationError(f"entry {k} payload hash mismatch "
                                       f"(file tampered or corrupted)")
        entries.append(entry)
    return RegionStore(model_hash=doc["model_hash"], entries=tuple(entries),
                       tolerances=dict(doc.get("tolerances", {})),
                       metadata=dict(doc.get("metadata", {})))


@dataclass
class SolverContext:
    """Per-controller solver workspace: warm starts and instrumentation.

    ``nlp_solves`` counts fallback OCP solves, ``hits`` counts membership
    shortcuts; the hit path must leave ``nlp_solves`` untouched.
    """

    model: SystemModel
    options: SolverOptions = field(default_factory=lambda: DEFAULT_OPTIONS)
    last_U: np.ndarray = None
    nlp_solves: int = 0
    hits: int = 0
    nlp_iterations: int = 0

    def shifted_warm_start(self):
        if self.last_U is None:
            return None
        m = self.model.m
        return np.concatenate([self.last_U[m:], np.zeros(m)])

    def solve(self, x) -> NLPSolution:
        instance = make_ocp(self.model, x)
        sol = solve_ocp(instance, warm_start=self.shifted_warm_start(),
                        options=self.options)
        if not sol.converged and self.last_U is not None:
            sol = solve_ocp(instance, options=self.options)
        self.nlp_solves += 1
        self.nlp_iterations += sol.iterations
        self.last_U = sol.U if sol.converged else None
        return sol

    def reset(self) -> None:
        self.last_U = None


@dataclass
class StepResult:
    u: np.ndarray
    ocp_solved: bool
    ellipsoid_index: int        # None when no ellipsoid matched
    solve_time_us: float


def control_step(x, store: RegionStore, ctx: SolverContext) -> StepResult:
    """One controller decision: stored law on membership, OCP otherwise.

    Scans store entries in order; the first hit returns its law without any
    NLP work.  The fallback solves the OCP warm-started from the previous
    step's shifted solution; infeasible or failed solves raise
    ControlInfeasibleError.
    """
    x = np.asarray(x, dtype=float)
    if not np.all(np.isfinite(x)):
        raise ValueError("state must be finite")
    t0 = time.perf_counter_ns()
    idx = store.lookup(x)
    if idx >= 0:
        ctx.hits += 1
        ctx.last_U = None      # stored law invalidates the shift chain
        u = store.entries[idx].u_star.copy()
        return StepResult(u=u, ocp_solved=False, ellipsoid_index=idx,
                          solve_time_us=(time.perf_counter_ns() - t0) / 1e3)
    sol = ctx.solve(x)
    if not sol.converged:
        raise ControlInfeasibleError(x, sol)
    return StepResult(u=sol.U[:ctx.model.m].copy(), ocp_solved=True,
                      ellipsoid_index=None,
                      solve_time_us=(time.perf_counter_ns() - t0) / 1e3)


@dataclass
class Trajectory:
    """Closed-loop record; states obey x(k+1) = f(x(k), u(k)) exactly."""

    states: np.ndarray          # (T+1, n), includes the final state
    inputs: np.ndarray          # (T, m)
    ocp_solved: np.ndarray      # (T,) bool
    ellipsoid_index: np.ndarray # (T,) int, -1 for none
    solve_time_us: np.ndarray   # (T,)
    status: str = "ok"          # or "infeasible" on abort

    @property
    def steps(self) -> int:
        return self.inputs.shape[0]

    def ocp_avoided_fraction(self) -> float:
        if self.steps == 0:
            return 0.0
        return 1.0 - float(np.count_nonzero(self.ocp_solved)) / self.steps

    def accumulated_cost(self, model: SystemModel) -> float:
        """Sum of stage costs x'Qx + u'Ru over the executed steps."""
        c = 0.0
        for k in range(self.steps):
            x, u = self.states[k], self.inputs[k]
            c += float(x @ model.Q @ x + u @ model.R @ u)
        return c


def run_closed_loop(x0, steps: int, store: RegionStore, model: SystemModel,
                    options: SolverOptions | None = None,
                    ctx: SolverContext = None) -> Trajectory:
    """Simulate control_step then the exact dynamics for ``steps`` steps.

    Aborts with a partial trajectory (status "infeasible") if a fallback
    solve fails; otherwise runs to completion.
    """
    if steps < 1:
        raise ValueError("steps must be >= 1")
    ctx = ctx or SolverContext(model=model, options=options or DEFAULT_OPTIONS)
    x = np.asarray(x0, dtype=float).copy()
    states = [x.copy()]
    inputs, solved, hit_idx, times = [], [], [], []
    status = "ok"
    for _ in range(steps):
        try:
            step = control_step(x, store, ctx)
        except ControlInfeasibleError:
            status = "infeasible"
            break
        inputs.append(step.u)
        solved.append(step.ocp_solved)
        hit_idx.append(-1 if step.ellipsoid_index is None else step.ellipsoid_index)
        times.append(step.solve_time_us)
        x = eval_dynamics(model, x, step.u)
        states.append(x.copy())
    return Trajectory(
        states=np.array(states), inputs=np.array(inputs).reshape(len(inputs), model.m),
        ocp_solved=np.array(solved, dtype=bool),
        ellipsoid_index=np.array(hit_idx, dtype=int),
        solve_time_us=np.array(times, dtype=float), status=status)


def export_trajectory_csv(traj: Trajectory, path, config_comment: str = None) -> None:
    """Per-step CSV: step, state, input, ocp_solved, hit index, solve time.

    ``config_comment`` is written as a leading '#' line so the file carries
    its provenance; readers should skip comment lines.
    """
    n = traj.states.shape[1]
    m = traj.inputs.shape[1] if traj.steps else 0
    with open(path, "w", newline="") as fh:
        if config_comment:
            fh.write(f"# {config_comment}\n")
        writer = csv.writer(fh)
        writer.writerow(["step"] + [f"x{j + 1}" for j in range(n)]
                        + [f"u{j + 1}" for j in range(m)]
                        + ["ocp_solved", "ellipsoid_index", "solve_time_us"])
        for k in range(traj.steps):
            writer.writerow([k]
                            + [repr(float(v)) for v in traj.states[k]]
                            + [repr(float(v)) for v in traj.inputs[k]]
                            + [1 if traj.ocp_solved[k] else 0]
                            + [int(traj.ellipsoid_index[k])]
                            + [repr(float(traj.solve_time_us[k]))])


def coverage_estimate(store: RegionStore, model: SystemModel, window,
                      n_samples: int, seed: int,
                      options: SolverOptions | None = None) -> tuple:
    """Monte Carlo fraction of the feasible window covered by the store.

    A state counts toward the denominator iff its OCP is feasible and
    toward the numerator iff some stored ellipsoid also contains it.
    Verification makes the covered stratum feasible with certainty, so its
    window mass C is pinned with a large solver-free geometry draw, while
    the ``n_samples`` states estimate the feasible fraction q of the
    uncovered stratum (states inside an ellipsoid skip the solve; the rest
    are solved in a locality-sorted order so warm starts chain well).  The
    coverage is C / (C + (1 - C) q); the returned 95% half-width combines
    both sampling errors by the delta method and is therefore much tighter
    than a naive interval conditioned on the feasible draws alone.
    """
    if n_samples < 1000:
        raise ValueError("n_samples must be >= 1000")
    opt = options or DEFAULT_OPTIONS
    window = [tuple(map(float, w)) for w in window]
    if len(window) != model.n:
        raise ValueError("window dimension mismatch")
    lo = np.array([w[0] for w in window])
    hi = np.array([w[1] for w in window])

    def union_mask(pts):
        hit = np.zeros(len(pts), dtype=bool)
        for entry in store.entries:
            hit |= contains_many(entry.ellipsoid, pts)
        return hit

    # covered-stratum mass from membership tests alone
    if len(store):
        geo = np.random.default_rng([seed, 1])
        n_geo = max(10 * n_samples, 1_000_000)
        hits = 0
        for start in range(0, n_geo, 250_000):
            m = min(250_000, n_geo - start)
            G = lo + (hi - lo) * geo.random((m, model.n))
            hits += int(np.count_nonzero(union_mask(G)))
        C = hits / n_geo
        var_C = C * (1.0 - C) / n_geo
    else:
        C, var_C = 0.0, 0.0      # no ellipsoids: coverage is identically 0

    rng = np.random.default_rng(seed)
    X = lo + (hi - lo) * rng.random((n_samples, model.n))
    inside = union_mask(X)

    feasible = np.zeros(n_samples, dtype=bool)
    unknown = np.flatnonzero(~inside)
    if len(unknown):
        # sort by coarse grid cell so consecutive solves are neighbors
        cell = np.floor(X[unknown] / (0.25 * (hi - lo).max() / 10.0)).astype(int)
        order = unknown[np.lexsort(cell.T[::-1])]
        seed_sol = None
        for i in order:
            instance = make_ocp(model, X[i])
            if not x0_feasible(instance):
                continue
            if seed_sol is None:
                sol = solve_ocp(instance, options=opt)
            else:
                sol = solve_ocp(instance, warm_start=seed_sol[0], options=opt,
                                warm_lam=seed_sol[1], start_elastic=seed_sol[2])
                if not (sol.converged or sol.status == "infeasible"):
                    sol = solve_ocp(instance, options=opt)
            if sol.converged:
                feasible[i] = True
                seed_sol = (sol.U, sol.lam, False)
            elif sol.status == "infeasible" and sol.iterations > 0:
                seed_sol = (sol.U, None, True)
            else:
                seed_sol = None

    n_miss = len(unknown)
    k_feas = int(np.count_nonzero(feasible))
    if C == 0.0 and k_feas == 0:
        raise ValueError("no feasible samples in the window")
    q = k_feas / n_miss if n_miss else 0.0
    D = C + (1.0 - C) * q
    p = C / D if D > 0.0 else 0.0

    # delta method; mildly shrunk rates keep the variance positive at the
    # boundary cases q in {0, 1}
    q_var = (k_feas + 2.0) / (n_miss + 4.0) if n_miss else 0.0
    var_q = q_var * (1.0 - q_var) / n_miss if n_miss else 0.0
    d_dC = q / D ** 2 if D > 0.0 else 0.0
    d_dq = C * (1.0 - C) / D ** 2 if D > 0.0 else 0.0
    half_width = 1.96 * np.sqrt(d_dC ** 2 * var_C + d_dq ** 2 * var_q)
    return float(p), float(half_width)
