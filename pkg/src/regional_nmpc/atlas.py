"""Offline exploration: grid sweeps, saturated subsets, feedback classes.

A sweep solves the OCP at every point of a state-space grid and records
feasibility, the active set, the first input and a regularity flag.  Samples
are then grouped by the saturated subset of their active set (the rows among
the first q_u that are active); each group passing the shared-feedback-law
test (square, invertible input submatrix) becomes a FeedbackClass holding a
constant input law valid across every sample of the group.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field

import numpy as np

from .model import SystemModel, canonical_json, model_hash
from .ocp import eval_cost_constraints, make_ocp
from .sqp import (DEFAULT_OPTIONS, SolverOptions, check_region_regularity,
                  classify_active_sets, solve_ocp)

ATLAS_FORMAT = "regional-nmpc-atlas-v1"
COND_LIMIT = 1e12


@dataclass(frozen=True)
class GridSpec:
    """Rectangular window with a fixed per-axis resolution."""

    window: tuple          # ((lo_1, hi_1), ..., (lo_n, hi_n))
    resolution: tuple      # points per axis, each >= 2

    def __post_init__(self):
        if len(self.window) != len(self.resolution):
            raise ValueError("window and resolution dimension mismatch")
        for (lo, hi), r in zip(self.window, self.resolution):
            if not (hi > lo):
                raise ValueError("window bounds must satisfy lo < hi")
            if int(r) < 2:
                raise ValueError("resolution must be >= 2 per axis")

    @property
    def n(self) -> int:
        return len(self.window)

    @property
    def spacing(self) -> np.ndarray:
        return np.array([(hi - lo) / (r - 1)
                         for (lo, hi), r in zip(self.window, self.resolution)])

    def axes(self) -> list:
        return [np.linspace(lo, hi, r)
                for (lo, hi), r in zip(self.window, self.resolution)]

    def points(self) -> np.ndarray:
        """All grid points, row-major (last axis fastest), shape (M, n)."""
        mesh = np.meshgrid(*self.axes(), indexing="ij")
        return np.stack([g.ravel() for g in mesh], axis=1)


@dataclass
class SampleAtlas:
    """Columnar record of one exploration sweep.

    ``active_sets`` is the table of distinct active sets discovered (tuples
    of 1-based rows, lexicographically sorted); ``active_set_id[i]`` indexes
    it, -1 for samples without a converged solution.  ``weak_sets`` holds the
    weakly active rows per sample (multiplier below eps_lambda).
    """

    grid: GridSpec
    model_hash: str
    states: np.ndarray          # (M, n)
    status: list                # per-sample solver status strings
    V: np.ndarray               # (M,), NaN when not converged
    u0: np.ndarray              # (M, m), NaN when not converged
    active_set_id: np.ndarray   # (M,) int
    active_sets: list           # id -> tuple of 1-based rows
    weak_sets: list             # per-sample tuple of 1-based weakly active rows
    regular: np.ndarray         # (M,) bool
    iterations: np.ndarray      # (M,) int
    tolerances: dict = field(default_factory=dict)

    @property
    def feasible(self) -> np.ndarray:
        return np.array([s == "converged" for s in self.status])

    @property
    def n_feasible(self) -> int:
        return int(np.count_nonzero(self.feasible))

    def sample_active_set(self, i: int):
        sid = int(self.active_set_id[i])
        return None if sid < 0 else self.active_sets[sid]


@dataclass
class FeedbackClass:
    """All feasible samples sharing one saturated subset and one input law.

    ``member_active_sets`` collects the distinct full active sets whose
    intersection with the input rows equals ``A_tilde``; ``weakly_active``
    flags classes where some member holds a row of A_tilde only weakly
    (zero multiplier), since the law needs activity but not strictness.
    """

    A_tilde: tuple              # 1-based rows among {1..q_u}
    u_star: np.ndarray          # (m,)
    member_active_sets: tuple   # distinct full active sets, sorted
    sample_cloud: np.ndarray    # (K, n)
    member_indices: tuple = ()  # atlas sample indices behind sample_cloud
    weakly_active: bool = False
    n_excluded: int = 0         # members dropped for violating the law check


def saturated_subset(A, q_u: int) -> tuple:
    """Rows of the active set among the first q_u (input rows of u(0))."""
    return tuple(i for i in A if 1 <= i <= q_u)


def check_feedback_condition(A_tilde, G_u: np.ndarray, m: int) -> bool:
    """True iff A_tilde selects a square, invertible input submatrix."""
    if len(A_tilde) != m:
        return False
    rows = [i - 1 for i in A_tilde]
    sub = np.asarray(G_u, dtype=float)[rows]
    if sub.shape != (m, m):
        return False
    return bool(np.linalg.cond(sub) < COND_LIMIT)


def feedback_from_subset(A_tilde, G_u: np.ndarray, w_u: np.ndarray) -> np.ndarray:
    """Constant law u_star solving G_u[A_tilde] u = w_u[A_tilde]."""
    if not check_feedback_condition(A_tilde, G_u, np.asarray(G_u).shape[1]):
        raise ValueError(f"subset {A_tilde} does not satisfy the feedback condition")
    rows = [i - 1 for i in A_tilde]
    return np.linalg.solve(np.asarray(G_u, dtype=float)[rows],
                           np.asarray(w_u, dtype=float)[rows])


def _repair(model, opt, grid, pts, status, V, sols, record, max_rounds):
    """Fix wrong-basin and false-infeasible verdicts using grid neighbors.

    Worklist sweep: a converged sample i is re-solved from a neighbor j
    whose input sequence, replayed at x_i, beats V[i]; a non-converged
    sample is retried warm from any converged neighbor and additionally
    gets one multistart cold solve (a basin can lose feasibility right
    where another becomes optimal, so a warm retry can both re-certify a
    false infeasible verdict and land in a poor basin doing so).  Accepted
    repairs strictly lower V[i] (or flip i to converged, which never
    reverts), so the pass terminates; each repair re-enqueues the
    neighborhood.
    """
    shape = grid.resolution
    strides = [int(np.prod(shape[a + 1:])) for a in range(len(shape))]

    def neighbor_ids(i):
        out = []
        for sz, st in zip(shape, strides):
            k = (i // st) % sz
            if k > 0:
                out.append(i - st)
            if k + 1 < sz:
                out.append(i + st)
        return out

    work = set(range(len(pts)))
    tried_cold = set()
    for _ in range(max_rounds):
        if not work:
            break
        next_work = set()
        for i in sorted(work):
            nbrs = [j for j in neighbor_ids(i) if sols[j] is not None]
            if not nbrs:
                continue
            instance = None
            fixed = False
            promising = False
            was_unsolved = sols[i] is None
            for j in nbrs:
                Uj, lamj, actj = sols[j]
                if instance is None:
                    instance = make_ocp(model, pts[i])
                if sols[i] is not None:
                    # replaying j's inputs at x_i must beat the recorded
                    # value with near-feasibility, else j's basin is no better
                    c, G = eval_cost_constraints(instance, Uj)
                    if not (np.isfinite(c) and c < V[i] - 1e-6
                            and float(np.max(G)) < 0.5):
                        continue
                    promising = True
                sol = solve_ocp(instance, warm_start=Uj, options=opt,
                                warm_lam=lamj, warm_active=actj)
                if sol.converged and (sols[i] is None or sol.V < V[i] - 1e-9):
                    record(i, instance, sol)
                    fixed = True
                    break
            if (was_unsolved or (promising and not fixed)) and i not in tried_cold:
                # a warm solve can get captured by the basin it should leave
                # (both on recovery and on a predicted improvement), so such
                # samples get one multistart comparison
                tried_cold.add(i)
                sol = solve_ocp(instance, options=opt)
                if sol.converged and (sols[i] is None or sol.V < V[i] - 1e-9):
                    record(i, instance, sol)
                    fixed = True
            if fixed:
                next_work.add(i)
                next_work.update(neighbor_ids(i))
        work = next_work


def explore_grid(model: SystemModel, window, resolution,
                 options: SolverOptions | None = None,
                 check_regularity: bool = True,
                 repair_rounds: int = 50,
                 probe_stride: int = 3) -> SampleAtlas:
    """Solve the OCP over the grid and record per-sample classifications.

    Sweeps row-major, warm-starting each solve from the neighbor to the
    left (same row) or below (same column, previous row); failures fall
    back to a cold start and are recorded per sample, never aborting the
    sweep.  Warm chains track one local basin, so every probe_stride-th
    point per axis additionally runs the multistart cold solver and keeps
    the lower optimum; a repair pass then exploits continuity of the
    optimal cost to spread such discoveries: a sample whose recorded V
    exceeds what a neighbor's input sequence achieves at the same state
    was caught in a worse basin and is re-solved from that neighbor,
    keeping strict improvements only.  Deterministic given model, window,
    resolution and tolerances.
    """
    opt = options or DEFAULT_OPTIONS
    grid = GridSpec(tuple(tuple(map(float, w)) for w in window),
                    tuple(int(r) for r in resolution))
    if grid.n != model.n:
        raise ValueError(f"window has {grid.n} axes, model has n={model.n}")
    pts = grid.points()
    M = pts.shape[0]
    inner = int(np.prod(grid.resolution[1:]))  # samples per outermost-axis row

    status = [""] * M
    V = np.full(M, np.nan)
    u0 = np.full((M, model.m), np.nan)
    active_set_id = np.full(M, -1, dtype=int)
    weak_sets = [()] * M
    regular = np.zeros(M, dtype=bool)
    iterations = np.zeros(M, dtype=int)
    set_table: dict = {}
    sols = [None] * M           # (U, lam, 0-based active) per converged sample

    def record(i, instance, sol):
        status[i] = sol.status
        iterations[i] = sol.iterations
        if not sol.converged:
            return
        info = classify_active_sets(instance, sol, options=opt)
        V[i] = sol.V
        u0[i] = sol.U[:model.m]
        active_set_id[i] = set_table.setdefault(info.A, len(set_table))
        weak_sets[i] = info.W
        if check_regularity:
            regular[i] = check_region_regularity(instance, sol, info)
        sols[i] = (sol.U, sol.lam, tuple(j - 1 for j in info.A))

    shape = grid.resolution
    strides = [int(np.prod(shape[a + 1:])) for a in range(len(shape))]

    def on_probe_lattice(i):
        if probe_stride <= 1:
            return probe_stride == 1
        return all((i // st) % sz % probe_stride == 0
                   for sz, st in zip(shape, strides))

    below = [None] * inner    # per-column seed from the previous row
    left = None
    for i in range(M):
        col = i % inner
        if col == 0:
            left = None
        seed = left if left is not None else below[col]
        instance = make_ocp(model, pts[i])
        if seed is None:
            sol = solve_ocp(instance, options=opt)
        else:
            sol = solve_ocp(instance, warm_start=seed[0], options=opt,
                            warm_lam=seed[1], warm_active=seed[2],
                            start_elastic=seed[3])
            if not (sol.converged or sol.status == "infeasible"):
                sol = solve_ocp(instance, options=opt)
            elif sol.converged and on_probe_lattice(i):
                alt = solve_ocp(instance, options=opt)
                if alt.converged and alt.V < sol.V - 1e-9:
                    sol = alt
        record(i, instance, sol)
        if sol.converged:
            seed_next = sols[i] + (False,)
        elif sol.status == "infeasible" and sol.iterations > 0:
            # chain the restoration endpoint; neighbors are likely infeasible
            seed_next = (sol.U, None, None, True)
        else:
            seed_next = None
        left, below[col] = seed_next, seed_next

    _repair(model, opt, grid, pts, status, V, sols, record, repair_rounds)

    # renumber set ids so the table is sorted independent of discovery order
    # (repairs can leave entries unused, so rebuild from the samples)
    inv = [None] * len(set_table)
    for a, sid in set_table.items():
        inv[sid] = a
    used = {inv[sid] for sid in active_set_id if sid >= 0}
    by_id = sorted(used, key=lambda a: (len(a), a))
    remap = {set_table[a]: j for j, a in enumerate(by_id)}
    for i in range(M):
        if active_set_id[i] >= 0:
            active_set_id[i] = remap[active_set_id[i]]

    return SampleAtlas(
        grid=grid, model_hash=model_hash(model), states=pts, status=status,
        V=V, u0=u0, active_set_id=active_set_id, active_sets=[tuple(a) for a in by_id],
        weak_sets=weak_sets, regular=regular, iterations=iterations,
        tolerances={"eps_act": opt.eps_act, "eps_lambda": opt.eps_lambda,
                    "tol_kkt": opt.tol_kkt},
    )


def group_by_subset(atlas: SampleAtlas, model: SystemModel,
                    law_tol: float = 1e-6) -> list:
    """Group feasible samples into feedback classes by saturated subset.

    One class per distinct saturated subset passing the feedback condition;
    subsets failing it (notably the empty set) produce no class.  Members
    whose recorded first input disagrees with the class law by more than
    ``law_tol`` are counted in ``n_excluded`` and dropped, keeping the
    stored cloud consistent with the law.
    """
    if atlas.n_feasible < 1:
        raise ValueError("atlas has no feasible sample")
    groups: dict = {}
    for i in range(len(atlas.status)):
        A = atlas.sample_active_set(i)
        if A is None:
            continue
        At = saturated_subset(A, model.q_u)
        if not check_feedback_condition(At, model.G_u, model.m):
            continue
        groups.setdefault(At, []).append(i)

    classes = []
    for At in sorted(groups):
        idx = groups[At]
        u_star = feedback_from_subset(At, model.G_u, model.w_u)
        keep, member_sets, weak = [], set(), False
        excluded = 0
        for i in idx:
            if np.max(np.abs(atlas.u0[i] - u_star)) > law_tol:
                excluded += 1
                continue
            keep.append(i)
            member_sets.add(atlas.sample_active_set(i))
            if set(atlas.weak_sets[i]) & set(At):
                weak = True
        if not keep:
            continue
        classes.append(FeedbackClass(
            A_tilde=At, u_star=u_star,
            member_active_sets=tuple(sorted(member_sets, key=lambda a: (len(a), a))),
            sample_cloud=atlas.states[keep].copy(),
            member_indices=tuple(keep),
            weakly_active=weak, n_excluded=excluded,
        ))
    return classes


def feasible_window(atlas: SampleAtlas, margin_spacings: float = 1.0) -> tuple:
    """Bounding box of the feasible samples, padded by grid spacings.

    Useful as a coverage window: it contains the explored feasible set
    while excluding far-away regions that would waste feasibility solves.
    Clipped to the exploration window.
    """
    feas = atlas.feasible
    if not np.any(feas):
        raise ValueError("atlas has no feasible sample")
    pts = atlas.states[feas]
    pad = margin_spacings * atlas.grid.spacing
    out = []
    for j, (lo, hi) in enumerate(atlas.grid.window):
        out.append((max(lo, float(pts[:, j].min() - pad[j])),
                    min(hi, float(pts[:, j].max() + pad[j]))))
    return tuple(out)


def _float_or_none(x):
    return None if not np.isfinite(x) else float(x)


def atlas_to_dict(atlas: SampleAtlas) -> dict:
    return {
        "format": ATLAS_FORMAT,
        "model_hash": atlas.model_hash,
        "window": [list(w) for w in atlas.grid.window],
        "resolution": list(atlas.grid.resolution),
        "tolerances": atlas.tolerances,
        "active_sets": [list(a) for a in atlas.active_sets],
        "samples": {
            "x": [[float(v) for v in row] for row in atlas.states],
            "status": list(atlas.status),
            "V": [_float_or_none(v) for v in atlas.V],
            "u0": [[_float_or_none(v) for v in row] for row in atlas.u0],
            "active_set_id": [int(v) for v in atlas.active_set_id],
            "weak": [list(w) for w in atlas.weak_sets],
            "regular": [bool(v) for v in atlas.regular],
            "iterations": [int(v) for v in atlas.iterations],
        },
    }


def save_atlas(atlas: SampleAtlas, path) -> None:
    """Write the atlas as deterministic JSON (sorted keys, no timestamps)."""
    with open(path, "w") as fh:
        fh.write(canonical_json(atlas_to_dict(atlas)))
        fh.write("\n")


def load_atlas(path) -> SampleAtlas:
    with open(path) as fh:
        doc = json.load(fh)
    if doc.get("format") != ATLAS_FORMAT:
        raise ValueError(f"not an atlas file: format={doc.get('format')!r}")
    s = doc["samples"]
    grid = GridSpec(tuple(tuple(w) for w in doc["window"]),
                    tuple(doc["resolution"]))
    to_nan = lambda v: np.nan if v is None else v
    return SampleAtlas(
        grid=grid, model_hash=doc["model_hash"],
        states=np.array(s["x"], dtype=float),
        status=list(s["status"]),
        V=np.array([to_nan(v) for v in s["V"]], dtype=float),
        u0=np.array([[to_nan(v) for v in row] for row in s["u0"]], dtype=float),
        active_set_id=np.array(s["active_set_id"], dtype=int),
        active_sets=[tuple(a) for a in doc["active_sets"]],
        weak_sets=[tuple(w) for w in s["weak"]],
        regular=np.array(s["regular"], dtype=bool),
        iterations=np.array(s["iterations"], dtype=int),
        tolerances=dict(doc["tolerances"]),
    )


def export_atlas_csv(atlas: SampleAtlas, path, config_comment: str = None) -> None:
    """Per-sample CSV for external plotting of feasibility/active-set maps.

    ``config_comment`` is written as a leading '#' line so the file carries
    its provenance; readers should skip comment lines.
    """
    n = atlas.grid.n
    with open(path, "w", newline="") as fh:
        if config_comment:
            fh.write(f"# {config_comment}\n")
        writer = csv.writer(fh)
        writer.writerow([f"x{j + 1}" for j in range(n)]
                        + ["feasible", "active_set_id", "u_star"])
        feas = atlas.feasible
        for i in range(len(atlas.status)):
            row = [repr(float(v)) for v in atlas.states[i]]
            row.append(1 if feas[i] else 0)
            row.append(int(atlas.active_set_id[i]))
            row.append(";".join(repr(float(v)) for v in atlas.u0[i])
                       if feas[i] else "")
            writer.writerow(row)
