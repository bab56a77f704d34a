"""Regional nonlinear MPC: offline region discovery, online solve skipping.

Offline, the toolkit solves constrained nonlinear OCPs on a state grid,
groups states that saturate the same first-input constraints (and therefore
share one constant optimal feedback law), and underestimates each group
with sampling-verified inscribed ellipsoids.  Online, the controller tests
ellipsoid membership first and only solves an OCP when no stored region
matches.
"""

from .atlas import (FeedbackClass, GridSpec, SampleAtlas, check_feedback_condition,
                    explore_grid, export_atlas_csv, feasible_window,
                    feedback_from_subset, group_by_subset, load_atlas, save_atlas,
                    saturated_subset)
from .controller import (ControlInfeasibleError, RegionStore, SolverContext,
                         StepResult, StoreEntry, StoreValidationError, Trajectory,
                         build_store, control_step, coverage_estimate, empty_store,
                         export_trajectory_csv, load_store, run_closed_loop,
                         save_store)
from .ellipsoids import (Ellipsoid, FitParams, VerificationReport,
                         ellipsoid_contains, fit_inner_ellipsoids,
                         sample_in_ellipsoid, verify_ellipsoid)
from .model import (SystemModel, builtin_example_model, eval_dynamics,
                    eval_jacobians, load_model, model_from_spec, model_hash,
                    register_family)
from .ocp import (OCPInstance, eval_all, eval_constraints, eval_cost, make_ocp,
                  rollout, x0_feasible)
from .qp import QPInfeasible, QPNumericalError, QPResult, solve_qp
from .sqp import (ActiveSetInfo, NLPSolution, SolverOptions,
                  check_region_regularity, classify_active_sets, kkt_residual,
                  solve_ocp)

__version__ = "0.1.0"

__all__ = [
    "ActiveSetInfo", "ControlInfeasibleError", "Ellipsoid", "FeedbackClass",
    "FitParams", "GridSpec", "NLPSolution", "OCPInstance", "QPInfeasible",
    "QPNumericalError", "QPResult", "RegionStore", "SampleAtlas",
    "SolverContext", "SolverOptions", "StepResult", "StoreEntry",
    "StoreValidationError", "SystemModel", "Trajectory", "VerificationReport",
    "build_store", "builtin_example_model", "check_feedback_condition",
    "check_region_regularity", "classify_active_sets", "control_step",
    "coverage_estimate", "ellipsoid_contains", "empty_store", "eval_all",
    "eval_constraints", "eval_cost", "eval_dynamics", "eval_jacobians",
    "explore_grid", "export_atlas_csv", "export_trajectory_csv",
    "feasible_window", "feedback_from_subset", "fit_inner_ellipsoids",
    "group_by_subset", "kkt_residual", "load_atlas", "load_model",
    "load_store", "make_ocp", "model_from_spec", "model_hash",
    "register_family", "rollout", "run_closed_loop", "sample_in_ellipsoid",
    "saturated_subset", "save_atlas", "save_store", "solve_ocp", "solve_qp",
    "verify_ellipsoid", "x0_feasible",
]
