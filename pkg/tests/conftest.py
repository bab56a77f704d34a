"""Shared fixtures: the built-in model, a fast coarse pipeline for module
tests, and the full default-resolution pipeline for the acceptance suite.

Heavy fixtures are session-scoped so their cost is paid once; tests that
do not request them stay fast.
"""

import numpy as np
import pytest

from regional_nmpc.atlas import explore_grid, feasible_window, group_by_subset
from regional_nmpc.cli import run_pipeline
from regional_nmpc.controller import build_store
from regional_nmpc.ellipsoids import FitParams, fit_inner_ellipsoids
from regional_nmpc.model import builtin_example_model
from regional_nmpc.sqp import SolverOptions

# default-run knobs, identical to the CLI pipeline defaults
DEFAULT_WINDOW = ((-6.0, 6.0), (-7.0, 7.0))
DEFAULT_RESOLUTION = (241, 241)
DEFAULT_SEED = 20110913

COARSE_WINDOW = ((-4.5, 4.5), (-5.5, 5.5))
COARSE_RESOLUTION = (41, 41)


@pytest.fixture(scope="session")
def model():
    return builtin_example_model()


@pytest.fixture(scope="session")
def coarse_atlas(model):
    return explore_grid(model, COARSE_WINDOW, COARSE_RESOLUTION)


@pytest.fixture(scope="session")
def coarse_classes(model, coarse_atlas):
    return group_by_subset(coarse_atlas, model)


@pytest.fixture(scope="session")
def coarse_fitted(model, coarse_atlas, coarse_classes):
    fitted = []
    for cls in coarse_classes:
        complement = np.delete(coarse_atlas.states,
                               np.array(cls.member_indices, int), axis=0)
        params = FitParams(complement=complement,
                           window=coarse_atlas.grid.window,
                           spacing=coarse_atlas.grid.spacing,
                           seed=DEFAULT_SEED, n_probe=150, n_verify=300)
        fitted.append((cls, fit_inner_ellipsoids(cls, model, 2, params)))
    return fitted


@pytest.fixture(scope="session")
def coarse_store(model, coarse_atlas, coarse_fitted):
    window = feasible_window(coarse_atlas)
    return build_store(model, coarse_fitted,
                       metadata={"coverage_window": [list(w) for w in window]})


@pytest.fixture(scope="session")
def default_pipeline(model):
    """The full offline run at CLI defaults; shared by all acceptance tests."""
    return run_pipeline(model, DEFAULT_WINDOW, DEFAULT_RESOLUTION,
                        SolverOptions(), DEFAULT_SEED, max_ellipsoids=4,
                        verify_samples=2000, coverage_samples=100000,
                        coverage_seed=DEFAULT_SEED + 1)


# ----------------------------------------------------------------------
# acceptance reporting: one summary line per criterion at the end of the
# run, visible without -s
# ----------------------------------------------------------------------

def pytest_configure(config):
    config.acceptance_lines = []


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = getattr(config, "acceptance_lines", [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)


@pytest.fixture
def acceptance(request):
    """Record and assert one acceptance criterion verdict."""
    def record(criterion: int, name: str, passed: bool, detail: str):
        line = (f"criterion {criterion} ({name}): "
                f"{'PASS' if passed else 'FAIL'} - {detail}")
        print(line)
        request.config.acceptance_lines.append(line)
        assert passed, line
    return record
