from typing import Any, Callable, Dict

import pytest

from adverse_control.config import SolverConfig
from adverse_control.eval.problem_dataset import abs_bilinear_game, smooth_linear
from adverse_control.problem import ProblemSpec, build_problem
from adverse_control.schemas import ProblemFile

FAST_STEPS = 200
FAST_ORDER = 8


@pytest.fixture
def make_spec() -> Callable[[Dict[str, Any]], ProblemSpec]:
    """Build a ProblemSpec from a problem dict of the dataset."""
    return lambda problem: build_problem(ProblemFile.model_validate(problem))


@pytest.fixture
def example_spec(make_spec) -> ProblemSpec:
    return make_spec(abs_bilinear_game)


@pytest.fixture
def smooth_spec(make_spec) -> ProblemSpec:
    return make_spec(smooth_linear)


@pytest.fixture
def fast_config() -> SolverConfig:
    return SolverConfig(mode="hyperrelaxed", n_steps=FAST_STEPS, quadrature_order=FAST_ORDER)
