"""
Tests for the RK4 integrators and the perturbation proximity bounds.
"""
import math

import numpy as np
import pytest

from adverse_control.control_space import FiberPolicy, RelaxedControl, compose
from adverse_control.errors import ShapeMismatch, StepCountTooSmall
from adverse_control.eval.problem_dataset import abs_bilinear_game, nonsmooth_problems
from adverse_control.trajectory import (
    ProximityConstants,
    check_step_count,
    integrate_fiber,
    integrate_joint,
    integrate_perturbed,
    integrate_relaxed,
    proximity_report,
)

N_STEPS = 200


def _copy_policy(spec, n_steps=N_STEPS):
    u_grid, v_grid = spec.grids(n_steps)
    return FiberPolicy.dirac(u_grid, v_grid, np.tile(np.arange(u_grid.n_points), (n_steps, 1)))


def test_step_guard():
    check_step_count(0.01, 10.0)
    with pytest.raises(StepCountTooSmall) as excinfo:
        check_step_count(0.1, 10.0)
    assert "20 steps" in str(excinfo.value)


def test_relaxed_path_matches_closed_form(smooth_spec):
    """y' = -y/2 - 1 from y(0) = 1 ends at 3 e^(-1/2) - 2."""
    u_grid, _ = smooth_spec.grids(N_STEPS)

    traj = integrate_relaxed(smooth_spec, RelaxedControl.dirac(u_grid, 0))

    assert traj.n_steps == N_STEPS
    assert traj.dt == pytest.approx(1.0 / N_STEPS)
    assert traj.final[0] == pytest.approx(3.0 * math.exp(-0.5) - 2.0, abs=1e-9)
    assert traj.midpoints[0, 0] == pytest.approx(3.0 * math.exp(-0.25 / N_STEPS) - 2.0, abs=1e-9)


def test_copy_policy_reaches_e(example_spec):
    u_grid, _ = example_spec.grids(N_STEPS)
    sigma = RelaxedControl.uniform(u_grid)

    traj = integrate_fiber(example_spec, sigma, _copy_policy(example_spec))

    assert traj.final == pytest.approx([100.0, math.e], abs=1e-7)
    assert traj.block(1).states.shape == (N_STEPS + 1, 1)


def test_uniform_adversary_cancels(example_spec):
    """Against the uniform fiber the mean of u v vanishes and y stays put."""
    u_grid, v_grid = example_spec.grids(N_STEPS)
    sigma = RelaxedControl.uniform(u_grid)

    traj = integrate_fiber(example_spec, sigma, FiberPolicy.uniform(u_grid, v_grid))

    assert np.allclose(traj.states[:, 1], 1.0, atol=1e-12)


def test_perturbed_player_block(smooth_spec):
    """The player block of the perturbed joint path is the perturbed player path."""
    u_grid, v_grid = smooth_spec.grids(N_STEPS)
    sigma = RelaxedControl.uniform(u_grid)
    player = integrate_relaxed(smooth_spec, sigma, None, 5, 8)

    joint = integrate_perturbed(smooth_spec, 5, sigma, FiberPolicy.uniform(u_grid, v_grid), order=8)

    assert joint.j == 5
    assert joint.block(0, 1).states == pytest.approx(player.states, abs=1e-12)


def test_joint_initial_state_checked(smooth_spec):
    u_grid, v_grid = smooth_spec.grids(10)
    joint = compose(RelaxedControl.uniform(u_grid), FiberPolicy.uniform(u_grid, v_grid))
    with pytest.raises(ShapeMismatch):
        integrate_joint(smooth_spec, joint, u_grid.points, v_grid.points, np.zeros(3))


def test_proximity_constants(example_spec):
    constants = ProximityConstants.from_spec(example_spec)

    assert constants.alpha == pytest.approx(4.0)
    assert constants.c_y_hat == pytest.approx(1.0 + 4.0 * math.exp(4.0))
    assert constants.c_h_hat == pytest.approx(math.sqrt(2.0) * (2.0 + 4.0 * math.exp(4.0)))
    assert constants.c_h1 == 0.0


@pytest.mark.parametrize("problem", nonsmooth_problems, ids=[p["name"] for p in nonsmooth_problems])
@pytest.mark.parametrize("j", [5, 20])
@pytest.mark.parametrize("adversary", ["uniform", "dirac"])
def test_proximity_bounds_hold(problem, j, adversary, make_spec):
    spec = make_spec(problem)
    u_grid, v_grid = spec.grids(100)
    sigma = RelaxedControl.uniform(u_grid)
    if adversary == "uniform":
        pi = FiberPolicy.uniform(u_grid, v_grid)
    else:
        pi = FiberPolicy.dirac(u_grid, v_grid, np.full((100, u_grid.n_points), v_grid.n_points - 1))

    report = proximity_report(spec, j, sigma, pi, order=8)

    assert report.j == j
    assert [gap.name for gap in report.gaps] == ["trajectory", "h0", "h_hat", "increments"]
    assert report.passed



def test_rk4_is_fourth_order(smooth_spec):
    """Doubling the step count cuts the endpoint error by at least 8."""
    exact = 3.0 * math.exp(-0.5) - 2.0
    errors = []
    for n_steps in (5, 10, 20):
        u_grid, _ = smooth_spec.grids(n_steps)
        errors.append(abs(integrate_relaxed(smooth_spec, RelaxedControl.dirac(u_grid, 0)).final[0] - exact))

    assert errors[0] / errors[1] >= 8.0
    assert errors[1] / errors[2] >= 8.0


def test_opposing_diracs_decay(example_spec):
    """u = +1 against v = -1 gives y' = -|y|, so y(1) = 1/e."""
    u_grid, v_grid = example_spec.grids(N_STEPS)
    sigma = RelaxedControl.dirac(u_grid, 1)
    pi = FiberPolicy.dirac(u_grid, v_grid, np.zeros((N_STEPS, u_grid.n_points), dtype=int))

    traj = integrate_fiber(example_spec, sigma, pi)

    assert traj.final[1] == pytest.approx(math.exp(-1.0), abs=1e-9)


def test_increments_flag_understated_chi(make_spec):
    """A growth profile below |f| is caught by the step increments."""
    spec = make_spec({**abs_bilinear_game, "chi": {"name": "constant", "params": {"value": 0.5}}})
    u_grid, v_grid = spec.grids(100)

    report = proximity_report(spec, 5, RelaxedControl.uniform(u_grid), _copy_policy(spec, 100), order=8)

    increments = report.gap("increments")
    assert increments.bound == pytest.approx(0.005)
    assert increments.measured == pytest.approx(math.e * 0.01, rel=1e-2)
    assert not increments.passed
    assert not report.passed
