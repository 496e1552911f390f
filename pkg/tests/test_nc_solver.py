"""
Tests for the exchange-method solver, the necessary-condition residuals
and the j-sweep certificates.
"""
import copy
import math

import numpy as np
import pytest
from pydantic import ValidationError

from adverse_control import nc_solver
from adverse_control.adjoint import HamiltonianTable, MultiplierSet
from adverse_control.config import SolverConfig
from adverse_control.control_space import ControlGrid, FiberPolicy, RelaxedControl
from adverse_control.errors import InfeasibleStart, SolverFailure
from adverse_control.eval.problem_dataset import (
    brute_force_value,
    expected_values,
    problem_files,
    smooth_linear,
    toy_problem,
    toy_seeds,
)
from adverse_control.nc_solver import (
    PerturbedProblem,
    adversary_best_response,
    build_perturbed_problem,
    fiber_argmax,
    frank_wolfe_gap,
    greedy_control,
    min_condition_excess,
    player_step,
    restore_value,
    run_j_sweep,
    solve_perturbed,
    verify_conditions,
)
from adverse_control.trajectory import ProximityConstants

SMOOTH_VALUE = 3.0 * math.exp(-0.5) - 2.0


def _is_copy_policy(policy: FiberPolicy) -> float:
    """Share of (step, u) cells whose fiber is the Dirac at v = u."""
    n_u = policy.u_grid.n_points
    return float(np.mean([policy.weights[:, i, i] for i in range(n_u)]))


# Player-1 step


def test_greedy_prefers_lowest_index_on_ties():
    grid = ControlGrid.full([-1.0, 0.0, 1.0], 3)
    H = np.array([[0.0, 0.0, 0.0], [2.0, 1.0, 1.0], [3.0, 2.0, -1.0]])

    greedy = greedy_control(H, grid)

    assert np.argmax(greedy.weights, axis=1).tolist() == [0, 1, 2]


def test_greedy_skips_forbidden_points():
    mask = np.ones((2, 3), dtype=bool)
    mask[0, 2] = False
    grid = ControlGrid(points=[-1.0, 0.0, 1.0], admissible_mask=mask)
    H = np.array([[1.0, 2.0, -5.0], [1.0, 2.0, -5.0]])

    sigma = RelaxedControl.uniform(grid)

    assert np.argmax(greedy_control(H, grid).weights, axis=1).tolist() == [0, 2]
    assert min_condition_excess(sigma, H) == pytest.approx([0.5, 13.0 / 3.0])


def test_greedy_control_is_a_fixed_point():
    rng = np.random.default_rng(0)
    grid = ControlGrid.full([-1.0, 0.0, 1.0], 6)
    H = rng.normal(size=(6, 3))
    sigma = greedy_control(H, grid)
    table = HamiltonianTable(
        frak_h=np.zeros((0, 6, 3)), H=H, k=np.zeros((7, 1)), fiber=np.zeros((0, 6, 3, 2)), player=H
    )

    assert frank_wolfe_gap(sigma, H, 1.0 / 6) == pytest.approx(0.0)
    assert player_step(sigma, table, "open_loop", 3)[0].weights == pytest.approx(sigma.weights)
    assert frank_wolfe_gap(RelaxedControl.uniform(grid), H, 1.0 / 6) > 0


def _flat_table(H):
    n_steps, n_u = H.shape
    return HamiltonianTable(
        frak_h=np.zeros((0, n_steps, n_u)), H=H, k=np.zeros((n_steps + 1, 1)), fiber=np.zeros((0, n_steps, n_u, 2)), player=H
    )


@pytest.mark.parametrize("iteration", [0, 1, 2, 8])
def test_open_loop_step(iteration):
    grid = ControlGrid.full([-1.0, 1.0], 4)
    H = np.tile([1.0, -1.0], (4, 1))
    sigma = RelaxedControl.dirac(grid, 0)

    stepped, gamma = player_step(sigma, _flat_table(H), "open_loop", iteration)

    assert gamma == pytest.approx(2.0 / (iteration + 2.0))
    assert stepped.weights[:, 1] == pytest.approx(np.full(4, gamma))


def test_backtracking_halves_until_decrease():
    grid = ControlGrid.full([-1.0, 1.0], 4)
    H = np.tile([1.0, -1.0], (4, 1))
    sigma = RelaxedControl.dirac(grid, 0)
    calls = []

    def objective(candidate):
        calls.append(candidate.weights[0, 1])
        # minimized at a quarter of the way to the greedy control
        return float((candidate.weights[0, 1] - 0.25) ** 2)

    stepped, gamma = player_step(sigma, _flat_table(H), "backtracking", objective=objective)

    assert gamma == 0.25
    assert calls == [0.0, 1.0, 0.5, 0.25]
    assert stepped.weights[:, 1] == pytest.approx(np.full(4, 0.25))


def test_backtracking_needs_objective():
    grid = ControlGrid.full([-1.0, 1.0], 4)
    sigma = RelaxedControl.dirac(grid, 0)

    with pytest.raises(ValueError):
        player_step(sigma, _flat_table(np.zeros((4, 2))), "backtracking")


def test_fiber_argmax_reverses_under_negation():
    rng = np.random.default_rng(1)
    fiber = rng.normal(size=(5, 2, 3))
    mask = np.ones((5, 3), dtype=bool)

    assert np.array_equal(fiber_argmax(-fiber, mask), np.argmin(fiber, axis=-1))
    assert np.all(fiber_argmax(np.zeros((5, 2, 3)), mask) == 0)


# Perturbed problems


def test_constraint_shift_matches_constant(example_spec):
    pp = PerturbedProblem.create(example_spec, 10, order=8)

    assert pp.constraint_shift == pytest.approx(ProximityConstants.from_spec(example_spec).c_h_hat / 10)
    assert pp.a_j.shape == (0,)
    assert pp.constraint(np.array([5.0, 2.0])) == pytest.approx(-3.0 + pp.constraint_shift)


def test_equality_shift_inside_window(make_spec):
    problem = copy.deepcopy(smooth_linear)
    problem["equality"] = {"name": "linear", "params": {"weights": [[1.0]], "offset": 0.5}}
    spec = make_spec(problem)
    config = SolverConfig(n_steps=100, quadrature_order=8)

    pp = build_perturbed_problem(spec, 5, config=config)

    assert pp.spec.q == 1
    assert np.abs(pp.a_j) == pytest.approx([0.0], abs=1e-10)
    with pytest.raises(ValidationError):
        PerturbedProblem(
            spec=spec,
            j=5,
            a_j=np.array([1e9]),
            constraint_shift=pp.constraint_shift,
            b_bar=spec.b_bar,
            b_tilde_bar=spec.b_tilde_bar,
        )


def test_infeasible_start(make_spec, monkeypatch):
    problem = copy.deepcopy(smooth_linear)
    problem["equality"] = {"name": "linear", "params": {"weights": [[1.0]]}}
    spec = make_spec(problem)
    monkeypatch.setattr(nc_solver, "endpoint_value", lambda *args, **kwargs: np.array([1e6]))

    with pytest.raises(InfeasibleStart):
        build_perturbed_problem(spec, 5, config=SolverConfig(n_steps=50, quadrature_order=8))


# Adversary best response


def test_best_response_copies_the_player(example_spec, fast_config):
    """Against the uniform sigma the best fiber policy plays v = u and drives y to e."""
    pp = PerturbedProblem.create(example_spec, 10, order=8)
    sigma = RelaxedControl.uniform(example_spec.grids(fast_config.n_steps)[0])

    response = adversary_best_response(pp, sigma, config=fast_config)

    assert isinstance(response.policy, FiberPolicy)
    assert _is_copy_policy(response.policy) == 1.0
    assert response.value == pytest.approx(math.e - 100.0 + pp.constraint_shift, abs=1e-7)
    assert response.sweeps >= 2


def test_single_adversary_point(make_spec):
    problem = copy.deepcopy(smooth_linear)
    problem["v_controls"] = {"points": [1.0]}
    spec = make_spec(problem)
    config = SolverConfig(n_steps=50, quadrature_order=8)
    sigma = RelaxedControl.uniform(spec.grids(50)[0])

    response = adversary_best_response(PerturbedProblem.create(spec, 5, order=8), sigma, config=config)

    assert np.all(response.policy.weights == 1.0)


# Solving


@pytest.mark.parametrize("seed", toy_seeds)
def test_toy_matches_brute_force(seed, make_spec):
    """On linear toys the optimal relaxed control is a Dirac sequence found by enumeration."""
    spec = make_spec(toy_problem(seed))
    config = SolverConfig(n_steps=8, quadrature_order=8)

    solution = solve_perturbed(PerturbedProblem.create(spec, 5, order=8), config)

    assert solution.perturbed_value == pytest.approx(brute_force_value(spec, 8), abs=1e-6)


@pytest.mark.parametrize("step_rule", ["open_loop", "backtracking"])
def test_inactive_constraint_has_no_atoms(step_rule, smooth_spec, fast_config):
    config = fast_config.model_copy(update={"step_rule": step_rule})
    solution = solve_perturbed(PerturbedProblem.create(smooth_spec, 5, order=8), config)

    assert solution.status == "converged"
    assert solution.multipliers.omega == []
    assert solution.multipliers.l0 == pytest.approx(1.0)
    assert np.all(solution.sigma.weights[:, 0] == 1.0)
    assert solution.perturbed_value == pytest.approx(SMOOTH_VALUE, abs=1e-9)


def test_example_solution(example_spec, fast_config):
    pp = PerturbedProblem.create(example_spec, 10, order=8)

    solution = solve_perturbed(pp, fast_config)

    assert solution.status == "converged"
    assert solution.multipliers.l0 == pytest.approx(0.5, abs=1e-6)
    assert solution.multipliers.omega_mass == pytest.approx(0.5, abs=1e-6)
    assert np.max(np.abs(solution.constraint_values)) < 1e-8
    assert solution.b_bar[0] == pytest.approx(math.e + pp.constraint_shift, abs=1e-6)


def test_warm_start_matches_cold_start(example_spec, fast_config):
    """Seeding j = 10 with the j = 5 solution reaches the same optimum as a fresh start."""
    coarse = solve_perturbed(PerturbedProblem.create(example_spec, 5, order=8), fast_config)
    pp = PerturbedProblem.create(example_spec, 10, order=8)

    cold = solve_perturbed(pp, fast_config)
    warm = solve_perturbed(pp, fast_config, coarse.sigma, coarse.policies)

    assert warm.status == cold.status == "converged"
    assert warm.perturbed_value == pytest.approx(cold.perturbed_value, abs=1e-6)
    assert warm.b_bar == pytest.approx(cold.b_bar, abs=1e-6)
    assert warm.multipliers.l0 == pytest.approx(cold.multipliers.l0, abs=1e-6)


def test_restore_value_against_copy_policy(example_spec):
    u_grid, v_grid = example_spec.grids(200)
    sigma = RelaxedControl.uniform(u_grid)
    copy_policy = FiberPolicy.dirac(u_grid, v_grid, np.tile([0, 1], (200, 1)))

    value, restored, success = restore_value(example_spec, sigma, np.array([50.0]), [copy_policy])

    assert success
    assert value == pytest.approx(math.e, abs=1e-6)
    assert restored[0] == pytest.approx(value)


# Sweeps and certificates


def test_example_certificate(example_spec, fast_config):
    certificate = run_j_sweep(example_spec, [5, 10], fast_config)

    assert certificate.status == "certified", certificate.reasons
    assert certificate.j == 10
    assert certificate.value == pytest.approx(math.e, abs=1e-3)
    assert certificate.multipliers.l0 == pytest.approx(0.5, abs=1e-6)
    assert _is_copy_policy(certificate.heaviest_atom.policy) >= 0.99
    assert [record.j for record in certificate.j_history] == [5, 10]
    assert len(certificate.multiplier_increments) == 1
    assert not certificate.non_cauchy
    assert certificate.residuals.passed


def test_certificate_reverifies(smooth_spec, fast_config):
    certificate = run_j_sweep(smooth_spec, [5], fast_config)

    report = verify_conditions(smooth_spec, certificate.sigma_bar, certificate, fast_config)

    assert certificate.status == "certified"
    assert certificate.value == pytest.approx(SMOOTH_VALUE, abs=1e-9)
    assert report.passed


def test_zero_multipliers_fail_normalization(smooth_spec, fast_config):
    certificate = run_j_sweep(smooth_spec, [5], fast_config)
    zero = MultiplierSet(
        l0=0.0, l1=np.zeros(0), H0=certificate.multipliers.H0, H1=np.zeros((0, 1)), lam=np.zeros(2)
    )

    report = verify_conditions(smooth_spec, certificate.sigma_bar, certificate.model_copy(update={"multipliers": zero}), fast_config)

    assert not report.get("normalization").passed


def test_perturbed_control_violates_min_condition(smooth_spec, fast_config):
    """Moving 10% of the mass off the strict argmin shows up in the min-condition residual."""
    certificate = run_j_sweep(smooth_spec, [5], fast_config)
    u_grid = certificate.sigma_bar.grid
    moved = RelaxedControl.dirac(u_grid, 0).mix(RelaxedControl.dirac(u_grid, 2), 0.1)

    report = verify_conditions(smooth_spec, moved, certificate, fast_config)

    entry = report.get("min_condition")
    assert not entry.passed
    assert entry.value > 10 * entry.tolerance


def test_sweep_is_deterministic(smooth_spec, fast_config):
    first = run_j_sweep(smooth_spec, [5, 10], fast_config)
    second = run_j_sweep(smooth_spec, [5, 10], fast_config)

    assert first.model_dump_json() == second.model_dump_json()


def test_sweep_needs_indices(smooth_spec):
    with pytest.raises(ValueError):
        run_j_sweep(smooth_spec, [])


def test_sweep_fails_when_every_index_fails(example_spec, fast_config):
    """A joint constant too large for the step count makes every index fail."""
    stiff = example_spec.model_copy(
        update={"f_tilde": example_spec.f_tilde.model_copy(update={"lipschitz_const": 1000.0})}
    )

    with pytest.raises(SolverFailure):
        run_j_sweep(stiff, [5, 10], fast_config)


def test_eviction_prefers_oldest_inactive_atom():
    config = SolverConfig(max_atoms=3)
    policies, ids = ["a", "b", "c"], [0, 1, 2]

    mu = nc_solver._admit(policies, ids, np.array([1.0, 0.0, 0.0]), np.array([0.0, -1.0, -1.0]), "d", 3, config)

    assert policies == ["a", "c", "d"]
    assert ids == [0, 2, 3]
    assert mu.tolist() == [1.0, 0.0, 0.0]

    mu = nc_solver._admit(policies, ids, np.array([2.0, 0.5, 1.0]), np.zeros(3), "e", 4, config)

    assert policies == ["a", "d", "e"]
    assert mu.tolist() == [2.0, 1.0, 0.0]


@pytest.mark.slow
def test_example_full_resolution(example_spec):
    certificate = run_j_sweep(example_spec, [5, 10, 20, 40], SolverConfig(n_steps=2000))

    assert certificate.status == "certified", certificate.reasons
    assert certificate.value == pytest.approx(math.e, abs=1e-3)
    assert _is_copy_policy(certificate.heaviest_atom.policy) >= 0.99
    assert not certificate.non_cauchy


@pytest.mark.slow
def test_relaxed_adversary_is_weaker(example_spec):
    """Without access to u the adversary cannot follow the player and the value drops below e."""
    config = SolverConfig(mode="relaxed", n_steps=100, quadrature_order=8, penalty_rounds=2, max_player_iterations=20)

    certificate = run_j_sweep(example_spec, [5], config)

    assert certificate.mode == "relaxed"
    assert certificate.value < math.e - 0.5


@pytest.mark.parametrize(
    "problem, expected",
    [(problem_files[i], expected_values[i]) for i in range(len(problem_files)) if expected_values[i] is not None],
)
def test_certified_values(problem, expected, make_spec, fast_config):
    certificate = run_j_sweep(make_spec(problem), [5, 10], fast_config)

    assert certificate.status == "certified", certificate.reasons
    assert certificate.value == pytest.approx(expected, abs=1e-3)
