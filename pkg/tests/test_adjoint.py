"""
Tests for the adjoint matrices, multiplier sets and Hamiltonian assembly.
"""
import numpy as np
import pytest
from hypothesis import HealthCheck, given, settings
from hypothesis import strategies as st
from pydantic import ValidationError
from scipy.linalg import expm

from adverse_control.adjoint import (
    AdjointMatrices,
    MultiplierSet,
    OmegaAtom,
    assemble_hamiltonians,
    endpoint_gradient,
    endpoint_value,
    fiber_hamiltonian,
    gronwall_bound,
    integrate_Z,
    integrate_Z_hat,
    is_cauchy,
    limit_sweep,
)
from adverse_control.control_space import ControlGrid, FiberPolicy, RelaxedControl
from adverse_control.errors import ShapeMismatch
from adverse_control.eval.problem_dataset import SMOOTH_LINEAR_JOINT_MATRIX, SMOOTH_LINEAR_PLAYER_MATRIX, sine_kink
from adverse_control.trajectory import integrate_perturbed, integrate_relaxed

N_STEPS = 100
ORDER = 8
J = 10


def _copy_policy(spec):
    u_grid, v_grid = spec.grids(N_STEPS)
    return FiberPolicy.dirac(u_grid, v_grid, np.tile(np.arange(u_grid.n_points), (N_STEPS, 1)))


def _example_pieces(spec, l0=0.5, weight=0.5):
    """Paths, adjoints and multipliers of the copy-policy atom against the uniform sigma."""
    u_grid, _ = spec.grids(N_STEPS)
    sigma = RelaxedControl.uniform(u_grid)
    policy = _copy_policy(spec)
    player = integrate_relaxed(spec, sigma, None, J, ORDER)
    atom = integrate_perturbed(spec, J, sigma, policy, order=ORDER)
    adjoints = AdjointMatrices(
        Z=integrate_Z(spec, J, sigma, player, ORDER),
        Z_hat_per_atom=[integrate_Z_hat(spec, J, sigma, policy, atom, ORDER)],
        j=J,
    )
    multipliers = MultiplierSet(
        l0=l0,
        l1=np.zeros(0),
        omega=[OmegaAtom(policy=policy, weight=weight, index=0)],
        H0=endpoint_gradient(spec.h0, player.final, J, ORDER)[0],
        H1=np.zeros((0, spec.n)),
        H_hat_per_atom=[endpoint_gradient(spec.h_hat, atom.final, J, ORDER)[0]],
        lam=np.zeros(spec.joint_dim),
    )
    return player, [atom], adjoints, multipliers


def test_player_adjoint_is_exponential(smooth_spec):
    u_grid, _ = smooth_spec.grids(N_STEPS)
    sigma = RelaxedControl.dirac(u_grid, 0)
    traj = integrate_relaxed(smooth_spec, sigma, None, 5, ORDER)

    z = integrate_Z(smooth_spec, 5, sigma, traj, ORDER)

    expected = np.array([expm(SMOOTH_LINEAR_PLAYER_MATRIX * (1.0 - t)) for t in traj.times])
    assert z == pytest.approx(expected, abs=1e-8)


def test_joint_adjoint_is_exponential(smooth_spec):
    u_grid, v_grid = smooth_spec.grids(N_STEPS)
    sigma = RelaxedControl.uniform(u_grid)
    pi = FiberPolicy.uniform(u_grid, v_grid)
    traj = integrate_perturbed(smooth_spec, 5, sigma, pi, order=ORDER)

    z_hat = integrate_Z_hat(smooth_spec, 5, sigma, pi, traj, ORDER)

    expected = np.array([expm(SMOOTH_LINEAR_JOINT_MATRIX * (1.0 - t)) for t in traj.times])
    assert z_hat == pytest.approx(expected, abs=1e-8)


def test_adjoint_grid_mismatch(smooth_spec):
    u_grid, _ = smooth_spec.grids(N_STEPS)
    traj = integrate_relaxed(smooth_spec, RelaxedControl.uniform(u_grid), None, 5, ORDER)
    other = RelaxedControl.uniform(smooth_spec.grids(50)[0])
    with pytest.raises(ShapeMismatch):
        integrate_Z(smooth_spec, 5, other, traj, ORDER)


def test_adjoint_below_gronwall_bound(example_spec):
    _, _, adjoints, _ = _example_pieces(example_spec)

    assert adjoints.sup_norm <= gronwall_bound(example_spec.duration, example_spec.lipschitz_hat)
    # along y = e^t the adversary block of Z^ is e^(1 - t)
    assert adjoints.Z_hat_per_atom[0][0, 1, 1] == pytest.approx(np.e, abs=1e-6)


@pytest.mark.parametrize(
    "duration, lipschitz, expected",
    [(1.0, 1.0, 1.0 + np.e), (2.0, 0.5, 1.0 + np.e**2), (1.0, 0.0, 1.0), (0.5, 1.0, 1.0 + 0.5 * np.exp(0.5))],
)
def test_gronwall_bound_formula(duration, lipschitz, expected):
    assert gronwall_bound(duration, lipschitz) == pytest.approx(expected, rel=1e-14)


def test_adjoint_derivative_entrywise_bound(example_spec):
    """Across each step |dZ/dt| stays below L sup |Z| entrywise."""
    _, _, adjoints, _ = _example_pieces(example_spec)
    dt = example_spec.duration / N_STEPS

    for z in [adjoints.Z, *adjoints.Z_hat_per_atom]:
        rates = np.abs(np.diff(z, axis=0)) / dt
        assert np.all(rates <= 1.02 * example_spec.lipschitz_hat * adjoints.sup_norm)


@pytest.mark.parametrize("problem", ["smooth", "sine_kink"])
def test_needle_perturbation(problem, smooth_spec, make_spec):
    """Moving one step of sigma onto another point shifts y(t1) by dt Z(t) times the change of f."""
    spec = smooth_spec if problem == "smooth" else make_spec(sine_kink)
    n_steps, step = 400, 200
    u_grid, _ = spec.grids(n_steps)
    sigma = RelaxedControl.dirac(u_grid, 0)
    weights = sigma.weights.copy()
    weights[step] = np.eye(u_grid.n_points)[-1]
    needle = RelaxedControl(weights=weights, grid=u_grid)

    base = integrate_relaxed(spec, sigma, None, 5, ORDER)
    moved = integrate_relaxed(spec, needle, None, 5, ORDER)
    z = integrate_Z(spec, 5, sigma, base, ORDER)

    t, y = base.times[step], base.states[step]
    jump = spec.f.eval(t, y, u_grid.points[-1], 0.0) - spec.f.eval(t, y, u_grid.points[0], 0.0)
    predicted = 0.5 * (z[step] + z[step + 1]) @ jump * base.dt
    shift = moved.final - base.final
    # the linear problem has no second-order term
    tol = 1e-5 if problem == "smooth" else 1e-2
    assert shift == pytest.approx(predicted, rel=tol)


def test_terminal_identity_required():
    z = np.tile(np.eye(2), (5, 1, 1))
    z[-1, 0, 1] = 0.1
    with pytest.raises(ValidationError):
        AdjointMatrices(Z=z, j=3)


def test_normalization_upper_bound():
    with pytest.raises(ValidationError):
        MultiplierSet(l0=0.8, l1=np.array([0.5]), H0=np.ones(1), H1=np.ones((1, 1)), lam=np.zeros(2))


def test_empty_equality_survives_json():
    multipliers = MultiplierSet(l0=1.0, l1=np.zeros(0), H0=np.ones(2), H1=np.zeros((0, 2)), lam=np.zeros(3))

    restored = MultiplierSet.model_validate_json(multipliers.model_dump_json())

    assert restored.H1.shape == (0, 2)
    assert restored.total == pytest.approx(1.0)


def test_endpoint_value_unmollified(example_spec):
    x = np.array([3.0, 5.0])

    assert endpoint_value(example_spec.h_hat, x, None)[0] == pytest.approx(2.0)
    assert endpoint_value(example_spec.h_hat, x, 10, ORDER)[0] == pytest.approx(2.0, abs=1e-12)


def test_fiber_hamiltonian_kinds():
    rng = np.random.default_rng(0)
    fiber = rng.normal(size=(4, 3, 2))
    u_grid, v_grid = ControlGrid.full([-1.0, 0.0, 1.0], 4), ControlGrid.full([-1.0, 1.0], 4)
    mask = np.ones((4, 2), dtype=bool)
    mask[0, 1] = False

    frak = fiber_hamiltonian(fiber, FiberPolicy.uniform(u_grid, v_grid), mask)
    sigma_p = RelaxedControl(weights=np.tile([0.25, 0.75], (4, 1)), grid=v_grid)
    averaged = fiber_hamiltonian(fiber, sigma_p, mask)

    assert frak[0] == pytest.approx(fiber[0, :, 0])
    assert frak[1:] == pytest.approx(fiber[1:].max(axis=-1))
    assert averaged == pytest.approx(0.25 * fiber[..., 0] + 0.75 * fiber[..., 1])


def test_copy_atom_makes_H_flat(example_spec):
    """Against the copy policy every u earns the same fiber Hamiltonian."""
    player, atoms, adjoints, multipliers = _example_pieces(example_spec)

    table = assemble_hamiltonians(example_spec, J, multipliers, adjoints, player, atoms, ORDER)

    assert table.H.shape == (N_STEPS, 2)
    assert table.H[:, 0] == pytest.approx(table.H[:, 1], abs=1e-12)
    assert np.all(table.H > 0)
    assert table.player == pytest.approx(np.zeros((N_STEPS, 2)))


def test_atom_count_mismatch(example_spec):
    player, atoms, adjoints, multipliers = _example_pieces(example_spec)
    with pytest.raises(ShapeMismatch):
        assemble_hamiltonians(example_spec, J, multipliers, adjoints, player, [], ORDER)


@settings(max_examples=8, deadline=None, suppress_health_check=[HealthCheck.function_scoped_fixture])
@given(scale=st.floats(min_value=0.05, max_value=1.0, allow_nan=False))
def test_hamiltonian_homogeneous(scale, example_spec):
    """Scaling every multiplier scales H and keeps its argmin sets."""
    player, atoms, adjoints, multipliers = _example_pieces(example_spec, l0=0.6, weight=0.4)
    scaled = multipliers.model_copy(
        update={"l0": 0.6 * scale, "omega": [multipliers.omega[0].model_copy(update={"weight": 0.4 * scale})]}
    )

    base = assemble_hamiltonians(example_spec, J, multipliers, adjoints, player, atoms, ORDER)
    other = assemble_hamiltonians(example_spec, J, scaled, adjoints, player, atoms, ORDER)

    assert other.H == pytest.approx(scale * base.H, rel=1e-10, abs=1e-14)
    assert np.array_equal(np.argmin(other.H, axis=1), np.argmin(base.H, axis=1))


def test_limit_sweep_on_linear_problem(smooth_spec):
    u_grid, _ = smooth_spec.grids(50)
    sigma = RelaxedControl.dirac(u_grid, 0)
    multipliers = MultiplierSet(l0=1.0, l1=np.zeros(0), H0=np.ones(1), H1=np.zeros((0, 1)), lam=np.zeros(2))

    sweep = limit_sweep(smooth_spec, [5, 10, 20], [sigma] * 3, [multipliers] * 3, order=ORDER)

    assert sweep.adjoints.j == "limit"
    assert len(sweep.increments) == 2
    assert max(sweep.increments) < 1e-10
    assert not sweep.non_cauchy


def test_limit_sweep_needs_matching_inputs(smooth_spec):
    with pytest.raises(ShapeMismatch):
        limit_sweep(smooth_spec, [], [], [])


@pytest.mark.parametrize(
    "increments, expected",
    [([], True), ([0.3, 0.1, 0.1], True), ([0.1, 0.3], False)],
)
def test_is_cauchy(increments, expected):
    assert is_cauchy(increments, 1e-9) is expected
