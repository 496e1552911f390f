"""Exchange-method solver for the perturbed problems and necessary-condition certificates.

At a fixed mollification index j the perturbed problem is

    minimize    h0^j(y^j(sigma)(t1))
    subject to  h1^j(y^j(sigma)(t1)) - a_j = 0
                h^j(y^j(sigma (x) pi)(t1)) + c_h/j <= 0   for every adversary pi

over relaxed player-1 controls sigma and the value coordinates of the initial
state. The adversary family is replaced by a finite atom set grown by best
responses; the player-1 problem against the atom set is an augmented
Lagrangian minimized by conditional-gradient steps, and the multipliers are
read off the penalty terms and normalized.
"""
import math
from typing import Callable, List, Literal, Optional, Sequence, Tuple, Union

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, computed_field, model_validator
from scipy import optimize

from .adjoint import (
    AdjointMatrices,
    HamiltonianTable,
    MultiplierSet,
    OmegaAtom,
    assemble_hamiltonians,
    endpoint_gradient,
    endpoint_value,
    fiber_integrand,
    gronwall_bound,
    integrate_Z,
    integrate_Z_hat,
    is_cauchy,
    sup_increments,
)
from .config import SolverConfig
from .control_space import ControlGrid, FiberPolicy, RelaxedControl
from .errors import AdverseControlError, InfeasibleStart, SolverFailure
from .mollify import DEFAULT_ORDER, quadrature_tolerance
from .problem import ProblemSpec
from .schemas import FloatArray
from .trajectory import (
    ProximityConstants,
    Trajectory,
    integrate_fiber,
    integrate_perturbed,
    integrate_relaxed,
    joint_field,
)
from .utils import status

SUPPORT_TOL = 1e-8
BACKTRACK_HALVINGS = 20

Adversary = Union[FiberPolicy, RelaxedControl]
Mode = Literal["relaxed", "hyperrelaxed"]
StepRule = Literal["open_loop", "backtracking"]


class PerturbedProblem(BaseModel):
    """The smooth problem at index j: mollified data, shifted equality, tightened inequality."""

    model_config = ConfigDict(frozen=True)

    spec: ProblemSpec
    j: int = Field(ge=1, description="Mollification index")
    order: int = Field(default=DEFAULT_ORDER, ge=2, description="Quadrature order of the mollifier")
    mode: Mode = Field(default="hyperrelaxed", description="Adversary class")
    a_j: FloatArray = Field(description="Equality shift, shape (q,)")
    constraint_shift: float = Field(ge=0, description="Inequality tightening c_h/j")
    b_bar: FloatArray = Field(description="Fixed player-1 initial state")
    b_tilde_bar: FloatArray = Field(description="Fixed adversary initial state")

    @model_validator(mode="after")
    def _check_shifts(self) -> "PerturbedProblem":
        constants = ProximityConstants.from_spec(self.spec)
        expected = constants.c_h_hat / self.j
        if not math.isclose(self.constraint_shift, expected, rel_tol=1e-12, abs_tol=1e-15):
            raise ValueError(f"constraint shift {self.constraint_shift} differs from c_h/j = {expected}")
        if self.a_j.shape != (self.spec.q,):
            raise ValueError(f"a_j must have shape ({self.spec.q},), got {self.a_j.shape}")
        window = constants.c_h1 / self.j
        if np.linalg.norm(self.a_j) > window * (1.0 + 1e-12) + 1e-15:
            raise ValueError(f"|a_j| = {np.linalg.norm(self.a_j)} exceeds the window c_h1/j = {window}")
        return self

    @classmethod
    def create(
        cls,
        spec: ProblemSpec,
        j: int,
        a_j: Optional[np.ndarray] = None,
        mode: Mode = "hyperrelaxed",
        order: int = DEFAULT_ORDER,
    ) -> "PerturbedProblem":
        return cls(
            spec=spec,
            j=j,
            order=order,
            mode=mode,
            a_j=np.zeros(spec.q) if a_j is None else np.asarray(a_j, dtype=float),
            constraint_shift=ProximityConstants.from_spec(spec).c_h_hat / j,
            b_bar=spec.b_bar,
            b_tilde_bar=spec.b_tilde_bar,
        )

    def cost(self, y: np.ndarray) -> float:
        return float(endpoint_value(self.spec.h0, y, self.j, self.order)[0])

    def equality(self, y: np.ndarray) -> np.ndarray:
        if self.spec.h1 is None:
            return np.zeros(0)
        return endpoint_value(self.spec.h1, y, self.j, self.order) - self.a_j

    def constraint(self, x: np.ndarray) -> float:
        return float(endpoint_value(self.spec.h_hat, x, self.j, self.order)[0]) + self.constraint_shift

    def cost_gradient(self, y: np.ndarray) -> np.ndarray:
        return endpoint_gradient(self.spec.h0, y, self.j, self.order)[0]

    def equality_jacobian(self, y: np.ndarray) -> np.ndarray:
        if self.spec.h1 is None:
            return np.zeros((0, self.spec.n))
        return endpoint_gradient(self.spec.h1, y, self.j, self.order)

    def constraint_gradient(self, x: np.ndarray) -> np.ndarray:
        return endpoint_gradient(self.spec.h_hat, x, self.j, self.order)[0]


def build_perturbed_problem(
    spec: ProblemSpec,
    j: int,
    incumbent: Optional[RelaxedControl] = None,
    config: Optional[SolverConfig] = None,
) -> PerturbedProblem:
    """Perturbed problem at j with a_j chosen to keep the incumbent's equality value.

    a_j = h1^j(y^j(sigma)(t1)) - h1(y(sigma)(t1)), clipped to the window
    |a_j| <= c_h1/j.

    Raises:
        InfeasibleStart: the unclipped shift leaves the window by more than the
            integrator and quadrature slack
    """
    config = config or SolverConfig()
    a_j = np.zeros(spec.q)
    if spec.h1 is not None:
        sigma = incumbent or RelaxedControl.uniform(spec.grids(config.n_steps)[0])
        mollified = integrate_relaxed(spec, sigma, None, j, config.quadrature_order).final
        exact = integrate_relaxed(spec, sigma).final
        raw = endpoint_value(spec.h1, mollified, j, config.quadrature_order) - spec.h1.eval(exact)
        window = ProximityConstants.from_spec(spec).c_h1 / j
        size = float(np.linalg.norm(raw))
        if size > window + 10.0 * config.integrator_tol + quadrature_tolerance(spec.n):
            raise InfeasibleStart(f"equality shift {size:.3e} at j = {j} exceeds the window c_h1/j = {window:.3e}")
        a_j = raw * min(1.0, window / size) if size > 0 else raw
    return PerturbedProblem.create(spec, j, a_j, config.mode, config.quadrature_order)


# Iterates


class IterateState(BaseModel):
    """Paths and endpoint values at one (sigma, b) against a list of adversary atoms."""

    model_config = ConfigDict(frozen=True)

    b: FloatArray
    player: Trajectory
    atom_trajs: List[Trajectory]
    cost: float
    equality: FloatArray
    constraints: FloatArray


def _endpoint_terms(pp: PerturbedProblem, y: np.ndarray, finals: Sequence[np.ndarray]) -> Tuple[float, np.ndarray, np.ndarray]:
    return pp.cost(y), pp.equality(y), np.array([pp.constraint(x) for x in finals])


def _evaluate(pp: PerturbedProblem, sigma: RelaxedControl, policies: Sequence[Adversary], b: np.ndarray) -> IterateState:
    spec = pp.spec
    b_hat = spec.initial_state(b)
    player = integrate_relaxed(spec, sigma, b, pp.j, pp.order)
    atom_trajs = [integrate_perturbed(spec, pp.j, sigma, policy, b_hat, pp.order) for policy in policies]
    cost, equality, constraints = _endpoint_terms(pp, player.final, [traj.final for traj in atom_trajs])
    return IterateState(
        b=b, player=player, atom_trajs=atom_trajs, cost=cost, equality=equality, constraints=constraints
    )


def _shift_value_coordinates(traj: Trajectory, coords: List[int], values: np.ndarray) -> Trajectory:
    states, midpoints = traj.states.copy(), traj.midpoints.copy()
    states[:, coords] = values
    midpoints[:, coords] = values
    return traj.model_copy(update={"states": states, "midpoints": midpoints})


def _with_value_coordinates(pp: PerturbedProblem, state: IterateState, values: np.ndarray) -> IterateState:
    """Replace the static value coordinates along every path; the dynamics never see them."""
    coords = pp.spec.value_coordinates
    b = state.b.copy()
    b[coords] = values
    player = _shift_value_coordinates(state.player, coords, values)
    atom_trajs = [_shift_value_coordinates(traj, coords, values) for traj in state.atom_trajs]
    cost, equality, constraints = _endpoint_terms(pp, player.final, [traj.final for traj in atom_trajs])
    return IterateState(
        b=b, player=player, atom_trajs=atom_trajs, cost=cost, equality=equality, constraints=constraints
    )


def augmented_lagrangian(
    cost: float, equality: np.ndarray, constraints: np.ndarray, lam: np.ndarray, mu: np.ndarray, rho: float
) -> float:
    """h0 + lam . H1 + rho/2 |H1|^2 + (1/2 rho) sum [(mu + rho g)_+^2 - mu^2]."""
    shifted = np.maximum(mu + rho * constraints, 0.0)
    return float(
        cost + lam @ equality + 0.5 * rho * equality @ equality + np.sum(shifted**2 - mu**2) / (2.0 * rho)
    )


def penalty_weights(
    equality: np.ndarray, constraints: np.ndarray, lam: np.ndarray, mu: np.ndarray, rho: float
) -> Tuple[np.ndarray, np.ndarray]:
    """Unnormalized (l1, omega) weights of the augmented Lagrangian gradient, with l0 = 1."""
    return lam + rho * equality, np.maximum(mu + rho * constraints, 0.0)


def _optimize_value_coordinates(
    pp: PerturbedProblem, state: IterateState, lam: np.ndarray, mu: np.ndarray, rho: float
) -> IterateState:
    """Minimize the augmented Lagrangian over the value coordinates inside B, on endpoints only."""
    coords = pp.spec.value_coordinates
    if not coords:
        return state
    y0 = state.player.final.copy()
    finals0 = np.array([traj.final for traj in state.atom_trajs]).reshape(-1, pp.spec.joint_dim)
    lower, upper = pp.spec.b_set.lower[coords], pp.spec.b_set.upper[coords]

    def at(values: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
        y, finals = y0.copy(), finals0.copy()
        y[coords] = values
        finals[:, coords] = values
        return y, finals

    def value_and_gradient(values: np.ndarray) -> Tuple[float, np.ndarray]:
        y, finals = at(np.atleast_1d(values))
        cost, equality, constraints = _endpoint_terms(pp, y, finals)
        l1, omega = penalty_weights(equality, constraints, lam, mu, rho)
        gradient = pp.cost_gradient(y) + l1 @ pp.equality_jacobian(y)
        for weight, x in zip(omega, finals):
            gradient = gradient + weight * pp.constraint_gradient(x)[: pp.spec.n]
        return augmented_lagrangian(cost, equality, constraints, lam, mu, rho), gradient[coords]

    if len(coords) == 1 and np.all(np.isfinite(lower)) and np.all(np.isfinite(upper)):
        slope = lambda s: float(value_and_gradient(np.array([s]))[1][0])  # noqa: E731
        lo, hi = float(lower[0]), float(upper[0])
        if slope(lo) >= 0:
            best = lo
        elif slope(hi) <= 0:
            best = hi
        else:
            best = optimize.brentq(slope, lo, hi, xtol=1e-14)
        values = np.array([best])
    else:
        bounds = [
            (None if not np.isfinite(lo) else float(lo), None if not np.isfinite(hi) else float(hi))
            for lo, hi in zip(lower, upper)
        ]
        result = optimize.minimize(
            value_and_gradient,
            state.b[coords],
            jac=True,
            method="L-BFGS-B",
            bounds=bounds,
            options={"gtol": 1e-12, "ftol": 1e-15, "maxiter": 500},
        )
        values = result.x
    return _with_value_coordinates(pp, state, values)


# Adversary best response


class BestResponse(BaseModel):
    """The best adversary found by forward-backward sweeps, with its tightened constraint value."""

    policy: Union[FiberPolicy, RelaxedControl]
    value: float = Field(description="h^j(y^j(sigma (x) pi)(t1)) + c_h/j")
    sweeps: int = Field(ge=1)


def fiber_argmax(fiber: np.ndarray, v_mask: np.ndarray) -> np.ndarray:
    """Admissible argmax over v per (step, u); ties go to the lowest grid index."""
    return np.argmax(np.where(v_mask[:, None, :], fiber, -np.inf), axis=-1)


def relaxed_argmax(fiber: np.ndarray, sigma_weights: np.ndarray, v_mask: np.ndarray) -> np.ndarray:
    """Admissible argmax over v of the sigma-averaged fiber integrand per step."""
    averaged = np.einsum("tu,tuv->tv", sigma_weights, fiber)
    return np.argmax(np.where(v_mask, averaged, -np.inf), axis=-1)


def best_response_from_fiber(
    fiber: np.ndarray, sigma: RelaxedControl, v_grid: ControlGrid, mode: Mode
) -> Adversary:
    """Dirac adversary maximizing the fiber integrand (its sigma average in relaxed mode)."""
    if mode == "relaxed":
        return RelaxedControl.dirac(v_grid, relaxed_argmax(fiber, sigma.weights, v_grid.admissible_mask))
    return FiberPolicy.dirac(sigma.grid, v_grid, fiber_argmax(fiber, v_grid.admissible_mask))


def uniform_adversary(sigma: RelaxedControl, v_grid: ControlGrid, mode: Mode) -> Adversary:
    if mode == "relaxed":
        return RelaxedControl.uniform(v_grid)
    return FiberPolicy.uniform(sigma.grid, v_grid)


def adversary_best_response(
    pp: PerturbedProblem,
    sigma: RelaxedControl,
    b_bar: Optional[np.ndarray] = None,
    start: Optional[Adversary] = None,
    config: Optional[SolverConfig] = None,
) -> BestResponse:
    """Best response to sigma by successive fiber maximization.

    Each sweep integrates y^j(sigma (x) pi) and Z^j(pi), then replaces pi by the
    Dirac policy at the admissible argmax of k^(pi) . f^j over v. Sweeps stop
    when the policy repeats or after config.max_response_sweeps; the policy
    with the largest constraint value is returned.

    Args:
        pp: the perturbed problem
        sigma: player-1 control
        b_bar: player-1 initial state (defaults to the fixed one)
        start: first policy (defaults to the uniform adversary)
        config: solver configuration

    Returns:
        BestResponse with the policy and its tightened constraint value
    """
    config = config or SolverConfig()
    spec, j = pp.spec, pp.j
    v_grid = spec.grids(sigma.n_steps)[1]
    b_hat = spec.initial_state(b_bar)
    field = joint_field(spec, j, pp.order)
    policy = start if start is not None else uniform_adversary(sigma, v_grid, pp.mode)

    best: Optional[BestResponse] = None
    sweeps = 0
    for sweeps in range(1, config.max_response_sweeps + 1):
        traj = integrate_perturbed(spec, j, sigma, policy, b_hat, pp.order)
        value = pp.constraint(traj.final)
        if best is None or value > best.value:
            best = BestResponse(policy=policy, value=value, sweeps=sweeps)
        z_hat = integrate_Z_hat(spec, j, sigma, policy, traj, pp.order, field)
        k_hat = np.einsum("i,tij->tj", pp.constraint_gradient(traj.final), z_hat)
        fiber = fiber_integrand(field, traj, k_hat, sigma.grid.points, v_grid.points)
        candidate = best_response_from_fiber(fiber, sigma, v_grid, pp.mode)
        if np.array_equal(candidate.weights, policy.weights):
            break
        policy = candidate
    return best.model_copy(update={"sweeps": sweeps})


# Player-1 conditional-gradient step


def greedy_control(H: np.ndarray, grid: ControlGrid) -> RelaxedControl:
    """Dirac at the admissible argmin of H per step; ties go to the lowest grid index."""
    return RelaxedControl.dirac(grid, np.argmin(np.where(grid.admissible_mask, H, np.inf), axis=1))


def min_condition_excess(sigma: RelaxedControl, H: np.ndarray) -> np.ndarray:
    """Per step, sum_u sigma H - min over admissible u of H (never negative)."""
    minimum = np.min(np.where(sigma.grid.admissible_mask, H, np.inf), axis=1)
    return np.maximum(np.sum(sigma.weights * H, axis=1) - minimum, 0.0)


def frank_wolfe_gap(sigma: RelaxedControl, H: np.ndarray, dt: float) -> float:
    return float(dt * np.sum(min_condition_excess(sigma, H)))


def open_loop_step(iteration: int) -> float:
    return 2.0 / (iteration + 2.0)


def player_step(
    sigma: RelaxedControl,
    table: HamiltonianTable,
    step_rule: StepRule = "open_loop",
    iteration: int = 0,
    objective: Optional[Callable[[RelaxedControl], float]] = None,
) -> Tuple[RelaxedControl, float]:
    """sigma+ = (1 - gamma) sigma + gamma greedy(H).

    Args:
        sigma: current player-1 control
        table: Hamiltonians at sigma
        step_rule: "open_loop" takes gamma = 2/(iteration + 2); "backtracking"
            halves gamma from 1 until `objective` decreases
        iteration: conditional-gradient iteration count
        objective: merit function of a control, needed by "backtracking"

    Returns:
        (sigma+, gamma)

    Raises:
        ValueError: backtracking without an objective
    """
    greedy = greedy_control(table.H, sigma.grid)
    if step_rule == "open_loop":
        gamma = open_loop_step(iteration)
        return sigma.mix(greedy, gamma), gamma
    if objective is None:
        raise ValueError("the backtracking step rule needs an objective")

    current = objective(sigma)
    gamma = 1.0
    for _ in range(BACKTRACK_HALVINGS):
        trial = sigma.mix(greedy, gamma)
        if objective(trial) < current:
            break
        gamma /= 2.0
    else:
        gamma *= 2.0
    return trial, gamma


# Exchange loop


class PhaseResult(BaseModel):
    """Final iterate of one conditional-gradient phase with its multipliers and Hamiltonian."""

    model_config = ConfigDict(frozen=True)

    sigma: RelaxedControl
    state: IterateState
    multipliers: MultiplierSet
    adjoints: AdjointMatrices
    table: HamiltonianTable
    scale: float = Field(description="Normalization 1 + |l1| + omega mass of the raw weights")
    gap: float
    stationary: bool
    iterations: int


def multipliers_at(
    pp: PerturbedProblem,
    sigma: RelaxedControl,
    state: IterateState,
    policies: Sequence[Adversary],
    ids: Sequence[int],
    l1_raw: np.ndarray,
    omega_raw: np.ndarray,
    tol: float = 1e-12,
) -> Tuple[MultiplierSet, AdjointMatrices, HamiltonianTable, float]:
    """Normalize (1, l1, omega) by s = 1 + |l1| + sum omega and build adjoints and Hamiltonians.

    Atoms with zero weight are dropped. H is positively homogeneous in the
    multipliers, so the raw Hamiltonian is s times the returned one.
    """
    spec, j = pp.spec, pp.j
    scale = 1.0 + float(np.linalg.norm(l1_raw)) + float(np.sum(omega_raw))
    active = [a for a in range(len(policies)) if omega_raw[a] > 0]
    y = state.player.final
    field = joint_field(spec, j, pp.order)
    z_hats = [integrate_Z_hat(spec, j, sigma, policies[a], state.atom_trajs[a], pp.order, field) for a in active]
    h_hats = [pp.constraint_gradient(state.atom_trajs[a].final) for a in active]
    lam = np.zeros(spec.joint_dim)
    for a, z_hat, h_hat in zip(active, z_hats, h_hats):
        lam = lam + omega_raw[a] / scale * (h_hat @ z_hat[0])
    multipliers = MultiplierSet(
        l0=1.0 / scale,
        l1=l1_raw / scale,
        omega=[OmegaAtom(policy=policies[a], weight=omega_raw[a] / scale, index=ids[a]) for a in active],
        H0=pp.cost_gradient(y),
        H1=pp.equality_jacobian(y),
        H_hat_per_atom=h_hats,
        lam=lam,
        tol=tol,
    )
    adjoints = AdjointMatrices(Z=integrate_Z(spec, j, sigma, state.player, pp.order), Z_hat_per_atom=z_hats, j=j)
    table = assemble_hamiltonians(
        spec, j, multipliers, adjoints, state.player, [state.atom_trajs[a] for a in active], pp.order
    )
    return multipliers, adjoints, table, scale


def _player_phase(
    pp: PerturbedProblem,
    sigma: RelaxedControl,
    b: np.ndarray,
    policies: Sequence[Adversary],
    ids: Sequence[int],
    lam: np.ndarray,
    mu: np.ndarray,
    rho: float,
    config: SolverConfig,
) -> PhaseResult:
    """Conditional-gradient minimization of the augmented Lagrangian against a fixed atom set."""
    dt = pp.spec.duration / sigma.n_steps
    state = _evaluate(pp, sigma, policies, b)
    iteration = 0
    while True:
        state = _optimize_value_coordinates(pp, state, lam, mu, rho)
        l1_raw, omega_raw = penalty_weights(state.equality, state.constraints, lam, mu, rho)
        multipliers, adjoints, table, scale = multipliers_at(
            pp, sigma, state, policies, ids, l1_raw, omega_raw, config.tol_normalization
        )
        H = scale * table.H
        gap = frank_wolfe_gap(sigma, H, dt)
        sup_h = float(np.max(np.abs(np.where(sigma.grid.admissible_mask, H, 0.0))))
        stationary = gap <= config.tol_stall or float(
            np.max(min_condition_excess(sigma, H))
        ) <= config.tol_min_condition * sup_h
        if stationary or iteration >= config.max_player_iterations:
            break

        trials = {sigma.weights.tobytes(): state}

        def objective(candidate: RelaxedControl, trials=trials, b=state.b) -> float:
            key = candidate.weights.tobytes()
            if key not in trials:
                trials[key] = _evaluate(pp, candidate, policies, b)
            evaluated = trials[key]
            return augmented_lagrangian(evaluated.cost, evaluated.equality, evaluated.constraints, lam, mu, rho)

        sigma, _ = player_step(sigma, table, config.step_rule, iteration, objective)
        key = sigma.weights.tobytes()
        state = trials[key] if key in trials else _evaluate(pp, sigma, policies, state.b)
        iteration += 1

    return PhaseResult(
        sigma=sigma,
        state=state,
        multipliers=multipliers,
        adjoints=adjoints,
        table=table,
        scale=scale,
        gap=gap,
        stationary=stationary,
        iterations=iteration,
    )


def _admit(
    policies: List[Adversary],
    ids: List[int],
    mu: np.ndarray,
    constraints: np.ndarray,
    candidate: Adversary,
    next_id: int,
    config: SolverConfig,
) -> np.ndarray:
    """Append an atom, evicting the oldest inactive one (or the lightest) when the set is full."""
    if len(policies) >= config.max_atoms:
        inactive = [a for a in range(len(policies)) if mu[a] == 0 and constraints[a] < -config.tol_exchange]
        drop = inactive[0] if inactive else int(np.argmin(mu))
        del policies[drop]
        del ids[drop]
        mu = np.delete(mu, drop)
    policies.append(candidate)
    ids.append(next_id)
    return np.append(mu, 0.0)


class PerturbedSolution(BaseModel):
    """Solution of one perturbed problem with its normalized multipliers."""

    model_config = ConfigDict(frozen=True)

    problem: PerturbedProblem
    sigma: RelaxedControl
    b_bar: FloatArray = Field(description="Solved player-1 initial state")
    policies: List[Union[FiberPolicy, RelaxedControl]] = Field(description="Final atom set, active or not")
    multipliers: MultiplierSet
    adjoints: AdjointMatrices
    table: HamiltonianTable
    status: Literal["converged", "max_iterations"]
    gap: float
    perturbed_value: float = Field(description="h0^j at the solution")
    constraint_values: FloatArray
    equality_residual: FloatArray


def solve_perturbed(
    pp: PerturbedProblem,
    config: Optional[SolverConfig] = None,
    sigma0: Optional[RelaxedControl] = None,
    policies0: Optional[Sequence[Adversary]] = None,
    verbose: bool = False,
) -> PerturbedSolution:
    """Exchange method on the perturbed problem.

    Each penalty round alternates conditional-gradient phases with best
    responses; a best response joins the atom set when its constraint value
    exceeds the worst incumbent by more than tol_exchange. Between rounds the
    multipliers are updated, mu <- (mu + rho g)_+ and lam <- lam + rho H1, and
    rho grows by penalty_growth.

    Args:
        pp: the perturbed problem
        config: solver configuration
        sigma0: warm start for sigma (ignored if on another grid)
        policies0: warm-start atoms
        verbose: print a status line per penalty round

    Returns:
        PerturbedSolution; status is "max_iterations" when a cap was hit before
        stationarity and exchange convergence
    """
    config = config or SolverConfig()
    spec = pp.spec
    u_grid, v_grid = spec.grids(config.n_steps)
    sigma = sigma0 if sigma0 is not None and sigma0.grid.same_as(u_grid) else RelaxedControl.uniform(u_grid)
    b = pp.b_bar.copy()

    policies: List[Adversary] = [p for p in (policies0 or []) if p.n_steps == config.n_steps]
    if not policies:
        policies = [adversary_best_response(pp, sigma, b, config=config).policy]
    ids = list(range(len(policies)))
    next_id = len(policies)
    lam = np.zeros(spec.q)
    mu = np.zeros(len(policies))
    rho = config.penalty_start

    converged = False
    for round_index in range(config.penalty_rounds):
        exchanged = False
        for iteration in range(config.max_exchange_iterations):
            phase = _player_phase(pp, sigma, b, policies, ids, lam, mu, rho, config)
            sigma, b = phase.sigma, phase.state.b
            heaviest = policies[int(np.argmax(mu))] if mu.size and np.any(mu > 0) else policies[-1]
            response = adversary_best_response(pp, sigma, b, start=heaviest, config=config)
            worst = float(np.max(phase.state.constraints))
            if response.value <= worst + config.tol_exchange:
                exchanged = True
                break
            if iteration == config.max_exchange_iterations - 1:
                break
            mu = _admit(policies, ids, mu, phase.state.constraints, response.policy, next_id, config)
            next_id += 1

        converged = exchanged and phase.stationary
        status(
            f"   🔁 round {round_index + 1}: rho = {rho:g}, atoms = {len(policies)}, gap = {phase.gap:.3e}",
            verbose,
        )
        if round_index < config.penalty_rounds - 1:
            mu = np.maximum(mu + rho * phase.state.constraints, 0.0)
            lam = lam + rho * phase.state.equality
            rho *= config.penalty_growth

    return PerturbedSolution(
        problem=pp,
        sigma=sigma,
        b_bar=b,
        policies=policies,
        multipliers=phase.multipliers,
        adjoints=phase.adjoints,
        table=phase.table,
        status="converged" if converged else "max_iterations",
        gap=phase.gap,
        perturbed_value=phase.state.cost,
        constraint_values=phase.state.constraints,
        equality_residual=phase.state.equality,
    )


# Residuals and certificates


class ResidualEntry(BaseModel):
    name: str
    value: float
    tolerance: float
    passed: bool


class ResidualReport(BaseModel):
    """Residuals of the normalization, min, fiber, active-constraint and transversality conditions."""

    j: int
    entries: List[ResidualEntry]
    sup_H: float = Field(description="Largest |H| over admissible cells")

    @computed_field
    @property
    def passed(self) -> bool:
        return all(entry.passed for entry in self.entries)

    def get(self, name: str) -> ResidualEntry:
        for entry in self.entries:
            if entry.name == name:
                return entry
        raise KeyError(name)

    def value(self, name: str) -> float:
        return self.get(name).value


def _fiber_residual(table: HamiltonianTable, multipliers: MultiplierSet, sigma: RelaxedControl, v_mask: np.ndarray) -> float:
    worst = 0.0
    support = sigma.weights > SUPPORT_TOL
    for a, atom in enumerate(multipliers.omega):
        fiber = table.fiber[a]
        if isinstance(atom.policy, FiberPolicy):
            achieved = np.sum(atom.policy.weights * fiber, axis=-1)
            gaps = (table.frak_h[a] - achieved)[support]
        else:
            averaged = np.einsum("tu,tuv->tv", sigma.weights, fiber)
            best = np.max(np.where(v_mask, averaged, -np.inf), axis=-1)
            gaps = best - np.sum(atom.policy.weights * averaged, axis=-1)
        if gaps.size:
            worst = max(worst, float(np.max(gaps)))
    return worst


def condition_residuals(
    pp: PerturbedProblem,
    sigma: RelaxedControl,
    b_bar: np.ndarray,
    multipliers: MultiplierSet,
    config: Optional[SolverConfig] = None,
) -> Tuple[ResidualReport, HamiltonianTable]:
    """Recompute paths, adjoints and Hamiltonians at (sigma, b) and measure every condition.

    Failed conditions are entries of the report; nothing is raised for them.
    """
    config = config or SolverConfig()
    spec, j = pp.spec, pp.j
    policies = [atom.policy for atom in multipliers.omega]
    state = _evaluate(pp, sigma, policies, np.asarray(b_bar, dtype=float))
    field = joint_field(spec, j, pp.order)
    z_hats = [
        integrate_Z_hat(spec, j, sigma, policy, traj, pp.order, field) for policy, traj in zip(policies, state.atom_trajs)
    ]
    adjoints = AdjointMatrices(Z=integrate_Z(spec, j, sigma, state.player, pp.order), Z_hat_per_atom=z_hats, j=j)
    table = assemble_hamiltonians(spec, j, multipliers, adjoints, state.player, state.atom_trajs, pp.order)
    mask = sigma.grid.admissible_mask
    v_mask = spec.grids(sigma.n_steps)[1].admissible_mask

    total = multipliers.total
    normalization = max(total - 1.0, 0.0) if total > 0 else 1.0
    sup_h = float(np.max(np.abs(np.where(mask, table.H, 0.0))))
    min_residual = float(np.max(min_condition_excess(sigma, table.H)))
    fiber_residual = _fiber_residual(table, multipliers, sigma, v_mask)

    start = policies[int(np.argmax([atom.weight for atom in multipliers.omega]))] if policies else None
    fresh = adversary_best_response(pp, sigma, state.b, start=start, config=config)
    terms = [float(np.linalg.norm(state.equality))]
    if policies:
        terms += [float(np.max(np.abs(state.constraints))), max(fresh.value - float(np.max(state.constraints)), 0.0)]
    else:
        terms.append(max(fresh.value, 0.0))
    active_residual = max(terms)

    coefficient = np.concatenate([table.k[0], np.zeros(spec.m)])
    for atom, k_hat in zip(multipliers.omega, table.k_hat_per_atom):
        coefficient = coefficient + atom.weight * k_hat[0]
    corners = spec.b_hat_set.vertices() @ coefficient
    transversality = max(float(coefficient @ spec.initial_state(state.b) - np.min(corners)), 0.0)

    entries = [
        ResidualEntry(
            name="normalization",
            value=normalization,
            tolerance=config.tol_normalization,
            passed=0.0 < total <= 1.0 + config.tol_normalization,
        ),
        ResidualEntry(
            name="min_condition",
            value=min_residual,
            tolerance=config.tol_min_condition * sup_h,
            passed=min_residual <= config.tol_min_condition * sup_h,
        ),
        ResidualEntry(
            name="fiber_condition",
            value=fiber_residual,
            tolerance=config.tol_fiber,
            passed=fiber_residual <= config.tol_fiber,
        ),
        ResidualEntry(
            name="active_constraint",
            value=active_residual,
            tolerance=config.tol_exchange,
            passed=active_residual <= config.tol_exchange,
        ),
        ResidualEntry(
            name="transversality",
            value=transversality,
            tolerance=config.tol_transversality,
            passed=transversality <= config.tol_transversality,
        ),
    ]
    return ResidualReport(j=j, entries=entries, sup_H=sup_h), table


class JRecord(BaseModel):
    """One index of a j-sweep."""

    j: int
    status: Literal["converged", "max_iterations", "failed"]
    reason: str = ""
    perturbed_value: Optional[float] = None
    l0: Optional[float] = None
    l1_norm: Optional[float] = None
    omega_mass: Optional[float] = None
    n_atoms: int = 0
    H0: List[float] = Field(default_factory=list, description="Cost gradient at the final state")
    H_hat: List[float] = Field(default_factory=list, description="Constraint gradient of the heaviest atom")
    adjoint_sup: Optional[float] = None
    gronwall_bound: Optional[float] = None
    min_residual: Optional[float] = None
    fiber_residual: Optional[float] = None
    active_residual: Optional[float] = None

    @property
    def solved(self) -> bool:
        return self.status != "failed"


class NCCertificate(BaseModel):
    """Necessary-condition certificate of the largest successful j."""

    problem: str
    mode: Mode
    j: int
    status: Literal["certified", "flagged"]
    reasons: List[str] = Field(default_factory=list)
    multipliers: MultiplierSet
    residuals: ResidualReport
    value: float = Field(description="h0 after restoring the unperturbed constraint against the final adversaries")
    perturbed_value: float = Field(description="h0^j at the perturbed optimum")
    initial_state: FloatArray = Field(description="Solved player-1 initial state of the perturbed problem")
    limit_initial_state: FloatArray = Field(description="Player-1 initial state after value restoration")
    a_j: FloatArray
    constraint_shift: float
    j_history: List[JRecord]
    multiplier_increments: List[float]
    adjoint_increments: List[float]
    non_cauchy: bool
    sigma_bar: Optional[RelaxedControl] = Field(default=None, exclude=True)

    @property
    def heaviest_atom(self) -> Optional[OmegaAtom]:
        if not self.multipliers.omega:
            return None
        return max(self.multipliers.omega, key=lambda atom: atom.weight)


def restore_value(
    spec: ProblemSpec,
    sigma: RelaxedControl,
    b_bar: np.ndarray,
    policies: Sequence[Adversary],
) -> Tuple[float, np.ndarray, bool]:
    """h0 with the value coordinates re-solved against the unmollified, unshifted constraint.

    Returns:
        (value, restored player-1 initial state, whether the restoration succeeded)
    """
    b_bar = np.asarray(b_bar, dtype=float)
    b_hat = spec.initial_state(b_bar)
    y_final = integrate_relaxed(spec, sigma, b_bar).final
    finals = np.array([integrate_fiber(spec, sigma, policy, b_hat).final for policy in policies]).reshape(
        -1, spec.joint_dim
    )
    coords = spec.value_coordinates
    if not coords:
        return float(spec.h0.eval(y_final)[0]), b_bar, True

    def at(values: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
        y, x = y_final.copy(), finals.copy()
        y[coords] = values
        x[:, coords] = values
        return y, x

    constraints = [{"type": "ineq", "fun": lambda z: -spec.h_hat.eval(at(z)[1])[:, 0]}]
    if spec.h1 is not None:
        constraints.append({"type": "eq", "fun": lambda z: spec.h1.eval(at(z)[0])})
    bounds = [
        (float(lo) if np.isfinite(lo) else None, float(hi) if np.isfinite(hi) else None)
        for lo, hi in zip(spec.b_set.lower[coords], spec.b_set.upper[coords])
    ]
    result = optimize.minimize(
        lambda z: float(spec.h0.eval(at(z)[0])[0]),
        b_bar[coords],
        method="SLSQP",
        bounds=bounds,
        constraints=constraints,
        options={"ftol": 1e-12, "maxiter": 200},
    )
    values = result.x if result.success else b_bar[coords]
    restored = b_bar.copy()
    restored[coords] = values
    return float(spec.h0.eval(at(values)[0])[0]), restored, bool(result.success)


def _record(solution: PerturbedSolution, report: ResidualReport) -> JRecord:
    multipliers = solution.multipliers
    heaviest = (
        multipliers.H_hat_per_atom[int(np.argmax([atom.weight for atom in multipliers.omega]))]
        if multipliers.omega
        else np.zeros(0)
    )
    spec = solution.problem.spec
    return JRecord(
        j=solution.problem.j,
        status=solution.status,
        perturbed_value=solution.perturbed_value,
        l0=multipliers.l0,
        l1_norm=multipliers.l1_norm,
        omega_mass=multipliers.omega_mass,
        n_atoms=len(multipliers.omega),
        H0=multipliers.H0.tolist(),
        H_hat=heaviest.tolist(),
        adjoint_sup=solution.adjoints.sup_norm,
        gronwall_bound=gronwall_bound(spec.duration, min(spec.lipschitz_hat, spec.psi.sup)),
        min_residual=report.value("min_condition"),
        fiber_residual=report.value("fiber_condition"),
        active_residual=report.value("active_constraint"),
    )


def multiplier_increments(records: Sequence[JRecord]) -> List[float]:
    """Largest change of l0, |l1| and omega mass between consecutive solved indices."""
    solved = [record for record in records if record.solved]
    return [
        max(abs(b.l0 - a.l0), abs(b.l1_norm - a.l1_norm), abs(b.omega_mass - a.omega_mass))
        for a, b in zip(solved, solved[1:])
    ]


def run_j_sweep(
    spec: ProblemSpec,
    j_seq: Sequence[int],
    config: Optional[SolverConfig] = None,
    verbose: bool = False,
) -> NCCertificate:
    """Solve the perturbed problem for every j with warm starts and certify the largest solved j.

    Args:
        spec: a normalized problem
        j_seq: increasing mollification indices
        config: solver configuration
        verbose: print one status line per j

    Returns:
        NCCertificate of the largest solved j with the per-j history

    Raises:
        ValueError: j_seq is empty
        SolverFailure: no j produced a solution
    """
    if not j_seq:
        raise ValueError("j_seq must contain at least one index")
    config = config or SolverConfig()

    records: List[JRecord] = []
    solutions: List[Tuple[PerturbedSolution, ResidualReport]] = []
    sigma: Optional[RelaxedControl] = None
    policies: Optional[List[Adversary]] = None
    for j in j_seq:
        try:
            pp = build_perturbed_problem(spec, j, sigma, config)
            solution = solve_perturbed(pp, config, sigma, policies, verbose)
            report, _ = condition_residuals(pp, solution.sigma, solution.b_bar, solution.multipliers, config)
        except AdverseControlError as e:
            records.append(JRecord(j=j, status="failed", reason=str(e)))
            status(f"❌ j = {j}: {e}", verbose)
            continue
        records.append(_record(solution, report))
        solutions.append((solution, report))
        sigma = solution.sigma
        policies = [atom.policy for atom in solution.multipliers.omega] or solution.policies
        status(
            f"🔁 j = {j}: {solution.status}, h0^j = {solution.perturbed_value:.6g}, "
            f"atoms = {len(solution.multipliers.omega)}",
            verbose,
        )

    if not solutions:
        raise SolverFailure(f"No index of {list(j_seq)} produced a solution")

    final, report = solutions[-1]
    m_increments = multiplier_increments(records)
    a_increments = sup_increments([s.adjoints for s, _ in solutions], [s.multipliers for s, _ in solutions])
    non_cauchy = not (is_cauchy(m_increments, config.cauchy_tol) and is_cauchy(a_increments, config.cauchy_tol))

    restore_policies = list(final.policies)
    fresh = adversary_best_response(final.problem, final.sigma, final.b_bar, config=config)
    restore_policies.append(fresh.policy)
    value, limit_b, restored = restore_value(spec, final.sigma, final.b_bar, restore_policies)

    reasons = [f"{entry.name} residual {entry.value:.3e} above {entry.tolerance:.3e}" for entry in report.entries if not entry.passed]
    if final.status != "converged":
        reasons.append("solver hit an iteration cap before converging")
    if not restored:
        reasons.append("value restoration did not converge")
    certificate = NCCertificate(
        problem=spec.name,
        mode=final.problem.mode,
        j=final.problem.j,
        status="flagged" if reasons else "certified",
        reasons=reasons,
        multipliers=final.multipliers,
        residuals=report,
        value=value,
        perturbed_value=final.perturbed_value,
        initial_state=final.b_bar,
        limit_initial_state=limit_b,
        a_j=final.problem.a_j,
        constraint_shift=final.problem.constraint_shift,
        j_history=records,
        multiplier_increments=m_increments,
        adjoint_increments=a_increments,
        non_cauchy=non_cauchy,
        sigma_bar=final.sigma,
    )
    status(f"{'✅' if certificate.status == 'certified' else '⚠️ '} Certificate {certificate.status}: value = {value:.6g}", verbose)
    return certificate


def verify_conditions(
    spec: ProblemSpec,
    sigma_bar: RelaxedControl,
    certificate: NCCertificate,
    config: Optional[SolverConfig] = None,
) -> ResidualReport:
    """Residuals of the certificate's multipliers at sigma_bar and the certificate's index.

    Every failure is a report entry; nothing is raised for failed conditions.
    """
    config = config or SolverConfig()
    pp = PerturbedProblem.create(spec, certificate.j, certificate.a_j, certificate.mode, config.quadrature_order)
    report, _ = condition_residuals(pp, sigma_bar, certificate.initial_state, certificate.multipliers, config)
    return report


def final_trajectory(spec: ProblemSpec, certificate: NCCertificate) -> Trajectory:
    """Unmollified joint path against the heaviest atom (player-1 path when omega is empty)."""
    if certificate.sigma_bar is None:
        raise ValueError("certificate carries no control; it was not produced in this process")
    atom = certificate.heaviest_atom
    if atom is None:
        return integrate_relaxed(spec, certificate.sigma_bar, certificate.limit_initial_state)
    return integrate_fiber(
        spec, certificate.sigma_bar, atom.policy, spec.initial_state(certificate.limit_initial_state)
    )
