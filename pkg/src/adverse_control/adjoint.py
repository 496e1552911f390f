"""Backward adjoint matrices, multiplier sets and Hamiltonian tables.

Z solves Z(t) = I + integral from t to t1 of Z(s) A(s) ds, where A is the
control-averaged state Jacobian of the (mollified) dynamics along a path. It
is integrated backward with RK4 in s = t1 - t, reading the forward path at the
grid nodes and at the stored dense-output midpoints.
"""
import math
from typing import List, Literal, Optional, Sequence, Union

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, ValidationInfo, field_validator, model_validator

from .control_space import FiberPolicy, RelaxedControl, compose
from .errors import ShapeMismatch
from .mollify import DEFAULT_ORDER, EndpointFunction, fredholm_approx, fredholm_grad
from .problem import ProblemSpec
from .schemas import FloatArray
from .trajectory import (
    Field_,
    JointField,
    Trajectory,
    integrate_perturbed,
    integrate_relaxed,
    joint_field,
    on_path,
    player_field,
)

Adversary = Union[FiberPolicy, RelaxedControl]


def gronwall_bound(duration: float, lipschitz: float) -> float:
    """Sup-norm bound 1 + T L e^T on Z over a horizon of length T, for L <= 1 (normalized time)."""
    return 1.0 + duration * lipschitz * math.exp(duration)


class AdjointMatrices(BaseModel):
    """Z on the player-1 state and one Z^ per adversary atom, on the time grid."""

    model_config = ConfigDict(frozen=True)

    Z: FloatArray = Field(description="Player-1 adjoint, shape (n_steps + 1, n, n)")
    Z_hat_per_atom: List[FloatArray] = Field(
        default_factory=list, description="Joint adjoints, each of shape (n_steps + 1, n + m, n + m)"
    )
    j: Union[int, Literal["limit"]] = Field(description="Mollification index, or 'limit' for the largest-j surrogate")

    @model_validator(mode="after")
    def _check_terminal(self) -> "AdjointMatrices":
        if self.Z.ndim != 3 or self.Z.shape[1] != self.Z.shape[2]:
            raise ValueError(f"Z must have shape (n_steps + 1, n, n), got {self.Z.shape}")
        if not np.array_equal(self.Z[-1], np.eye(self.Z.shape[1])):
            raise ValueError("Z must equal the identity at t1")
        for a, z_hat in enumerate(self.Z_hat_per_atom):
            if z_hat.ndim != 3 or z_hat.shape[0] != self.Z.shape[0]:
                raise ValueError(f"Z^ of atom {a} is not on the time grid of Z")
            if not np.array_equal(z_hat[-1], np.eye(z_hat.shape[1])):
                raise ValueError(f"Z^ of atom {a} must equal the identity at t1")
        return self

    @property
    def sup_norm(self) -> float:
        """Largest spectral norm over the grid of Z and every Z^."""
        norms = [float(np.max(np.linalg.norm(self.Z, ord=2, axis=(1, 2))))]
        norms += [float(np.max(np.linalg.norm(z, ord=2, axis=(1, 2)))) for z in self.Z_hat_per_atom]
        return max(norms)


class OmegaAtom(BaseModel):
    """One adversary of the finite measure omega, with its weight."""

    model_config = ConfigDict(frozen=True)

    policy: Union[FiberPolicy, RelaxedControl] = Field(description="Fiber policy, or relaxed control in relaxed mode")
    weight: float = Field(ge=0, description="Mass of the atom")
    index: int = Field(ge=0, description="Creation order inside the exchange loop")


class MultiplierSet(BaseModel):
    """(l0, l1, omega) with the endpoint gradients the Hamiltonians are built from.

    Strict positivity of l0 + |l1| + omega mass is a checked condition of the
    certificate, so the all-zero set can still be represented.
    """

    model_config = ConfigDict(frozen=True)

    l0: float = Field(ge=0, description="Cost multiplier")
    l1: FloatArray = Field(description="Equality multiplier, shape (q,)")
    omega: List[OmegaAtom] = Field(default_factory=list, description="Atoms of the adversary measure")
    H0: FloatArray = Field(description="Cost gradient at the final player-1 state, shape (n,)")
    H1: FloatArray = Field(description="Equality Jacobian at the final player-1 state, shape (q, n)")
    H_hat_per_atom: List[FloatArray] = Field(
        default_factory=list, description="Constraint gradient at each atom's final joint state, shape (n + m,)"
    )
    lam: FloatArray = Field(description="sum over atoms of weight * k^(t0), shape (n + m,)")
    tol: float = Field(default=1e-12, ge=0, description="Slack on the normalization upper bound")

    @field_validator("H1")
    @classmethod
    def _matrix(cls, value: np.ndarray, info: ValidationInfo) -> np.ndarray:
        # an empty Jacobian comes back from JSON as a flat list
        width = np.asarray(info.data.get("H0", np.zeros(0))).size
        return value.reshape(-1, width) if value.ndim != 2 and width else value

    @model_validator(mode="after")
    def _check_normalization(self) -> "MultiplierSet":
        if len(self.H_hat_per_atom) != len(self.omega):
            raise ValueError("one constraint gradient is needed per omega atom")
        if self.l1.ndim != 1 or self.H1.shape != (self.l1.size, self.H0.size):
            raise ValueError(f"H1 shape {self.H1.shape} does not match l1 {self.l1.shape} and H0 {self.H0.shape}")
        if self.total > 1.0 + self.tol:
            raise ValueError(f"l0 + |l1| + omega mass = {self.total} exceeds 1")
        return self

    @property
    def omega_mass(self) -> float:
        return float(sum(atom.weight for atom in self.omega))

    @property
    def l1_norm(self) -> float:
        return float(np.linalg.norm(self.l1))

    @property
    def total(self) -> float:
        return self.l0 + self.l1_norm + self.omega_mass

    def endpoint_row(self) -> np.ndarray:
        """l0 H0 + l1 H1, the terminal value of k."""
        return self.l0 * self.H0 + self.l1 @ self.H1


class HamiltonianTable(BaseModel):
    """k, k^, the fiber Hamiltonians and the master Hamiltonian on the grid.

    Entries per step are Simpson averages over the step of the pointwise
    integrands, so dt * H[k, u] is the first-order effect of moving step k
    onto the control point u.
    """

    model_config = ConfigDict(frozen=True)

    frak_h: FloatArray = Field(description="Fiber Hamiltonian per atom, shape (n_atoms, n_steps, n_u)")
    H: FloatArray = Field(description="Master Hamiltonian, shape (n_steps, n_u)")
    k: FloatArray = Field(description="Player-1 costate at the nodes, shape (n_steps + 1, n)")
    k_hat_per_atom: List[FloatArray] = Field(
        default_factory=list, description="Joint costates at the nodes, each (n_steps + 1, n + m)"
    )
    fiber: FloatArray = Field(description="Fiber integrand per atom, shape (n_atoms, n_steps, n_u, n_v)")
    player: FloatArray = Field(description="Player-1 integrand k . f, shape (n_steps, n_u)")


# Adjoint integration


def _mid_times(times: np.ndarray) -> np.ndarray:
    return 0.5 * (times[:-1] + times[1:])


def _backward_rk4(a_start: np.ndarray, a_mid: np.ndarray, a_end: np.ndarray, h: float) -> np.ndarray:
    """RK4 for dZ/ds = Z A from Z = I at t1 down to t0."""
    n_steps, d = a_start.shape[0], a_start.shape[-1]
    z = np.empty((n_steps + 1, d, d))
    z[-1] = np.eye(d)
    for k in range(n_steps - 1, -1, -1):
        zn = z[k + 1]
        k1 = zn @ a_end[k]
        k2 = (zn + h / 2 * k1) @ a_mid[k]
        k3 = (zn + h / 2 * k2) @ a_mid[k]
        k4 = (zn + h * k3) @ a_start[k]
        z[k] = zn + h / 6 * (k1 + 2 * k2 + 2 * k3 + k4)
    return z


def _player_states(spec: ProblemSpec, traj: Trajectory) -> Trajectory:
    width = traj.states.shape[1]
    if width == spec.n:
        return traj
    if width == spec.joint_dim:
        return traj.block(0, spec.n)
    raise ShapeMismatch(f"trajectory has {width} coordinates, expected {spec.n} or {spec.joint_dim}")


def integrate_Z(
    spec: ProblemSpec, j: int, sigma: RelaxedControl, traj: Trajectory, order: int = DEFAULT_ORDER
) -> np.ndarray:
    """Z^j along y^j(sigma) with the sigma-averaged mollified Jacobian.

    Args:
        spec: the problem
        j: mollification index the path was integrated with
        sigma: player-1 control of the path
        traj: y^j(sigma), or a joint path whose first n coordinates are y^j(sigma)
        order: quadrature order of the mollifier

    Returns:
        Z on the grid, shape (n_steps + 1, n, n)

    Raises:
        ShapeMismatch: path and control are on different grids
    """
    traj = _player_states(spec, traj)
    if traj.n_steps != sigma.n_steps:
        raise ShapeMismatch(f"path has {traj.n_steps} steps, control has {sigma.n_steps}")
    field = player_field(spec, j, order)
    u = sigma.grid.points

    def evaluate(t: np.ndarray, x: np.ndarray) -> np.ndarray:
        return field.jacobian(t[:, None], x[:, None, :], u[None, :], 0.0)

    nodes = on_path(evaluate, traj.times, traj.states)
    mids = on_path(evaluate, _mid_times(traj.times), traj.midpoints)
    w = sigma.weights
    return _backward_rk4(
        np.einsum("tu,tuij->tij", w, nodes[:-1]),
        np.einsum("tu,tuij->tij", w, mids),
        np.einsum("tu,tuij->tij", w, nodes[1:]),
        traj.dt,
    )


def _adversary_points(adversary: Adversary) -> np.ndarray:
    return adversary.v_grid.points if isinstance(adversary, FiberPolicy) else adversary.grid.points


def integrate_Z_hat(
    spec: ProblemSpec,
    j: int,
    sigma: RelaxedControl,
    pi_or_sigma_p: Adversary,
    traj: Trajectory,
    order: int = DEFAULT_ORDER,
    field: Optional[JointField] = None,
) -> np.ndarray:
    """Z^j(pi) along y^j(sigma (x) pi) with the joint-averaged mollified Jacobian.

    Raises:
        ShapeMismatch: path, control and adversary are not on one grid
    """
    if traj.states.shape[1] != spec.joint_dim:
        raise ShapeMismatch(f"joint path must have {spec.joint_dim} coordinates")
    joint = compose(sigma, pi_or_sigma_p)
    if traj.n_steps != joint.n_steps:
        raise ShapeMismatch(f"path has {traj.n_steps} steps, controls have {joint.n_steps}")
    field = field or joint_field(spec, j, order)
    u, v = sigma.grid.points, _adversary_points(pi_or_sigma_p)

    def evaluate(t: np.ndarray, x: np.ndarray) -> np.ndarray:
        return field.jacobian(t[:, None, None], x[:, None, None, :], u[None, :, None], v[None, None, :])

    nodes = on_path(evaluate, traj.times, traj.states)
    mids = on_path(evaluate, _mid_times(traj.times), traj.midpoints)
    w = joint.weights
    return _backward_rk4(
        np.einsum("tuv,tuvij->tij", w, nodes[:-1]),
        np.einsum("tuv,tuvij->tij", w, mids),
        np.einsum("tuv,tuvij->tij", w, nodes[1:]),
        traj.dt,
    )


# Endpoint gradients


def endpoint_value(function: EndpointFunction, x: np.ndarray, j: Optional[int], order: int = DEFAULT_ORDER) -> np.ndarray:
    """h^j(x), or h(x) when j is None."""
    if j is None:
        return function.eval(x)
    return fredholm_approx(function.as_field(), j, order).eval(0.0, x)


def endpoint_gradient(function: EndpointFunction, x: np.ndarray, j: int, order: int = DEFAULT_ORDER) -> np.ndarray:
    """d/dx h^j(x) as a (k, d) matrix."""
    return fredholm_grad(fredholm_approx(function.as_field(), j, order), 0.0, np.asarray(x, dtype=float))


# Hamiltonian integrands


def _simpson(start: np.ndarray, mid: np.ndarray, end: np.ndarray) -> np.ndarray:
    return (start + 4.0 * mid + end) / 6.0


def player_integrand(field: Field_, traj: Trajectory, k_nodes: np.ndarray, u_points: np.ndarray) -> np.ndarray:
    """Step averages of k(t) . f(t, y(t), u), shape (n_steps, n_u)."""

    def evaluate(t: np.ndarray, x: np.ndarray) -> np.ndarray:
        return field.eval(t[:, None], x[:, None, :], u_points[None, :], 0.0)

    values = on_path(evaluate, traj.times, traj.states)
    mids = on_path(evaluate, _mid_times(traj.times), traj.midpoints)
    k_mid = 0.5 * (k_nodes[:-1] + k_nodes[1:])
    return _simpson(
        np.einsum("ti,tui->tu", k_nodes[:-1], values[:-1]),
        np.einsum("ti,tui->tu", k_mid, mids),
        np.einsum("ti,tui->tu", k_nodes[1:], values[1:]),
    )


def fiber_integrand(
    field: JointField, traj: Trajectory, k_hat_nodes: np.ndarray, u_points: np.ndarray, v_points: np.ndarray
) -> np.ndarray:
    """Step averages of k^(t) . f^(t, y^(t), u, v), shape (n_steps, n_u, n_v)."""

    def evaluate(t: np.ndarray, x: np.ndarray) -> np.ndarray:
        return field.eval(t[:, None, None], x[:, None, None, :], u_points[None, :, None], v_points[None, None, :])

    values = on_path(evaluate, traj.times, traj.states)
    mids = on_path(evaluate, _mid_times(traj.times), traj.midpoints)
    k_mid = 0.5 * (k_hat_nodes[:-1] + k_hat_nodes[1:])
    return _simpson(
        np.einsum("ti,tuvi->tuv", k_hat_nodes[:-1], values[:-1]),
        np.einsum("ti,tuvi->tuv", k_mid, mids),
        np.einsum("ti,tuvi->tuv", k_hat_nodes[1:], values[1:]),
    )


def fiber_hamiltonian(fiber: np.ndarray, adversary: Adversary, v_mask: np.ndarray) -> np.ndarray:
    """frak_h over (step, u): max over admissible v for fiber policies, the sigma_P average for relaxed ones."""
    if isinstance(adversary, FiberPolicy):
        return np.max(np.where(v_mask[:, None, :], fiber, -np.inf), axis=-1)
    return np.einsum("tuv,tv->tu", fiber, adversary.weights)


def assemble_hamiltonians(
    spec: ProblemSpec,
    j: Optional[int],
    multipliers: MultiplierSet,
    adjoints: AdjointMatrices,
    player_traj: Trajectory,
    atom_trajs: Sequence[Trajectory],
    order: int = DEFAULT_ORDER,
) -> HamiltonianTable:
    """Build k, k^ per atom, frak_h and H = k . f + sum of weight * frak_h.

    Args:
        spec: the problem
        j: mollification index of the fields, None for the unmollified fields
        multipliers: (l0, l1, omega) with endpoint gradients
        adjoints: Z and one Z^ per omega atom
        player_traj: the player-1 path (or a joint path starting with it)
        atom_trajs: the joint path of each omega atom
        order: quadrature order of the mollifier

    Returns:
        HamiltonianTable on the grid of the paths

    Raises:
        ShapeMismatch: atoms, adjoints and paths do not line up
    """
    n_atoms = len(multipliers.omega)
    if len(adjoints.Z_hat_per_atom) != n_atoms or len(atom_trajs) != n_atoms:
        raise ShapeMismatch(
            f"{n_atoms} omega atoms but {len(adjoints.Z_hat_per_atom)} adjoints and {len(atom_trajs)} paths"
        )
    player_traj = _player_states(spec, player_traj)
    n_steps = player_traj.n_steps
    if adjoints.Z.shape != (n_steps + 1, spec.n, spec.n):
        raise ShapeMismatch(f"Z shape {adjoints.Z.shape} does not fit a {n_steps}-step path")
    u_grid, v_grid = spec.grids(n_steps)

    k_nodes = np.einsum("i,tij->tj", multipliers.endpoint_row(), adjoints.Z)
    field = spec.f if j is None else player_field(spec, j, order)
    player = player_integrand(field, player_traj, k_nodes, u_grid.points)

    joint = joint_field(spec, j, order)
    k_hats, fibers, frak = [], [], []
    for atom, z_hat, h_hat, traj in zip(multipliers.omega, adjoints.Z_hat_per_atom, multipliers.H_hat_per_atom, atom_trajs):
        if traj.n_steps != n_steps or z_hat.shape[1] != spec.joint_dim:
            raise ShapeMismatch(f"atom {atom.index} is not on the grid of the player-1 path")
        k_hat = np.einsum("i,tij->tj", h_hat, z_hat)
        fiber = fiber_integrand(joint, traj, k_hat, u_grid.points, v_grid.points)
        k_hats.append(k_hat)
        fibers.append(fiber)
        frak.append(fiber_hamiltonian(fiber, atom.policy, v_grid.admissible_mask))

    weights = np.array([atom.weight for atom in multipliers.omega])
    frak_h = np.array(frak).reshape(n_atoms, n_steps, u_grid.n_points)
    hamiltonian = player + np.einsum("a,atu->tu", weights, frak_h)
    return HamiltonianTable(
        frak_h=frak_h,
        H=hamiltonian,
        k=k_nodes,
        k_hat_per_atom=k_hats,
        fiber=np.array(fibers).reshape(n_atoms, n_steps, u_grid.n_points, v_grid.n_points),
        player=player,
    )


# Limit surrogate


class LimitSweep(BaseModel):
    """Largest-j adjoints with sup-norm increments between consecutive j."""

    adjoints: AdjointMatrices
    j_values: List[int]
    increments: List[float]
    non_cauchy: bool


def adjoints_at(
    spec: ProblemSpec,
    j: int,
    sigma: RelaxedControl,
    multipliers: MultiplierSet,
    b_bar: Optional[np.ndarray] = None,
    order: int = DEFAULT_ORDER,
) -> AdjointMatrices:
    """Z^j along y^j(sigma) and Z^j(pi) for every omega atom."""
    player = integrate_relaxed(spec, sigma, b_bar, j, order)
    b_hat = spec.initial_state(b_bar)
    field = joint_field(spec, j, order)
    z_hats = []
    for atom in multipliers.omega:
        traj = integrate_perturbed(spec, j, sigma, atom.policy, b_hat, order)
        z_hats.append(integrate_Z_hat(spec, j, sigma, atom.policy, traj, order, field))
    return AdjointMatrices(Z=integrate_Z(spec, j, sigma, player, order), Z_hat_per_atom=z_hats, j=j)


def _heaviest(adjoints: AdjointMatrices, multipliers: MultiplierSet) -> Optional[np.ndarray]:
    if not multipliers.omega:
        return None
    weights = [atom.weight for atom in multipliers.omega]
    return adjoints.Z_hat_per_atom[int(np.argmax(weights))]


def sup_increments(adjoint_seq: Sequence[AdjointMatrices], multiplier_seq: Sequence[MultiplierSet]) -> List[float]:
    """Sup-norm change of Z between consecutive entries, and of the heaviest atom's Z^ when both have atoms."""
    increments = []
    for i in range(1, len(adjoint_seq)):
        previous, current = adjoint_seq[i - 1], adjoint_seq[i]
        change = float(np.max(np.abs(current.Z - previous.Z)))
        before, after = _heaviest(previous, multiplier_seq[i - 1]), _heaviest(current, multiplier_seq[i])
        if before is not None and after is not None:
            change = max(change, float(np.max(np.abs(after - before))))
        increments.append(change)
    return increments


def is_cauchy(increments: Sequence[float], tol: float) -> bool:
    """True when no increment exceeds its predecessor by more than tol."""
    return not any(later > earlier + tol for earlier, later in zip(increments, increments[1:]))


def limit_sweep(
    spec: ProblemSpec,
    j_values: Sequence[int],
    sigma_seq: Sequence[RelaxedControl],
    multiplier_seq: Sequence[MultiplierSet],
    initial_states: Optional[Sequence[Optional[np.ndarray]]] = None,
    order: int = DEFAULT_ORDER,
    cauchy_tol: float = 1e-9,
) -> LimitSweep:
    """Adjoints at every j; the largest j stands in for the limit.

    A single j gives no increments and is its own limit.
    """
    if not (len(j_values) == len(sigma_seq) == len(multiplier_seq)) or not j_values:
        raise ShapeMismatch("limit_sweep needs one control and one multiplier set per j")
    initial_states = list(initial_states) if initial_states is not None else [None] * len(j_values)
    computed = [
        adjoints_at(spec, j, sigma, multipliers, b_bar, order)
        for j, sigma, multipliers, b_bar in zip(j_values, sigma_seq, multiplier_seq, initial_states)
    ]
    increments = sup_increments(computed, multiplier_seq)
    return LimitSweep(
        adjoints=computed[-1].model_copy(update={"j": "limit"}),
        j_values=list(j_values),
        increments=increments,
        non_cauchy=not is_cauchy(increments, cauchy_tol),
    )
