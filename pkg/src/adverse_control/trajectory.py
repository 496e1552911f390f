"""Forward integration of relaxed, hyperrelaxed and mollified dynamics.

Every integrator is fixed-step RK4 on the uniform grid of the control. The
control row k is held over [t_k, t_k+1] and the drift is the exact finite
average of the field over the control grid.
"""
import math
from pathlib import Path
from typing import Any, Callable, List, Optional, Tuple, Union

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, computed_field, model_validator

from .control_space import FiberPolicy, JointControl, RelaxedControl, compose
from .errors import ShapeMismatch, StepCountTooSmall
from .mollify import DEFAULT_ORDER, FredholmApprox, LipschitzField, fredholm_approx, quadrature_tolerance
from .problem import ProblemSpec
from .schemas import FloatArray
from .utils import write_csv

STABILITY_LIMIT = 0.5
CHUNK = 128

Field_ = Union[FredholmApprox, LipschitzField]
Adversary = Union[FiberPolicy, RelaxedControl]


class Trajectory(BaseModel):
    """States on the uniform grid plus RK4 dense-output midpoints."""

    model_config = ConfigDict(frozen=True)

    times: FloatArray = Field(description="Grid t0..t1, shape (n_steps + 1,)")
    states: FloatArray = Field(description="States at the grid nodes, shape (n_steps + 1, dim)")
    midpoints: FloatArray = Field(description="Dense-output states at step midpoints, shape (n_steps, dim)")
    control_tag: str = Field(description="Which controls produced the path")
    j: Optional[int] = Field(default=None, description="Mollification index, None when unperturbed")

    @model_validator(mode="after")
    def _check_shapes(self) -> "Trajectory":
        n_steps = self.times.size - 1
        if self.states.shape[0] != n_steps + 1 or self.midpoints.shape != (n_steps, self.states.shape[1]):
            raise ValueError("trajectory arrays do not share one time grid")
        return self

    @property
    def n_steps(self) -> int:
        return int(self.times.size - 1)

    @property
    def dt(self) -> float:
        return float(self.times[1] - self.times[0])

    @property
    def final(self) -> np.ndarray:
        return self.states[-1]

    def block(self, start: int, stop: Optional[int] = None) -> "Trajectory":
        """Sub-trajectory of state coordinates start:stop."""
        return self.model_copy(
            update={"states": self.states[:, start:stop], "midpoints": self.midpoints[:, start:stop]}
        )

    def to_csv(self, path: Union[str, Path]) -> Path:
        header = ["t"] + [f"x{i}" for i in range(self.states.shape[1])]
        return write_csv(path, header, np.column_stack([self.times, self.states]))


class JointField(BaseModel):
    """f^ = (f, f~) on the joint state, or its mollified version at index j.

    The player-1 block only sees the first n coordinates.
    """

    model_config = ConfigDict(frozen=True)

    f: Field_
    f_tilde: Field_
    j: Optional[int] = None

    @property
    def n(self) -> int:
        return self.f.dim_state

    @property
    def m(self) -> int:
        return self.f_tilde.dim_out

    @property
    def lipschitz_const(self) -> float:
        return math.hypot(self.f.lipschitz_const, self.f_tilde.lipschitz_const)

    def eval(self, t: Any, x: np.ndarray, u: Any = 0.0, v: Any = 0.0) -> np.ndarray:
        top = self.f.eval(t, x[..., : self.n], u, v)
        bottom = self.f_tilde.eval(t, x, u, v)
        lead = np.broadcast_shapes(top.shape[:-1], bottom.shape[:-1])
        return np.concatenate(
            [np.broadcast_to(top, lead + (self.n,)), np.broadcast_to(bottom, lead + (self.m,))], axis=-1
        )

    def jacobian(self, t: Any, x: np.ndarray, u: Any = 0.0, v: Any = 0.0) -> np.ndarray:
        """Block Jacobian [[df, 0], [df~]] of the mollified joint field."""
        top = self.f.jacobian(t, x[..., : self.n], u, v)
        bottom = self.f_tilde.jacobian(t, x, u, v)
        lead = np.broadcast_shapes(top.shape[:-2], bottom.shape[:-2])
        top = np.concatenate(
            [np.broadcast_to(top, lead + (self.n, self.n)), np.zeros(lead + (self.n, self.m))], axis=-1
        )
        return np.concatenate([top, np.broadcast_to(bottom, lead + (self.m, self.n + self.m))], axis=-2)


def joint_field(spec: ProblemSpec, j: Optional[int] = None, order: int = DEFAULT_ORDER) -> JointField:
    """The joint field of a problem; with j, f is mollified over R^n and f~ over R^(n+m)."""
    if j is None:
        return JointField(f=spec.f, f_tilde=spec.f_tilde)
    return JointField(f=fredholm_approx(spec.f, j, order), f_tilde=fredholm_approx(spec.f_tilde, j, order), j=j)


def player_field(spec: ProblemSpec, j: Optional[int] = None, order: int = DEFAULT_ORDER) -> Field_:
    return spec.f if j is None else fredholm_approx(spec.f, j, order)


def check_step_count(dt: float, lipschitz: float) -> None:
    if dt * lipschitz > STABILITY_LIMIT:
        raise StepCountTooSmall(
            f"dt * L = {dt * lipschitz:.3g} exceeds {STABILITY_LIMIT}; use at least {math.ceil(lipschitz / STABILITY_LIMIT)} steps per unit time"
        )


def rk4_dense(
    drift: Callable[[int, float, np.ndarray], np.ndarray], times: np.ndarray, y0: np.ndarray
) -> Tuple[np.ndarray, np.ndarray]:
    """Classical RK4 with the dense-output state at every step midpoint.

    Args:
        drift: drift(k, t, y) using the control row of step k
        times: uniform grid
        y0: initial state

    Returns:
        (states at the nodes, states at the step midpoints)
    """
    n_steps = times.size - 1
    states = np.empty((n_steps + 1, y0.size))
    midpoints = np.empty((n_steps, y0.size))
    states[0] = y0
    for k in range(n_steps):
        t, h, y = times[k], times[k + 1] - times[k], states[k]
        k1 = drift(k, t, y)
        k2 = drift(k, t + h / 2, y + h / 2 * k1)
        k3 = drift(k, t + h / 2, y + h / 2 * k2)
        k4 = drift(k, t + h, y + h * k3)
        states[k + 1] = y + h / 6 * (k1 + 2 * k2 + 2 * k3 + k4)
        midpoints[k] = y + h / 24 * (5 * k1 + 4 * k2 + 4 * k3 - k4)
    return states, midpoints


def relaxed_drift(field: Field_, u_points: np.ndarray, row: np.ndarray, t: float, y: np.ndarray) -> np.ndarray:
    """sum_u sigma(u) f(t, y, u)."""
    return row @ field.eval(t, y[None, :], u_points, 0.0)


def joint_drift(
    field: JointField, u_points: np.ndarray, v_points: np.ndarray, slice_: np.ndarray, t: float, x: np.ndarray
) -> np.ndarray:
    """sum_{u,v} alpha(u, v) f^(t, x, u, v) for one joint time-slice alpha."""
    values = field.eval(t, x[None, None, :], u_points[:, None], v_points[None, :])
    return np.einsum("uv,uvd->d", slice_, values)


def integrate_relaxed(
    spec: ProblemSpec,
    sigma: RelaxedControl,
    b: Optional[np.ndarray] = None,
    j: Optional[int] = None,
    order: int = DEFAULT_ORDER,
) -> Trajectory:
    """y(sigma): player-1 dynamics averaged over sigma, mollified when j is given.

    Raises:
        StepCountTooSmall: dt * L_f > 0.5
    """
    field = player_field(spec, j, order)
    times = spec.times(sigma.n_steps)
    check_step_count(times[1] - times[0], field.lipschitz_const)
    y0 = spec.b_bar if b is None else np.asarray(b, dtype=float)
    u_points = sigma.grid.points
    states, midpoints = rk4_dense(lambda k, t, y: relaxed_drift(field, u_points, sigma.weights[k], t, y), times, y0)
    return Trajectory(times=times, states=states, midpoints=midpoints, control_tag="relaxed", j=j)


def integrate_joint(
    spec: ProblemSpec,
    joint: JointControl,
    u_points: np.ndarray,
    v_points: np.ndarray,
    b_hat: Optional[np.ndarray] = None,
    field: Optional[JointField] = None,
) -> Trajectory:
    """y^ driven by a joint control on U x V."""
    field = field or joint_field(spec)
    times = spec.times(joint.n_steps)
    check_step_count(times[1] - times[0], field.lipschitz_const)
    x0 = spec.initial_state() if b_hat is None else np.asarray(b_hat, dtype=float)
    if x0.shape != (spec.joint_dim,):
        raise ShapeMismatch(f"joint initial state must have {spec.joint_dim} coordinates")
    states, midpoints = rk4_dense(
        lambda k, t, x: joint_drift(field, u_points, v_points, joint.weights[k], t, x), times, x0
    )
    return Trajectory(times=times, states=states, midpoints=midpoints, control_tag=joint.provenance, j=field.j)


def integrate_fiber(
    spec: ProblemSpec, sigma: RelaxedControl, pi: Adversary, b_hat: Optional[np.ndarray] = None
) -> Trajectory:
    """y^(sigma (x) pi), or y^(sigma x sigma_P) for a relaxed adversary."""
    adversary_grid = pi.v_grid if isinstance(pi, FiberPolicy) else pi.grid
    return integrate_joint(spec, compose(sigma, pi), sigma.grid.points, adversary_grid.points, b_hat)


def integrate_perturbed(
    spec: ProblemSpec,
    j: int,
    sigma: RelaxedControl,
    pi_or_sigma_p: Adversary,
    b_hat: Optional[np.ndarray] = None,
    order: int = DEFAULT_ORDER,
) -> Trajectory:
    """y^j: the joint dynamics with f^ replaced by its Fredholm approximation at index j."""
    adversary_grid = pi_or_sigma_p.v_grid if isinstance(pi_or_sigma_p, FiberPolicy) else pi_or_sigma_p.grid
    return integrate_joint(
        spec,
        compose(sigma, pi_or_sigma_p),
        sigma.grid.points,
        adversary_grid.points,
        b_hat,
        field=joint_field(spec, j, order),
    )


def on_path(
    evaluate: Callable[[np.ndarray, np.ndarray], np.ndarray], times: np.ndarray, states: np.ndarray, chunk: int = CHUNK
) -> np.ndarray:
    """Apply evaluate(t_column, state_rows) to a path in chunks of steps."""
    pieces = [evaluate(times[i : i + chunk], states[i : i + chunk]) for i in range(0, times.size, chunk)]
    return np.concatenate(pieces, axis=0)


# Proximity bounds


class ProximityConstants(BaseModel):
    """Constants of the perturbation bounds |y^j - y| <= c_y_hat / j and friends."""

    model_config = ConfigDict(frozen=True)

    alpha: float = Field(ge=0, description="Integral of chi over the horizon")
    lipschitz_hat: float = Field(ge=0, description="Lipschitz constant of the joint field")
    lipschitz_h0: float = Field(ge=0)
    lipschitz_h1: float = Field(ge=0)
    lipschitz_h_hat: float = Field(ge=0)
    c_y_hat: float = Field(ge=0)
    c_h0: float = Field(ge=0)
    c_h1: float = Field(ge=0)
    c_h_hat: float = Field(ge=0)

    @model_validator(mode="after")
    def _check_formulas(self) -> "ProximityConstants":
        c_y = self.lipschitz_hat + self.alpha * math.exp(self.alpha)
        expected = {
            "c_y_hat": c_y,
            "c_h0": self.lipschitz_h0 * (c_y + 1.0),
            "c_h1": self.lipschitz_h1 * (c_y + 1.0),
            "c_h_hat": self.lipschitz_h_hat * (c_y + 1.0),
        }
        for name, value in expected.items():
            if not math.isclose(getattr(self, name), value, rel_tol=1e-12, abs_tol=1e-15):
                raise ValueError(f"{name} = {getattr(self, name)} does not match its formula value {value}")
        return self

    @classmethod
    def from_spec(cls, spec: ProblemSpec) -> "ProximityConstants":
        alpha = spec.chi.integral(*spec.horizon)
        c_y = spec.lipschitz_hat + alpha * math.exp(alpha)
        l_h1 = 0.0 if spec.h1 is None else spec.h1.lipschitz_const
        return cls(
            alpha=alpha,
            lipschitz_hat=spec.lipschitz_hat,
            lipschitz_h0=spec.h0.lipschitz_const,
            lipschitz_h1=l_h1,
            lipschitz_h_hat=spec.h_hat.lipschitz_const,
            c_y_hat=c_y,
            c_h0=spec.h0.lipschitz_const * (c_y + 1.0),
            c_h1=l_h1 * (c_y + 1.0),
            c_h_hat=spec.h_hat.lipschitz_const * (c_y + 1.0),
        )


class ProximityGap(BaseModel):
    name: str
    measured: float
    bound: float
    passed: bool


class ProximityReport(BaseModel):
    """Measured sup-gaps between perturbed and unperturbed quantities next to their bounds."""

    j: int
    constants: ProximityConstants
    gaps: List[ProximityGap]

    @computed_field
    @property
    def passed(self) -> bool:
        return all(gap.passed for gap in self.gaps)

    def gap(self, name: str) -> ProximityGap:
        return next(gap for gap in self.gaps if gap.name == name)


def proximity_report(
    spec: ProblemSpec,
    j: int,
    sigma: RelaxedControl,
    pi: Adversary,
    b_hat: Optional[np.ndarray] = None,
    order: int = DEFAULT_ORDER,
    integrator_tol: float = 1e-8,
) -> ProximityReport:
    """Compare y^j with y^ along (sigma, pi) and the endpoint functions along both paths.

    Args:
        spec: the problem
        j: mollification index
        sigma: player-1 control
        pi: fiber policy or relaxed adversary control
        b_hat: joint initial state (defaults to the fixed one)
        order: quadrature order of the mollifier
        integrator_tol: slack added ten times to every bound

    Returns:
        ProximityReport for the trajectory, h0, h1 and h_hat gaps, then the step
        increments of both paths against dt sup chi
    """
    constants = ProximityConstants.from_spec(spec)
    exact = integrate_fiber(spec, sigma, pi, b_hat)
    perturbed = integrate_perturbed(spec, j, sigma, pi, b_hat, order)
    slack = 10.0 * integrator_tol + quadrature_tolerance(spec.joint_dim)
    n = spec.n

    def endpoint_gap(function, states_j: np.ndarray, states: np.ndarray) -> float:
        mollified = fredholm_approx(function.as_field(), j, order)
        return float(np.max(np.linalg.norm(mollified.eval(0.0, states_j) - function.eval(states), axis=-1)))

    measured = [
        ("trajectory", float(np.max(np.linalg.norm(perturbed.states - exact.states, axis=-1))), constants.c_y_hat),
        ("h0", endpoint_gap(spec.h0, perturbed.states[:, :n], exact.states[:, :n]), constants.c_h0),
    ]
    if spec.h1 is not None:
        measured.append(("h1", endpoint_gap(spec.h1, perturbed.states[:, :n], exact.states[:, :n]), constants.c_h1))
    measured.append(("h_hat", endpoint_gap(spec.h_hat, perturbed.states, exact.states), constants.c_h_hat))

    gaps = [
        ProximityGap(name=name, measured=value, bound=const / j, passed=value <= const / j + slack)
        for name, value, const in measured
    ]
    step_bound = exact.dt * spec.chi.sup
    increments = max(
        float(np.max(np.linalg.norm(np.diff(path.states, axis=0), axis=-1))) for path in (exact, perturbed)
    )
    gaps.append(
        ProximityGap(name="increments", measured=increments, bound=step_bound, passed=increments <= step_bound + slack)
    )
    return ProximityReport(j=j, constants=constants, gaps=gaps)
