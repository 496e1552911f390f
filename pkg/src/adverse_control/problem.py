"""Problem data, sampled hypothesis checks and time normalization."""
import math
from pathlib import Path
from typing import Any, Callable, List, Optional, Tuple, Union

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, ValidationError, model_validator
from scipy import integrate

from .control_space import ControlGrid, time_fractions
from .errors import ProblemParseError
from .mollify import EndpointFunction, LipschitzField
from .schemas import Box, FloatArray, ForbiddenWindow, HypothesisCheck, ProblemFile, ValidationReport
from .utils import status

EXAMPLE_PATH = Path(__file__).parent / "data" / "abs_bilinear_game.json"
RATIO_SLACK = 1e-9


class BoundProfile(BaseModel):
    """An integrable profile t -> [0, inf) (psi or chi) with a declared sup."""

    model_config = ConfigDict(frozen=True)

    name: str
    fn: Callable[..., Any] = Field(exclude=True, description="Vectorized evaluator fn(t)")
    sup: float = Field(ge=0, description="Declared sup of the profile over the horizon")

    def __call__(self, t: Any) -> np.ndarray:
        return np.asarray(self.fn(np.asarray(t, dtype=float)), dtype=float)

    def integral(self, t0: float, t1: float) -> float:
        value, _ = integrate.quad(lambda s: float(self(s)), t0, t1, limit=200)
        return float(value)


class ProblemSpec(BaseModel):
    """Full data of an adverse control problem.

    The player-1 state y lives in R^n, the adversary state y~ in R^m, and the
    joint state y^ = (y, y~) in R^(n+m).
    """

    model_config = ConfigDict(frozen=True)

    name: str
    horizon: Tuple[float, float]
    f: LipschitzField = Field(description="Player-1 dynamics, R^n valued, on the player-1 state")
    f_tilde: LipschitzField = Field(description="Adversary dynamics, R^m valued, on the joint state")
    h0: EndpointFunction = Field(description="Endpoint cost on R^n")
    h1: Optional[EndpointFunction] = Field(default=None, description="Endpoint equality constraint on R^n")
    h_hat: EndpointFunction = Field(description="Endpoint inequality constraint on R^(n+m)")
    u_points: FloatArray
    v_points: FloatArray
    u_forbidden: List[ForbiddenWindow] = Field(default_factory=list)
    v_forbidden: List[ForbiddenWindow] = Field(default_factory=list)
    b_set: Box = Field(description="Initial set B")
    b_tilde_set: Box = Field(description="Initial set B~")
    b_bar: FloatArray = Field(description="Fixed player-1 initial state")
    b_tilde_bar: FloatArray = Field(description="Fixed adversary initial state")
    value_coordinates: List[int] = Field(default_factory=list, description="Static epigraph coordinates")
    state_box: Box = Field(description="Working box of the joint state")
    psi: BoundProfile
    chi: BoundProfile

    @model_validator(mode="after")
    def _check_dimensions(self) -> "ProblemSpec":
        n, m = self.f.dim_state, self.f_tilde.dim_out
        if self.horizon[0] >= self.horizon[1]:
            raise ValueError(f"horizon {self.horizon} must satisfy t0 < t1")
        if self.f.dim_out != n:
            raise ValueError("player-1 dynamics must map into R^n")
        if self.f_tilde.dim_state != n + m:
            raise ValueError("adversary dynamics must act on the joint state")
        if self.h0.dim_state != n or self.h0.dim_out != 1:
            raise ValueError("the cost must be a scalar function of the player-1 state")
        if self.h1 is not None and self.h1.dim_state != n:
            raise ValueError("the equality constraint must act on the player-1 state")
        if self.h_hat.dim_state != n + m or self.h_hat.dim_out != 1:
            raise ValueError("the inequality constraint must be a scalar function of the joint state")
        if self.b_set.dim != n or self.b_tilde_set.dim != m or self.state_box.dim != n + m:
            raise ValueError("initial boxes or state box have the wrong dimension")
        for point, box, label in ((self.b_bar, self.b_set, "b"), (self.b_tilde_bar, self.b_tilde_set, "b~")):
            if point.shape != (box.dim,) or np.any(point < box.lower) or np.any(point > box.upper):
                raise ValueError(f"fixed initial state {label} must lie in its box")
        if len(set(self.value_coordinates)) != len(self.value_coordinates) or any(
            not 0 <= i < n for i in self.value_coordinates
        ):
            raise ValueError("value coordinates must be distinct player-1 coordinates")
        return self

    @property
    def n(self) -> int:
        return self.f.dim_state

    @property
    def m(self) -> int:
        return self.f_tilde.dim_out

    @property
    def joint_dim(self) -> int:
        return self.n + self.m

    @property
    def q(self) -> int:
        return 0 if self.h1 is None else self.h1.dim_out

    @property
    def duration(self) -> float:
        return self.horizon[1] - self.horizon[0]

    @property
    def lipschitz_hat(self) -> float:
        """Lipschitz constant of the joint field f^ = (f, f~)."""
        return math.hypot(self.f.lipschitz_const, self.f_tilde.lipschitz_const)

    @property
    def player_box(self) -> Box:
        return Box(lower=self.state_box.lower[: self.n], upper=self.state_box.upper[: self.n])

    @property
    def b_hat_set(self) -> Box:
        return self.b_set.join(self.b_tilde_set)

    def initial_state(self, b_bar: Optional[np.ndarray] = None) -> np.ndarray:
        """Joint initial state (b, b~), with `b_bar` replacing the fixed player-1 part if given."""
        player = self.b_bar if b_bar is None else np.asarray(b_bar, dtype=float)
        return np.concatenate([player, self.b_tilde_bar])

    def times(self, n_steps: int) -> np.ndarray:
        return np.linspace(self.horizon[0], self.horizon[1], n_steps + 1)

    def grids(self, n_steps: int) -> Tuple[ControlGrid, ControlGrid]:
        """Control grids U, V with admissibility evaluated at step midpoints."""
        midpoints = time_fractions(n_steps, self.horizon)

        def grid(points: np.ndarray, windows: List[ForbiddenWindow]) -> ControlGrid:
            mask = np.ones((n_steps, points.size), dtype=bool)
            for window in windows:
                if window.index >= points.size:
                    raise ValueError(f"forbidden window refers to grid point {window.index} of {points.size}")
                mask[(midpoints >= window.start) & (midpoints <= window.end), window.index] = False
            return ControlGrid(points=points, admissible_mask=mask)

        return grid(self.u_points, self.u_forbidden), grid(self.v_points, self.v_forbidden)


class TimeRescaling(BaseModel):
    """Monotone change of time t(tau) = t0 + integral of phi from tau0 to tau."""

    model_config = ConfigDict(frozen=True)

    phi: BoundProfile = Field(description="Integrable profile phi >= 1 on the old time axis")
    tau_grid: FloatArray = Field(description="Old time nodes")
    t_grid: FloatArray = Field(description="New time nodes t(tau_grid)")

    @model_validator(mode="after")
    def _check_monotone(self) -> "TimeRescaling":
        if self.tau_grid.shape != self.t_grid.shape or self.tau_grid.size < 2:
            raise ValueError("rescaling grids must have equal length >= 2")
        if np.any(np.diff(self.t_grid) <= 0) or np.any(np.diff(self.tau_grid) <= 0):
            raise ValueError("t(tau) must be strictly increasing")
        return self

    @classmethod
    def identity(cls, horizon: Tuple[float, float]) -> "TimeRescaling":
        from .registry import constant_profile

        nodes = np.asarray(horizon, dtype=float)
        return cls(phi=constant_profile(horizon, 1.0), tau_grid=nodes, t_grid=nodes)

    @property
    def is_identity(self) -> bool:
        return np.array_equal(self.tau_grid, self.t_grid)

    @property
    def new_horizon(self) -> Tuple[float, float]:
        return float(self.t_grid[0]), float(self.t_grid[-1])

    def to_new(self, tau: Any) -> Any:
        return np.interp(tau, self.tau_grid, self.t_grid)

    def to_old(self, t: Any) -> Any:
        return np.interp(t, self.t_grid, self.tau_grid)


def _sample_pairs(box: Box, rng: np.random.Generator, n: int) -> Tuple[np.ndarray, np.ndarray]:
    """Random pairs in the box: half nearby partners, half independent ones."""
    x = box.sample(rng, n)
    nearby = x + 1e-3 * (box.upper - box.lower) * rng.standard_normal(x.shape)
    partner = np.where(rng.random(n)[:, None] < 0.5, nearby, box.sample(rng, n))
    return x, np.clip(partner, box.lower, box.upper)


def _ratios(a: np.ndarray, b: np.ndarray, x: np.ndarray, y: np.ndarray) -> np.ndarray:
    num = np.linalg.norm(a - b, axis=-1)
    den = np.linalg.norm(x - y, axis=-1)
    return np.where(den > 1e-12, num / np.where(den > 1e-12, den, 1.0), 0.0)


def _lipschitz_check(name: str, ratios: np.ndarray, declared: float) -> HypothesisCheck:
    worst = float(np.max(ratios)) if ratios.size else 0.0
    passed = worst <= declared * (1.0 + RATIO_SLACK) + 1e-12
    return HypothesisCheck(name=name, status="pass" if passed else "fail", worst_ratio=worst, declared=declared)


def validate(spec: ProblemSpec, n_samples: int = 10000, seed: int = 0, verbose: bool = False) -> ValidationReport:
    """Check the Lipschitz and growth hypotheses on random samples.

    Args:
        spec: the problem (never mutated)
        n_samples: samples per check
        seed: generator seed
        verbose: print a status line

    Returns:
        ValidationReport with one entry per check
    """
    rng = np.random.default_rng(seed)
    t0, t1 = spec.horizon
    t = rng.uniform(t0, t1, n_samples)
    u = rng.choice(spec.u_points, n_samples)
    v = rng.choice(spec.v_points, n_samples)
    checks = [
        HypothesisCheck(name="measurability", status="not_checked", detail="measurability in t is assumed"),
    ]

    x, y = _sample_pairs(spec.player_box, rng, n_samples)
    checks.append(
        _lipschitz_check(
            "lipschitz.f", _ratios(spec.f.eval(t, x, u, v), spec.f.eval(t, y, u, v), x, y), spec.f.lipschitz_const
        )
    )

    xh, yh = _sample_pairs(spec.state_box, rng, n_samples)
    tilde_ratios = _ratios(spec.f_tilde.eval(t, xh, u, v), spec.f_tilde.eval(t, yh, u, v), xh, yh)
    checks.append(_lipschitz_check("lipschitz.f_tilde", tilde_ratios, spec.f_tilde.lipschitz_const))

    def joint(points: np.ndarray) -> np.ndarray:
        return np.concatenate([spec.f.eval(t, points[:, : spec.n], u, v), spec.f_tilde.eval(t, points, u, v)], axis=-1)

    at_x, at_y = joint(xh), joint(yh)
    psi = spec.psi(t)
    joint_ratios = _ratios(at_x, at_y, xh, yh)
    scaled = np.where(psi > 0, joint_ratios / np.where(psi > 0, psi, 1.0), np.where(joint_ratios > 0, np.inf, 0.0))
    checks.append(_lipschitz_check("lipschitz.joint", scaled, 1.0))

    chi = spec.chi(t)
    size = np.linalg.norm(at_x, axis=-1)
    bound = np.where(chi > 0, size / np.where(chi > 0, chi, 1.0), np.where(size > 0, np.inf, 0.0))
    checks.append(_lipschitz_check("bound.joint", bound, 1.0))

    checks.append(_lipschitz_check("lipschitz.h0", _ratios(spec.h0.eval(x), spec.h0.eval(y), x, y), spec.h0.lipschitz_const))
    if spec.h1 is None:
        checks.append(HypothesisCheck(name="lipschitz.h1", status="not_checked", detail="no equality constraint"))
    else:
        checks.append(
            _lipschitz_check("lipschitz.h1", _ratios(spec.h1.eval(x), spec.h1.eval(y), x, y), spec.h1.lipschitz_const)
        )
    checks.append(
        _lipschitz_check(
            "lipschitz.h_hat", _ratios(spec.h_hat.eval(xh), spec.h_hat.eval(yh), xh, yh), spec.h_hat.lipschitz_const
        )
    )
    checks.append(_value_coordinate_check(spec, t, xh, u, v, rng))

    report = ValidationReport(problem=spec.name, n_samples=n_samples, seed=seed, checks=checks)
    status(f"🔎 Validation of {spec.name}: {'PASS' if report.passed else 'FAIL'}", verbose)
    return report


def _value_coordinate_check(spec: ProblemSpec, t, points, u, v, rng) -> HypothesisCheck:
    """Value coordinates must have zero dynamics and must not enter any dynamics."""
    if not spec.value_coordinates:
        return HypothesisCheck(name="value_coordinates", status="not_checked", detail="none declared")
    moved = points.copy()
    for i in spec.value_coordinates:
        moved[:, i] += rng.uniform(-1.0, 1.0, points.shape[0])
    f_before = spec.f.eval(t, points[:, : spec.n], u, v)
    f_after = spec.f.eval(t, moved[:, : spec.n], u, v)
    tilde_change = np.abs(spec.f_tilde.eval(t, points, u, v) - spec.f_tilde.eval(t, moved, u, v))
    worst = max(
        float(np.max(np.abs(f_before[:, spec.value_coordinates]))),
        float(np.max(np.abs(f_after - f_before))),
        float(np.max(tilde_change)),
    )
    return HypothesisCheck(
        name="value_coordinates",
        status="pass" if worst <= 1e-12 else "fail",
        worst_ratio=worst,
        declared=0.0,
        detail=f"coordinates {spec.value_coordinates}",
    )


def _rescaled_field(field: LipschitzField, rescaling: TimeRescaling, lipschitz: float, bound: float) -> LipschitzField:
    base = field.fn

    def fn(t, x, u, v):
        tau = rescaling.to_old(t)
        scale = 1.0 / rescaling.phi(tau)
        return base(tau, x, u, v) * np.asarray(scale)[..., None]

    return field.model_copy(update={"fn": fn, "lipschitz_const": lipschitz, "bound": bound})


def normalize_time(spec: ProblemSpec, n_grid: int = 20001, verbose: bool = False) -> Tuple[ProblemSpec, TimeRescaling]:
    """Rescale time with phi = max(1, psi) so the joint field has Lipschitz constant <= 1.

    When psi <= 1 already, the same spec and the identity rescaling are returned.

    Args:
        spec: a validated problem
        n_grid: nodes of the old-time grid used for t(tau) and its inverse
        verbose: print a status line

    Returns:
        (normalized spec, TimeRescaling)
    """
    if spec.psi.sup <= 1.0:
        status("⏱️  Time normalization: identity (psi <= 1)", verbose)
        return spec, TimeRescaling.identity(spec.horizon)

    tau0, tau1 = spec.horizon
    tau = np.linspace(tau0, tau1, n_grid)
    psi_values = spec.psi(tau)
    phi_values = np.maximum(1.0, psi_values)
    t_grid = tau0 + integrate.cumulative_trapezoid(phi_values, tau, initial=0.0)
    psi_profile = spec.psi
    phi = BoundProfile(name=f"max(1,{psi_profile.name})", fn=lambda s: np.maximum(1.0, psi_profile(s)), sup=psi_profile.sup)
    rescaling = TimeRescaling(phi=phi, tau_grid=tau, t_grid=t_grid)

    def scaled_constant(declared: float) -> float:
        return float(np.max(np.minimum(declared, psi_values) / phi_values))

    f = _rescaled_field(spec.f, rescaling, scaled_constant(spec.f.lipschitz_const), spec.f.bound)
    f_tilde = _rescaled_field(
        spec.f_tilde, rescaling, scaled_constant(spec.f_tilde.lipschitz_const), spec.f_tilde.bound
    )
    psi_new = BoundProfile(
        name=f"{psi_profile.name}/phi",
        fn=lambda t: psi_profile(rescaling.to_old(t)) / phi(rescaling.to_old(t)),
        sup=1.0,
    )
    chi_profile = spec.chi
    chi_new = BoundProfile(
        name=f"{chi_profile.name}/phi",
        fn=lambda t: chi_profile(rescaling.to_old(t)) / phi(rescaling.to_old(t)),
        sup=chi_profile.sup,
    )

    def remap(windows: List[ForbiddenWindow]) -> List[ForbiddenWindow]:
        return [
            ForbiddenWindow(index=w.index, start=float(rescaling.to_new(w.start)), end=float(rescaling.to_new(w.end)))
            for w in windows
        ]

    normalized = spec.model_copy(
        update={
            "horizon": rescaling.new_horizon,
            "f": f,
            "f_tilde": f_tilde,
            "psi": psi_new,
            "chi": chi_new,
            "u_forbidden": remap(spec.u_forbidden),
            "v_forbidden": remap(spec.v_forbidden),
        }
    )
    status(f"⏱️  Time normalization: horizon {spec.horizon} -> {normalized.horizon}", verbose)
    return normalized, rescaling


# Problem files


def build_problem(problem_file: ProblemFile) -> ProblemSpec:
    """Resolve registry names of a parsed problem file into a ProblemSpec.

    Raises:
        UnknownRegistryName: a referenced name is not registered
        ProblemParseError: parameters or dimensions are inconsistent
    """
    from .registry import FieldContext, build_dynamics, build_endpoint, build_profile

    pf = problem_file
    n, m = pf.player_dim, pf.adversary_dim
    u_points = np.asarray(pf.u_controls.points, dtype=float)
    v_points = np.asarray(pf.v_controls.points, dtype=float)
    try:
        player_box = Box(lower=pf.state_box.lower[:n], upper=pf.state_box.upper[:n])
        f = build_dynamics(
            pf.dynamics,
            FieldContext(dim_state=n, dim_out=n, state_box=player_box, u_points=u_points, v_points=v_points),
        )
        f_tilde = build_dynamics(
            pf.adversary_dynamics,
            FieldContext(dim_state=n + m, dim_out=m, state_box=pf.state_box, u_points=u_points, v_points=v_points),
        )
        return ProblemSpec(
            name=pf.name,
            horizon=pf.horizon,
            f=f,
            f_tilde=f_tilde,
            h0=build_endpoint(pf.cost, n),
            h1=None if pf.equality is None else build_endpoint(pf.equality, n),
            h_hat=build_endpoint(pf.constraint, n + m),
            u_points=u_points,
            v_points=v_points,
            u_forbidden=pf.u_controls.forbidden,
            v_forbidden=pf.v_controls.forbidden,
            b_set=pf.initial_box,
            b_tilde_set=pf.adversary_initial_box,
            b_bar=pf.initial_state if pf.initial_state is not None else pf.initial_box.center(),
            b_tilde_bar=(
                pf.adversary_initial_state
                if pf.adversary_initial_state is not None
                else pf.adversary_initial_box.center()
            ),
            value_coordinates=pf.value_coordinates,
            state_box=pf.state_box,
            psi=build_profile(pf.psi, pf.horizon),
            chi=build_profile(pf.chi, pf.horizon),
        )
    except ValidationError as e:
        raise ProblemParseError(f"Inconsistent problem {pf.name!r}: {e}") from e


def load_problem_file(path: Union[str, Path]) -> ProblemFile:
    try:
        text = Path(path).read_text()
    except OSError as e:
        raise ProblemParseError(f"Cannot read problem file {path}: {e}") from e
    try:
        return ProblemFile.model_validate_json(text)
    except ValidationError as e:
        raise ProblemParseError(f"Malformed problem file {path}: {e}") from e


def load_problem(path: Union[str, Path]) -> ProblemSpec:
    """Parse a JSON problem file and build its ProblemSpec."""
    return build_problem(load_problem_file(path))
