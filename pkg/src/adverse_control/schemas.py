"""Pydantic models and shared type definitions for the adverse control toolkit."""
import itertools
from typing import Annotated, Any, Dict, List, Literal, Optional, Tuple

import numpy as np
from pydantic import (
    BaseModel,
    ConfigDict,
    Field,
    PlainSerializer,
    PlainValidator,
    WithJsonSchema,
    computed_field,
    model_validator,
)


def _array_serializer(array: np.ndarray) -> list:
    return array.tolist()


FloatArray = Annotated[
    np.ndarray,
    PlainValidator(lambda value: np.asarray(value, dtype=float)),
    PlainSerializer(_array_serializer, return_type=list),
    WithJsonSchema({"type": "array", "items": {}}),
]

BoolArray = Annotated[
    np.ndarray,
    PlainValidator(lambda value: np.asarray(value, dtype=bool)),
    PlainSerializer(_array_serializer, return_type=list),
    WithJsonSchema({"type": "array", "items": {}}),
]

class Box(BaseModel):
    """Axis-aligned box [lower, upper] in R^d (bounds may be infinite)."""

    model_config = ConfigDict(frozen=True)

    lower: FloatArray = Field(description="Lower corner")
    upper: FloatArray = Field(description="Upper corner")

    @model_validator(mode="after")
    def _check_corners(self) -> "Box":
        if self.lower.ndim != 1 or self.lower.shape != self.upper.shape:
            raise ValueError("box corners must be 1-D arrays of equal length")
        if np.any(self.lower > self.upper):
            raise ValueError("box lower corner exceeds upper corner")
        return self

    @classmethod
    def unbounded(cls, dim: int) -> "Box":
        return cls(lower=np.full(dim, -np.inf), upper=np.full(dim, np.inf))

    @property
    def dim(self) -> int:
        return int(self.lower.shape[0])

    def center(self) -> np.ndarray:
        return 0.5 * (self.lower + self.upper)

    def contains(self, x: np.ndarray, margin: float = 0.0) -> bool:
        """True when every point of x (shape (..., d)) sits at least `margin` inside the box."""
        x = np.asarray(x, dtype=float)
        return bool(np.all(x - margin > self.lower) and np.all(x + margin < self.upper))

    def vertices(self) -> np.ndarray:
        """All 2^d corners, in lexicographic lower/upper order."""
        corners = itertools.product(*zip(self.lower, self.upper))
        return np.array(list(corners), dtype=float).reshape(-1, self.dim)

    def sample(self, rng: np.random.Generator, n: int) -> np.ndarray:
        return rng.uniform(self.lower, self.upper, size=(n, self.dim))

    def join(self, other: "Box") -> "Box":
        """Cartesian product self x other."""
        return Box(
            lower=np.concatenate([self.lower, other.lower]),
            upper=np.concatenate([self.upper, other.upper]),
        )


# Problem file schema


class FunctionRef(BaseModel):
    """Reference to a registered function plus its numeric parameters."""

    name: str = Field(description="Registry name, e.g. 'abs_bilinear'")
    params: Dict[str, Any] = Field(default_factory=dict, description="Numeric parameters for the builder")


class ForbiddenWindow(BaseModel):
    """A time window in which one grid point is not admissible."""

    index: int = Field(ge=0, description="Grid point index")
    start: float = Field(description="Window start time")
    end: float = Field(description="Window end time")


class ControlSetSpec(BaseModel):
    """Finite control grid and its time-dependent admissibility."""

    points: List[float] = Field(min_length=1, description="Control values")
    forbidden: List[ForbiddenWindow] = Field(default_factory=list, description="Inadmissible windows")


class ProblemFile(BaseModel):
    """JSON problem file. Maps 1:1 onto ProblemSpec through the registry."""

    model_config = ConfigDict(extra="forbid")

    name: str = Field(description="Problem name")
    horizon: Tuple[float, float] = Field(description="(t0, t1)")
    player_dim: int = Field(ge=1, description="n, player-1 state dimension")
    adversary_dim: int = Field(ge=1, description="m, adversary state dimension")
    dynamics: FunctionRef = Field(description="Player-1 dynamics f")
    adversary_dynamics: FunctionRef = Field(description="Adversary dynamics f~ on the joint state")
    cost: FunctionRef = Field(description="Endpoint cost h0")
    equality: Optional[FunctionRef] = Field(default=None, description="Endpoint equality h1 (optional)")
    constraint: FunctionRef = Field(description="Endpoint inequality h^ on the joint state")
    u_controls: ControlSetSpec = Field(description="Player-1 control grid U")
    v_controls: ControlSetSpec = Field(description="Adversary control grid V")
    initial_box: Box = Field(description="Initial set B")
    adversary_initial_box: Box = Field(description="Initial set B~")
    initial_state: Optional[List[float]] = Field(default=None, description="Fixed b; defaults to the centre of B")
    adversary_initial_state: Optional[List[float]] = Field(
        default=None, description="Fixed b~; defaults to the centre of B~"
    )
    value_coordinates: List[int] = Field(default_factory=list, description="Static epigraph coordinates of y")
    state_box: Box = Field(description="Working box for the joint state, used for sampling")
    psi: FunctionRef = Field(description="Lipschitz profile psi of the joint field")
    chi: FunctionRef = Field(description="Growth profile chi of the joint field")


# Validation report


class HypothesisCheck(BaseModel):
    """Outcome of one sampled hypothesis check."""

    name: str = Field(description="Check identifier, e.g. 'lipschitz.f'")
    status: Literal["pass", "fail", "not_checked"] = Field(description="Outcome of the check")
    worst_ratio: Optional[float] = Field(default=None, description="Worst sampled ratio")
    declared: Optional[float] = Field(default=None, description="Declared constant the ratio is compared with")
    detail: str = Field(default="", description="Human-readable note")


class ValidationReport(BaseModel):
    """Sampled validation of the regularity hypotheses for one problem."""

    problem: str
    n_samples: int
    seed: int
    checks: List[HypothesisCheck]

    @computed_field
    @property
    def passed(self) -> bool:
        return all(check.status != "fail" for check in self.checks)

    def check(self, name: str) -> HypothesisCheck:
        for entry in self.checks:
            if entry.name == name:
                return entry
        raise KeyError(name)


# Service schemas


class SolveRequest(BaseModel):
    """Request schema for the batch solve endpoint."""

    problem: ProblemFile
    config: Dict[str, Any] = Field(default_factory=dict, description="RunConfig overrides")


class ValidateRequest(BaseModel):
    """Request schema for the validation endpoint."""

    problem: ProblemFile
    n_samples: Optional[int] = Field(default=None, ge=1, description="Sample count override")
    seed: Optional[int] = Field(default=None, description="Seed override")
