"""Run and solver configuration.

Defaults come from ADVERSE_CONTROL_* environment variables (a local .env file
is honoured), then from a JSON config file, then from command-line flags.
"""
import json
import os
from pathlib import Path
from typing import Any, Dict, List, Literal, Optional

from dotenv import load_dotenv
from pydantic import BaseModel, Field, ValidationError, field_validator

from .errors import ProblemParseError

# Load environment variables first
load_dotenv()


def _env_int(name: str, default: int) -> int:
    return int(os.getenv(name, default))


def _env_j_sequence() -> List[int]:
    raw = os.getenv("ADVERSE_CONTROL_J_SEQUENCE", "5,10,20,40")
    return [int(item) for item in raw.split(",") if item.strip()]


class SolverConfig(BaseModel):
    """Numeric knobs of the exchange-method solver."""

    mode: Literal["relaxed", "hyperrelaxed"] = Field(
        default_factory=lambda: os.getenv("ADVERSE_CONTROL_MODE", "hyperrelaxed"),
        description="Adversary class: relaxed controls or fiber policies",
    )
    n_steps: int = Field(
        default_factory=lambda: _env_int("ADVERSE_CONTROL_STEPS", 2000),
        ge=1,
        description="Uniform time steps of the control grid and the RK4 integrator",
    )
    quadrature_order: int = Field(
        default_factory=lambda: _env_int("ADVERSE_CONTROL_QUADRATURE_ORDER", 16),
        ge=2,
        description="Gauss-Legendre nodes per axis for the mollifier",
    )
    penalty_start: float = Field(default=10.0, gt=0, description="Penalty weight of the first round")
    penalty_growth: float = Field(default=10.0, gt=1, description="Penalty growth factor per round")
    penalty_rounds: int = Field(default=4, ge=1, description="Number of penalty rounds")
    max_atoms: int = Field(default=8, ge=1, description="Largest adversary atom set")
    max_exchange_iterations: int = Field(default=10, ge=1, description="Exchange iterations per round")
    max_player_iterations: int = Field(default=50, ge=1, description="Conditional-gradient iterations per exchange")
    max_response_sweeps: int = Field(default=10, ge=1, description="Forward-backward sweeps of a best response")
    step_rule: Literal["open_loop", "backtracking"] = Field(
        default="open_loop", description="open_loop uses 2/(iter+2); backtracking halves from 1"
    )
    tol_exchange: float = Field(default=1e-5, gt=0, description="Violation margin for adding an atom")
    tol_fiber: float = Field(default=1e-6, gt=0, description="Fiber-condition tolerance")
    tol_min_condition: float = Field(default=1e-4, gt=0, description="Min-condition tolerance relative to sup|H|")
    tol_transversality: float = Field(default=1e-6, gt=0, description="Transversality tolerance")
    tol_stall: float = Field(default=1e-10, gt=0, description="Frank-Wolfe gap treated as a stall")
    tol_normalization: float = Field(default=1e-12, gt=0, description="Slack on l0 + |l1| + omega <= 1")
    integrator_tol: float = Field(default=1e-8, gt=0, description="Integrator slack added to proximity bounds")
    cauchy_tol: float = Field(default=1e-9, gt=0, description="Slack on non-increasing Cauchy increments")


class RunConfig(SolverConfig):
    """Configuration of one batch run."""

    j_sequence: List[int] = Field(default_factory=_env_j_sequence, min_length=1, description="Mollification indices")
    seed: int = Field(default_factory=lambda: _env_int("ADVERSE_CONTROL_SEED", 0), description="Validation seed")
    n_samples: int = Field(
        default_factory=lambda: _env_int("ADVERSE_CONTROL_SAMPLES", 10000), ge=1, description="Validation samples"
    )
    output_dir: Path = Field(
        default_factory=lambda: Path(os.getenv("ADVERSE_CONTROL_OUTPUT_DIR", "runs")),
        description="Directory receiving the run artifacts",
    )

    @field_validator("j_sequence")
    @classmethod
    def _strictly_increasing(cls, value: List[int]) -> List[int]:
        if any(j < 1 for j in value):
            raise ValueError("j_sequence entries must be positive")
        if any(b <= a for a, b in zip(value, value[1:])):
            raise ValueError("j_sequence must be strictly increasing")
        return value

    @field_validator("n_steps")
    @classmethod
    def _enough_steps(cls, value: int) -> int:
        if value < 10:
            raise ValueError("n_steps must be at least 10")
        return value

    def solver_config(self) -> SolverConfig:
        return SolverConfig(**self.model_dump(include=set(SolverConfig.model_fields)))


def load_run_config(path: Optional[Path] = None, overrides: Optional[Dict[str, Any]] = None) -> RunConfig:
    """Build a RunConfig from an optional JSON file and flag overrides.

    Args:
        path: JSON config file, or None for environment defaults only
        overrides: values that win over the file (None entries are ignored)

    Returns:
        The validated RunConfig
    """
    values: Dict[str, Any] = {}
    if path is not None:
        try:
            values.update(json.loads(Path(path).read_text()))
        except (OSError, json.JSONDecodeError) as e:
            raise ProblemParseError(f"Cannot read config file {path}: {e}") from e
    values.update({key: value for key, value in (overrides or {}).items() if value is not None})
    try:
        return RunConfig(**values)
    except ValidationError as e:
        raise ProblemParseError(f"Invalid run configuration: {e}") from e
