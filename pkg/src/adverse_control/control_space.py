"""Relaxed controls, fiber policies and their compositions on finite control grids.

Controls are piecewise constant on a uniform time grid: row k of a weight
matrix is the probability vector used on step k.
"""
from fractions import Fraction
from typing import List, Literal, Optional, Sequence, Tuple, Union

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator

from .errors import ShapeMismatch
from .schemas import BoolArray, FloatArray

STOCHASTIC_TOL = 1e-12
RANK_ONE_TOL = 1e-10


class ControlGrid(BaseModel):
    """Finite control values with a per-step admissibility mask (U(t) or V(t))."""

    model_config = ConfigDict(frozen=True)

    points: FloatArray = Field(description="Control values, shape (n_points,)")
    admissible_mask: BoolArray = Field(description="Admissible points per step, shape (n_steps, n_points)")

    @model_validator(mode="after")
    def _check_mask(self) -> "ControlGrid":
        if self.points.ndim != 1 or self.points.size == 0:
            raise ValueError("control grid points must be a non-empty 1-D array")
        if self.admissible_mask.ndim != 2 or self.admissible_mask.shape[1] != self.points.size:
            raise ValueError(f"mask shape {self.admissible_mask.shape} does not fit {self.points.size} points")
        empty = np.flatnonzero(~self.admissible_mask.any(axis=1))
        if empty.size:
            raise ValueError(f"no admissible control point at step {int(empty[0])}")
        return self

    @classmethod
    def full(cls, points: Sequence[float], n_steps: int) -> "ControlGrid":
        points = np.asarray(points, dtype=float)
        return cls(points=points, admissible_mask=np.ones((n_steps, points.size), dtype=bool))

    @property
    def n_steps(self) -> int:
        return int(self.admissible_mask.shape[0])

    @property
    def n_points(self) -> int:
        return int(self.points.size)

    def same_as(self, other: "ControlGrid") -> bool:
        return np.array_equal(self.points, other.points) and np.array_equal(
            self.admissible_mask, other.admissible_mask
        )


def _check_stochastic(weights: np.ndarray, mask: np.ndarray, what: str) -> None:
    if np.any(weights < 0):
        raise ValueError(f"{what} has negative weights")
    sums = weights.sum(axis=-1)
    worst = float(np.max(np.abs(sums - 1.0)))
    if worst > STOCHASTIC_TOL:
        raise ValueError(f"{what} rows must sum to 1 (worst deviation {worst:.3e})")
    if np.any(weights[~np.broadcast_to(mask, weights.shape)] != 0):
        raise ValueError(f"{what} puts weight on inadmissible points")


def _masked_uniform(mask: np.ndarray) -> np.ndarray:
    return mask / mask.sum(axis=-1, keepdims=True)


class RelaxedControl(BaseModel):
    """sigma in S (or sigma_P in S_P): a row-stochastic matrix over a control grid."""

    model_config = ConfigDict(frozen=True)

    weights: FloatArray = Field(description="Probability weights, shape (n_steps, n_points)")
    grid: ControlGrid

    @model_validator(mode="after")
    def _check_weights(self) -> "RelaxedControl":
        if self.weights.shape != self.grid.admissible_mask.shape:
            raise ValueError(f"weights shape {self.weights.shape} does not match grid {self.grid.admissible_mask.shape}")
        _check_stochastic(self.weights, self.grid.admissible_mask, "relaxed control")
        return self

    @classmethod
    def uniform(cls, grid: ControlGrid) -> "RelaxedControl":
        """Uniform weights over the admissible points of each step."""
        return cls(weights=_masked_uniform(grid.admissible_mask), grid=grid)

    @classmethod
    def dirac(cls, grid: ControlGrid, indices: Union[int, Sequence[int], np.ndarray]) -> "RelaxedControl":
        """Dirac rows at `indices` (one index for every step, or one per step)."""
        indices = np.broadcast_to(np.asarray(indices, dtype=int), (grid.n_steps,))
        weights = np.zeros(grid.admissible_mask.shape)
        weights[np.arange(grid.n_steps), indices] = 1.0
        return cls(weights=weights, grid=grid)

    @property
    def n_steps(self) -> int:
        return self.grid.n_steps

    def row(self, k: int) -> np.ndarray:
        return self.weights[k]

    def mix(self, other: "RelaxedControl", gamma: float) -> "RelaxedControl":
        """(1 - gamma) * self + gamma * other."""
        if not self.grid.same_as(other.grid):
            raise ShapeMismatch("cannot mix relaxed controls on different grids")
        return RelaxedControl(weights=(1.0 - gamma) * self.weights + gamma * other.weights, grid=self.grid)


class FiberPolicy(BaseModel):
    """pi in P: for every step and player-1 grid point, a probability vector over V."""

    model_config = ConfigDict(frozen=True)

    weights: FloatArray = Field(description="Fiber weights, shape (n_steps, n_u, n_v)")
    u_grid: ControlGrid
    v_grid: ControlGrid

    @model_validator(mode="after")
    def _check_weights(self) -> "FiberPolicy":
        expected = (self.v_grid.n_steps, self.u_grid.n_points, self.v_grid.n_points)
        if self.weights.shape != expected or self.u_grid.n_steps != self.v_grid.n_steps:
            raise ValueError(f"fiber weights shape {self.weights.shape} does not match grids {expected}")
        _check_stochastic(self.weights, self.v_grid.admissible_mask[:, None, :], "fiber policy")
        return self

    @classmethod
    def uniform(cls, u_grid: ControlGrid, v_grid: ControlGrid) -> "FiberPolicy":
        rows = _masked_uniform(v_grid.admissible_mask)
        weights = np.repeat(rows[:, None, :], u_grid.n_points, axis=1)
        return cls(weights=weights, u_grid=u_grid, v_grid=v_grid)

    @classmethod
    def from_relaxed(cls, rho: RelaxedControl, u_grid: ControlGrid) -> "FiberPolicy":
        """The u-independent policy pi(t, u) = rho(t)."""
        weights = np.repeat(rho.weights[:, None, :], u_grid.n_points, axis=1)
        return cls(weights=weights, u_grid=u_grid, v_grid=rho.grid)

    @classmethod
    def dirac(cls, u_grid: ControlGrid, v_grid: ControlGrid, indices: np.ndarray) -> "FiberPolicy":
        """Dirac fibers at v-indices of shape (n_steps, n_u)."""
        indices = np.broadcast_to(np.asarray(indices, dtype=int), (v_grid.n_steps, u_grid.n_points))
        weights = np.zeros((v_grid.n_steps, u_grid.n_points, v_grid.n_points))
        steps, us = np.indices(indices.shape)
        weights[steps, us, indices] = 1.0
        return cls(weights=weights, u_grid=u_grid, v_grid=v_grid)

    @property
    def n_steps(self) -> int:
        return self.v_grid.n_steps


class JointControl(BaseModel):
    """Element of Q: a probability measure on U x V per step, from a product or a fiber composition."""

    model_config = ConfigDict(frozen=True)

    weights: FloatArray = Field(description="Joint weights, shape (n_steps, n_u, n_v)")
    provenance: Literal["product", "fiber"]

    @model_validator(mode="after")
    def _check_weights(self) -> "JointControl":
        if self.weights.ndim != 3:
            raise ValueError("joint weights must have shape (n_steps, n_u, n_v)")
        sums = self.weights.sum(axis=(1, 2))
        if np.any(self.weights < 0) or np.max(np.abs(sums - 1.0)) > STOCHASTIC_TOL:
            raise ValueError("joint control slices must be probability tables")
        if self.provenance == "product" and rank_one_defect(self.weights) > RANK_ONE_TOL:
            raise ValueError("product joint control slices must be rank one")
        return self

    @property
    def n_steps(self) -> int:
        return int(self.weights.shape[0])

    def marginal_u(self) -> np.ndarray:
        return self.weights.sum(axis=2)

    def marginal_v(self) -> np.ndarray:
        return self.weights.sum(axis=1)


def rank_one_defect(weights: np.ndarray) -> float:
    """max |slice - outer(row marginal, column marginal)| over all slices."""
    outer = np.einsum("tu,tv->tuv", weights.sum(axis=2), weights.sum(axis=1))
    return float(np.max(np.abs(weights - outer)))


def product(sigma: RelaxedControl, sigma_p: RelaxedControl) -> JointControl:
    """sigma x sigma_P, the independent product per step."""
    if sigma.n_steps != sigma_p.n_steps:
        raise ShapeMismatch(f"product of controls with {sigma.n_steps} and {sigma_p.n_steps} steps")
    return JointControl(weights=np.einsum("tu,tv->tuv", sigma.weights, sigma_p.weights), provenance="product")


def fiber_compose(sigma: RelaxedControl, pi: FiberPolicy) -> JointControl:
    """sigma (x) pi: slice[t, u, v] = sigma[t, u] * pi[t, u, v]."""
    if sigma.n_steps != pi.n_steps:
        raise ShapeMismatch(f"fiber composition of {sigma.n_steps} and {pi.n_steps} steps")
    if not np.array_equal(sigma.grid.points, pi.u_grid.points):
        raise ShapeMismatch("fiber policy is defined on a different player-1 grid")
    return JointControl(weights=sigma.weights[:, :, None] * pi.weights, provenance="fiber")


def compose(sigma: RelaxedControl, adversary: Union[FiberPolicy, RelaxedControl]) -> JointControl:
    """fiber_compose for fiber policies, product for relaxed adversary controls."""
    if isinstance(adversary, FiberPolicy):
        return fiber_compose(sigma, adversary)
    return product(sigma, adversary)


# Dense family


class DenseAtom(BaseModel):
    """A constant grid control on a rational interval of normalized time [0, 1]."""

    u_index: int = Field(ge=0, description="Player-1 grid index")
    start: str = Field(description="Rational interval start, e.g. '1/4'")
    end: str = Field(description="Rational interval end, e.g. '1/2'")

    @field_validator("start", "end")
    @classmethod
    def _rational(cls, value: str) -> str:
        fraction = Fraction(value)
        if not 0 <= fraction <= 1:
            raise ValueError(f"interval endpoint {value} outside [0, 1]")
        return str(fraction)

    @property
    def interval(self) -> Tuple[Fraction, Fraction]:
        return Fraction(self.start), Fraction(self.end)


def _step_fractions(n_steps: int) -> List[Fraction]:
    return [Fraction(2 * k + 1, 2 * n_steps) for k in range(n_steps)]


def dense_member(base: RelaxedControl, atom: DenseAtom) -> RelaxedControl:
    """base outside the atom interval, Dirac at the atom's control inside it (where admissible)."""
    start, end = atom.interval
    weights = base.weights.copy()
    mask = base.grid.admissible_mask
    for k, midpoint in enumerate(_step_fractions(base.n_steps)):
        if start <= midpoint <= end and mask[k, atom.u_index]:
            weights[k] = 0.0
            weights[k, atom.u_index] = 1.0
    return RelaxedControl(weights=weights, grid=base.grid)


class DenseFamily(BaseModel):
    """sigma_0 = base followed by one member per atom."""

    model_config = ConfigDict(frozen=True)

    base: RelaxedControl
    atoms: List[DenseAtom]
    members: List[RelaxedControl]
    seed: int

    @model_validator(mode="after")
    def _check_members(self) -> "DenseFamily":
        if len(self.members) != len(self.atoms) + 1:
            raise ValueError("a dense family has exactly one member per atom plus the base")
        if not np.array_equal(self.members[0].weights, self.base.weights):
            raise ValueError("the first member of a dense family must equal its base")
        return self


def build_dense_family(base: RelaxedControl, n_atoms: int, seed: int = 0) -> DenseFamily:
    """Seeded enumeration of (constant control, rational interval) atoms.

    The first atoms cover the whole interval once per grid point; the rest are
    dyadic intervals, which are pairwise nested or disjoint.

    Args:
        base: the reference control sigma_0
        n_atoms: number of atoms; 0 gives the family {base}
        seed: generator seed

    Returns:
        The DenseFamily with its members
    """
    if n_atoms < 0:
        raise ValueError("n_atoms must be non-negative")
    rng = np.random.default_rng(seed)
    n_u = base.grid.n_points
    atoms: List[DenseAtom] = []
    for a in range(n_atoms):
        if a < n_u:
            atoms.append(DenseAtom(u_index=a, start="0", end="1"))
            continue
        level = int(rng.integers(1, 7))
        slot = int(rng.integers(0, 2**level))
        atoms.append(
            DenseAtom(
                u_index=int(rng.integers(0, n_u)),
                start=str(Fraction(slot, 2**level)),
                end=str(Fraction(slot + 1, 2**level)),
            )
        )
    members = [base] + [dense_member(base, atom) for atom in atoms]
    return DenseFamily(base=base, atoms=atoms, members=members, seed=seed)


def policies_equivalent(pi: FiberPolicy, other: FiberPolicy, family: DenseFamily, tol: float = 1e-12) -> bool:
    """True when both policies compose to the same joint control with every family member."""
    for member in family.members:
        gap = np.max(np.abs(fiber_compose(member, pi).weights - fiber_compose(member, other).weights))
        if gap > tol:
            return False
    return True


class BaseMeasure(BaseModel):
    """zeta: the measure dt * sigma(t)(du) on time x U."""

    model_config = ConfigDict(frozen=True)

    reference: RelaxedControl
    dt: float = Field(gt=0)
    density: FloatArray = Field(description="Mass per (step, u) cell")

    @model_validator(mode="after")
    def _check_mass(self) -> "BaseMeasure":
        horizon = self.dt * self.reference.n_steps
        if abs(float(self.density.sum()) - horizon) > 1e-10 * max(1.0, horizon):
            raise ValueError("base measure mass must equal the horizon length")
        return self

    @property
    def total_mass(self) -> float:
        return float(self.density.sum())


def base_measure(reference: RelaxedControl, dt: float) -> BaseMeasure:
    return BaseMeasure(reference=reference, dt=dt, density=dt * reference.weights)


def time_fractions(n_steps: int, horizon: Optional[Tuple[float, float]] = None) -> np.ndarray:
    """Step midpoints as floats, in normalized time or on a horizon."""
    fractions = (np.arange(n_steps) + 0.5) / n_steps
    if horizon is None:
        return fractions
    return horizon[0] + fractions * (horizon[1] - horizon[0])
