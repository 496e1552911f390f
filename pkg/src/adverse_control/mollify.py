"""Fredholm approximations of Lipschitz fields.

A field phi is smoothed in its state argument by convolution with the scaled
bump kernel rho^j(x) = j^d rho(j x), rho = exp(-1/(1-|x|^2)) / normalization on
the open unit ball. Time and control arguments are never smoothed.
"""
import math
from functools import lru_cache
from typing import Any, Callable, List, NamedTuple, Optional, Sequence, Union

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, model_validator
from scipy import integrate
from scipy.special import gamma, roots_legendre

from .errors import DomainError
from .schemas import Box, FloatArray

MAX_DIM = 3
DEFAULT_ORDER = 16


def quadrature_tolerance(dim: int) -> float:
    """Declared quadrature tolerance for a state dimension."""
    if dim < 1 or dim > MAX_DIM:
        raise DomainError(f"Mollification supports state dimensions 1..{MAX_DIM}, got {dim}")
    return 1e-6 if dim <= 2 else 1e-4


class LipschitzField(BaseModel):
    """A field (t, x, u, v) -> R^k, Lipschitz in the state x.

    `fn` must broadcast: x has shape (..., d), t, u and v broadcast against
    x[..., 0], and the result has shape (..., k).
    """

    model_config = ConfigDict(frozen=True)

    name: str = Field(description="Registry name or label")
    fn: Callable[..., Any] = Field(exclude=True, description="Vectorized evaluator fn(t, x, u, v)")
    lipschitz_const: float = Field(ge=0, description="Lipschitz constant in the state variable")
    bound: float = Field(ge=0, description="Sup of |fn| on the working box")
    dim_state: int = Field(ge=1, description="State dimension d")
    dim_out: int = Field(ge=1, description="Output dimension k")
    domain: Optional[Box] = Field(default=None, description="Open state domain; None means all of R^d")

    def eval(self, t: Any, x: np.ndarray, u: Any = 0.0, v: Any = 0.0) -> np.ndarray:
        return np.asarray(self.fn(t, np.asarray(x, dtype=float), u, v), dtype=float)


class EndpointFunction(BaseModel):
    """An endpoint map x -> R^k with a declared Lipschitz constant."""

    model_config = ConfigDict(frozen=True)

    name: str = Field(description="Registry name or label")
    fn: Callable[..., Any] = Field(exclude=True, description="Vectorized evaluator fn(x), x of shape (..., d)")
    lipschitz_const: float = Field(ge=0, description="Lipschitz constant")
    dim_state: int = Field(ge=1, description="Argument dimension d")
    dim_out: int = Field(default=1, ge=1, description="Output dimension k")

    def eval(self, x: np.ndarray) -> np.ndarray:
        return np.asarray(self.fn(np.asarray(x, dtype=float)), dtype=float)

    def as_field(self) -> LipschitzField:
        """View as a time- and control-free field so it can be mollified."""
        fn = self.fn
        return LipschitzField(
            name=self.name,
            fn=lambda t, x, u, v: fn(x),
            lipschitz_const=self.lipschitz_const,
            bound=math.inf,
            dim_state=self.dim_state,
            dim_out=self.dim_out,
        )


def bump(x: np.ndarray) -> np.ndarray:
    """Unnormalized kernel exp(-1/(1-|x|^2)) inside the unit ball, 0 outside."""
    x = np.asarray(x, dtype=float)
    r2 = np.sum(x * x, axis=-1)
    inside = r2 < 1.0
    gap = np.where(inside, 1.0 - r2, 1.0)
    return np.where(inside, np.exp(-1.0 / gap), 0.0)


def bump_gradient(x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    r2 = np.sum(x * x, axis=-1, keepdims=True)
    inside = r2 < 1.0
    gap = np.where(inside, 1.0 - r2, 1.0)
    factor = np.where(inside, -2.0 * np.exp(-1.0 / gap) / gap**2, 0.0)
    return factor * x


def ball_integral(dim: int) -> float:
    """Accurate value of the integral of the unnormalized kernel over the unit ball."""
    sphere = 2.0 * math.pi ** (dim / 2.0) / gamma(dim / 2.0)
    radial, _ = integrate.quad(
        lambda r: r ** (dim - 1) * math.exp(-1.0 / (1.0 - r * r)) if r < 1.0 else 0.0,
        0.0,
        1.0,
        epsabs=1e-14,
        epsrel=1e-13,
        limit=200,
    )
    return float(sphere * radial)


class Mollifier(BaseModel):
    """Normalized bump kernel on the unit ball.

    The tensor Gauss-Legendre rule (`nodes`, `weights`) measures the kernel
    mass. Convolutions sample the field on a lattice fixed in state space with
    `lattice_steps` points per unit radius, so a sample point never moves with x.
    """

    model_config = ConfigDict(frozen=True)

    dim: int = Field(ge=1, le=MAX_DIM, description="State dimension n")
    order: int = Field(ge=2, description="Gauss-Legendre nodes per axis")
    normalization: float = Field(gt=0, description="Integral of the unnormalized kernel over the unit ball")
    quadrature_tol: float = Field(gt=0, description="Declared quadrature tolerance")
    nodes: FloatArray = Field(description="Quadrature points inside the unit ball, shape (Q, n)")
    weights: FloatArray = Field(description="Product Gauss-Legendre weights of the points, shape (Q,)")
    lattice_steps: int = Field(ge=2, description="Lattice points per unit radius")
    lattice_offsets: FloatArray = Field(description="Integer lattice offsets covering a radius-1 ball, shape (P, n)")

    @property
    def kernel_mass(self) -> float:
        """Quadrature of the normalized kernel over the ball (1 up to quadrature error)."""
        return float(np.sum(self.weights * bump(self.nodes)) / self.normalization)


@lru_cache(maxsize=None)
def build_mollifier(dim: int, order: int = DEFAULT_ORDER) -> Mollifier:
    """Build the mollifier for state dimension `dim`.

    Args:
        dim: state dimension, 1..3
        order: Gauss-Legendre nodes per axis on the bounding cube; the
            convolution lattice uses order // 2 points per radius

    Returns:
        The Mollifier with its kernel-mass rule and convolution lattice
    """
    tol = quadrature_tolerance(dim)
    roots, coeffs = roots_legendre(order)
    grid = np.array(np.meshgrid(*([roots] * dim), indexing="ij")).reshape(dim, -1).T
    products = np.prod(np.array(np.meshgrid(*([coeffs] * dim), indexing="ij")).reshape(dim, -1), axis=0)
    inside = np.sum(grid * grid, axis=1) < 1.0

    steps = max(order // 2, 2)
    # for x in lattice cell [b, b + 1), offsets b - steps + 1 .. b + steps hold every point of the open ball
    axis = np.arange(-steps + 1, steps + 1, dtype=float)
    offsets = np.array(np.meshgrid(*([axis] * dim), indexing="ij")).reshape(dim, -1).T

    return Mollifier(
        dim=dim,
        order=order,
        normalization=ball_integral(dim),
        quadrature_tol=tol,
        nodes=grid[inside],
        weights=products[inside],
        lattice_steps=steps,
        lattice_offsets=offsets,
    )


def kernel_value(x: np.ndarray, mollifier: Mollifier) -> Union[float, np.ndarray]:
    """Normalized kernel rho(x); 0 outside the open unit ball."""
    values = bump(x) / mollifier.normalization
    return float(values) if np.ndim(values) == 0 else values


def _with_node_axis(control: Any) -> Any:
    control = np.asarray(control, dtype=float)
    return control[..., None] if control.ndim else control


class _LocalFit(NamedTuple):
    scaled: np.ndarray
    basis: np.ndarray
    samples: np.ndarray
    inverse: np.ndarray
    coef: np.ndarray


class FredholmApprox(BaseModel):
    """phi^j = phi * rho^j, the state convolution of a field with support radius 1/j."""

    model_config = ConfigDict(frozen=True)

    base: LipschitzField
    j: int = Field(ge=1, description="Mollification index")
    mollifier: Mollifier

    @model_validator(mode="after")
    def _check_dims(self) -> "FredholmApprox":
        if self.mollifier.dim != self.base.dim_state:
            raise DomainError(
                f"Mollifier dimension {self.mollifier.dim} does not match field state dimension {self.base.dim_state}"
            )
        return self

    @property
    def radius(self) -> float:
        return 1.0 / self.j

    @property
    def name(self) -> str:
        return f"{self.base.name}^{self.j}"

    @property
    def lipschitz_const(self) -> float:
        return self.base.lipschitz_const

    @property
    def bound(self) -> float:
        return self.base.bound

    @property
    def dim_state(self) -> int:
        return self.base.dim_state

    @property
    def dim_out(self) -> int:
        return self.base.dim_out

    def _check_domain(self, x: np.ndarray) -> None:
        domain = self.base.domain
        if domain is not None and not domain.contains(x, margin=self.radius):
            raise DomainError(f"The {self.radius:g}-ball around a point leaves the domain of {self.base.name}")

    def _fit(self, t: Any, x: np.ndarray, u: Any, v: Any) -> _LocalFit:
        """Kernel-weighted local linear fit of the field on the lattice around x.

        With p_i = (1, s_i), s_i = j (z_i - x) and w_i = bump(s_i), the value is
        the intercept of the weighted least-squares fit. Affine fields are
        reproduced exactly and x enters only through s_i and w_i.
        """
        mollifier = self.mollifier
        spacing = self.radius / mollifier.lattice_steps
        cell = np.floor(x / spacing)
        points = (cell[..., None, :] + mollifier.lattice_offsets) * spacing
        scaled = self.j * (points - x[..., None, :])
        kernel = bump(scaled)

        samples = self.base.eval(_with_node_axis(t), points, _with_node_axis(u), _with_node_axis(v))
        samples = np.where(kernel[..., None] > 0, samples, 0.0)
        basis = np.concatenate([np.ones_like(scaled[..., :1]), scaled], axis=-1)
        moments = np.einsum("...p,...pa,...pb->...ab", kernel, basis, basis)
        inverse = np.linalg.inv(moments)
        coef = inverse @ np.einsum("...p,...pa,...pk->...ak", kernel, basis, samples)
        return _LocalFit(scaled=scaled, basis=basis, samples=samples, inverse=inverse, coef=coef)

    def eval(self, t: float, x: np.ndarray, u: Any = 0.0, v: Any = 0.0) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        self._check_domain(x)
        return self._fit(t, x, u, v).coef[..., 0, :]

    def jacobian(self, t: float, x: np.ndarray, u: Any = 0.0, v: Any = 0.0) -> np.ndarray:
        """State Jacobian, shape (..., k, d): the exact derivative of `eval`.

        d/dx_m = j coef_{m+1} + sum_i dw_i/dx_m (theta . p_i) r_i, with theta the
        first column of the inverse moment matrix and r_i the fit residuals.
        Only the kernel is differentiated, never the field.
        """
        x = np.asarray(x, dtype=float)
        self._check_domain(x)
        fit = self._fit(t, x, u, v)
        kernel_grad = -self.j * bump_gradient(fit.scaled)
        lever = np.einsum("...pa,...a->...p", fit.basis, fit.inverse[..., :, 0])
        residuals = fit.samples - np.einsum("...pa,...ak->...pk", fit.basis, fit.coef)
        correction = np.einsum("...pd,...p,...pk->...kd", kernel_grad, lever, residuals)
        return self.j * np.swapaxes(fit.coef[..., 1:, :], -1, -2) + correction


def fredholm_approx(base: LipschitzField, j: int, order: int = DEFAULT_ORDER) -> FredholmApprox:
    return FredholmApprox(base=base, j=j, mollifier=build_mollifier(base.dim_state, order))


def fredholm_value(fa: FredholmApprox, t: float, x: np.ndarray, u: Any = 0.0, v: Any = 0.0) -> np.ndarray:
    """phi^j(t, x, u, v). Raises DomainError if the 1/j ball leaves the domain."""
    return fa.eval(t, x, u, v)


def fredholm_grad(fa: FredholmApprox, t: float, x: np.ndarray, u: Any = 0.0, v: Any = 0.0) -> np.ndarray:
    """d/dx phi^j(t, x, u, v) as a k x d matrix (leading axes broadcast)."""
    return fa.jacobian(t, x, u, v)


class RelaxedDerivative(BaseModel):
    """Integrals of mollified Jacobians along a path, one per j, with Cauchy diagnostics."""

    j_values: List[int]
    values: FloatArray = Field(description="Phi^j for each j, shape (n_j, k, d)")
    increments: List[float] = Field(description="|Phi^{j_{i+1}} - Phi^{j_i}|")
    non_convergent: bool = Field(description="True when the increments fail to decrease")

    @property
    def limit(self) -> np.ndarray:
        return self.values[-1]


def relaxed_derivative(
    approximations: Sequence[FredholmApprox],
    eta: Union[Callable[[float], np.ndarray], np.ndarray],
    t_span: Sequence[float] = (0.0, 1.0),
    n_time: int = 2001,
    u: Any = 0.0,
    v: Any = 0.0,
    tol: float = 1e-9,
) -> RelaxedDerivative:
    """Phi^j = integral over t of d/dx phi^j(t, eta(t)) for each approximation.

    Args:
        approximations: Fredholm approximations of one field at several j
        eta: path as a callable t -> x, or sampled nodes of shape (n_time, d)
        t_span: (t0, t1)
        n_time: uniform time nodes for the trapezoid rule when eta is callable
        u, v: fixed control values
        tol: slack on the non-increasing increment test

    Returns:
        RelaxedDerivative with the sequence, its increments and a non-convergence flag
    """
    if not approximations:
        raise ValueError("relaxed_derivative needs at least one approximation")
    ordered = sorted(approximations, key=lambda fa: fa.j)
    if callable(eta):
        times = np.linspace(t_span[0], t_span[1], n_time)
        path = np.array([np.atleast_1d(eta(t)) for t in times], dtype=float)
    else:
        path = np.asarray(eta, dtype=float)
        times = np.linspace(t_span[0], t_span[1], path.shape[0])

    values = []
    for fa in ordered:
        grads = np.array([fa.jacobian(t, point, u, v) for t, point in zip(times, path)])
        values.append(integrate.trapezoid(grads, times, axis=0))
    values = np.array(values)

    increments = [float(np.max(np.abs(b - a))) for a, b in zip(values, values[1:])]
    non_convergent = any(later > earlier + tol for earlier, later in zip(increments, increments[1:]))
    return RelaxedDerivative(
        j_values=[fa.j for fa in ordered],
        values=values,
        increments=increments,
        non_convergent=non_convergent,
    )
