"""
Tests for the Fredholm approximations: mollifier quadrature, the 1/j
proximity bound, gradients and the relaxed-derivative sweep.
"""
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import integrate

from adverse_control.errors import DomainError
from adverse_control.mollify import (
    LipschitzField,
    build_mollifier,
    fredholm_approx,
    fredholm_grad,
    fredholm_value,
    kernel_value,
    quadrature_tolerance,
    relaxed_derivative,
)
from adverse_control.schemas import Box


def _field(name, fn, lipschitz, dim_state, dim_out=1, domain=None):
    return LipschitzField(
        name=name, fn=fn, lipschitz_const=lipschitz, bound=10.0, dim_state=dim_state, dim_out=dim_out, domain=domain
    )


abs_1d = _field("abs", lambda t, x, u, v: np.abs(x[..., :1]), 1.0, 1)
sine_1d = _field("sine", lambda t, x, u, v: 0.5 * np.sin(x[..., :1]) + 0.5 * np.asarray(u)[..., None], 0.5, 1)
kinked_2d = _field("abs_bilinear", lambda t, x, u, v: (np.abs(x[..., 1]) * u * v)[..., None], 1.0, 2)
linear_2d = _field(
    "linear", lambda t, x, u, v: x @ np.array([[1.0, -2.0], [0.5, 0.0]]).T + np.asarray(v)[..., None], 2.25, 2, 2
)
hinge_3d = _field("hinge", lambda t, x, u, v: np.maximum(x[..., 2:3], 0.0), 1.0, 3)

fields = [abs_1d, sine_1d, kinked_2d, linear_2d, hinge_3d]
field_names = [field.name for field in fields]


@pytest.mark.parametrize("dim", [1, 2, 3])
def test_mollifier_mass(dim):
    """The kernel quadrature is close to 1 and the lattice spans the ball."""
    mollifier = build_mollifier(dim, 16)

    assert mollifier.lattice_offsets.shape == (16**dim, dim)
    assert mollifier.lattice_offsets.min() == -7 and mollifier.lattice_offsets.max() == 8
    assert abs(mollifier.kernel_mass - 1.0) < 5e-3
    assert np.all(np.linalg.norm(mollifier.nodes, axis=1) < 1.0)


def test_unsupported_dimension():
    with pytest.raises(DomainError):
        quadrature_tolerance(4)
    with pytest.raises(DomainError):
        build_mollifier(4)


@pytest.mark.parametrize("field", fields, ids=field_names)
@pytest.mark.parametrize("j", [2, 5, 10, 50])
def test_proximity_bound(field, j):
    """|phi^j - phi| <= L/j at random points and controls."""
    rng = np.random.default_rng(j)
    x = rng.uniform(-2.0, 2.0, (20, field.dim_state))
    u, v = rng.choice([-1.0, 1.0], 20), rng.choice([-1.0, 0.0, 1.0], 20)
    fa = fredholm_approx(field, j)

    gap = np.linalg.norm(fredholm_value(fa, 0.3, x, u, v) - field.eval(0.3, x, u, v), axis=-1)

    assert np.all(gap <= field.lipschitz_const / j + 1e-6)


@pytest.mark.parametrize("field", [abs_1d, sine_1d, kinked_2d, linear_2d], ids=field_names[:4])
def test_gradient_bound(field):
    """The mollified Jacobian stays within the Lipschitz constant up to the lattice rule."""
    rng = np.random.default_rng(1)
    x = rng.uniform(-1.0, 1.0, (50, field.dim_state))
    fa = fredholm_approx(field, 10)

    jac = fredholm_grad(fa, 0.0, x, 1.0, 1.0)

    assert jac.shape == (50, field.dim_out, field.dim_state)
    assert np.all(np.linalg.norm(jac, ord=2, axis=(1, 2)) <= field.lipschitz_const * (1 + 1e-2))


def test_linear_field_reproduced():
    """Affine fields are fixed points of the approximation, value and Jacobian."""
    x = np.array([[0.3, -1.2], [2.0, 0.5]])
    fa = fredholm_approx(linear_2d, 7)

    assert fa.eval(0.0, x, 0.0, 1.0) == pytest.approx(linear_2d.eval(0.0, x, 0.0, 1.0), abs=1e-12)
    expected = np.broadcast_to([[1.0, -2.0], [0.5, 0.0]], (2, 2, 2))
    assert fa.jacobian(0.0, x, 0.0, 1.0) == pytest.approx(expected, abs=1e-10)


@settings(max_examples=50, deadline=None)
@given(
    x=st.floats(min_value=-2.0, max_value=2.0, allow_nan=False),
    j=st.integers(min_value=1, max_value=100),
)
def test_abs_within_radius(x, j):
    value = fredholm_approx(abs_1d, j, 8).eval(0.0, np.array([x]))[0]

    assert abs(value - abs(x)) <= 1.0 / j + 1e-12
    assert value >= abs(x) - 1e-12


def test_ball_leaving_domain():
    bounded = _field("abs", abs_1d.fn, 1.0, 1, domain=Box(lower=[0.0], upper=[1.0]))
    fa = fredholm_approx(bounded, 10)

    assert fa.eval(0.0, np.array([0.5]))[0] == pytest.approx(0.5, abs=1e-12)
    with pytest.raises(DomainError):
        fa.eval(0.0, np.array([0.05]))


def test_relaxed_derivative_smooth():
    """Integrated mollified derivatives of sin along t converge to sin(1)."""
    sine = _field("sin", lambda t, x, u, v: np.sin(x[..., :1]), 1.0, 1)
    sweep = relaxed_derivative([fredholm_approx(sine, j) for j in (5, 10, 20, 40)], lambda t: np.array([t]))

    assert sweep.j_values == [5, 10, 20, 40]
    assert sweep.values.shape == (4, 1, 1)
    assert sweep.limit[0, 0] == pytest.approx(math.sin(1.0), abs=1e-2)
    assert not sweep.non_convergent


def test_relaxed_derivative_kink():
    """Along a path crossing the kink symmetrically the sign contributions cancel."""
    sweep = relaxed_derivative([fredholm_approx(abs_1d, j) for j in (20, 5, 10)], lambda t: np.array([t - 0.5]))

    assert sweep.j_values == [5, 10, 20]
    assert np.all(np.abs(sweep.values) < 1e-9)


def test_relaxed_derivative_needs_input():
    with pytest.raises(ValueError):
        relaxed_derivative([], lambda t: np.array([t]))


def _bump_1d(s):
    return math.exp(-1.0 / (1.0 - s * s)) if abs(s) < 1.0 else 0.0


def test_kernel_value():
    """In one dimension rho(0) = e^-1 over the integral of the bump on (-1, 1)."""
    mass, _ = integrate.quad(_bump_1d, -1.0, 1.0, epsabs=1e-14, epsrel=1e-12)

    assert kernel_value(np.zeros(1), build_mollifier(1, 8)) == pytest.approx(math.exp(-1.0) / mass, rel=1e-9)
    assert kernel_value(np.array([0.5]), build_mollifier(1, 8)) == pytest.approx(_bump_1d(0.5) / mass, rel=1e-9)

    mollifier = build_mollifier(2, 8)
    assert kernel_value(np.array([0.6, 0.8]), mollifier) == 0.0
    assert kernel_value(np.array([[0.1, 0.0], [2.0, 0.0]]), mollifier)[1] == 0.0


@pytest.mark.parametrize("field", fields, ids=field_names)
@pytest.mark.parametrize("j", [2, 5])
def test_gradient_matches_finite_differences(field, j):
    """The Jacobian is the derivative of the value, kinks included."""
    rng = np.random.default_rng(7)
    x = rng.uniform(-2.0, 2.0, (100, field.dim_state))
    fa = fredholm_approx(field, j)
    h = 1e-4

    jac = fredholm_grad(fa, 0.0, x, 1.0, -1.0)
    for i in range(field.dim_state):
        step = h * np.eye(field.dim_state)[i]
        central = (fredholm_value(fa, 0.0, x + step, 1.0, -1.0) - fredholm_value(fa, 0.0, x - step, 1.0, -1.0)) / (2 * h)
        tol = max(10 * quadrature_tolerance(field.dim_state), h**2 * 50 * field.lipschitz_const * j**2)
        assert np.max(np.abs(jac[..., i] - central)) <= tol


def test_abs_at_kink_is_first_moment():
    """phi^j(0) for |x| is the first absolute moment of the kernel scaled by 1/j."""
    mass, _ = integrate.quad(_bump_1d, -1.0, 1.0, epsabs=1e-14, epsrel=1e-12)
    moment, _ = integrate.quad(lambda s: abs(s) * _bump_1d(s), -1.0, 1.0, points=[0.0], epsabs=1e-14, epsrel=1e-12)

    for j in (2, 10, 40):
        value = fredholm_value(fredholm_approx(abs_1d, j, 32), 0.0, np.zeros(1))[0]
        # the kink sits on a lattice node, so the rule is second order there
        assert value == pytest.approx(moment / mass / j, rel=1e-2)


def test_relaxed_derivative_identity_path():
    """Along eta(t) = t the derivative of |x| integrates to 1 in the limit."""
    sweep = relaxed_derivative([fredholm_approx(abs_1d, j) for j in (5, 10, 20, 40)], lambda t: np.array([t]))

    for j, value in zip(sweep.j_values, sweep.values[:, 0, 0]):
        assert 1.0 - 1.0 / j - 1e-6 <= value <= 1.0 + 1e-6
    assert sweep.limit[0, 0] == pytest.approx(1.0, abs=0.03)
