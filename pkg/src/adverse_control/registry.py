"""Named dynamics, endpoint functions and bound profiles.

Problem files reference these builders by name; each builder turns numeric
parameters into a LipschitzField, EndpointFunction or BoundProfile with its
declared constants.
"""
import math
from typing import Any, Callable, Dict, List, Optional, Sequence

import numpy as np
from pydantic import BaseModel, ConfigDict, Field

from .errors import ProblemParseError, UnknownRegistryName
from .mollify import EndpointFunction, LipschitzField
from .problem import BoundProfile
from .schemas import Box, FloatArray, FunctionRef


class FieldContext(BaseModel):
    """Dimensions, working box and control grids a dynamics builder needs for its constants."""

    model_config = ConfigDict(frozen=True)

    dim_state: int = Field(ge=1, description="Argument dimension of the field")
    dim_out: int = Field(ge=1, description="Output dimension of the field")
    state_box: Box = Field(description="Working box for the field argument")
    u_points: FloatArray = Field(description="Player-1 control values")
    v_points: FloatArray = Field(description="Adversary control values")

    @property
    def u_max(self) -> float:
        return float(np.max(np.abs(self.u_points)))

    @property
    def v_max(self) -> float:
        return float(np.max(np.abs(self.v_points)))

    def abs_reach(self, coordinate: int, shift: float = 0.0) -> float:
        """max |x_c - shift| over the working box."""
        lower, upper = self.state_box.lower[coordinate], self.state_box.upper[coordinate]
        return float(max(abs(lower - shift), abs(upper - shift)))


def _lead_shape(t: Any, x: np.ndarray, u: Any, v: Any) -> tuple:
    return np.broadcast_shapes(np.shape(t), x.shape[:-1], np.shape(u), np.shape(v))


def _spread(values: Any, t: Any, x: np.ndarray, u: Any, v: Any, dim_out: int) -> np.ndarray:
    """Copy a scalar-per-point value onto every output coordinate."""
    lead = _lead_shape(t, x, u, v)
    return np.broadcast_to(np.broadcast_to(values, lead)[..., None], lead + (dim_out,))


def _coordinate(context_dim: int, coordinate: Optional[int]) -> int:
    index = context_dim - 1 if coordinate is None else int(coordinate)
    if not 0 <= index < context_dim:
        raise ValueError(f"coordinate {index} outside 0..{context_dim - 1}")
    return index


# Dynamics


def zero_dynamics(context: FieldContext) -> LipschitzField:
    k = context.dim_out
    return LipschitzField(
        name="zero",
        fn=lambda t, x, u, v: np.zeros(_lead_shape(t, x, u, v) + (k,)),
        lipschitz_const=0.0,
        bound=0.0,
        dim_state=context.dim_state,
        dim_out=k,
    )


def abs_bilinear_dynamics(
    context: FieldContext,
    coordinate: Optional[int] = None,
    gain: float = 1.0,
    shift: float = 0.0,
    factor: str = "uv",
    u_coef: float = 0.0,
    v_coef: float = 0.0,
) -> LipschitzField:
    """gain * |x_c - shift| * (u v | u | v | 1) + u_coef * u + v_coef * v on every output.

    With the defaults on a joint (alpha, y) state this is y' = |y| u v.
    """
    c = _coordinate(context.dim_state, coordinate)
    k = context.dim_out
    if factor not in ("uv", "u", "v", "none"):
        raise ValueError(f"factor must be one of uv, u, v, none, got {factor!r}")
    reach_u = context.u_max if "u" in factor else 1.0
    reach_v = context.v_max if "v" in factor else 1.0

    def fn(t, x, u, v):
        u_arr, v_arr = np.asarray(u, dtype=float), np.asarray(v, dtype=float)
        scale = {"uv": u_arr * v_arr, "u": u_arr, "v": v_arr, "none": 1.0}[factor]
        values = gain * np.abs(x[..., c] - shift) * scale + u_coef * u_arr + v_coef * v_arr
        return _spread(values, t, x, u, v, k)

    lipschitz = abs(gain) * reach_u * reach_v * math.sqrt(k)
    bound = (
        abs(gain) * context.abs_reach(c, shift) * reach_u * reach_v
        + abs(u_coef) * context.u_max
        + abs(v_coef) * context.v_max
    ) * math.sqrt(k)
    return LipschitzField(
        name="abs_bilinear", fn=fn, lipschitz_const=lipschitz, bound=bound, dim_state=context.dim_state, dim_out=k
    )


def linear_dynamics(
    context: FieldContext,
    matrix: Optional[Sequence] = None,
    offset: Optional[Sequence] = None,
    u_coef: Optional[Sequence] = None,
    v_coef: Optional[Sequence] = None,
    u2_coef: Optional[Sequence] = None,
) -> LipschitzField:
    """A x + offset + u_coef u + v_coef v + u2_coef u^2."""
    d, k = context.dim_state, context.dim_out

    def vector(values: Optional[Sequence]) -> np.ndarray:
        return np.zeros(k) if values is None else np.broadcast_to(np.asarray(values, dtype=float), (k,)).copy()

    a = np.zeros((k, d)) if matrix is None else np.asarray(matrix, dtype=float).reshape(k, d)
    b0, bu, bv, bu2 = vector(offset), vector(u_coef), vector(v_coef), vector(u2_coef)

    def fn(t, x, u, v):
        u_arr = np.asarray(u, dtype=float)[..., None]
        v_arr = np.asarray(v, dtype=float)[..., None]
        values = x @ a.T + b0 + u_arr * bu + v_arr * bv + u_arr**2 * bu2
        return np.broadcast_to(values, _lead_shape(t, x, u, v) + (k,))

    vertices = context.state_box.vertices()[:, None, None, :]
    corners = fn(0.0, vertices, context.u_points[None, :, None], context.v_points[None, None, :])
    return LipschitzField(
        name="linear",
        fn=fn,
        lipschitz_const=float(np.linalg.norm(a, 2)),
        bound=float(np.max(np.linalg.norm(corners, axis=-1))),
        dim_state=d,
        dim_out=k,
    )


def sine_dynamics(
    context: FieldContext, coordinate: int = 0, amplitude: float = 1.0, u_coef: float = 0.0
) -> LipschitzField:
    """amplitude * sin(x_c) + u_coef * u on every output."""
    c = _coordinate(context.dim_state, coordinate)
    k = context.dim_out

    def fn(t, x, u, v):
        return _spread(amplitude * np.sin(x[..., c]) + u_coef * np.asarray(u, dtype=float), t, x, u, v, k)

    return LipschitzField(
        name="sine",
        fn=fn,
        lipschitz_const=abs(amplitude) * math.sqrt(k),
        bound=(abs(amplitude) + abs(u_coef) * context.u_max) * math.sqrt(k),
        dim_state=context.dim_state,
        dim_out=k,
    )


DYNAMICS: Dict[str, Callable[..., LipschitzField]] = {
    "zero": zero_dynamics,
    "abs_bilinear": abs_bilinear_dynamics,
    "linear": linear_dynamics,
    "sine": sine_dynamics,
}


# Endpoint functions


def coordinate_endpoint(dim_state: int, index: int = 0, scale: float = 1.0) -> EndpointFunction:
    i = _coordinate(dim_state, index)
    return EndpointFunction(
        name="coordinate",
        fn=lambda x: scale * x[..., i : i + 1],
        lipschitz_const=abs(scale),
        dim_state=dim_state,
    )


def linear_endpoint(dim_state: int, weights: Sequence, offset: Any = 0.0) -> EndpointFunction:
    w = np.atleast_2d(np.asarray(weights, dtype=float))
    if w.shape[1] != dim_state:
        raise ValueError(f"linear endpoint weights need {dim_state} columns, got {w.shape[1]}")
    b = np.broadcast_to(np.asarray(offset, dtype=float), (w.shape[0],)).copy()
    return EndpointFunction(
        name="linear",
        fn=lambda x: x @ w.T + b,
        lipschitz_const=float(np.linalg.norm(w, 2)),
        dim_state=dim_state,
        dim_out=w.shape[0],
    )


def abs_endpoint(dim_state: int, index: int = 0, shift: float = 0.0, scale: float = 1.0) -> EndpointFunction:
    i = _coordinate(dim_state, index)
    return EndpointFunction(
        name="abs",
        fn=lambda x: scale * np.abs(x[..., i : i + 1] - shift),
        lipschitz_const=abs(scale),
        dim_state=dim_state,
    )


def difference_endpoint(
    dim_state: int, plus: Optional[int] = None, minus: int = 0, offset: float = 0.0
) -> EndpointFunction:
    """x_plus - x_minus + offset; with the defaults on (alpha, y) this is y - alpha."""
    p, q = _coordinate(dim_state, plus), _coordinate(dim_state, minus)
    if p == q:
        raise ValueError("difference endpoint needs two distinct coordinates")
    return EndpointFunction(
        name="difference",
        fn=lambda x: x[..., p : p + 1] - x[..., q : q + 1] + offset,
        lipschitz_const=math.sqrt(2.0),
        dim_state=dim_state,
    )


def constant_endpoint(dim_state: int, value: Any = 0.0) -> EndpointFunction:
    c = np.atleast_1d(np.asarray(value, dtype=float))
    return EndpointFunction(
        name="constant",
        fn=lambda x: np.broadcast_to(c, x.shape[:-1] + c.shape),
        lipschitz_const=0.0,
        dim_state=dim_state,
        dim_out=c.shape[0],
    )


ENDPOINTS: Dict[str, Callable[..., EndpointFunction]] = {
    "coordinate": coordinate_endpoint,
    "linear": linear_endpoint,
    "abs": abs_endpoint,
    "difference": difference_endpoint,
    "constant": constant_endpoint,
}


# Bound profiles


def constant_profile(horizon: Sequence[float], value: float = 1.0) -> BoundProfile:
    return BoundProfile(name="constant", fn=lambda t: np.full(np.shape(t), float(value)), sup=float(value))


def ramp_profile(horizon: Sequence[float], start: float = 1.0, end: float = 1.0) -> BoundProfile:
    """Linear profile from `start` at t0 to `end` at t1."""
    t0, t1 = float(horizon[0]), float(horizon[1])

    def fn(t):
        return start + (end - start) * (np.asarray(t, dtype=float) - t0) / (t1 - t0)

    return BoundProfile(name="ramp", fn=fn, sup=float(max(start, end)))


PROFILES: Dict[str, Callable[..., BoundProfile]] = {
    "constant": constant_profile,
    "ramp": ramp_profile,
}


_KINDS: Dict[str, Dict[str, Callable[..., Any]]] = {
    "dynamics": DYNAMICS,
    "endpoint": ENDPOINTS,
    "profile": PROFILES,
}


def get_builders(kind: str, names: Optional[List[str]] = None) -> List[Callable[..., Any]]:
    """Get specified builders of one kind, or all of them if names is None.

    Args:
        kind: "dynamics", "endpoint" or "profile"
        names: Optional list of registry names

    Returns:
        List of builder callables

    Raises:
        UnknownRegistryName: if the kind or one of the names is not registered
    """
    builders = get_builders_by_name(kind)
    if names is None:
        return list(builders.values())
    missing = [name for name in names if name not in builders]
    if missing:
        raise UnknownRegistryName(kind, missing[0])
    return [builders[name] for name in names]


def get_builders_by_name(kind: str) -> Dict[str, Callable[..., Any]]:
    """Get a dictionary of builders of one kind mapped by name."""
    if kind not in _KINDS:
        raise UnknownRegistryName("registry kind", kind)
    return dict(_KINDS[kind])


def _call(kind: str, ref: FunctionRef, *args: Any) -> Any:
    (builder,) = get_builders(kind, [ref.name])
    try:
        return builder(*args, **ref.params)
    except (TypeError, ValueError) as e:
        raise ProblemParseError(f"Bad parameters for {kind} {ref.name!r}: {e}") from e


def build_dynamics(ref: FunctionRef, context: FieldContext) -> LipschitzField:
    return _call("dynamics", ref, context)


def build_endpoint(ref: FunctionRef, dim_state: int) -> EndpointFunction:
    return _call("endpoint", ref, dim_state)


def build_profile(ref: FunctionRef, horizon: Sequence[float]) -> BoundProfile:
    return _call("profile", ref, horizon)
