"""Problem corpus with closed-form values and a brute-force oracle for toy problems."""
import itertools
import json
import math
from typing import Any, Dict, List, Optional

import numpy as np

from ..problem import EXAMPLE_PATH, ProblemSpec

# Bundled minimax example: alpha' = 0, y' = |y| u v, minimize alpha s.t. y(1) <= alpha for every adversary
abs_bilinear_game: Dict[str, Any] = json.loads(EXAMPLE_PATH.read_text())

# Nonsmooth decay with a full-information adversary; psi > 1 exercises time normalization
kinked_decay: Dict[str, Any] = {
    "name": "kinked_decay",
    "horizon": [0.0, 1.0],
    "player_dim": 1,
    "adversary_dim": 1,
    "dynamics": {"name": "abs_bilinear", "params": {"coordinate": 0, "gain": -1.0, "factor": "none", "u_coef": 1.0}},
    "adversary_dynamics": {"name": "abs_bilinear", "params": {"coordinate": 0, "factor": "v"}},
    "cost": {"name": "abs", "params": {"index": 0, "shift": 0.5}},
    "constraint": {"name": "linear", "params": {"weights": [[0.0, 1.0]], "offset": -5.0}},
    "u_controls": {"points": [-1.0, 0.0, 1.0]},
    "v_controls": {"points": [-1.0, 1.0]},
    "initial_box": {"lower": [1.0], "upper": [1.0]},
    "adversary_initial_box": {"lower": [0.0], "upper": [0.0]},
    "state_box": {"lower": [-3.0, -6.0], "upper": [3.0, 6.0]},
    "psi": {"name": "constant", "params": {"value": 1.5}},
    "chi": {"name": "constant", "params": {"value": 5.0}},
}

# Smooth drift with a kinked cost and a forbidden control window early on
sine_kink: Dict[str, Any] = {
    "name": "sine_kink",
    "horizon": [0.0, 1.0],
    "player_dim": 1,
    "adversary_dim": 1,
    "dynamics": {"name": "sine", "params": {"coordinate": 0, "amplitude": 0.5, "u_coef": 0.5}},
    "adversary_dynamics": {"name": "abs_bilinear", "params": {"coordinate": 0, "gain": 0.5, "factor": "v"}},
    "cost": {"name": "abs", "params": {"index": 0, "shift": 0.3}},
    "constraint": {"name": "linear", "params": {"weights": [[1.0, 1.0]], "offset": -3.0}},
    "u_controls": {"points": [-1.0, 1.0], "forbidden": [{"index": 1, "start": 0.0, "end": 0.25}]},
    "v_controls": {"points": [-1.0, 0.0, 1.0]},
    "initial_box": {"lower": [0.5], "upper": [0.5]},
    "adversary_initial_box": {"lower": [0.0], "upper": [0.0]},
    "state_box": {"lower": [-3.0, -3.0], "upper": [3.0, 3.0]},
    "psi": {"name": "constant", "params": {"value": 1.0}},
    "chi": {"name": "constant", "params": {"value": 2.0}},
}

# Linear dynamics, inactive constraint: Z and Z^ are matrix exponentials
smooth_linear: Dict[str, Any] = {
    "name": "smooth_linear",
    "horizon": [0.0, 1.0],
    "player_dim": 1,
    "adversary_dim": 1,
    "dynamics": {"name": "linear", "params": {"matrix": [[-0.5]], "u_coef": [1.0]}},
    "adversary_dynamics": {"name": "linear", "params": {"matrix": [[0.5, 0.0]], "v_coef": [1.0]}},
    "cost": {"name": "coordinate", "params": {"index": 0}},
    "constraint": {"name": "constant", "params": {"value": -1.0}},
    "u_controls": {"points": [-1.0, 0.0, 1.0]},
    "v_controls": {"points": [-1.0, 1.0]},
    "initial_box": {"lower": [1.0], "upper": [1.0]},
    "adversary_initial_box": {"lower": [0.0], "upper": [0.0]},
    "state_box": {"lower": [-3.0, -3.0], "upper": [3.0, 3.0]},
    "psi": {"name": "constant", "params": {"value": 1.0}},
    "chi": {"name": "constant", "params": {"value": 4.0}},
}

# Joint-state drift matrices of smooth_linear, for the matrix-exponential oracle
SMOOTH_LINEAR_PLAYER_MATRIX = np.array([[-0.5]])
SMOOTH_LINEAR_JOINT_MATRIX = np.array([[-0.5, 0.0], [0.5, 0.0]])

problem_files = [abs_bilinear_game, kinked_decay, sine_kink, smooth_linear]

problem_names = [problem["name"] for problem in problem_files]

# Nonsmooth problems for the proximity bounds
nonsmooth_problems = [abs_bilinear_game, kinked_decay, sine_kink]

# Closed-form optimal values where known
expected_values: List[Optional[float]] = [
    math.e,  # abs_bilinear_game: the copy policy v = u gives y' = |y|, y(1) = e
    None,  # kinked_decay
    None,  # sine_kink
    3.0 * math.exp(-0.5) - 2.0,  # smooth_linear: u = -1 throughout
]


def toy_problem(seed: int) -> Dict[str, Any]:
    """Seeded linear toy with an inactive constraint: at most 3 U-points, at most 2 V-points.

    The state is (x, c) with x' = a x + b u and c' = q u^2; the cost is w x + c.
    y(t1) is affine in each step's control row, so a Dirac control is optimal.
    """
    rng = np.random.default_rng(seed)
    a, b = rng.uniform(-0.5, 0.5), rng.uniform(0.5, 1.5)
    q, w = rng.uniform(0.1, 1.0), rng.uniform(-1.0, 1.0)
    u_points = sorted(rng.choice([-1.0, -0.5, 0.0, 0.5, 1.0], size=int(rng.integers(2, 4)), replace=False).tolist())
    v_points = [0.0, 1.0] if rng.random() < 0.5 else [0.0]
    return {
        "name": f"toy_{seed}",
        "horizon": [0.0, 1.0],
        "player_dim": 2,
        "adversary_dim": 1,
        "dynamics": {
            "name": "linear",
            "params": {"matrix": [[a, 0.0], [0.0, 0.0]], "u_coef": [b, 0.0], "u2_coef": [0.0, q]},
        },
        "adversary_dynamics": {"name": "linear", "params": {"matrix": [[0.0, 0.0, 0.0]], "v_coef": [1.0]}},
        "cost": {"name": "linear", "params": {"weights": [[w, 1.0]]}},
        "constraint": {"name": "constant", "params": {"value": -1.0}},
        "u_controls": {"points": u_points},
        "v_controls": {"points": v_points},
        "initial_box": {"lower": [1.0, 0.0], "upper": [1.0, 0.0]},
        "adversary_initial_box": {"lower": [0.0], "upper": [0.0]},
        "state_box": {"lower": [-4.0, -2.0, -2.0], "upper": [4.0, 2.0, 2.0]},
        "psi": {"name": "constant", "params": {"value": 1.0}},
        "chi": {"name": "constant", "params": {"value": 6.0}},
    }


toy_seeds = list(range(10))


def brute_force_value(spec: ProblemSpec, n_steps: int) -> float:
    """min of h0(y(t1)) over every admissible Dirac control sequence, by batched RK4.

    Args:
        spec: a problem with few control points
        n_steps: uniform steps (the enumeration has |U|^n_steps members)

    Returns:
        The smallest endpoint cost
    """
    u_grid, _ = spec.grids(n_steps)
    choices = [np.flatnonzero(u_grid.admissible_mask[k]) for k in range(n_steps)]
    sequences = np.array(list(itertools.product(*choices)), dtype=int)
    times = spec.times(n_steps)
    y = np.repeat(spec.b_bar[None, :], sequences.shape[0], axis=0)
    for k in range(n_steps):
        t, h = times[k], times[k + 1] - times[k]
        u = u_grid.points[sequences[:, k]]
        k1 = spec.f.eval(t, y, u)
        k2 = spec.f.eval(t + h / 2, y + h / 2 * k1, u)
        k3 = spec.f.eval(t + h / 2, y + h / 2 * k2, u)
        k4 = spec.f.eval(t + h, y + h * k3, u)
        y = y + h / 6 * (k1 + 2 * k2 + 2 * k3 + k4)
    return float(np.min(spec.h0.eval(y)[:, 0]))
