"""Flow-matching targets and the Euler sampler/inverter for the toy CNF.

The probability path is the straight interpolation x_t = (1-t) x0 + t x1
with constant conditional velocity x1 - x0; the prior sits at t = 0 and the
data at t = 1.  Sampling integrates the learned field forward with Euler
steps; inversion runs the same recursion with the grid reversed and the
step negated.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .diffusion import Trajectory, guided_predict
from .network import require_objective


@dataclass(frozen=True)
class FlowGrid:
    """Uniform time grid 0 = t_0 < ... < t_N = 1."""

    n_steps: int

    def __post_init__(self):
        if self.n_steps < 1:
            raise ValueError("the grid needs at least one step")

    @property
    def h(self) -> float:
        return 1.0 / self.n_steps

    @property
    def times(self) -> np.ndarray:
        return np.linspace(0.0, 1.0, self.n_steps + 1)


def cfm_pair(x0, x1, t: float) -> tuple[np.ndarray, np.ndarray]:
    """Interpolant and target velocity: ((1-t) x0 + t x1, x1 - x0)."""
    if not 0.0 <= t <= 1.0:
        raise ValueError("t must lie in [0, 1]")
    x0 = np.asarray(x0, dtype=np.float64)
    x1 = np.asarray(x1, dtype=np.float64)
    return (1.0 - t) * x0 + t * x1, x1 - x0


def euler_sample(model, x_start, grid: FlowGrid, cond, w: float = 1.0
                 ) -> tuple[np.ndarray, Trajectory]:
    """Integrate the field from t=0 to t=1: x_{k+1} = x_k + h v(x_k, t_k)."""
    require_objective(model, "flow_matching")
    x = np.asarray(x_start, dtype=np.float64)
    times = grid.times
    states = [x]
    for k in range(grid.n_steps):
        v = guided_predict(model, x, times[k], cond, w)
        x = x + grid.h * v
        states.append(x)
    return x, Trajectory(np.stack(states), times)


def euler_invert(model, x_end, grid: FlowGrid, cond, w: float = 1.0
                 ) -> tuple[np.ndarray, Trajectory]:
    """Reverse-time Euler from t=1 to t=0: x_{k-1} = x_k - h v(x_k, t_k)."""
    require_objective(model, "flow_matching")
    x = np.asarray(x_end, dtype=np.float64)
    times = grid.times
    states = [x]
    for k in range(grid.n_steps, 0, -1):
        v = guided_predict(model, x, times[k], cond, w)
        x = x - grid.h * v
        states.append(x)
    return x, Trajectory(np.stack(states), times[::-1].copy())
