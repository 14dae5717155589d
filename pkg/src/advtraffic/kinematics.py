"""Kinematic bicycle step with exact analytic Jacobians.

State order is [x, y, heading, speed]; action order is [throttle, steer].
Steering maps to a front-wheel angle, the slip angle follows from the axle
geometry, and speed is clamped at zero (no reverse driving). The update is a
single forward-Euler step so the Jacobians stay closed-form.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from advtraffic.backend import kernels
from advtraffic.scenario import Action, AgentState


@dataclass(frozen=True)
class BicycleParams:
    """Model constants; defaults are typical passenger-car values."""

    lf: float = 1.3
    lr: float = 1.3
    max_steer: float = 0.7
    max_accel: float = 4.0
    max_brake: float = 8.0
    dt: float = 0.25

    def __post_init__(self):
        if self.lf <= 0.0 or self.lr <= 0.0:
            raise ValueError("axle distances must be positive")
        if not 0.0 < self.max_steer < np.pi / 2:
            raise ValueError("max_steer must lie in (0, pi/2)")
        if self.max_accel <= 0.0 or self.max_brake <= 0.0:
            raise ValueError("acceleration limits must be positive")
        if self.dt <= 0.0:
            raise ValueError("dt must be positive")

    def with_dt(self, dt: float) -> "BicycleParams":
        if dt == self.dt:
            return self
        return BicycleParams(self.lf, self.lr, self.max_steer,
                             self.max_accel, self.max_brake, dt)


@dataclass(frozen=True)
class StepJacobians:
    """Exact derivatives of one step wrt state (4x4) and action (4x2)."""

    d_next_d_state: np.ndarray
    d_next_d_action: np.ndarray


def step_array(states: np.ndarray, actions: np.ndarray, params: BicycleParams,
               jacobians: bool = False):
    """Batched step over (M, 4) states and (M, 2) actions.

    Returns next states (M, 4), or (next, j_state (M, 4, 4),
    j_action (M, 4, 2)) when jacobians is requested.
    """
    states = np.ascontiguousarray(states, dtype=np.float64)
    actions = np.ascontiguousarray(actions, dtype=np.float64)
    m = states.shape[0]
    out = np.empty((m, 4))
    if not jacobians:
        kernels.step_batch(states, actions, params.lf, params.lr,
                           params.max_steer, params.max_accel,
                           params.max_brake, params.dt, out)
        return out
    js = np.empty((m, 4, 4))
    ja = np.empty((m, 4, 2))
    kernels.step_batch(states, actions, params.lf, params.lr, params.max_steer,
                       params.max_accel, params.max_brake, params.dt,
                       out, js, ja)
    return out, js, ja


def step(state: AgentState, action: Action, params: BicycleParams) -> AgentState:
    """Advance a single agent one timestep."""
    nxt = step_array(state.as_row()[None, :], action.as_row()[None, :], params)
    return AgentState(position=nxt[0, :2], heading=nxt[0, 2], speed=nxt[0, 3],
                      half_length=state.half_length, half_width=state.half_width)


def step_with_jacobians(state: AgentState, action: Action,
                        params: BicycleParams):
    """Advance one agent and return the exact step Jacobians.

    The returned state is bitwise identical to step(); at the speed clamp
    the subgradient 0 is used for the speed row.
    """
    nxt, js, ja = step_array(state.as_row()[None, :], action.as_row()[None, :],
                             params, jacobians=True)
    new_state = AgentState(position=nxt[0, :2], heading=nxt[0, 2],
                           speed=nxt[0, 3], half_length=state.half_length,
                           half_width=state.half_width)
    return new_state, StepJacobians(d_next_d_state=js[0], d_next_d_action=ja[0])
