"""Ego-side components: waypoint controllers, rule-based driver, privileged
expert, relative-state featurization, and the small waypoint policy network.

All waypoints live in the ego frame (x forward, y left). Ego agents expose
reset(spec, map_model) and act(states, dims, t) over raw state arrays; the
policy ego additionally exposes a Jacobian interface used by the full
gradient path.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from advtraffic.errors import RouteExhausted, ShapeMismatch
from advtraffic.geometry import boxes_overlap_arrays
from advtraffic.kinematics import BicycleParams, step_array
from advtraffic.routes import Route
from advtraffic.scenario import Action, ActionPlan, AgentState, TrafficState

NUM_WAYPOINTS = 4
K_NEAREST = 4
FEATURE_DIM = 3 + 5 * K_NEAREST

DEFAULT_CRUISE_SPEED = 6.0
HAZARD_MARGIN = 2.0
HAZARD_BRAKE_SCALE = 4.0   # multiplies the ideal braking distance
HAZARD_HEADWAY = 1.0       # seconds of travel added to the hazard reach
HAZARD_SWEEP = 1.5         # seconds other agents are swept forward
EXPERT_FORECAST_STEPS = 16
EXPERT_SPEED_FRACTIONS = (1.0, 0.6, 0.3, 0.0)
EXPERT_CLEARANCE = 0.3
LATERAL_ACCEL_LIMIT = 3.0


@dataclass(frozen=True)
class Waypoints:
    """Four future 2D points in the ego's current frame."""

    points: np.ndarray

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=np.float64)
        if pts.shape != (NUM_WAYPOINTS, 2):
            raise ValueError("waypoints must have shape (4, 2)")
        pts = pts.copy()
        pts.setflags(write=False)
        object.__setattr__(self, "points", pts)


@dataclass(frozen=True)
class ControllerGains:
    steer_gain: float = 2.0
    accel_gain: float = 0.5
    brake_gain: float = 0.5
    speed_deadband: float = 0.1


def _control(wp: np.ndarray, speed: float, gains: ControllerGains,
             dt: float) -> np.ndarray:
    """Waypoints + current speed -> [throttle, steer], both in [-1, 1]."""
    aim = 0.5 * (wp[1] + wp[2])
    heading_err = math.atan2(aim[1], aim[0])
    steer = min(max(gains.steer_gain * heading_err, -1.0), 1.0)

    v_des = float(np.hypot(*(wp[3] - wp[1]))) / (2.0 * dt)
    err_v = v_des - speed
    if err_v >= 0.0:
        throttle = gains.accel_gain * err_v
    elif err_v > -gains.speed_deadband:
        throttle = 0.0
    else:
        throttle = gains.brake_gain * (err_v + gains.speed_deadband)
    throttle = min(max(throttle, -1.0), 1.0)
    return np.array([throttle, steer])


def _control_jacobian(wp: np.ndarray, speed: float, gains: ControllerGains,
                      dt: float):
    """Subgradients of the controller: wrt waypoints (2, 8) and speed (2,)."""
    d_wp = np.zeros((2, 8))
    d_v = np.zeros(2)

    aim = 0.5 * (wp[1] + wp[2])
    r2 = aim[0] * aim[0] + aim[1] * aim[1]
    pre_steer = gains.steer_gain * math.atan2(aim[1], aim[0])
    if r2 > 1e-12 and abs(pre_steer) < 1.0:
        d_aim = gains.steer_gain * np.array([-aim[1] / r2, aim[0] / r2])
        d_wp[1, 2:4] = 0.5 * d_aim
        d_wp[1, 4:6] = 0.5 * d_aim

    diff = wp[3] - wp[1]
    norm = float(np.hypot(diff[0], diff[1]))
    v_des = norm / (2.0 * dt)
    err_v = v_des - speed
    if err_v >= 0.0:
        branch = gains.accel_gain
        pre = branch * err_v
    elif err_v > -gains.speed_deadband:
        branch = 0.0
        pre = 0.0
    else:
        branch = gains.brake_gain
        pre = branch * (err_v + gains.speed_deadband)
    if abs(pre) < 1.0 and branch != 0.0:
        d_v[0] = -branch
        if norm > 1e-12:
            u = diff / norm
            d_wp[0, 6:8] = branch * u / (2.0 * dt)
            d_wp[0, 2:4] = -branch * u / (2.0 * dt)
    return d_wp, d_v


def controllers(waypoints: Waypoints, state: AgentState,
                gains: ControllerGains = ControllerGains(),
                dt: float = 0.25) -> Action:
    """Lateral aim-point steering plus longitudinal speed tracking."""
    cmd = _control(waypoints.points, state.speed, gains, dt)
    return Action(throttle=cmd[0], steer=cmd[1])


def _to_ego_frame(points: np.ndarray, pos: np.ndarray, heading: float):
    c, s = math.cos(heading), math.sin(heading)
    rel = points - pos[None, :]
    return np.stack([c * rel[:, 0] + s * rel[:, 1],
                     -s * rel[:, 0] + c * rel[:, 1]], axis=1)


def _route_waypoints(route: Route, s0: float, pos: np.ndarray, heading: float,
                     speed_plan: float, dt: float) -> np.ndarray:
    """Ego-frame waypoints along the route at the planned speed spacing."""
    if speed_plan <= 0.0:
        return np.zeros((NUM_WAYPOINTS, 2))
    arcs = s0 + speed_plan * dt * np.arange(1, NUM_WAYPOINTS + 1)
    world = np.stack([route.point_at(s) for s in arcs])
    return _to_ego_frame(world, pos, heading)


def _hazard_ahead(states: np.ndarray, dims: np.ndarray, agent: int,
                  max_brake: float, margin: float) -> bool:
    """True if any other agent's box intersects the forward hazard region.

    The region is a rectangle ahead of the agent whose length scales with
    the braking distance plus a headway and a fixed margin; it has to be
    long enough to react to crossing traffic at cruise speed.
    """
    m = len(states)
    if m < 2:
        return False
    x, y, psi, v = states[agent]
    hl, hw = dims[agent]
    reach = HAZARD_BRAKE_SCALE * v * v / (2.0 * max_brake) \
        + HAZARD_HEADWAY * v + margin
    cx = x + math.cos(psi) * (hl + 0.5 * reach)
    cy = y + math.sin(psi) * (hl + 0.5 * reach)
    others = [i for i in range(m) if i != agent]
    k = len(others)
    hazard_pose = np.tile([cx, cy, psi], (k, 1))
    hazard_dims = np.tile([0.5 * reach, hw + 0.6], (k, 1))
    # Each other agent's box is swept forward at constant velocity so that
    # converging traffic is noticed before it enters the corridor.
    shift = 0.5 * HAZARD_SWEEP * states[others, 3]
    o_poses = states[others][:, :3].copy()
    o_poses[:, 0] += np.cos(o_poses[:, 2]) * shift
    o_poses[:, 1] += np.sin(o_poses[:, 2]) * shift
    o_dims = dims[others].copy()
    o_dims[:, 0] += shift
    return bool(boxes_overlap_arrays(hazard_pose, hazard_dims,
                                     o_poses, o_dims).any())


def _rule_waypoints(states: np.ndarray, dims: np.ndarray, route: Route,
                    cruise: float, dt: float, params: BicycleParams,
                    agent: int = 0, hazard_margin: float = HAZARD_MARGIN
                    ) -> np.ndarray:
    """Route-following waypoints with hazard braking; raises RouteExhausted."""
    pos = states[agent, :2]
    s0 = route.require_not_exhausted(pos)
    if _hazard_ahead(states, dims, agent, params.max_brake, hazard_margin):
        return np.zeros((NUM_WAYPOINTS, 2))
    v = states[agent, 3]
    lookahead = v * v / (2.0 * params.max_brake) + 8.0
    v_plan = route.speed_limit(s0, lookahead, cruise, LATERAL_ACCEL_LIMIT)
    return _route_waypoints(route, s0, pos, states[agent, 2], v_plan, dt)


def rule_based_ego(state_view: TrafficState, route: np.ndarray,
                   params: BicycleParams = BicycleParams(),
                   cruise: float = DEFAULT_CRUISE_SPEED,
                   dt: float = 0.25,
                   hazard_margin: float = HAZARD_MARGIN) -> Waypoints:
    """Waypoints for the rule-based driver at index 0 of the state view."""
    states, dims = state_view.to_arrays()
    pts = _rule_waypoints(states, dims, Route(route), cruise, dt, params,
                          hazard_margin=hazard_margin)
    return Waypoints(points=pts)


def _forecast_adversaries(adv_states: np.ndarray, plan_actions: np.ndarray,
                          t0: int, steps: int,
                          params: BicycleParams) -> np.ndarray:
    """Roll adversary plans forward; returns poses (steps, N, 3).

    Beyond the plan horizon the adversaries coast with zero actions.
    """
    n = len(adv_states)
    horizon = plan_actions.shape[1]
    poses = np.empty((steps, n, 3))
    cur = adv_states.copy()
    zero = np.zeros((n, 2))
    for k in range(steps):
        t = t0 + k
        acts = plan_actions[:, t] if t < horizon else zero
        cur = step_array(cur, acts, params)
        poses[k] = cur[:, :3]
    return poses


def _expert_waypoints(states: np.ndarray, dims: np.ndarray,
                      plan: ActionPlan, route: Route, t0: int,
                      params: BicycleParams, cruise: float, dt: float,
                      forecast_steps: int = EXPERT_FORECAST_STEPS,
                      fractions: Sequence[float] = EXPERT_SPEED_FRACTIONS,
                      clearance: float = EXPERT_CLEARANCE) -> np.ndarray:
    """Pick the fastest route-following speed profile whose swept footprint
    misses every forecast adversary box; full stop is always a candidate."""
    pos = states[0, :2]
    try:
        s0 = route.require_not_exhausted(pos)
    except RouteExhausted:
        return np.zeros((NUM_WAYPOINTS, 2))

    n_adv = len(states) - 1
    if n_adv == 0:
        v_plan = route.speed_limit(
            s0, states[0, 3] ** 2 / (2.0 * params.max_brake) + 8.0,
            cruise, LATERAL_ACCEL_LIMIT)
        return _route_waypoints(route, s0, pos, states[0, 2], v_plan, dt)

    adv_poses = _forecast_adversaries(states[1:], plan.actions, t0,
                                      forecast_steps, params)
    adv_dims = dims[1:] + clearance
    ego_dims = np.tile(dims[0], (n_adv, 1))

    chosen = 0.0
    for frac in fractions:
        target = frac * cruise
        v = states[0, 3]
        s = s0
        safe = True
        for k in range(forecast_steps):
            limit = min(target, route.speed_limit(s, 6.0, cruise,
                                                  LATERAL_ACCEL_LIMIT))
            if limit > v:
                v = min(v + params.max_accel * dt, limit)
            else:
                v = max(v - params.max_brake * dt, limit, 0.0)
            s = s + v * dt
            ego_pose = np.tile([*route.point_at(s), route.heading_at(s)],
                               (n_adv, 1))
            if boxes_overlap_arrays(ego_pose, ego_dims, adv_poses[k],
                                    adv_dims).any():
                safe = False
                break
        if safe:
            chosen = target
            break

    if chosen <= 0.0:
        return np.zeros((NUM_WAYPOINTS, 2))
    v_plan = min(chosen, route.speed_limit(s0, 10.0, cruise,
                                           LATERAL_ACCEL_LIMIT))
    return _route_waypoints(route, s0, pos, states[0, 2], v_plan, dt)


def privileged_expert(full_state: TrafficState, adversary_plans: ActionPlan,
                      route: np.ndarray, time_index: int = 0,
                      params: BicycleParams = BicycleParams(),
                      cruise: float = DEFAULT_CRUISE_SPEED,
                      dt: float = 0.25) -> Waypoints:
    """Expert waypoints; may read the adversaries' future action sequences."""
    states, dims = full_state.to_arrays()
    pts = _expert_waypoints(states, dims, adversary_plans, Route(route),
                            time_index, params, cruise, dt)
    return Waypoints(points=pts)


# ---------------------------------------------------------------------------
# Featurization


def extract_features(states: np.ndarray, dims: np.ndarray,
                     goal: np.ndarray) -> np.ndarray:
    """Relative-state feature vector: ego speed, goal offset in the ego
    frame, then the K nearest adversaries (relative position, heading
    sin/cos, speed), zero-padded and ordered by distance with index ties."""
    f, _ = _features_impl(states, dims, goal, want_jac=False)
    return f


def extract_features_with_jacobian(states: np.ndarray, dims: np.ndarray,
                                   goal: np.ndarray):
    """Features plus d features / d state, shape (M, FEATURE_DIM, 4)."""
    return _features_impl(states, dims, goal, want_jac=True)


def _features_impl(states, dims, goal, want_jac):
    m = len(states)
    f = np.zeros(FEATURE_DIM)
    jac = np.zeros((m, FEATURE_DIM, 4)) if want_jac else None

    x0, y0, psi0, v0 = states[0]
    c, s = math.cos(psi0), math.sin(psi0)
    f[0] = v0
    if want_jac:
        jac[0, 0, 3] = 1.0

    def rel_and_grads(target_xy):
        dx, dy = target_xy[0] - x0, target_xy[1] - y0
        rel = np.array([c * dx + s * dy, -s * dx + c * dy])
        d_dpsi0 = np.array([rel[1], -rel[0]])
        return rel, d_dpsi0

    rel_g, dpsi_g = rel_and_grads(goal)
    f[1:3] = rel_g
    rot = np.array([[c, s], [-s, c]])
    if want_jac:
        jac[0, 1:3, 0:2] = -rot
        jac[0, 1:3, 2] = dpsi_g

    n_adv = m - 1
    if n_adv > 0:
        rel_pos = states[1:, :2] - states[0, :2]
        order = np.argsort(np.hypot(rel_pos[:, 0], rel_pos[:, 1]),
                           kind="stable")
        for slot, adv in enumerate(order[:K_NEAREST]):
            i = 1 + int(adv)
            base = 3 + 5 * slot
            rel, dpsi = rel_and_grads(states[i, :2])
            dpsi_rel = psi0 - states[i, 2]
            f[base:base + 2] = rel
            f[base + 2] = math.sin(states[i, 2] - psi0)
            f[base + 3] = math.cos(states[i, 2] - psi0)
            f[base + 4] = states[i, 3]
            if want_jac:
                jac[i, base:base + 2, 0:2] = rot
                jac[0, base:base + 2, 0:2] = -rot
                jac[0, base:base + 2, 2] = dpsi
                cd, sd = math.cos(dpsi_rel), math.sin(dpsi_rel)
                jac[i, base + 2, 2] = cd
                jac[0, base + 2, 2] = -cd
                jac[i, base + 3, 2] = sd
                jac[0, base + 3, 2] = -sd
                jac[i, base + 4, 3] = 1.0
    return f, jac


def default_feature_scale() -> np.ndarray:
    """Fixed input scaling baked into the policy model."""
    scale = np.ones(FEATURE_DIM)
    scale[0] = 0.2
    scale[1:3] = 0.05
    for k in range(K_NEAREST):
        base = 3 + 5 * k
        scale[base:base + 2] = 0.1
        scale[base + 4] = 0.2
    return scale


# ---------------------------------------------------------------------------
# Waypoint policy network


class PolicyModel:
    """Two-hidden-layer tanh network mapping features to 4 waypoints."""

    def __init__(self, weights: Optional[dict] = None, hidden: int = 64,
                 seed: int = 0):
        if weights is not None:
            self.w1 = np.array(weights["w1"], dtype=np.float64)
            self.b1 = np.array(weights["b1"], dtype=np.float64)
            self.w2 = np.array(weights["w2"], dtype=np.float64)
            self.b2 = np.array(weights["b2"], dtype=np.float64)
            self.w3 = np.array(weights["w3"], dtype=np.float64)
            self.b3 = np.array(weights["b3"], dtype=np.float64)
            self.feature_scale = np.array(weights["feature_scale"],
                                          dtype=np.float64)
        else:
            rng = np.random.default_rng(seed)
            f = FEATURE_DIM
            self.w1 = rng.standard_normal((hidden, f)) / np.sqrt(f)
            self.b1 = np.zeros(hidden)
            self.w2 = rng.standard_normal((hidden, hidden)) / np.sqrt(hidden)
            self.b2 = np.zeros(hidden)
            self.w3 = rng.standard_normal((2 * NUM_WAYPOINTS, hidden)) \
                / np.sqrt(hidden)
            self.b3 = np.zeros(2 * NUM_WAYPOINTS)
            self.feature_scale = default_feature_scale()
        if self.w1.shape[1] != len(self.feature_scale):
            raise ShapeMismatch("first layer width must match feature dim")

    def copy(self) -> "PolicyModel":
        return PolicyModel(weights=self.to_dict())

    def forward_batch(self, x: np.ndarray, cache: bool = False):
        """x: (B, F) -> waypoints flattened (B, 8)."""
        if x.shape[1] != self.w1.shape[1]:
            raise ShapeMismatch(
                f"feature dim {x.shape[1]} != {self.w1.shape[1]}")
        z = x * self.feature_scale
        h1 = np.tanh(z @ self.w1.T + self.b1)
        h2 = np.tanh(h1 @ self.w2.T + self.b2)
        out = h2 @ self.w3.T + self.b3
        if cache:
            return out, (z, h1, h2)
        return out

    def forward(self, features: np.ndarray) -> np.ndarray:
        """Single feature vector -> waypoints (4, 2) in the ego frame."""
        out = self.forward_batch(features[None, :])
        return out[0].reshape(NUM_WAYPOINTS, 2)

    def jacobian(self, features: np.ndarray) -> np.ndarray:
        """d flattened waypoints / d features, shape (8, F)."""
        out, (z, h1, h2) = self.forward_batch(features[None, :], cache=True)
        d2 = (1.0 - h2[0] ** 2)[:, None] * self.w2
        d1 = (1.0 - h1[0] ** 2)[:, None] * self.w1
        return self.w3 @ d2 @ d1 * self.feature_scale[None, :]

    def to_dict(self) -> dict:
        return {
            "version": 1,
            "sizes": [self.w1.shape[1], self.w1.shape[0],
                      self.w2.shape[0], self.w3.shape[0]],
            "feature_scale": self.feature_scale.tolist(),
            "w1": self.w1.tolist(), "b1": self.b1.tolist(),
            "w2": self.w2.tolist(), "b2": self.b2.tolist(),
            "w3": self.w3.tolist(), "b3": self.b3.tolist(),
        }

    def save(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(self.to_dict(), fh)

    @classmethod
    def load(cls, path) -> "PolicyModel":
        with open(path, "r", encoding="utf-8") as fh:
            return cls(weights=json.load(fh))


# ---------------------------------------------------------------------------
# Ego agents (rollout-facing adapters)


class ScriptedEgo:
    """Replays a fixed action sequence; holds the last action afterwards."""

    def __init__(self, actions: np.ndarray):
        self.actions = np.atleast_2d(np.asarray(actions, dtype=np.float64))

    def reset(self, spec, map_model) -> None:
        pass

    def act(self, states, dims, t) -> np.ndarray:
        return self.actions[min(t, len(self.actions) - 1)]


class RuleBasedEgo:
    """Route follower with hazard braking (the default ego agent)."""

    def __init__(self, params: BicycleParams = BicycleParams(),
                 gains: ControllerGains = ControllerGains(),
                 cruise: float = DEFAULT_CRUISE_SPEED,
                 hazard_margin: float = HAZARD_MARGIN):
        self.params = params
        self.gains = gains
        self.cruise = cruise
        self.hazard_margin = hazard_margin
        self._route = None
        self._dt = params.dt

    def reset(self, spec, map_model) -> None:
        self._route = Route(spec.ego_route)
        self._dt = spec.dt

    def waypoints(self, states, dims, t=0) -> np.ndarray:
        try:
            return _rule_waypoints(states, dims, self._route, self.cruise,
                                   self._dt, self.params,
                                   hazard_margin=self.hazard_margin)
        except RouteExhausted:
            return np.zeros((NUM_WAYPOINTS, 2))

    def act(self, states, dims, t) -> np.ndarray:
        wp = self.waypoints(states, dims, t)
        return _control(wp, states[0, 3], self.gains, self._dt)


class ExpertEgo:
    """Privileged driver that forecasts adversary plans and yields."""

    def __init__(self, params: BicycleParams = BicycleParams(),
                 gains: ControllerGains = ControllerGains(),
                 cruise: float = DEFAULT_CRUISE_SPEED,
                 forecast_steps: int = EXPERT_FORECAST_STEPS):
        self.params = params
        self.gains = gains
        self.cruise = cruise
        self.forecast_steps = forecast_steps
        self._route = None
        self._plan = None
        self._dt = params.dt

    def reset(self, spec, map_model) -> None:
        self._route = Route(spec.ego_route)
        self._plan = spec.initial_plan
        self._dt = spec.dt

    def waypoints(self, states, dims, t) -> np.ndarray:
        return _expert_waypoints(states, dims, self._plan, self._route, t,
                                 self.params, self.cruise, self._dt,
                                 forecast_steps=self.forecast_steps)

    def act(self, states, dims, t) -> np.ndarray:
        wp = self.waypoints(states, dims, t)
        return _control(wp, states[0, 3], self.gains, self._dt)


class PolicyEgo:
    """Learned waypoint policy behind the shared controllers.

    Smooth end to end, so it exposes the Jacobian interface consumed by the
    full (indirect-path) backward pass.
    """

    def __init__(self, model: PolicyModel,
                 gains: ControllerGains = ControllerGains()):
        self.model = model
        self.gains = gains
        self._goal = None
        self._dt = 0.25

    def reset(self, spec, map_model) -> None:
        self._goal = np.asarray(spec.ego_goal, dtype=np.float64)
        self._dt = spec.dt

    def act(self, states, dims, t) -> np.ndarray:
        f = extract_features(states, dims, self._goal)
        wp = self.model.forward(f)
        return _control(wp, states[0, 3], self.gains, self._dt)

    def act_with_state_jacobian(self, states, dims, t):
        """Action plus d action / d states, shape (M, 2, 4)."""
        f, jf = extract_features_with_jacobian(states, dims, self._goal)
        wp = self.model.forward(f)
        action = _control(wp, states[0, 3], self.gains, self._dt)
        d_wp, d_v = _control_jacobian(wp, states[0, 3], self.gains, self._dt)
        chain = d_wp @ self.model.jacobian(f)          # (2, F)
        jac = np.einsum('af,mfj->maj', chain, jf)
        jac[0, :, 3] += d_v
        return action, jac
