"""Construction of non-critical initial scenarios.

Every agent (ego plus adversaries) is driven along its route by the
rule-based controller in one joint simulation; the adversary actions are
recorded as the initial plan. Because the default ego reproduces the same
behavior at rollout time, a collision-free recording yields a NoCollision
initialization.
"""

from __future__ import annotations

from typing import Optional, Sequence

import numpy as np

from advtraffic.agents import (ControllerGains, DEFAULT_CRUISE_SPEED,
                               RuleBasedEgo, _control, _rule_waypoints)
from advtraffic.errors import (InitializationUnsafe, ProximityUnmet,
                               RouteExhausted, RouteInfeasible)
from advtraffic.geometry import MapModel
from advtraffic.kinematics import BicycleParams, step_array
from advtraffic.routes import Route, polyline_min_distance
from advtraffic.scenario import (DEFAULT_HALF_LENGTH, DEFAULT_HALF_WIDTH,
                                 ActionPlan, ScenarioSpec, TrafficState,
                                 VerdictKind)

DEFAULT_PROXIMITY_RADIUS = 8.0
ROUTE_CLEARANCE = 0.8


def _check_route_drivable(map_model: MapModel, route: Route, label: str):
    samples = np.stack([route.point_at(s)
                        for s in np.linspace(0.0, route.length,
                                             max(int(route.length), 2))])
    if (map_model.sdf(samples) < ROUTE_CLEARANCE).any():
        raise RouteInfeasible(
            f"{label} leaves the drivable area (clearance < "
            f"{ROUTE_CLEARANCE} m)")


def build_initial_scenario(map_model: MapModel, ego_route: np.ndarray,
                           adversary_routes: Sequence[np.ndarray],
                           T: int, dt: float, seed: int,
                           params: BicycleParams = BicycleParams(),
                           gains: ControllerGains = ControllerGains(),
                           cruise: float = DEFAULT_CRUISE_SPEED,
                           proximity_radius: float = DEFAULT_PROXIMITY_RADIUS,
                           start_offsets: Optional[Sequence[float]] = None,
                           start_speed: float = 4.0,
                           scenario_id: str = "",
                           verify: bool = True) -> ScenarioSpec:
    """Record a non-critical initialization for the given routes.

    Raises RouteInfeasible when a route (or its tracking) leaves the
    drivable area, ProximityUnmet when an adversary route never comes within
    the proximity radius of the ego route, and InitializationUnsafe when the
    joint recording collides.
    """
    params = params.with_dt(dt)
    ego_r = Route(ego_route)
    adv_rs = [Route(r) for r in adversary_routes]
    n = len(adv_rs)

    _check_route_drivable(map_model, ego_r, "ego route")
    for i, r in enumerate(adv_rs):
        _check_route_drivable(map_model, r, f"adversary route {i}")
        gap = polyline_min_distance(ego_route, adversary_routes[i])
        if gap > proximity_radius:
            raise ProximityUnmet(
                f"adversary route {i} stays {gap:.1f} m from the ego route "
                f"(radius {proximity_radius} m)")

    offsets = list(start_offsets) if start_offsets is not None else [0.0] * n
    if len(offsets) != n:
        raise ValueError("start_offsets length must match adversary count")

    routes = [ego_r] + adv_rs
    states = np.empty((n + 1, 4))
    for i, (route, off) in enumerate(zip(routes, [0.0] + offsets)):
        pos = route.point_at(off)
        states[i] = [pos[0], pos[1], route.heading_at(off),
                     min(start_speed, cruise)]
    dims = np.tile([DEFAULT_HALF_LENGTH, DEFAULT_HALF_WIDTH], (n + 1, 1))

    recorded = np.zeros((T, n, 2))
    traj = np.empty((T + 1, n + 1, 4))
    traj[0] = states
    acts = np.empty((n + 1, 2))
    cur = states.copy()
    for t in range(T):
        for i, route in enumerate(routes):
            try:
                wp = _rule_waypoints(cur, dims, route, cruise, dt, params,
                                     agent=i)
            except RouteExhausted:
                wp = np.zeros((4, 2))
            acts[i] = _control(wp, cur[i, 3], gains, dt)
        recorded[t] = acts[1:]
        cur = step_array(cur, acts, params)
        traj[t + 1] = cur

    initial_state = TrafficState.from_arrays(states, dims)
    plan = ActionPlan.from_actions(recorded.transpose(1, 0, 2)) if n \
        else ActionPlan.zeros(0, T)
    spec = ScenarioSpec(
        map_id=map_model.map_id,
        horizon=T,
        dt=dt,
        ego_route=ego_route,
        ego_goal=ego_r.points[-1],
        initial_state=initial_state,
        initial_plan=plan,
        seed=seed,
        scenario_id=scenario_id,
    )

    if verify:
        from advtraffic.rollout import rollout

        ego = RuleBasedEgo(params=params, gains=gains, cruise=cruise)
        result = rollout(spec, ego, map_model, mode="no_record",
                         params=params)
        if result.verdict.kind != VerdictKind.NO_COLLISION:
            raise InitializationUnsafe(
                f"initialization rolls out to {result.verdict.kind.value} at "
                f"t={result.verdict.time_index}")
    return spec
