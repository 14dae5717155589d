"""Procedural desk-scale maps and the benchmark scenario sampler.

Each template yields drivable polygons plus one named centerline route per
legal movement. Conventions: right-hand traffic, lane centers offset half a
lane from the road axis, route endpoints inset from the map edge so parked
vehicle boxes stay on the road.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Dict, List, Sequence

import numpy as np

from advtraffic.builder import (DEFAULT_PROXIMITY_RADIUS,
                                build_initial_scenario)
from advtraffic.errors import (DegenerateGeometry, InitializationUnsafe,
                               InsufficientRoutes, ProximityUnmet,
                               RouteInfeasible)
from advtraffic.geometry import MapModel
from advtraffic.routes import Route, polyline_min_distance
from advtraffic.scenario import ScenarioSpec

MAP_KINDS = ("four_way_intersection", "t_junction", "two_lane_straight",
             "curved_merge", "roundabout")
EDGE_INSET = 4.0


@dataclass(frozen=True)
class MapTemplate:
    kind: str
    lane_width: float = 3.5
    arm_length: float = 60.0
    junction_radius: float = 6.0
    ring_radius: float = 12.0
    seed: int = 0

    def __post_init__(self):
        if self.kind not in MAP_KINDS:
            raise DegenerateGeometry(f"unknown template kind {self.kind!r}")
        if self.lane_width < 3.0:
            raise DegenerateGeometry("lane width must be at least 3 m")
        if self.arm_length < 4 * self.lane_width:
            raise DegenerateGeometry("arms too short for the junction")
        if self.junction_radius < self.lane_width:
            raise DegenerateGeometry("junction radius below road half-width")
        if self.kind == "roundabout" and self.ring_radius < 2.5 * self.lane_width:
            raise DegenerateGeometry("ring radius too small for the lane width")

    @property
    def map_id(self) -> str:
        return (f"{self.kind}_w{self.lane_width:g}_a{self.arm_length:g}"
                f"_s{self.seed}")


def _rot(points: np.ndarray, quarter_turns: int) -> np.ndarray:
    ang = quarter_turns * math.pi / 2.0
    c, s = math.cos(ang), math.sin(ang)
    rot = np.array([[c, -s], [s, c]])
    return points @ rot.T


def _arc(center, radius, deg_from, deg_to, step=7.5) -> np.ndarray:
    n = max(2, int(abs(deg_to - deg_from) / step) + 1)
    ang = np.deg2rad(np.linspace(deg_from, deg_to, n))
    return np.stack([center[0] + radius * np.cos(ang),
                     center[1] + radius * np.sin(ang)], axis=1)


def _dedupe(points: np.ndarray) -> np.ndarray:
    keep = [0]
    for i in range(1, len(points)):
        if np.hypot(*(points[i] - points[keep[-1]])) > 1e-6:
            keep.append(i)
    return points[keep]


def _ccw(polygon: np.ndarray) -> np.ndarray:
    x, y = polygon[:, 0], polygon[:, 1]
    area = np.sum(x * np.roll(y, -1) - np.roll(x, -1) * y)
    return polygon if area > 0 else polygon[::-1]


def _four_way(tpl: MapTemplate):
    w = tpl.lane_width
    half = w            # two-lane road half-width
    a = tpl.arm_length
    c = tpl.junction_radius
    polys = [
        np.array([[-a, -half], [a, -half], [a, half], [-a, half]], float),
        np.array([[-half, -a], [half, -a], [half, a], [-half, a]], float),
        np.array([[-c, -c], [c, -c], [c, c], [-c, c]], float),
    ]
    lane = w / 2.0
    start = np.array([-a + EDGE_INSET, -lane])
    west_movements = {
        "w_straight": np.array([start, [-c, -lane], [c, -lane],
                                [a - EDGE_INSET, -lane]]),
        "w_right": np.vstack([
            [start],
            _arc((-c, -c), c - lane, 90.0, 0.0),
            [[-lane, -a + EDGE_INSET]],
        ]),
        "w_left": np.vstack([
            [start],
            _arc((-c, c), c + lane, -90.0, 0.0),
            [[lane, a - EDGE_INSET]],
        ]),
    }
    routes = {}
    dirs = ["w", "s", "e", "n"]   # +90 deg rotations of the west approach
    for k, d in enumerate(dirs):
        for name, pts in west_movements.items():
            routes[name.replace("w_", f"{d}_", 1)] = _dedupe(_rot(pts, k))
    return polys, routes


def _t_junction(tpl: MapTemplate):
    w = tpl.lane_width
    half = w
    a = tpl.arm_length
    c = tpl.junction_radius
    polys = [
        np.array([[-a, -half], [a, -half], [a, half], [-a, half]], float),
        np.array([[-half, -a], [half, -a], [half, half], [-half, half]],
                 float),
        np.array([[-c, -c], [c, -c], [c, c], [-c, c]], float),
    ]
    lane = w / 2.0
    w_start = np.array([-a + EDGE_INSET, -lane])
    e_start = np.array([a - EDGE_INSET, lane])
    s_start = np.array([lane, -a + EDGE_INSET])
    routes = {
        "w_straight": np.array([w_start, [a - EDGE_INSET, -lane]]),
        "w_right": _dedupe(np.vstack([
            [w_start], _arc((-c, -c), c - lane, 90.0, 0.0),
            [[-lane, -a + EDGE_INSET]],
        ])),
        "e_straight": np.array([e_start, [-a + EDGE_INSET, lane]]),
        "e_left": _dedupe(np.vstack([
            [e_start], _arc((c, -c), c + lane, 90.0, 180.0),
            [[-lane, -a + EDGE_INSET]],
        ])),
        "s_right": _dedupe(np.vstack([
            [s_start], _arc((c, -c), c - lane, 180.0, 90.0),
            [[a - EDGE_INSET, -lane]],
        ])),
        "s_left": _dedupe(np.vstack([
            [s_start], _arc((-c, -c), c + lane, 0.0, 90.0),
            [[-a + EDGE_INSET, lane]],
        ])),
    }
    return polys, routes


def _two_lane_straight(tpl: MapTemplate):
    w = tpl.lane_width
    length = 2 * tpl.arm_length
    polys = [np.array([[0.0, -w], [length, -w], [length, w], [0.0, w]])]
    lane = w / 2.0
    routes = {
        "east": np.array([[EDGE_INSET, -lane], [length - EDGE_INSET, -lane]]),
        "west": np.array([[length - EDGE_INSET, lane], [EDGE_INSET, lane]]),
    }
    return polys, routes


def _bezier(p0, p1, p2, n=24) -> np.ndarray:
    t = np.linspace(0.0, 1.0, n)[:, None]
    p0, p1, p2 = (np.asarray(p, float)[None, :] for p in (p0, p1, p2))
    return (1 - t) ** 2 * p0 + 2 * t * (1 - t) * p1 + t ** 2 * p2


def _curved_merge(tpl: MapTemplate):
    w = tpl.lane_width
    length = 2 * tpl.arm_length
    lane = w / 2.0
    main = np.array([[0.0, -w], [length, -w], [length, w], [0.0, w]])

    center = _bezier([0.2 * length, -w - 10.0], [0.38 * length, -lane],
                     [0.55 * length, -lane])
    tail = np.array([[0.62 * length, -lane]])
    # Strip polygon extends past the route start so parked boxes stay inside.
    lead_dir = (center[0] - center[1]) / np.hypot(*(center[0] - center[1]))
    lead = center[0] + (EDGE_INSET + 2.0) * lead_dir
    centerline = _dedupe(np.vstack([[lead], center, tail]))
    seg = np.diff(centerline, axis=0)
    seg = seg / np.hypot(seg[:, 0], seg[:, 1])[:, None]
    normals = np.stack([-seg[:, 1], seg[:, 0]], axis=1)
    normals = np.vstack([normals[:1], 0.5 * (normals[:-1] + normals[1:]),
                         normals[-1:]])
    normals = normals / np.hypot(normals[:, 0], normals[:, 1])[:, None]
    off = lane + 1.0
    ramp = _ccw(np.vstack([centerline + off * normals,
                           (centerline - off * normals)[::-1]]))

    routes = {
        "main_east": np.array([[EDGE_INSET, -lane],
                               [length - EDGE_INSET, -lane]]),
        "main_west": np.array([[length - EDGE_INSET, lane],
                               [EDGE_INSET, lane]]),
        "ramp": _dedupe(np.vstack([center, tail,
                                   [[length - EDGE_INSET, -lane]]])),
    }
    return [main, ramp], routes


def _roundabout(tpl: MapTemplate):
    w = tpl.lane_width
    r = tpl.ring_radius
    a = tpl.arm_length
    lane = w / 2.0
    ri, ro = r - w, r + w

    polys = []
    for a0 in (0.0, 90.0, 180.0, 270.0):
        outer = _arc((0, 0), ro, a0 - 10.0, a0 + 100.0, step=5.0)
        inner = _arc((0, 0), ri, a0 + 100.0, a0 - 10.0, step=5.0)
        polys.append(_ccw(_dedupe(np.vstack([outer, inner]))))
    arm = np.array([[ri + 0.5, -w], [a, -w], [a, w], [ri + 0.5, w]])
    for k in range(4):
        polys.append(_ccw(_rot(arm, k)))

    # East-arm entry: approach westbound on y=+lane, circulate CCW, exit on
    # the target arm's outbound lane. Other entries by rotation.
    theta_join = math.degrees(math.asin(lane / r))
    x_join = math.sqrt(r * r - lane * lane)
    exits = {"n": 90.0, "w": 180.0, "s": 270.0}
    east_routes = {}
    outbound_east = np.array([[x_join + 2.5, -lane], [a - EDGE_INSET, -lane]])
    for exit_dir, exit_deg in exits.items():
        approach = np.array([[a - EDGE_INSET, lane], [x_join + 2.5, lane]])
        circ = _arc((0, 0), r, theta_join, exit_deg - theta_join, step=5.0)
        exit_lane = _rot(outbound_east, int(exit_deg // 90))
        east_routes[exit_dir] = _dedupe(np.vstack([approach, circ, exit_lane]))
    routes = {}
    cycle = ["e", "n", "w", "s"]
    for k, entry in enumerate(cycle):
        for exit_dir, pts in east_routes.items():
            rotated_exit = cycle[(cycle.index(exit_dir) + k) % 4]
            routes[f"{entry}2{rotated_exit}"] = _dedupe(_rot(pts, k))
    return polys, routes


_BUILDERS = {
    "four_way_intersection": _four_way,
    "t_junction": _t_junction,
    "two_lane_straight": _two_lane_straight,
    "curved_merge": _curved_merge,
    "roundabout": _roundabout,
}


def generate_map(tpl: MapTemplate, resolution: float = 0.2) -> MapModel:
    """Deterministic MapModel for a template (SDF grid built on load)."""
    polys, routes = _BUILDERS[tpl.kind](tpl)
    return MapModel(map_id=tpl.map_id, drivable=[_ccw(p) for p in polys],
                    routes=routes, resolution=resolution)


def default_benchmark_templates(seed: int = 0) -> List[MapTemplate]:
    return [
        MapTemplate(kind="four_way_intersection", seed=seed),
        MapTemplate(kind="t_junction", seed=seed),
        MapTemplate(kind="two_lane_straight", seed=seed),
        MapTemplate(kind="curved_merge", seed=seed),
    ]


def sample_benchmark(maps: Sequence[MapModel], routes_per_map: int,
                     densities: Sequence[int], seed: int,
                     horizon: int = 80, dt: float = 0.25,
                     proximity_radius: float = DEFAULT_PROXIMITY_RADIUS,
                     **builder_kwargs) -> List[ScenarioSpec]:
    """Deterministic benchmark set of len(maps) * routes_per_map *
    len(densities) specs, each passing the NoCollision initialization
    contract."""
    rng = np.random.default_rng(seed)
    specs: List[ScenarioSpec] = []
    for map_model in maps:
        names = sorted(map_model.routes)
        if len(names) < routes_per_map:
            raise InsufficientRoutes(
                f"map {map_model.map_id} has {len(names)} routes, need "
                f"{routes_per_map}")
        order = [names[i] for i in rng.permutation(len(names))]
        built = 0
        for ego_name in order:
            if built >= routes_per_map:
                break
            try:
                scen = _build_for_route(map_model, ego_name, densities,
                                        horizon, dt, seed, proximity_radius,
                                        **builder_kwargs)
            except (InsufficientRoutes, ProximityUnmet, RouteInfeasible,
                    InitializationUnsafe):
                continue
            specs.extend(scen)
            built += 1
        if built < routes_per_map:
            raise InsufficientRoutes(
                f"map {map_model.map_id}: only {built} of {routes_per_map} "
                f"ego routes admit all densities")
    return specs


def _select_slots(map_model, ego_name, candidates, density, stagger):
    """Greedy (route, start offset) choices with separated start poses.

    Successive adversaries get a growing head start so they reach the
    conflict region at different times than the ego; turning an
    initialization critical then requires a coordinated speed change over
    many timesteps rather than a small nudge.
    """
    ego_route = Route(map_model.routes[ego_name])
    placed = [ego_route.point_at(0.0)]
    chosen = []
    for rank in range(5):
        for gap, name in candidates:
            if len(chosen) >= density:
                return chosen
            route = Route(map_model.routes[name])
            base = (16.0 if name == ego_name else 6.0) \
                + 8.0 * len(chosen) + 11.0 * rank + stagger
            if base > route.length - 6.0:
                continue
            pos = route.point_at(base)
            if all(np.hypot(*(pos - q)) >= 7.5 for q in placed):
                chosen.append((name, base))
                placed.append(pos)
    return chosen if len(chosen) >= density else None


def _parallel_exposure(route_pts: np.ndarray, ego_pts: np.ndarray) -> float:
    """Fraction of a route that runs within 5 m of the ego route.

    Crossing movements score low (they meet the ego route only inside the
    junction); oncoming and following movements score high.
    """
    ra, rb = Route(route_pts), Route(ego_pts)
    sa = np.linspace(0.0, ra.length, max(int(ra.length), 2))
    pa = np.stack([ra.point_at(s) for s in sa])
    sb = np.linspace(0.0, rb.length, max(int(rb.length), 2))
    pb = np.stack([rb.point_at(s) for s in sb])
    d2 = ((pa[:, None, :] - pb[None, :, :]) ** 2).sum(axis=2)
    return float((np.sqrt(d2.min(axis=1)) < 5.0).mean())


def _build_for_route(map_model, ego_name, densities, horizon, dt, seed,
                     proximity_radius, **builder_kwargs):
    """All-density specs for one ego route, or raise."""
    ego_route = map_model.routes[ego_name]
    candidates = []
    for name in sorted(map_model.routes):
        gap = polyline_min_distance(ego_route, map_model.routes[name])
        if gap <= proximity_radius:
            crossing = 0 if _parallel_exposure(map_model.routes[name],
                                               ego_route) < 0.35 else 1
            candidates.append(((crossing, gap), name))
    # crossing movements first, then by closest approach
    candidates.sort(key=lambda item: (item[0], item[1]))
    candidates = [(gap, name) for (crossing, gap), name in candidates]
    if not candidates:
        raise InsufficientRoutes(f"route {ego_name}: no nearby routes")

    out = []
    for density in densities:
        spec = None
        for attempt in range(5):
            chosen = _select_slots(map_model, ego_name, candidates, density,
                                   stagger=2.5 * attempt)
            if chosen is None or len(chosen) < density:
                continue
            try:
                spec = build_initial_scenario(
                    map_model, ego_route,
                    [map_model.routes[name] for name, _ in chosen],
                    horizon, dt, seed,
                    proximity_radius=proximity_radius,
                    start_offsets=[off for _, off in chosen],
                    scenario_id=f"{map_model.map_id}/{ego_name}/d{density}",
                    **builder_kwargs,
                )
                break
            except (InitializationUnsafe, RouteInfeasible):
                spec = None
        if spec is None:
            raise InsufficientRoutes(
                f"route {ego_name}: no safe initialization at density "
                f"{density}")
        out.append(spec)
    return out
