"""Core domain records: agent states, actions, plans, scenarios, verdicts,
and lossless JSON (de)serialization of scenarios."""

from __future__ import annotations

import enum
import json
import math
from dataclasses import dataclass, field
from typing import Optional, Sequence, Tuple

import numpy as np

from advtraffic.errors import SchemaViolation

SCENARIO_FORMAT_VERSION = 1

DEFAULT_HALF_LENGTH = 2.45
DEFAULT_HALF_WIDTH = 1.0

TWO_PI = 2.0 * math.pi


def normalize_heading(psi: float) -> float:
    """Wrap an angle into [0, 2*pi)."""
    psi = math.fmod(psi, TWO_PI)
    return psi + TWO_PI if psi < 0.0 else psi


def squash(raw):
    """Odd sigmoidal map from unconstrained parameters onto (-1, 1)."""
    return np.tanh(raw)


def squash_deriv(raw):
    t = np.tanh(raw)
    return 1.0 - t * t


def unsquash(actions, limit: float = 1.0 - 1e-9):
    """Inverse of squash; inputs are clipped just inside (-1, 1) first."""
    return np.arctanh(np.clip(actions, -limit, limit))


def _frozen_array(values, shape=None) -> np.ndarray:
    arr = np.array(values, dtype=np.float64)
    if shape is not None and arr.shape != shape:
        raise ValueError(f"expected shape {shape}, got {arr.shape}")
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True, eq=False)
class AgentState:
    """Pose, speed, and bounding-box extents of one agent."""

    position: np.ndarray
    heading: float
    speed: float
    half_length: float = DEFAULT_HALF_LENGTH
    half_width: float = DEFAULT_HALF_WIDTH

    def __post_init__(self):
        object.__setattr__(self, "position", _frozen_array(self.position, (2,)))
        object.__setattr__(self, "heading", normalize_heading(float(self.heading)))
        object.__setattr__(self, "speed", float(self.speed))
        object.__setattr__(self, "half_length", float(self.half_length))
        object.__setattr__(self, "half_width", float(self.half_width))
        if self.speed < 0.0:
            raise ValueError("speed must be non-negative")
        if self.half_length <= 0.0 or self.half_width <= 0.0:
            raise ValueError("box extents must be positive")

    def __eq__(self, other):
        if not isinstance(other, AgentState):
            return NotImplemented
        return (
            np.array_equal(self.position, other.position)
            and self.heading == other.heading
            and self.speed == other.speed
            and self.half_length == other.half_length
            and self.half_width == other.half_width
        )

    def as_row(self) -> np.ndarray:
        return np.array(
            [self.position[0], self.position[1], self.heading, self.speed]
        )


@dataclass(frozen=True, eq=False)
class TrafficState:
    """All agent states at one timestep; index 0 is the ego agent."""

    agents: Tuple[AgentState, ...]

    def __post_init__(self):
        object.__setattr__(self, "agents", tuple(self.agents))
        if not self.agents:
            raise ValueError("traffic state needs at least the ego agent")

    def __eq__(self, other):
        if not isinstance(other, TrafficState):
            return NotImplemented
        return self.agents == other.agents

    @property
    def num_adversaries(self) -> int:
        return len(self.agents) - 1

    def to_arrays(self) -> Tuple[np.ndarray, np.ndarray]:
        """Return (states (M, 4) [x, y, heading, speed], dims (M, 2))."""
        states = np.stack([a.as_row() for a in self.agents])
        dims = np.array([[a.half_length, a.half_width] for a in self.agents])
        return states, dims

    @classmethod
    def from_arrays(cls, states: np.ndarray, dims: np.ndarray) -> "TrafficState":
        agents = tuple(
            AgentState(
                position=states[i, :2],
                heading=states[i, 2],
                speed=states[i, 3],
                half_length=dims[i, 0],
                half_width=dims[i, 1],
            )
            for i in range(len(states))
        )
        return cls(agents=agents)


@dataclass(frozen=True)
class Action:
    """Throttle and steering command, both clamped to [-1, 1]."""

    throttle: float
    steer: float

    def __post_init__(self):
        object.__setattr__(self, "throttle", float(np.clip(self.throttle, -1.0, 1.0)))
        object.__setattr__(self, "steer", float(np.clip(self.steer, -1.0, 1.0)))

    def as_row(self) -> np.ndarray:
        return np.array([self.throttle, self.steer])


@dataclass(frozen=True, eq=False)
class ActionPlan:
    """Per-adversary action sequences parameterized by unconstrained values.

    raw_params has shape (N, T, 2); the executed actions are
    squash(raw_params), so every action component lies in (-1, 1) and a raw
    value of 0 maps to a zero action.
    """

    raw_params: np.ndarray

    def __post_init__(self):
        arr = np.asarray(self.raw_params, dtype=np.float64)
        if arr.ndim != 3 or arr.shape[2] != 2:
            raise ValueError("raw_params must have shape (N, T, 2)")
        arr = arr.copy()
        arr.setflags(write=False)
        object.__setattr__(self, "raw_params", arr)

    def __eq__(self, other):
        if not isinstance(other, ActionPlan):
            return NotImplemented
        return np.array_equal(self.raw_params, other.raw_params)

    @property
    def num_agents(self) -> int:
        return self.raw_params.shape[0]

    @property
    def horizon(self) -> int:
        return self.raw_params.shape[1]

    @property
    def actions(self) -> np.ndarray:
        """Squashed actions, shape (N, T, 2)."""
        return squash(self.raw_params)

    @property
    def per_agent(self) -> list:
        """List of N (T, 2) action arrays."""
        acts = self.actions
        return [acts[i] for i in range(acts.shape[0])]

    @classmethod
    def zeros(cls, num_agents: int, horizon: int) -> "ActionPlan":
        return cls(raw_params=np.zeros((num_agents, horizon, 2)))

    @classmethod
    def from_actions(cls, actions: np.ndarray) -> "ActionPlan":
        return cls(raw_params=unsquash(np.asarray(actions, dtype=np.float64)))

    def with_raw(self, raw: np.ndarray) -> "ActionPlan":
        return ActionPlan(raw_params=raw)


class VerdictKind(str, enum.Enum):
    EGO_COLLISION = "EgoCollision"
    ADV_ADV_COLLISION = "AdvAdvCollision"
    OFF_ROAD = "OffRoad"
    NO_COLLISION = "NoCollision"


@dataclass(frozen=True)
class Verdict:
    """Rollout termination outcome."""

    kind: VerdictKind
    time_index: Optional[int] = None
    agents_involved: Optional[Tuple[int, int]] = None

    def __post_init__(self):
        if self.kind == VerdictKind.NO_COLLISION:
            if self.time_index is not None:
                raise ValueError("NoCollision carries no time index")
        elif self.time_index is None:
            raise ValueError(f"{self.kind.value} requires a time index")
        if self.kind == VerdictKind.EGO_COLLISION:
            if self.agents_involved is None or 0 not in self.agents_involved:
                raise ValueError("EgoCollision must involve agent 0")


@dataclass(frozen=True, eq=False)
class ScenarioSpec:
    """Serializable benchmark unit: initial states, routes, horizon, plan."""

    map_id: str
    horizon: int
    dt: float
    ego_route: np.ndarray
    ego_goal: np.ndarray
    initial_state: TrafficState
    initial_plan: ActionPlan
    seed: int = 0
    scenario_id: str = ""

    def __post_init__(self):
        if self.horizon < 1:
            raise ValueError("horizon must be at least 1")
        if self.dt <= 0.0:
            raise ValueError("dt must be positive")
        route = np.asarray(self.ego_route, dtype=np.float64)
        if route.ndim != 2 or route.shape[1] != 2 or len(route) < 2:
            raise ValueError("ego_route must be an (R, 2) polyline, R >= 2")
        route = route.copy()
        route.setflags(write=False)
        object.__setattr__(self, "ego_route", route)
        object.__setattr__(self, "ego_goal", _frozen_array(self.ego_goal, (2,)))
        n_adv = self.initial_state.num_adversaries
        if self.initial_plan.raw_params.shape[:2] != (n_adv, self.horizon):
            raise ValueError(
                f"plan shape {self.initial_plan.raw_params.shape[:2]} does not "
                f"match ({n_adv}, {self.horizon})"
            )

    def __eq__(self, other):
        if not isinstance(other, ScenarioSpec):
            return NotImplemented
        return (
            self.map_id == other.map_id
            and self.horizon == other.horizon
            and self.dt == other.dt
            and np.array_equal(self.ego_route, other.ego_route)
            and np.array_equal(self.ego_goal, other.ego_goal)
            and self.initial_state == other.initial_state
            and self.initial_plan == other.initial_plan
            and self.seed == other.seed
            and self.scenario_id == other.scenario_id
        )

    @property
    def num_adversaries(self) -> int:
        return self.initial_state.num_adversaries

    def with_plan(self, plan: ActionPlan) -> "ScenarioSpec":
        """Copy of this spec with a substituted action plan."""
        return ScenarioSpec(
            map_id=self.map_id,
            horizon=self.horizon,
            dt=self.dt,
            ego_route=self.ego_route,
            ego_goal=self.ego_goal,
            initial_state=self.initial_state,
            initial_plan=plan,
            seed=self.seed,
            scenario_id=self.scenario_id,
        )


def _spec_to_dict(spec: ScenarioSpec) -> dict:
    return {
        "version": SCENARIO_FORMAT_VERSION,
        "map_id": spec.map_id,
        "scenario_id": spec.scenario_id,
        "horizon": spec.horizon,
        "dt": spec.dt,
        "seed": spec.seed,
        "ego_route": spec.ego_route.tolist(),
        "ego_goal": spec.ego_goal.tolist(),
        "agents": [
            {
                "x": a.position[0],
                "y": a.position[1],
                "heading": a.heading,
                "speed": a.speed,
                "half_length": a.half_length,
                "half_width": a.half_width,
            }
            for a in spec.initial_state.agents
        ],
        # Pre-squash parameters; executed actions are tanh of these values.
        "plan": spec.initial_plan.raw_params.tolist(),
    }


def serialize_scenario(spec: ScenarioSpec) -> bytes:
    """Lossless JSON encoding (doubles round-trip exactly via repr)."""
    return json.dumps(_spec_to_dict(spec), indent=1).encode("utf-8")


def _expect(obj, key, kind, path):
    if not isinstance(obj, dict):
        raise SchemaViolation(path, "expected an object")
    if key not in obj:
        raise SchemaViolation(f"{path}.{key}", "missing required key")
    value = obj[key]
    if kind is float:
        if not isinstance(value, (int, float)) or isinstance(value, bool):
            raise SchemaViolation(f"{path}.{key}", "expected a number")
        return float(value)
    if kind is int:
        if not isinstance(value, int) or isinstance(value, bool):
            raise SchemaViolation(f"{path}.{key}", "expected an integer")
        return value
    if not isinstance(value, kind):
        raise SchemaViolation(f"{path}.{key}", f"expected {kind.__name__}")
    return value


def _point_list(values, path, length=None):
    if not isinstance(values, list) or (length is not None and len(values) != length):
        raise SchemaViolation(path, "expected a list of [x, y] points")
    out = []
    for i, p in enumerate(values):
        if (
            not isinstance(p, list)
            or len(p) != 2
            or not all(isinstance(c, (int, float)) and not isinstance(c, bool) for c in p)
        ):
            raise SchemaViolation(f"{path}[{i}]", "expected [x, y]")
        out.append([float(p[0]), float(p[1])])
    return out


def deserialize_scenario(payload: bytes) -> ScenarioSpec:
    try:
        data = json.loads(payload.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise SchemaViolation("$", f"not valid JSON ({exc})") from None

    version = _expect(data, "version", int, "$")
    if version != SCENARIO_FORMAT_VERSION:
        raise SchemaViolation("$.version", f"unsupported version {version}")
    map_id = _expect(data, "map_id", str, "$")
    horizon = _expect(data, "horizon", int, "$")
    dt = _expect(data, "dt", float, "$")
    seed = _expect(data, "seed", int, "$")
    scenario_id = data.get("scenario_id", "")
    if not isinstance(scenario_id, str):
        raise SchemaViolation("$.scenario_id", "expected str")
    ego_route = _point_list(_expect(data, "ego_route", list, "$"), "$.ego_route")
    goal = _point_list([_expect(data, "ego_goal", list, "$")], "$.ego_goal")[0]

    agents_raw = _expect(data, "agents", list, "$")
    if not agents_raw:
        raise SchemaViolation("$.agents", "at least the ego agent is required")
    agents = []
    for i, rec in enumerate(agents_raw):
        path = f"$.agents[{i}]"
        try:
            agents.append(
                AgentState(
                    position=[_expect(rec, "x", float, path), _expect(rec, "y", float, path)],
                    heading=_expect(rec, "heading", float, path),
                    speed=_expect(rec, "speed", float, path),
                    half_length=_expect(rec, "half_length", float, path),
                    half_width=_expect(rec, "half_width", float, path),
                )
            )
        except ValueError as exc:
            raise SchemaViolation(path, str(exc)) from None

    plan_raw = _expect(data, "plan", list, "$")
    n_adv = len(agents) - 1
    if len(plan_raw) != n_adv:
        raise SchemaViolation("$.plan", f"expected {n_adv} agent rows")
    plan = np.zeros((n_adv, horizon, 2))
    for i, row in enumerate(plan_raw):
        pts = _point_list(row, f"$.plan[{i}]", length=horizon)
        plan[i] = np.array(pts)

    try:
        return ScenarioSpec(
            map_id=map_id,
            horizon=horizon,
            dt=dt,
            ego_route=np.array(ego_route),
            ego_goal=np.array(goal),
            initial_state=TrafficState(agents=tuple(agents)),
            initial_plan=ActionPlan(raw_params=plan),
            seed=seed,
            scenario_id=scenario_id,
        )
    except ValueError as exc:
        raise SchemaViolation("$", str(exc)) from None


def save_scenario(spec: ScenarioSpec, path) -> None:
    with open(path, "wb") as fh:
        fh.write(serialize_scenario(spec))


def load_scenario(path) -> ScenarioSpec:
    with open(path, "rb") as fh:
        return deserialize_scenario(fh.read())
