"""Single TOML/JSON config file with sections for kinematics, costs, attack,
training, ego, and benchmark parameters."""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Optional

from advtraffic.agents import ControllerGains, DEFAULT_CRUISE_SPEED
from advtraffic.attacks import AttackConfig
from advtraffic.costs import CostWeights
from advtraffic.kinematics import BicycleParams
from advtraffic.training import TrainConfig

try:
    import tomllib as _toml
except ImportError:                      # Python 3.10
    import tomli as _toml


@dataclass(frozen=True)
class EgoConfig:
    kind: str = "rule_based"             # rule_based | policy | expert
    policy_path: Optional[str] = None
    cruise_speed: float = DEFAULT_CRUISE_SPEED


@dataclass(frozen=True)
class BenchmarkConfig:
    routes_per_map: int = 2
    densities: List[int] = field(default_factory=lambda: [1, 2, 4])
    horizon: int = 80
    dt: float = 0.25
    proximity_radius: float = 8.0
    methods: List[str] = field(default_factory=lambda: [
        "king_direct", "random_search", "simba", "cma_es"])


@dataclass(frozen=True)
class SimConfig:
    kinematics: BicycleParams = BicycleParams()
    costs: CostWeights = CostWeights()
    attack: AttackConfig = AttackConfig()
    training: TrainConfig = TrainConfig()
    gains: ControllerGains = ControllerGains()
    ego: EgoConfig = EgoConfig()
    benchmark: BenchmarkConfig = BenchmarkConfig()

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


_SECTIONS = {
    "kinematics": BicycleParams,
    "costs": CostWeights,
    "attack": AttackConfig,
    "training": TrainConfig,
    "gains": ControllerGains,
    "ego": EgoConfig,
    "benchmark": BenchmarkConfig,
}


def _build_section(cls, values: dict, section: str):
    fields = {f.name for f in dataclasses.fields(cls)}
    unknown = set(values) - fields
    if unknown:
        raise ValueError(
            f"unknown key(s) {sorted(unknown)} in config section "
            f"[{section}]")
    return cls(**values)


def load_config(path: Optional[str] = None) -> SimConfig:
    """Read a config file (TOML or JSON by extension); None gives defaults."""
    if path is None:
        return SimConfig()
    p = Path(path)
    if p.suffix == ".json":
        data = json.loads(p.read_text(encoding="utf-8"))
    else:
        with open(p, "rb") as fh:
            data = _toml.load(fh)
    if not isinstance(data, dict):
        raise ValueError("config root must be a table/object")
    unknown = set(data) - set(_SECTIONS)
    if unknown:
        raise ValueError(f"unknown config section(s) {sorted(unknown)}")
    kwargs = {name: _build_section(cls, data.get(name, {}), name)
              for name, cls in _SECTIONS.items()}
    return SimConfig(**kwargs)
