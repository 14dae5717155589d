"""End-to-end benchmark machinery: attack sweeps with aggregated metrics,
solvability filtering, failure clustering, the fine-tuning experiment, and
trace/plot outputs.

Reports are pure functions of (specs, config, seed) in single-threaded mode;
rows are sorted by (scenario_id, method) before aggregation so parallel runs
merge deterministically. Wall-clock columns (s/it, t50, wall_time,
time_to_success) vary with hardware and are excluded from bit-exactness.
"""

from __future__ import annotations

import csv
import dataclasses
import json
import math
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from advtraffic.agents import ExpertEgo, PolicyEgo, PolicyModel, RuleBasedEgo
from advtraffic.attacks import AttackConfig, AttackOutcome, attack, replay
from advtraffic.config import SimConfig
from advtraffic.errors import IoFailure, TooFewScenarios
from advtraffic.geometry import MapModel
from advtraffic.rollout import RolloutResult
from advtraffic.scenario import (ActionPlan, ScenarioSpec, VerdictKind,
                                 load_scenario, save_scenario,
                                 serialize_scenario)
from advtraffic.training import (TAG_CRITICAL, TAG_REGULAR, DemoDataset,
                                 TrainConfig, collect_demos, fine_tune)

CLUSTER_COUNT = 6
HELDOUT_FRACTION = 0.2


def build_ego(cfg: SimConfig, kind: Optional[str] = None,
              policy: Optional[PolicyModel] = None):
    """Instantiate the ego agent described by the config."""
    kind = kind or cfg.ego.kind
    common = dict(params=cfg.kinematics, gains=cfg.gains,
                  cruise=cfg.ego.cruise_speed)
    if kind == "rule_based":
        return RuleBasedEgo(**common)
    if kind == "expert":
        return ExpertEgo(**common)
    if kind == "policy":
        if policy is None:
            if cfg.ego.policy_path is None:
                raise ValueError("policy ego requires ego.policy_path")
            policy = PolicyModel.load(cfg.ego.policy_path)
        return PolicyEgo(policy, gains=cfg.gains)
    raise ValueError(f"unknown ego kind {kind!r}")


@dataclass
class ScenarioRow:
    scenario_id: str
    method: str
    density: int
    success: bool
    iterations: int
    best_cost: float
    verdict: str
    time_index: Optional[int]
    wall_time: float
    time_to_success: Optional[float]
    plan_path: str = ""


@dataclass
class BenchmarkReport:
    rows: List[ScenarioRow]
    cells: Dict[Tuple[str, int], dict]
    overall: Dict[str, dict]
    config_snapshot: dict
    seed: int

    def to_json_dict(self) -> dict:
        return {
            "seed": self.seed,
            "config": self.config_snapshot,
            "cells": [{"method": m, "density": d, **vals}
                      for (m, d), vals in sorted(self.cells.items())],
            "overall": self.overall,
            "scenarios": [dataclasses.asdict(r) for r in self.rows],
        }


def _aggregate_cell(rows: Sequence[ScenarioRow]) -> dict:
    n = len(rows)
    successes = sum(r.success for r in rows)
    cr = 100.0 * successes / n if n else 0.0
    need = math.ceil(0.5 * n)
    times = sorted(r.time_to_success for r in rows
                   if r.time_to_success is not None)
    # Wall time at which the running success count reaches half the cell.
    t50 = times[need - 1] if need and len(times) >= need else None
    total_iters = sum(r.iterations for r in rows)
    total_time = sum(r.wall_time for r in rows)
    s_per_it = total_time / total_iters if total_iters else None
    return {"n": n, "successes": successes, "cr": cr, "t50": t50,
            "s_per_it": s_per_it}


def _attack_one(spec: ScenarioSpec, method: str, cfg: SimConfig,
                map_model: MapModel, plans_dir: Optional[Path],
                policy: Optional[PolicyModel]) -> ScenarioRow:
    ego = build_ego(cfg, policy=policy)
    attack_cfg = dataclasses.replace(cfg.attack, method=method)
    outcome = attack(spec, ego, attack_cfg, map_model,
                     params=cfg.kinematics, weights=cfg.costs)
    check = replay(spec, outcome.best_plan, ego, map_model,
                   params=cfg.kinematics, weights=cfg.costs)
    plan_path = ""
    if plans_dir is not None:
        plans_dir.mkdir(parents=True, exist_ok=True)
        safe_id = spec.scenario_id.replace("/", "__") or "scenario"
        plan_path = str(plans_dir / f"{safe_id}__{method}.json")
        save_scenario(spec.with_plan(outcome.best_plan), plan_path)
    return ScenarioRow(
        scenario_id=spec.scenario_id,
        method=method,
        density=spec.num_adversaries,
        success=outcome.success,
        iterations=outcome.iterations,
        best_cost=outcome.best_cost,
        verdict=check.verdict.kind.value,
        time_index=check.verdict.time_index,
        wall_time=outcome.wall_time,
        time_to_success=outcome.time_to_success,
        plan_path=plan_path,
    )


_WORKER_STATE: dict = {}


def _init_worker(map_dicts, cfg, plans_dir, policy_dict):
    _WORKER_STATE["maps"] = {
        mid: MapModel(map_id=mid,
                      drivable=[np.array(p) for p in md["drivable"]],
                      routes={k: np.array(v)
                              for k, v in md["routes"].items()})
        for mid, md in map_dicts.items()}
    _WORKER_STATE["cfg"] = cfg
    _WORKER_STATE["plans_dir"] = plans_dir
    _WORKER_STATE["policy"] = (PolicyModel(weights=policy_dict)
                               if policy_dict else None)


def _worker_task(args):
    spec_bytes, method = args
    from advtraffic.scenario import deserialize_scenario

    spec = deserialize_scenario(spec_bytes)
    cfg = _WORKER_STATE["cfg"]
    return _attack_one(spec, method, cfg,
                       _WORKER_STATE["maps"][spec.map_id],
                       _WORKER_STATE["plans_dir"], _WORKER_STATE["policy"])


def run_benchmark(specs: Sequence[ScenarioSpec], methods: Sequence[str],
                  cfg: SimConfig, maps: Dict[str, MapModel],
                  out_dir: Optional[str] = None, jobs: int = 1,
                  seed: int = 0,
                  policy: Optional[PolicyModel] = None) -> BenchmarkReport:
    """Attack every (method, spec) pair and aggregate CR / t50 / s-per-it."""
    if not specs or not methods:
        raise ValueError("need at least one spec and one method")
    out_path = Path(out_dir) if out_dir else None
    plans_dir = out_path / "plans" if out_path else None

    tasks = [(spec, method) for spec in specs for method in methods]
    rows: List[ScenarioRow] = []
    if jobs > 1:
        map_dicts = {mid: mm.to_json_dict() for mid, mm in maps.items()}
        policy_dict = policy.to_dict() if policy else None
        with ProcessPoolExecutor(
                max_workers=jobs, initializer=_init_worker,
                initargs=(map_dicts, cfg, plans_dir, policy_dict)) as pool:
            payload = [(serialize_scenario(s), m) for s, m in tasks]
            rows = list(pool.map(_worker_task, payload))
    else:
        for spec, method in tasks:
            rows.append(_attack_one(spec, method, cfg, maps[spec.map_id],
                                    plans_dir, policy))

    rows.sort(key=lambda r: (r.scenario_id, r.method))
    cells = {}
    for method in sorted(set(methods)):
        for density in sorted({r.density for r in rows}):
            cell_rows = [r for r in rows
                         if r.method == method and r.density == density]
            if cell_rows:
                cells[(method, density)] = _aggregate_cell(cell_rows)
    overall = {method: _aggregate_cell([r for r in rows if r.method == method])
               for method in sorted(set(methods))}

    snapshot = cfg.to_dict()
    report = BenchmarkReport(rows=rows, cells=cells, overall=overall,
                             config_snapshot=snapshot, seed=seed)
    if out_path:
        write_report(report, out_path)
    return report


def _fmt(value) -> str:
    if value is None:
        return "-"
    if isinstance(value, bool):
        return str(int(value))
    if isinstance(value, float):
        return f"{value:.6g}"
    return str(value)


def write_report(report: BenchmarkReport, out_dir) -> None:
    out = Path(out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
        with open(out / "summary.csv", "w", newline="",
                  encoding="utf-8") as fh:
            wr = csv.writer(fh)
            wr.writerow(["method", "density", "n", "successes", "cr",
                         "t50_s", "s_per_it"])
            for (method, density), vals in sorted(report.cells.items()):
                wr.writerow([method, density, vals["n"], vals["successes"],
                             _fmt(vals["cr"]), _fmt(vals["t50"]),
                             _fmt(vals["s_per_it"])])
            for method, vals in sorted(report.overall.items()):
                wr.writerow([method, "overall", vals["n"],
                             vals["successes"], _fmt(vals["cr"]),
                             _fmt(vals["t50"]), _fmt(vals["s_per_it"])])
        with open(out / "scenarios.csv", "w", newline="",
                  encoding="utf-8") as fh:
            wr = csv.writer(fh)
            wr.writerow(["scenario_id", "method", "density", "success",
                         "iterations", "best_cost", "verdict", "time_index",
                         "wall_time", "time_to_success", "plan_path"])
            for r in report.rows:
                wr.writerow([r.scenario_id, r.method, r.density,
                             int(r.success), r.iterations, _fmt(r.best_cost),
                             r.verdict, _fmt(r.time_index),
                             _fmt(r.wall_time), _fmt(r.time_to_success),
                             r.plan_path])
        with open(out / "report.json", "w", encoding="utf-8") as fh:
            json.dump(report.to_json_dict(), fh, indent=1)
    except OSError as exc:
        raise IoFailure(f"cannot write report to {out}: {exc}") from exc


# ---------------------------------------------------------------------------
# Solvability filtering


def filter_solvable(outcomes: Sequence[Tuple[ScenarioSpec, AttackOutcome]],
                    cfg: SimConfig, maps: Dict[str, MapModel]) -> dict:
    """Partition attack outcomes by replaying successes with the expert.

    A collision scenario is solvable when the privileged expert, facing the
    same fixed adversary plan, finishes without an ego collision.
    """
    parts = {"collision_solvable": [], "collision_not_solvable": [],
             "no_collision": []}
    for spec, outcome in outcomes:
        if not outcome.success:
            parts["no_collision"].append((spec, outcome))
            continue
        expert = build_ego(cfg, kind="expert")
        result = replay(spec, outcome.best_plan, expert, maps[spec.map_id],
                        params=cfg.kinematics, weights=cfg.costs)
        if result.verdict.kind == VerdictKind.EGO_COLLISION:
            parts["collision_not_solvable"].append((spec, outcome))
        else:
            parts["collision_solvable"].append((spec, outcome))
    return parts


# ---------------------------------------------------------------------------
# Failure clustering


@dataclass
class ClusterReport:
    scenario_ids: List[str]
    features: np.ndarray
    assignments: np.ndarray
    centroids: np.ndarray
    counts: List[int]
    wcss: float
    bucket_counts: Dict[str, int]


def impact_features(result: RolloutResult) -> np.ndarray:
    """Collision descriptor: relative heading (sin, cos), bearing of the
    impact point in the ego frame (sin, cos), ego speed, adversary speed."""
    verdict = result.verdict
    if verdict.kind != VerdictKind.EGO_COLLISION:
        raise ValueError("impact features need an ego collision")
    t = verdict.time_index
    other = [i for i in verdict.agents_involved if i != 0][0]
    ego = result.states[t, 0]
    adv = result.states[t, other]
    rel_heading = adv[2] - ego[2]
    impact = 0.5 * (ego[:2] + adv[:2])
    d = impact - ego[:2]
    bearing = math.atan2(-math.sin(ego[2]) * d[0] + math.cos(ego[2]) * d[1],
                         math.cos(ego[2]) * d[0] + math.sin(ego[2]) * d[1])
    return np.array([math.sin(rel_heading), math.cos(rel_heading),
                     math.sin(bearing), math.cos(bearing), ego[3], adv[3]])


def _kmeans_farthest_init(x: np.ndarray, k: int, rng) -> np.ndarray:
    centers = [int(rng.integers(len(x)))]
    d2 = ((x - x[centers[0]]) ** 2).sum(axis=1)
    for _ in range(k - 1):
        nxt = int(np.argmax(d2))
        centers.append(nxt)
        d2 = np.minimum(d2, ((x - x[nxt]) ** 2).sum(axis=1))
    return x[centers].copy()


def kmeans(x: np.ndarray, k: int, seed: int = 0, iterations: int = 100):
    """Greedy farthest-point seeded Lloyd iteration; deterministic."""
    rng = np.random.default_rng(seed)
    centroids = _kmeans_farthest_init(x, k, rng)
    assign = np.full(len(x), -1, dtype=int)
    for _ in range(iterations):
        d2 = ((x[:, None, :] - centroids[None, :, :]) ** 2).sum(axis=2)
        new_assign = np.argmin(d2, axis=1)
        if (new_assign == assign).all():
            break
        assign = new_assign
        for j in range(k):
            members = x[assign == j]
            if len(members):
                centroids[j] = members.mean(axis=0)
    wcss = float(((x - centroids[assign]) ** 2).sum())
    return assign, centroids, wcss


def cluster_failures(solvable: Sequence[Tuple[ScenarioSpec, AttackOutcome]],
                     cfg: SimConfig, maps: Dict[str, MapModel],
                     k: int = CLUSTER_COUNT, seed: int = 0,
                     bucket_counts: Optional[Dict[str, int]] = None,
                     policy: Optional[PolicyModel] = None) -> ClusterReport:
    """K-means over standardized per-collision features of the solvable set."""
    if len(solvable) < k:
        raise TooFewScenarios(
            f"clustering needs at least {k} scenarios, got {len(solvable)}")
    ids, feats = [], []
    for spec, outcome in solvable:
        ego = build_ego(cfg, policy=policy)
        result = replay(spec, outcome.best_plan, ego, maps[spec.map_id],
                        params=cfg.kinematics, weights=cfg.costs)
        feats.append(impact_features(result))
        ids.append(spec.scenario_id)
    x = np.array(feats)
    mean = x.mean(axis=0)
    std = x.std(axis=0)
    std[std < 1e-9] = 1.0
    z = (x - mean) / std

    assign, centroids, wcss = kmeans(z, k, seed=seed)
    counts = [int((assign == j).sum()) for j in range(k)]
    return ClusterReport(scenario_ids=ids, features=x, assignments=assign,
                         centroids=centroids, counts=counts, wcss=wcss,
                         bucket_counts=dict(bucket_counts or {}))


def write_cluster_report(report: ClusterReport, out_dir) -> None:
    out = Path(out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
        with open(out / "clusters.csv", "w", newline="",
                  encoding="utf-8") as fh:
            wr = csv.writer(fh)
            wr.writerow(["scenario_id", "cluster"])
            for sid, a in zip(report.scenario_ids, report.assignments):
                wr.writerow([sid, int(a)])
        payload = {
            "counts": report.counts,
            "buckets": report.bucket_counts,
            "wcss": report.wcss,
            "centroids": report.centroids.tolist(),
        }
        with open(out / "clusters.json", "w", encoding="utf-8") as fh:
            json.dump(payload, fh, indent=1)
    except OSError as exc:
        raise IoFailure(f"cannot write cluster report to {out}: {exc}") \
            from exc


# ---------------------------------------------------------------------------
# Robustness experiment


def split_by_start_location(cases: Sequence[Tuple[ScenarioSpec,
                                                  AttackOutcome]],
                            heldout_fraction: float = HELDOUT_FRACTION,
                            seed: int = 0):
    """Deterministic split keeping equal ego start locations together."""
    groups: Dict[tuple, list] = {}
    for case in cases:
        pos = case[0].initial_state.agents[0].position
        key = (round(pos[0] * 2) / 2, round(pos[1] * 2) / 2,
               case[0].map_id)
        groups.setdefault(key, []).append(case)
    keys = sorted(groups)
    rng = np.random.default_rng(seed)
    order = [keys[i] for i in rng.permutation(len(keys))]
    target = heldout_fraction * len(cases)
    heldout, train = [], []
    taken = 0
    for key in order:
        if taken < target:
            heldout.extend(groups[key])
            taken += len(groups[key])
        else:
            train.extend(groups[key])
    return train, heldout


def robustness_experiment(train_cases, heldout_cases, base_model: PolicyModel,
                          regular_demos: DemoDataset, cfg: SimConfig,
                          maps: Dict[str, MapModel]) -> List[dict]:
    """Fine-tune on regular / critical / mixed data and evaluate each
    variant's collision rate on the held-out fixed plans."""
    crit_specs = [spec.with_plan(outcome.best_plan)
                  for spec, outcome in train_cases]
    crit_demos = collect_demos(crit_specs, maps, driver="expert",
                               tags=TAG_CRITICAL, params=cfg.kinematics,
                               gains=cfg.gains, cruise=cfg.ego.cruise_speed)
    both = DemoDataset.concatenate([regular_demos, crit_demos])

    tcfg = cfg.training
    variants = {
        "no_finetune": base_model,
        "regular_only": fine_tune(base_model, regular_demos,
                                  dataclasses.replace(tcfg, mix_ratio=0.0))[0],
        "critical_only": fine_tune(base_model, crit_demos,
                                   dataclasses.replace(tcfg,
                                                       mix_ratio=1.0))[0],
        "mixed": fine_tune(base_model, both, tcfg)[0],
    }

    rows = []
    for name in ("no_finetune", "regular_only", "critical_only", "mixed"):
        model = variants[name]
        hits = 0
        for spec, outcome in heldout_cases:
            ego = PolicyEgo(model, gains=cfg.gains)
            result = replay(spec, outcome.best_plan, ego,
                            maps[spec.map_id], params=cfg.kinematics,
                            weights=cfg.costs)
            hits += result.verdict.kind == VerdictKind.EGO_COLLISION
        n = len(heldout_cases)
        rows.append({"variant": name, "heldout_n": n,
                     "heldout_collisions": hits,
                     "heldout_cr": 100.0 * hits / n if n else 0.0})
    return rows, variants


def write_robustness_table(rows: Sequence[dict], path) -> None:
    try:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            wr = csv.writer(fh)
            wr.writerow(["variant", "heldout_n", "heldout_collisions",
                         "heldout_cr"])
            for r in rows:
                wr.writerow([r["variant"], r["heldout_n"],
                             r["heldout_collisions"],
                             _fmt(r["heldout_cr"])])
    except OSError as exc:
        raise IoFailure(f"cannot write robustness table: {exc}") from exc


# ---------------------------------------------------------------------------
# Traces


def emit_traces(result: RolloutResult, map_model: MapModel, out_dir,
                stem: str = "trace") -> Tuple[str, str]:
    """Write the per-timestep CSV and an overhead SVG plot."""
    out = Path(out_dir)
    csv_path = out / f"{stem}.csv"
    svg_path = out / f"{stem}.svg"
    try:
        out.mkdir(parents=True, exist_ok=True)
        with open(csv_path, "w", newline="", encoding="utf-8") as fh:
            wr = csv.writer(fh)
            wr.writerow(["t", "agent", "x", "y", "heading", "speed"])
            for t in range(len(result.states)):
                for i in range(len(result.dims)):
                    s = result.states[t, i]
                    wr.writerow([t, i, _fmt(s[0]), _fmt(s[1]), _fmt(s[2]),
                                 _fmt(s[3])])
        _plot_trace(result, map_model, svg_path)
    except OSError as exc:
        raise IoFailure(f"cannot write traces to {out}: {exc}") from exc
    return str(csv_path), str(svg_path)


def _plot_trace(result: RolloutResult, map_model: MapModel, path) -> None:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(7, 7))
    for poly in map_model.drivable:
        closed = np.vstack([poly, poly[:1]])
        ax.fill(closed[:, 0], closed[:, 1], color="0.9", zorder=0)
        ax.plot(closed[:, 0], closed[:, 1], color="0.6", lw=0.8, zorder=1)
    m = len(result.dims)
    for i in range(m):
        xy = result.states[:, i, :2]
        color = "tab:red" if i == 0 else "tab:blue"
        ax.plot(xy[:, 0], xy[:, 1], color=color, lw=1.5, zorder=2)
        ax.plot(xy[0, 0], xy[0, 1], "o", color=color, ms=4, zorder=3)
    verdict = result.verdict
    if verdict.kind != VerdictKind.NO_COLLISION and verdict.agents_involved:
        t = verdict.time_index
        a, b = verdict.agents_involved
        pt = 0.5 * (result.states[t, a, :2] + result.states[t, b, :2])
        ax.plot(pt[0], pt[1], "x", color="black", ms=12, mew=3, zorder=4)
    ax.set_aspect("equal")
    ax.set_title(f"{result.spec.scenario_id or result.spec.map_id}: "
                 f"{verdict.kind.value}")
    fig.savefig(path, format="svg", bbox_inches="tight")
    plt.close(fig)
