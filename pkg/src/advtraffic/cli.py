"""Command-line entry point.

Subcommands: genmaps, genbench, attack, benchmark, filter, cluster,
collect, train, finetune, robustness, trace. Global flags: --config,
--seed, --jobs, --out.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import sys
from pathlib import Path

import numpy as np

from advtraffic import backend_name
from advtraffic.attacks import ATTACK_METHODS, AttackOutcome, attack, replay
from advtraffic.config import SimConfig, load_config
from advtraffic.geometry import MapModel
from advtraffic.harness import (build_ego, cluster_failures, emit_traces,
                                filter_solvable, robustness_experiment,
                                run_benchmark, split_by_start_location,
                                write_cluster_report, write_report,
                                write_robustness_table)
from advtraffic.mapgen import (MAP_KINDS, MapTemplate,
                               default_benchmark_templates, generate_map,
                               sample_benchmark)
from advtraffic.rollout import MODE_NO_RECORD, rollout
from advtraffic.scenario import ActionPlan, load_scenario, save_scenario
from advtraffic.training import (DemoDataset, TrainConfig, collect_demos,
                                 fine_tune, train_policy)
from advtraffic.agents import PolicyModel

MANIFEST_VERSION = 1


def _add_common(parser):
    parser.add_argument("--config", default=None,
                        help="TOML or JSON config file")
    parser.add_argument("--seed", type=int, default=0)
    parser.add_argument("--jobs", type=int, default=1)
    parser.add_argument("--out", default="out", help="output directory")


def write_manifest(path: Path, map_paths: dict, scenario_paths: list) -> None:
    payload = {
        "version": MANIFEST_VERSION,
        "maps": {k: str(v) for k, v in map_paths.items()},
        "scenarios": [str(p) for p in scenario_paths],
    }
    path.write_text(json.dumps(payload, indent=1), encoding="utf-8")


def load_manifest(path):
    base = Path(path).parent
    data = json.loads(Path(path).read_text(encoding="utf-8"))
    maps = {mid: MapModel.load(base / rel if not Path(rel).is_absolute()
                               else rel)
            for mid, rel in data["maps"].items()}
    specs = [load_scenario(base / rel if not Path(rel).is_absolute() else rel)
             for rel in data["scenarios"]]
    return maps, specs


def cmd_genmaps(args, cfg: SimConfig) -> int:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    kinds = args.kinds.split(",") if args.kinds else None
    templates = ([MapTemplate(kind=k, seed=args.seed) for k in kinds]
                 if kinds else default_benchmark_templates(seed=args.seed))
    for tpl in templates:
        m = generate_map(tpl)
        path = out / f"{m.map_id}.json"
        m.save(path)
        print(f"wrote {path} ({len(m.routes)} routes)")
    return 0


def cmd_genbench(args, cfg: SimConfig) -> int:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    map_files = sorted(Path(args.maps).glob("*.json")) \
        if Path(args.maps).is_dir() else [Path(p) for p in
                                          args.maps.split(",")]
    maps = [MapModel.load(p) for p in map_files]
    densities = [int(d) for d in args.densities.split(",")]
    specs = sample_benchmark(maps, args.routes_per_map, densities,
                             seed=args.seed,
                             horizon=cfg.benchmark.horizon,
                             dt=cfg.benchmark.dt,
                             proximity_radius=cfg.benchmark.proximity_radius,
                             params=cfg.kinematics, gains=cfg.gains,
                             cruise=cfg.ego.cruise_speed)
    scenario_paths = []
    for spec in specs:
        name = spec.scenario_id.replace("/", "__") + ".json"
        save_scenario(spec, out / name)
        scenario_paths.append(name)
    map_paths = {}
    for p, m in zip(map_files, maps):
        target = out / Path(p).name
        if Path(p).resolve() != target.resolve():
            target.write_text(Path(p).read_text(encoding="utf-8"),
                              encoding="utf-8")
        map_paths[m.map_id] = Path(p).name
    write_manifest(out / "manifest.json", map_paths, scenario_paths)
    print(f"wrote {len(specs)} scenarios and manifest to {out}")
    return 0


def _outcome_record(outcome: AttackOutcome, plan_path: str) -> dict:
    rec = dataclasses.asdict(outcome)
    rec.pop("best_plan")
    rec["plan_path"] = plan_path
    return rec


def cmd_attack(args, cfg: SimConfig) -> int:
    spec = load_scenario(args.scenario)
    maps = {spec.map_id: MapModel.load(args.map)}
    ego = build_ego(cfg)
    attack_cfg = dataclasses.replace(cfg.attack, method=args.method,
                                     seed=args.seed)
    outcome = attack(spec, ego, attack_cfg, maps[spec.map_id],
                     params=cfg.kinematics, weights=cfg.costs)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    stem = (spec.scenario_id or "scenario").replace("/", "__")
    plan_path = out / f"{stem}__{args.method}_plan.json"
    save_scenario(spec.with_plan(outcome.best_plan), plan_path)
    record = _outcome_record(outcome, str(plan_path))
    (out / f"{stem}__{args.method}.json").write_text(
        json.dumps(record, indent=1), encoding="utf-8")
    print(f"{args.method}: success={outcome.success} "
          f"iterations={outcome.iterations} wall={outcome.wall_time:.2f}s")
    return 0


def cmd_benchmark(args, cfg: SimConfig) -> int:
    maps, specs = load_manifest(args.manifest)
    methods = args.methods.split(",")
    for m in methods:
        if m not in ATTACK_METHODS:
            raise SystemExit(f"unknown method {m}")
    report = run_benchmark(specs, methods, cfg, maps, out_dir=args.out,
                           jobs=args.jobs, seed=args.seed)
    for (method, density), vals in sorted(report.cells.items()):
        t50 = f"{vals['t50']:.2f}" if vals["t50"] is not None else "-"
        spi = f"{vals['s_per_it']:.4g}" if vals["s_per_it"] is not None \
            else "-"
        print(f"{method:14s} d={density}  CR={vals['cr']:6.2f}%  "
              f"t50={t50}s  s/it={spi}")
    return 0


def _load_cases(filtered_path):
    data = json.loads(Path(filtered_path).read_text(encoding="utf-8"))
    cases = {}
    for bucket, entries in data.items():
        rows = []
        for e in entries:
            spec = load_scenario(e["plan_path"])
            outcome = AttackOutcome(
                success=bucket.startswith("collision"),
                best_plan=spec.initial_plan, best_cost=float("nan"),
                iterations=0, wall_time=0.0, time_to_success=None,
                cost_trace=[], method=e.get("method", ""))
            rows.append((spec, outcome))
        cases[bucket] = rows
    return cases


def cmd_filter(args, cfg: SimConfig) -> int:
    report = json.loads((Path(args.report) / "report.json")
                        .read_text(encoding="utf-8"))
    maps, _ = load_manifest(args.manifest)
    outcomes = []
    for row in report["scenarios"]:
        if args.method and row["method"] != args.method:
            continue
        spec = load_scenario(row["plan_path"])
        outcomes.append((spec, AttackOutcome(
            success=bool(row["success"]), best_plan=spec.initial_plan,
            best_cost=float("nan"), iterations=row["iterations"],
            wall_time=row["wall_time"],
            time_to_success=row["time_to_success"], cost_trace=[],
            method=row["method"])))
    parts = filter_solvable(outcomes, cfg, maps)
    payload = {bucket: [{"scenario_id": s.scenario_id, "method": o.method,
                         "plan_path": _plan_path_of(report, s, o)}
                        for s, o in rows]
               for bucket, rows in parts.items()}
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "filtered.json").write_text(json.dumps(payload, indent=1),
                                       encoding="utf-8")
    counts = {k: len(v) for k, v in parts.items()}
    print(f"filtered: {counts}")
    return 0


def _plan_path_of(report, spec, outcome):
    for row in report["scenarios"]:
        if row["scenario_id"] == spec.scenario_id \
                and row["method"] == outcome.method:
            return row["plan_path"]
    raise KeyError(spec.scenario_id)


def cmd_cluster(args, cfg: SimConfig) -> int:
    maps, _ = load_manifest(args.manifest)
    cases = _load_cases(args.filtered)
    solvable = cases.get("collision_solvable", [])
    buckets = {"no_collision": len(cases.get("no_collision", [])),
               "not_solvable": len(cases.get("collision_not_solvable", []))}
    report = cluster_failures(solvable, cfg, maps, k=args.k, seed=args.seed,
                              bucket_counts=buckets)
    write_cluster_report(report, args.out)
    print(f"clusters: {report.counts} buckets: {report.bucket_counts}")
    return 0


def cmd_collect(args, cfg: SimConfig) -> int:
    maps, specs = load_manifest(args.manifest)
    data = collect_demos(specs, maps, driver=args.driver, tags=args.tag,
                         params=cfg.kinematics, gains=cfg.gains,
                         cruise=cfg.ego.cruise_speed)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    data.save(out)
    print(f"wrote {len(data)} pairs to {out}")
    return 0


def cmd_train(args, cfg: SimConfig) -> int:
    data = DemoDataset.load(args.demos)
    tcfg = dataclasses.replace(cfg.training, seed=args.seed)
    model, losses = train_policy(data, tcfg)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    model.save(out)
    print(f"trained on {len(data)} pairs; "
          f"final smoothed loss {np.mean(losses[-20:]):.4f}; wrote {out}")
    return 0


def cmd_finetune(args, cfg: SimConfig) -> int:
    model = PolicyModel.load(args.base)
    parts = [DemoDataset.load(p) for p in args.demos.split(",")]
    data = DemoDataset.concatenate(parts)
    tcfg = dataclasses.replace(cfg.training, seed=args.seed,
                               mix_ratio=args.mix)
    tuned, losses = fine_tune(model, data, tcfg)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    tuned.save(out)
    print(f"fine-tuned on {len(data)} pairs; "
          f"final smoothed loss {np.mean(losses[-20:]):.4f}; wrote {out}")
    return 0


def cmd_robustness(args, cfg: SimConfig) -> int:
    maps, _ = load_manifest(args.manifest)
    cases = _load_cases(args.filtered)["collision_solvable"]
    train_cases, heldout_cases = split_by_start_location(
        cases, heldout_fraction=args.heldout_fraction, seed=args.seed)
    base = PolicyModel.load(args.base)
    regular = DemoDataset.load(args.regular_demos)
    rows, variants = robustness_experiment(train_cases, heldout_cases, base,
                                           regular, cfg, maps)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_robustness_table(rows, out / "robustness.csv")
    for name, model in variants.items():
        if name != "no_finetune":
            model.save(out / f"policy_{name}.json")
    for r in rows:
        print(f"{r['variant']:14s} heldout CR {r['heldout_cr']:6.2f}% "
              f"({r['heldout_collisions']}/{r['heldout_n']})")
    return 0


def cmd_trace(args, cfg: SimConfig) -> int:
    spec = load_scenario(args.scenario)
    map_model = MapModel.load(args.map)
    ego = build_ego(cfg)
    result = rollout(spec, ego, map_model, mode=MODE_NO_RECORD,
                     params=cfg.kinematics, weights=cfg.costs)
    stem = (spec.scenario_id or "trace").replace("/", "__")
    csv_path, svg_path = emit_traces(result, map_model, args.out, stem=stem)
    print(f"verdict {result.verdict.kind.value}; wrote {csv_path}, "
          f"{svg_path}")
    return 0


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="advtraffic",
        description="Traffic micro-simulation with adversarial scenario "
                    "generation (kernel backend: %s)" % backend_name())
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("genmaps", help="generate map JSON files")
    p.add_argument("--kinds", default=None,
                   help=f"comma list from {','.join(MAP_KINDS)}")
    _add_common(p)
    p.set_defaults(func=cmd_genmaps)

    p = sub.add_parser("genbench", help="sample the benchmark scenario set")
    p.add_argument("--maps", required=True,
                   help="directory of map JSONs or comma list")
    p.add_argument("--routes-per-map", type=int, default=2)
    p.add_argument("--densities", default="1,2,4")
    _add_common(p)
    p.set_defaults(func=cmd_genbench)

    p = sub.add_parser("attack", help="attack one scenario")
    p.add_argument("--scenario", required=True)
    p.add_argument("--map", required=True, help="map JSON for the scenario")
    p.add_argument("--method", default="king_direct",
                   choices=ATTACK_METHODS)
    _add_common(p)
    p.set_defaults(func=cmd_attack)

    p = sub.add_parser("benchmark", help="run attack methods over a manifest")
    p.add_argument("--manifest", required=True)
    p.add_argument("--methods",
                   default="king_direct,random_search,simba,cma_es")
    _add_common(p)
    p.set_defaults(func=cmd_benchmark)

    p = sub.add_parser("filter", help="solvability filtering of a report")
    p.add_argument("--report", required=True,
                   help="benchmark output directory")
    p.add_argument("--manifest", required=True)
    p.add_argument("--method", default=None,
                   help="restrict to one attack method")
    _add_common(p)
    p.set_defaults(func=cmd_filter)

    p = sub.add_parser("cluster", help="k-means over solvable collisions")
    p.add_argument("--filtered", required=True, help="filtered.json path")
    p.add_argument("--manifest", required=True)
    p.add_argument("--k", type=int, default=6)
    _add_common(p)
    p.set_defaults(func=cmd_cluster)

    p = sub.add_parser("collect", help="collect demonstration pairs")
    p.add_argument("--manifest", required=True)
    p.add_argument("--driver", default="expert",
                   choices=["expert", "rule_based"])
    p.add_argument("--tag", default="regular")
    _add_common(p)
    p.set_defaults(func=cmd_collect)

    p = sub.add_parser("train", help="train the waypoint policy")
    p.add_argument("--demos", required=True)
    _add_common(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("finetune", help="fine-tune an existing policy")
    p.add_argument("--base", required=True)
    p.add_argument("--demos", required=True,
                   help="comma list of demo JSONL files")
    p.add_argument("--mix", type=float, default=0.5)
    _add_common(p)
    p.set_defaults(func=cmd_finetune)

    p = sub.add_parser("robustness", help="fine-tuning experiment")
    p.add_argument("--filtered", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--base", required=True)
    p.add_argument("--regular-demos", required=True)
    p.add_argument("--heldout-fraction", type=float, default=0.2)
    _add_common(p)
    p.set_defaults(func=cmd_robustness)

    p = sub.add_parser("trace", help="roll out one scenario and plot it")
    p.add_argument("--scenario", required=True)
    p.add_argument("--map", required=True)
    _add_common(p)
    p.set_defaults(func=cmd_trace)

    args = parser.parse_args(argv)
    cfg = load_config(args.config)
    return args.func(args, cfg)


if __name__ == "__main__":
    sys.exit(main())
