#!/usr/bin/env python3
"""Benchmark the compiled kernels against the pure-numpy fallback.

Times the three hot kernels on representative batch sizes plus a full
closed-loop rollout, and reports the speedup together with the maximum
numerical deviation between backends.

Run:  python benchmarks/bench_backends.py [--repeats 200]
"""

import argparse
import time

import numpy as np

from advtraffic import _kernels_py

try:
    from advtraffic import _kernels
except ImportError:
    _kernels = None


def _time(fn, repeats):
    fn()  # warm up
    t0 = time.perf_counter()
    for _ in range(repeats):
        fn()
    return (time.perf_counter() - t0) / repeats


def _cases():
    rng = np.random.default_rng(0)

    m = 5
    states = np.abs(rng.normal(0, 5, (m, 4)))
    actions = rng.uniform(-1, 1, (m, 2))

    def step(mod, sink):
        out, js, ja = sink
        mod.step_batch(states, actions, 1.3, 1.3, 0.7, 4.0, 8.0, 0.25,
                       out, js, ja)

    yield ("step_batch+jacobians (M=5)", step,
           lambda: (np.empty((m, 4)), np.empty((m, 4, 4)),
                    np.empty((m, 4, 2))))

    k = 256
    poses_a = np.column_stack([rng.uniform(-30, 30, (k, 2)),
                               rng.uniform(0, 2 * np.pi, k)])
    poses_b = np.column_stack([rng.uniform(-30, 30, (k, 2)),
                               rng.uniform(0, 2 * np.pi, k)])
    dims = np.tile([2.45, 1.0], (k, 1))

    def boxd(mod, sink):
        d, wa, wb = sink
        mod.box_distance_batch(poses_a, dims, poses_b, dims, d, wa, wb)

    yield (f"box_distance_batch (K={k})", boxd,
           lambda: (np.empty(k), np.empty((k, 2)), np.empty((k, 2))))

    grid = rng.normal(0, 3, (400, 400))
    pts = rng.uniform(0, 70, (256, 2))

    def sdf(mod, sink):
        v, g = sink
        mod.sdf_batch(grid, 0.0, 0.0, 0.2, pts, v, g)

    yield ("sdf_batch+grad (K=256)", sdf,
           lambda: (np.empty(256), np.empty((256, 2))))


def bench_kernels(repeats: int):
    print(f"{'kernel':30s} {'python':>12s} {'compiled':>12s} "
          f"{'speedup':>9s} {'max |diff|':>12s}")
    for name, call, make_sink in _cases():
        sink_py = make_sink()
        t_py = _time(lambda: call(_kernels_py, sink_py), repeats)
        if _kernels is None:
            print(f"{name:30s} {t_py * 1e6:10.1f}us {'n/a':>12s}")
            continue
        sink_cy = make_sink()
        t_cy = _time(lambda: call(_kernels, sink_cy), repeats)
        diff = max(float(np.max(np.abs(a - b)))
                   for a, b in zip(sink_py, sink_cy))
        print(f"{name:30s} {t_py * 1e6:10.1f}us {t_cy * 1e6:10.1f}us "
              f"{t_py / t_cy:8.1f}x {diff:12.2e}")


def bench_rollout(repeats: int):
    from advtraffic.agents import RuleBasedEgo
    from advtraffic.backend import BACKEND
    from advtraffic.builder import build_initial_scenario
    from advtraffic.mapgen import MapTemplate, generate_map
    from advtraffic.rollout import rollout

    m = generate_map(MapTemplate(kind="four_way_intersection"))
    spec = build_initial_scenario(
        m, m.routes["w_straight"],
        [m.routes["s_straight"], m.routes["e_left"]],
        T=80, dt=0.25, seed=0, start_offsets=[2.0, 10.0])
    ego = RuleBasedEgo()

    t = _time(lambda: rollout(spec, ego, m, mode="record"), repeats)
    print(f"\nfull rollout (record mode, N=2, T=80) with backend="
          f"{BACKEND}: {t * 1e3:.2f} ms")
    if BACKEND == "compiled":
        print("re-run with ADVTRAFFIC_PURE_PYTHON=1 for the fallback timing")


if __name__ == "__main__":
    ap = argparse.ArgumentParser()
    ap.add_argument("--repeats", type=int, default=200)
    args = ap.parse_args()
    bench_kernels(args.repeats)
    bench_rollout(max(10, args.repeats // 10))
