import os
import subprocess
import sys

import numpy as np
import pytest

from advtraffic import _kernels_py

compiled = pytest.importorskip("advtraffic._kernels")


def _random_inputs(seed, k=128):
    rng = np.random.default_rng(seed)
    states = np.column_stack([rng.uniform(-40, 40, k),
                              rng.uniform(-40, 40, k),
                              rng.uniform(0, 2 * np.pi, k),
                              rng.uniform(0, 12, k)])
    actions = rng.uniform(-1, 1, (k, 2))
    poses_a = np.ascontiguousarray(states[:, :3])
    poses_b = np.column_stack([rng.uniform(-40, 40, (k, 2)),
                               rng.uniform(0, 2 * np.pi, k)])
    dims_a = np.column_stack([rng.uniform(0.5, 3, k),
                              rng.uniform(0.3, 1.5, k)])
    dims_b = np.column_stack([rng.uniform(0.5, 3, k),
                              rng.uniform(0.3, 1.5, k)])
    return states, actions, poses_a, poses_b, dims_a, dims_b


def test_step_batch_parity():
    states, actions, *_ = _random_inputs(0)
    outs = []
    for mod in (compiled, _kernels_py):
        out = np.empty_like(states)
        js = np.empty((len(states), 4, 4))
        ja = np.empty((len(states), 4, 2))
        mod.step_batch(states, actions, 1.3, 1.3, 0.7, 4.0, 8.0, 0.25,
                       out, js, ja)
        outs.append((out, js, ja))
    for a, b in zip(*outs):
        assert np.allclose(a, b, atol=1e-12, rtol=0)


def test_box_distance_parity_including_witnesses():
    _, _, poses_a, poses_b, dims_a, dims_b = _random_inputs(1)
    res = []
    for mod in (compiled, _kernels_py):
        k = len(poses_a)
        d = np.empty(k)
        wa = np.empty((k, 2))
        wb = np.empty((k, 2))
        mod.box_distance_batch(poses_a, dims_a, poses_b, dims_b, d, wa, wb)
        res.append((d, wa, wb))
    for a, b in zip(*res):
        assert np.allclose(a, b, atol=1e-9, rtol=0)


def test_overlap_parity():
    _, _, poses_a, poses_b, dims_a, dims_b = _random_inputs(2, k=512)
    outs = []
    for mod in (compiled, _kernels_py):
        out = np.empty(len(poses_a), dtype=np.uint8)
        mod.overlap_batch(poses_a, dims_a, poses_b, dims_b, out)
        outs.append(out.copy())
    assert np.array_equal(*outs)


def test_sdf_parity():
    rng = np.random.default_rng(3)
    grid = rng.normal(0, 4, (120, 90))
    pts = rng.uniform(-5, 30, (400, 2))   # includes out-of-extent points
    res = []
    for mod in (compiled, _kernels_py):
        v = np.empty(len(pts))
        g = np.empty((len(pts), 2))
        mod.sdf_batch(grid, 0.0, 0.0, 0.25, pts, v, g)
        res.append((v.copy(), g.copy()))
    for a, b in zip(*res):
        assert np.allclose(a, b, atol=1e-12, rtol=0)


def test_tie_breaking_matches_on_symmetric_case():
    # aligned unit squares: several corner/edge candidates tie at the
    # minimum; both backends must pick the same witness pair
    poses_a = np.array([[0.0, 0.0, 0.0]])
    poses_b = np.array([[4.0, 0.0, 0.0]])
    dims = np.array([[1.0, 1.0]])
    res = []
    for mod in (compiled, _kernels_py):
        d = np.empty(1)
        wa = np.empty((1, 2))
        wb = np.empty((1, 2))
        mod.box_distance_batch(poses_a, dims, poses_b, dims, d, wa, wb)
        res.append((d.copy(), wa.copy(), wb.copy()))
    for a, b in zip(*res):
        assert np.array_equal(a, b)


def test_env_var_forces_python_backend():
    code = ("import advtraffic.backend as b; print(b.BACKEND)")
    env = dict(os.environ, ADVTRAFFIC_PURE_PYTHON="1")
    out = subprocess.run([sys.executable, "-c", code], env=env,
                         capture_output=True, text=True, check=True)
    assert out.stdout.strip() == "python"


def test_full_rollout_parity_between_backends(square_map):
    """Same scenario through both backends: verdicts equal, states close."""
    import json
    import textwrap

    script = textwrap.dedent("""
        import numpy as np, json
        from advtraffic.geometry import MapModel
        from advtraffic.rollout import rollout
        from advtraffic.agents import RuleBasedEgo
        from advtraffic.scenario import (ActionPlan, AgentState,
                                         ScenarioSpec, TrafficState)
        square = MapModel("sq", [np.array(
            [[0., 0.], [40., 0.], [40., 40.], [0., 40.]])])
        rng = np.random.default_rng(8)
        T = 40
        agents = (AgentState(position=[8, 20], heading=0, speed=5),
                  AgentState(position=[30, 24], heading=np.pi, speed=4))
        spec = ScenarioSpec(map_id="sq", horizon=T, dt=0.25,
                            ego_route=np.array([[4., 20.], [36., 20.]]),
                            ego_goal=[36., 20.],
                            initial_state=TrafficState(agents),
                            initial_plan=ActionPlan(
                                rng.normal(0, 0.3, (1, T, 2))))
        r = rollout(spec, RuleBasedEgo(), square, mode="no_record")
        print(json.dumps({"kind": r.verdict.kind.value,
                          "t": r.verdict.time_index,
                          "final": r.states[-1].tolist()}))
    """)
    results = []
    for force in ("0", "1"):
        env = dict(os.environ, ADVTRAFFIC_PURE_PYTHON=force)
        out = subprocess.run([sys.executable, "-c", script], env=env,
                             capture_output=True, text=True, check=True)
        results.append(json.loads(out.stdout))
    a, b = results
    assert a["kind"] == b["kind"] and a["t"] == b["t"]
    assert np.allclose(a["final"], b["final"], atol=1e-9)
