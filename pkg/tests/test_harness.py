import csv
import math

import numpy as np
import pytest

from advtraffic.agents import ScriptedEgo
from advtraffic.attacks import AttackOutcome
from advtraffic.config import SimConfig
from advtraffic.errors import TooFewScenarios
from advtraffic.harness import (ScenarioRow, _aggregate_cell,
                                cluster_failures, emit_traces,
                                filter_solvable, impact_features, kmeans,
                                split_by_start_location)
from advtraffic.rollout import rollout
from advtraffic.scenario import (ActionPlan, AgentState, ScenarioSpec,
                                 TrafficState, VerdictKind)


def _row(success, tts, iters=10, wall=1.0, method="m", density=1, sid="s"):
    return ScenarioRow(scenario_id=sid, method=method, density=density,
                       success=success, iterations=iters, best_cost=0.0,
                       verdict="x", time_index=None, wall_time=wall,
                       time_to_success=tts)


def test_aggregate_cell_cr_and_t50():
    rows = [_row(True, 2.0), _row(True, 8.0), _row(False, None),
            _row(True, 4.0)]
    cell = _aggregate_cell(rows)
    assert cell["n"] == 4 and cell["successes"] == 3
    assert cell["cr"] == pytest.approx(75.0)
    # half of 4 scenarios: the 2nd smallest success time
    assert cell["t50"] == pytest.approx(4.0)
    assert cell["s_per_it"] == pytest.approx(4.0 / 40.0)


def test_t50_absent_when_under_half():
    rows = [_row(True, 2.0), _row(False, None), _row(False, None),
            _row(False, None)]
    cell = _aggregate_cell(rows)
    assert cell["cr"] == pytest.approx(25.0)
    assert cell["t50"] is None


def test_s_per_it_is_time_over_iterations():
    rows = [_row(True, 1.0, iters=5, wall=2.0),
            _row(False, None, iters=15, wall=4.0)]
    cell = _aggregate_cell(rows)
    assert cell["s_per_it"] == pytest.approx(6.0 / 20.0)


# ---------------------------------------------------------------------------
# k-means


def test_kmeans_separable_points_each_own_cluster():
    base = np.array([[0, 0], [10, 0], [0, 10], [10, 10], [-10, 5],
                     [5, -10]], dtype=float)
    assign, centroids, wcss = kmeans(base, 6, seed=0)
    assert sorted(assign) == list(range(6))
    assert wcss == pytest.approx(0.0, abs=1e-12)


def test_kmeans_duplicates_get_identical_labels():
    rng = np.random.default_rng(0)
    pts = rng.normal(0, 1, (20, 4))
    x = np.vstack([pts, pts])
    assign, _, _ = kmeans(x, 6, seed=1)
    assert np.array_equal(assign[:20], assign[20:])


def test_kmeans_beats_random_assignments():
    rng = np.random.default_rng(3)
    x = rng.normal(0, 1, (60, 6))
    _, _, wcss = kmeans(x, 6, seed=0)
    for trial in range(100):
        labels = rng.integers(0, 6, len(x))
        total = 0.0
        for j in range(6):
            members = x[labels == j]
            if len(members):
                total += ((members - members.mean(axis=0)) ** 2).sum()
        assert wcss <= total + 1e-9


# ---------------------------------------------------------------------------
# filtering


def _square_spec(square_map, agents, raw, T, route):
    return ScenarioSpec(map_id=square_map.map_id, horizon=T, dt=0.25,
                        ego_route=route, ego_goal=route[-1],
                        initial_state=TrafficState(tuple(agents)),
                        initial_plan=ActionPlan(raw),
                        scenario_id=f"sq/{id(agents) % 9973}")


def _outcome(success, plan):
    return AttackOutcome(success=success, best_plan=plan, best_cost=0.0,
                         iterations=1, wall_time=0.1,
                         time_to_success=0.1 if success else None,
                         cost_trace=[0.0], method="king_direct")


def test_filter_partition_exhaustive_and_disjoint(square_map):
    cfg = SimConfig()
    T = 40
    route = np.array([[4.0, 20.0], [36.0, 20.0]])
    # solvable: crossing adversary the expert can yield to
    crossing = _square_spec(square_map, [
        AgentState(position=[8, 20], heading=0, speed=6),
        AgentState(position=[20, 10], heading=np.pi / 2, speed=5)],
        np.zeros((1, T, 2)), T, route)
    # not solvable: fast head-on rammer near the route end
    cornered = _square_spec(square_map, [
        AgentState(position=[30, 20], heading=0, speed=2),
        AgentState(position=[35, 20], heading=np.pi, speed=11)],
        np.zeros((1, T, 2)), T, route)
    # unsuccessful attack
    far = _square_spec(square_map, [
        AgentState(position=[8, 20], heading=0, speed=6),
        AgentState(position=[20, 35], heading=0, speed=4)],
        np.zeros((1, T, 2)), T, route)

    outcomes = [(crossing, _outcome(True, crossing.initial_plan)),
                (cornered, _outcome(True, cornered.initial_plan)),
                (far, _outcome(False, far.initial_plan))]
    parts = filter_solvable(outcomes, cfg, {square_map.map_id: square_map})
    assert [s.scenario_id for s, _ in parts["collision_solvable"]] \
        == [crossing.scenario_id]
    assert [s.scenario_id for s, _ in parts["collision_not_solvable"]] \
        == [cornered.scenario_id]
    assert [s.scenario_id for s, _ in parts["no_collision"]] \
        == [far.scenario_id]
    total = sum(len(v) for v in parts.values())
    assert total == 3


def test_cluster_failures_requires_enough_scenarios(square_map):
    with pytest.raises(TooFewScenarios):
        cluster_failures([], SimConfig(), {square_map.map_id: square_map})


def test_impact_features_geometry(square_map):
    T = 30
    route = np.array([[4.0, 20.0], [36.0, 20.0]])
    spec = _square_spec(square_map, [
        AgentState(position=[20, 20], heading=0, speed=0),
        AgentState(position=[28, 20], heading=np.pi, speed=6)],
        np.zeros((1, T, 2)), T, route)
    result = rollout(spec, ScriptedEgo(np.zeros((T, 2))), square_map,
                     mode="no_record")
    assert result.verdict.kind == VerdictKind.EGO_COLLISION
    f = impact_features(result)
    # head-on: relative heading pi, impact point dead ahead (bearing 0)
    assert f[0] == pytest.approx(0.0, abs=1e-6)          # sin(rel heading)
    assert f[1] == pytest.approx(-1.0, abs=1e-6)         # cos(rel heading)
    assert f[2] == pytest.approx(0.0, abs=1e-6)          # sin(bearing)
    assert f[3] == pytest.approx(1.0, abs=1e-6)          # cos(bearing)
    assert f[4] == pytest.approx(0.0)                    # ego speed


def test_split_keeps_start_locations_disjoint(square_map):
    T = 10
    route = np.array([[4.0, 20.0], [36.0, 20.0]])
    cases = []
    for k in range(10):
        start = [4.0 + (k % 5), 20.0]
        spec = ScenarioSpec(
            map_id=square_map.map_id, horizon=T, dt=0.25, ego_route=route,
            ego_goal=route[-1],
            initial_state=TrafficState((
                AgentState(position=start, heading=0, speed=3),
                AgentState(position=[25, 25], heading=0, speed=3))),
            initial_plan=ActionPlan.zeros(1, T), scenario_id=f"s{k}")
        cases.append((spec, _outcome(True, spec.initial_plan)))
    train, heldout = split_by_start_location(cases, 0.3, seed=2)
    assert len(train) + len(heldout) == 10
    assert heldout

    def starts(rows):
        return {tuple(np.round(s.initial_state.agents[0].position, 3))
                for s, _ in rows}

    assert not (starts(train) & starts(heldout))


# ---------------------------------------------------------------------------
# traces


def test_emit_traces_row_count_and_marker(square_map, tmp_path):
    T = 30
    route = np.array([[4.0, 20.0], [36.0, 20.0]])
    spec = _square_spec(square_map, [
        AgentState(position=[20, 20], heading=0, speed=0),
        AgentState(position=[28, 20], heading=np.pi, speed=6)],
        np.zeros((1, T, 2)), T, route)
    result = rollout(spec, ScriptedEgo(np.zeros((T, 2))), square_map,
                     mode="no_record")
    csv_path, svg_path = emit_traces(result, square_map, tmp_path, "crash")
    with open(csv_path) as fh:
        rows = list(csv.reader(fh))
    assert len(rows) - 1 == len(result.states) * len(result.dims)
    svg = open(svg_path).read()
    assert svg.startswith("<?xml")
