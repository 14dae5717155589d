import json

import numpy as np
import pytest

from advtraffic.agents import RuleBasedEgo
from advtraffic.errors import DegenerateGeometry, InsufficientRoutes
from advtraffic.mapgen import (MAP_KINDS, MapTemplate, generate_map,
                               sample_benchmark)
from advtraffic.rollout import rollout
from advtraffic.routes import Route
from advtraffic.scenario import VerdictKind


def test_two_lane_straight_shape():
    m = generate_map(MapTemplate(kind="two_lane_straight", arm_length=50.0))
    assert len(m.drivable) == 1
    assert len(m.routes) == 2
    # 100 m rectangle
    poly = m.drivable[0]
    assert poly[:, 0].max() - poly[:, 0].min() == pytest.approx(100.0)


def test_four_way_has_twelve_contained_movements(fourway_map):
    assert len(fourway_map.routes) == 12
    for name, pts in fourway_map.routes.items():
        r = Route(pts)
        samples = np.stack([r.point_at(s)
                            for s in np.linspace(0, r.length,
                                                 int(r.length * 2))])
        # strictly inside with at least vehicle-half-width clearance
        assert fourway_map.sdf(samples).min() >= 1.0, name


def test_route_counts_per_kind():
    expected = {"four_way_intersection": 12, "t_junction": 6,
                "two_lane_straight": 2, "curved_merge": 3, "roundabout": 12}
    for kind in MAP_KINDS:
        m = generate_map(MapTemplate(kind=kind))
        assert len(m.routes) == expected[kind]
        for name, pts in m.routes.items():
            r = Route(pts)
            samples = np.stack([r.point_at(s)
                                for s in np.linspace(0, r.length,
                                                     max(int(r.length * 2),
                                                         4))])
            assert m.sdf(samples).min() >= 1.0, f"{kind}/{name}"


def test_generation_deterministic(tmp_path):
    tpl = MapTemplate(kind="t_junction", lane_width=4.0, seed=9)
    p1, p2 = tmp_path / "a.json", tmp_path / "b.json"
    generate_map(tpl).save(p1)
    generate_map(tpl).save(p2)
    assert p1.read_bytes() == p2.read_bytes()


def test_degenerate_parameters_rejected():
    with pytest.raises(DegenerateGeometry):
        MapTemplate(kind="two_lane_straight", lane_width=2.0)
    with pytest.raises(DegenerateGeometry):
        MapTemplate(kind="nonsense")
    with pytest.raises(DegenerateGeometry):
        MapTemplate(kind="roundabout", ring_radius=4.0)


def test_map_json_round_trip(tmp_path, fourway_map):
    path = tmp_path / "map.json"
    fourway_map.save(path)
    payload = json.loads(path.read_text())
    assert payload["version"] == 1
    assert set(payload) >= {"map_id", "drivable", "routes"}
    from advtraffic.geometry import MapModel

    again = MapModel.load(path)
    assert again.map_id == fourway_map.map_id
    assert len(again.routes) == 12
    assert np.array_equal(again.sdf_grid, fourway_map.sdf_grid)


@pytest.fixture(scope="module")
def small_benchmark(request):
    fourway = request.getfixturevalue("fourway_map")
    straight = request.getfixturevalue("straight_map")
    maps = {m.map_id: m for m in (fourway, straight)}
    specs = sample_benchmark(list(maps.values()), routes_per_map=2,
                             densities=[1, 2], seed=11, horizon=60)
    return maps, specs


def test_sample_benchmark_counting(small_benchmark):
    maps, specs = small_benchmark
    assert len(specs) == 2 * 2 * 2
    ids = [s.scenario_id for s in specs]
    assert len(set(ids)) == len(ids)


def test_sample_benchmark_deterministic(fourway_map, straight_map):
    from advtraffic.scenario import serialize_scenario

    a = sample_benchmark([straight_map], 2, [1], seed=4, horizon=40)
    b = sample_benchmark([straight_map], 2, [1], seed=4, horizon=40)
    assert [serialize_scenario(s) for s in a] \
        == [serialize_scenario(s) for s in b]


def test_benchmark_specs_initialize_to_no_collision(small_benchmark):
    maps, specs = small_benchmark
    for spec in specs:
        result = rollout(spec, RuleBasedEgo(), maps[spec.map_id],
                         mode="no_record")
        assert result.verdict.kind == VerdictKind.NO_COLLISION, \
            spec.scenario_id


def test_insufficient_routes(straight_map):
    with pytest.raises(InsufficientRoutes):
        sample_benchmark([straight_map], routes_per_map=5, densities=[1],
                         seed=0)
