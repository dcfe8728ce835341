import json
import math

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from tgnet.network import (DEFAULT_CLASS_TABLE, ClassParams, Link, NetworkError, Node, RoadClass,
                           RoadNetwork, StudyFrame, assign_class_params, clip_to_frame,
                           extract_by_class, length_reduction_rate, network_to_json,
                           parse_class_table, parse_geojson, parse_network, reduce_links_random,
                           serialize_network, synth_grid_city)


def doc(nodes, links, frame=(0, 0, 2, 2)):
    return json.dumps({"frame": dict(zip(("x0", "y0", "width", "height"), frame), units="km"),
                       "nodes": [{"id": i, "x": x, "y": y} for i, x, y in nodes],
                       "links": links})


def link(lid, a, b, cls, geom):
    return {"id": lid, "from": a, "to": b, "class": cls, "geometry": geom}


def test_parse_single_trunk_link():
    net = parse_network(doc([("a", 0, 0), ("b", 1, 0)],
                            [link("e", "a", "b", "trunk", [[0, 0], [1, 0]])]))
    assert len(net.links) == 1
    assert net.links["e"].length == pytest.approx(1.0, abs=1e-12)
    assert net.links["e"].road_class is RoadClass.TRUNK


def test_dangling_reference_names_node():
    with pytest.raises(NetworkError, match="'Z'"):
        parse_network(doc([("a", 0, 0)], [link("e", "a", "Z", "trunk", [[0, 0], [1, 0]])]))


def test_round_trip_path_network():
    text = doc([("a", 0, 0), ("b", 1, 0), ("c", 1, 1.5)],
               [link("e1", "a", "b", "primary", [[0, 0], [0.5, 0.2], [1, 0]]),
                link("e2", "b", "c", "residential", [[1, 0], [1, 1.5]])])
    net = parse_network(text)
    again = parse_network(serialize_network(net))
    assert again == net
    assert network_to_json(again) == network_to_json(net)


@pytest.mark.parametrize("mutate, msg", [
    (lambda d: d["links"].append(d["links"][0]), "duplicate link"),
    (lambda d: d["nodes"].append(d["nodes"][0]), "duplicate node"),
    (lambda d: d["links"][0].update(geometry=[[0, 0], [0, 0], [1, 0]]), "zero-length"),
    (lambda d: d["links"][0].update(geometry=[[0, 0], [1, 0.1]]), "last vertex"),
    (lambda d: d["links"][0].update({"class": "footway"}), "footway"),
    (lambda d: d["nodes"][0].pop("x"), "missing field 'x'"),
    (lambda d: d["frame"].update(units="m"), "units"),
])
def test_schema_violations_are_reported(mutate, msg):
    d = json.loads(doc([("a", 0, 0), ("b", 1, 0)],
                       [link("e", "a", "b", "trunk", [[0, 0], [1, 0]])]))
    mutate(d)
    with pytest.raises(NetworkError, match=msg):
        parse_network(json.dumps(d))


def test_error_carries_line_number():
    text = doc([("a", 0, 0), ("b", 1, 0)],
               [link("bad", "a", "b", "trunk", [[0, 0], [0, 0]])]).replace(", {", ",\n{")
    with pytest.raises(NetworkError, match=r"line \d+"):
        parse_network(text)


def test_endpoint_snapping_within_tolerance():
    net = parse_network(doc([("a", 0, 0), ("b", 1, 0)],
                            [link("e", "a", "b", "trunk", [[1e-7, 0], [1, 0]])]))
    assert net.links["e"].geometry[0] == (0.0, 0.0)


def test_class_params_trunk_and_motorway():
    nodes = [Node("a", 0, 0), Node("b", 1, 0), Node("c", 3, 0)]
    links = [Link("t", "a", "b", ((0, 0), (1, 0)), RoadClass.TRUNK),
             Link("m", "b", "c", ((1, 0), (3, 0)), RoadClass.MOTORWAY)]
    net = assign_class_params(RoadNetwork.build(nodes, links, StudyFrame(0, 0, 3, 1)))
    assert net.links["t"].free_flow_time == pytest.approx(1 / 60)
    assert net.links["t"].capacity == 7500
    assert net.links["m"].free_flow_time == pytest.approx(0.02)
    assert net.links["m"].capacity == 10000


def test_class_table_values():
    table = {p.road_class.value: (p.limit_speed, p.capacity) for p in DEFAULT_CLASS_TABLE}
    assert table == {"motorway": (100, 10000), "trunk": (60, 7500), "primary": (60, 2500),
                     "secondary": (60, 1500), "tertiary": (40, 500), "residential": (40, 250)}


def test_empty_network_params():
    net = RoadNetwork.build([], [], StudyFrame(0, 0, 1, 1))
    assert assign_class_params(net) == net


def test_missing_class_in_table():
    net = synth_grid_city(3, 3, 1.0, 2)
    table = [ClassParams(RoadClass.TRUNK, 60, 7500)]
    with pytest.raises(NetworkError, match="residential"):
        assign_class_params(net, table)


def test_parse_class_table():
    t = parse_class_table('[{"class": "trunk", "limit_speed_kph": 50, "capacity_vph": 10}]')
    assert t == [ClassParams(RoadClass.TRUNK, 50.0, 10.0)]
    with pytest.raises(NetworkError):
        parse_class_table('[{"class": "trunk", "limit_speed_kph": 0, "capacity_vph": 10}]')


def _two_class_net():
    nodes = [Node("a", 0, 0), Node("b", 1, 0), Node("c", 1, 1)]
    links = [Link("t", "a", "b", ((0, 0), (1, 0)), RoadClass.TRUNK),
             Link("r", "b", "c", ((1, 0), (1, 1)), RoadClass.RESIDENTIAL)]
    return RoadNetwork.build(nodes, links, StudyFrame(0, 0, 1, 1))


def test_extract_by_class():
    net = _two_class_net()
    assert list(extract_by_class(net, "trunk").links) == ["t"]
    assert extract_by_class(net, RoadClass.RESIDENTIAL) == net


def test_secondary_extraction_keeps_upper_four_classes():
    kept = {c for c in RoadClass if c.rank <= RoadClass.SECONDARY.rank}
    assert kept == {RoadClass.MOTORWAY, RoadClass.TRUNK, RoadClass.PRIMARY,
                    RoadClass.SECONDARY}
    nodes = [Node(f"n{i}", float(i), 0.0) for i in range(7)]
    links = [Link(c.value, f"n{i}", f"n{i + 1}", ((i, 0), (i + 1, 0)), c)
             for i, c in enumerate(RoadClass)]
    net = RoadNetwork.build(nodes, links, StudyFrame(0, 0, 6, 1))
    assert {lk.road_class for lk in extract_by_class(net, "secondary").links.values()} == kept


def test_reduce_links_random_edges():
    net = synth_grid_city(3, 3, 1.0, 2)
    assert reduce_links_random(net, 0.0, 1) == net
    assert len(reduce_links_random(net, 1.0, 1).links) == 0


def test_reduce_links_random_ten_links_stable():
    nodes = [Node(f"n{i}", float(i), 0.0) for i in range(11)]
    links = [Link(f"e{i}", f"n{i}", f"n{i + 1}", ((i, 0), (i + 1, 0)), RoadClass.PRIMARY)
             for i in range(10)]
    net = RoadNetwork.build(nodes, links, StudyFrame(0, 0, 10, 1))
    a = reduce_links_random(net, 0.2, 42)
    b = reduce_links_random(net, 0.2, 42)
    assert len(a.links) == 8
    assert list(a.links) == list(b.links)


def test_random_reduction_nested_in_k():
    net = synth_grid_city(5, 5, 1.0, 2)
    small = set(reduce_links_random(net, 0.6, 3).links)
    large = set(reduce_links_random(net, 0.3, 3).links)
    assert small <= large


def test_length_reduction_rate():
    net = _two_class_net()
    assert length_reduction_rate(net, net) == 0.0
    assert length_reduction_rate(net, extract_by_class(net, "trunk")) == pytest.approx(0.5)


def test_synth_smallest_lattice():
    net = synth_grid_city(2, 2, 1.0, 1)
    assert len(net.nodes) == 4 and len(net.links) == 8
    assert net.classes() == {RoadClass.TRUNK}


def test_synth_three_by_three_length():
    assert synth_grid_city(3, 3, 1.0, 2).total_length == pytest.approx(24.0)


def test_synth_21_arterial_share():
    net = synth_grid_city(21, 21, 0.5, 5)
    trunk = sum(lk.length for lk in net.links.values() if lk.road_class is RoadClass.TRUNK)
    # trunk lines 0, 5, 10, 15, 20 on each axis
    assert trunk / net.total_length == pytest.approx(5 / 21)


def test_synth_secondary_lines():
    net = synth_grid_city(21, 21, 0.5, 5, 4)
    assert length_reduction_rate(net, extract_by_class(net, "secondary")) == pytest.approx(12 / 21)


def test_clip_to_frame_drops_outside_links():
    nodes = [Node("a", 0, 0), Node("b", 1, 0), Node("c", 2, 0)]
    links = [Link("in", "a", "b", ((0, 0), (1, 0)), RoadClass.TRUNK),
             Link("out", "b", "c", ((1, 0), (2, 0)), RoadClass.TRUNK)]
    net = RoadNetwork.build(nodes, links, StudyFrame(0, 0, 1, 1))
    assert list(clip_to_frame(net).links) == ["in"]


def test_geojson_import_lonlat_projection():
    fc = {"type": "FeatureCollection", "features": [
        {"type": "Feature", "properties": {"id": "e", "from": "a", "to": "b", "class": "primary"},
         "geometry": {"type": "LineString", "coordinates": [[139.0, 35.0], [139.01, 35.0]]}},
        {"type": "Feature", "properties": {"id": "f", "from": "b", "to": "c", "class": "primary"},
         "geometry": {"type": "LineString", "coordinates": [[139.01, 35.0], [139.01, 35.01]]}}]}
    net = parse_geojson(json.dumps(fc), lonlat=True)
    east = math.radians(0.01) * math.cos(math.radians(35.005)) * 6371.0088
    north = math.radians(0.01) * 6371.0088
    assert net.links["e"].length == pytest.approx(east, rel=1e-9)
    assert net.links["f"].length == pytest.approx(north, rel=1e-9)


coords = st.floats(0, 5, allow_nan=False, allow_infinity=False)


@settings(max_examples=50, deadline=None)
@given(st.lists(st.tuples(coords, coords), min_size=2, max_size=6, unique=True))
def test_round_trip_random_polyline(pts):
    pts = [(round(x, 6), round(y, 6)) for x, y in pts]
    if any(a == b for a, b in zip(pts[:-1], pts[1:])):
        return
    net = RoadNetwork.build([Node("a", *pts[0]), Node("b", *pts[-1])],
                            [Link("e", "a", "b", tuple(pts), RoadClass.TERTIARY)],
                            StudyFrame(0, 0, 5, 5))
    assert parse_network(serialize_network(net)) == net
