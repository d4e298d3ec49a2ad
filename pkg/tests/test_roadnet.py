import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from flownet.errors import ConfigurationError
from flownet.roadnet import (
    BOUNDARY, Intersection, Movement, RoadNetwork, RoadSegment, build_grid_network, load_network,
    normalize_adjacency, phase_adjacency, save_network, static_adjacency,
)
from flownet.signals import SignalPhase


def crossing_with_roads_1_to_8():
    """One intersection; incoming roads 1, 3, 5, 7 (from N, E, S, W), outgoing 2, 4, 6, 8.

    Outgoing legs: 2 heads north, 4 west, 6 south, 8 east. Segment 0 is a
    stray stub kept only so ids start at 0.
    """
    segs = [RoadSegment(0, 99, BOUNDARY)]
    for i in range(1, 9):
        segs.append(RoadSegment(i, BOUNDARY, 0) if i % 2 else RoadSegment(i, 0, BOUNDARY))
    # (incoming, left, straight, right) per approach N, E, S, W
    legs = [(1, 8, 6, 4), (3, 2, 4, 6), (5, 4, 2, 8), (7, 6, 8, 2)]
    moves = []
    for up, *downs in legs:
        for turn, down in zip(("left", "straight", "right"), downs):
            moves.append(Movement(len(moves), up, down, turn))
    inter = Intersection(0, tuple(moves), frozenset(k for k in range(12) if k % 3 == 2))
    return RoadNetwork(tuple(segs), (inter,))


def brute_force_static(net):
    n = net.n
    a = [[0] * n for _ in range(n)]
    for inter in net.intersections:
        for m in inter.movements:
            a[m.up][m.down] = 1
    return np.array(a, dtype=float)


@pytest.mark.parametrize("rows,cols,inters,segs", [(4, 4, 16, 80), (1, 1, 1, 8), (2, 2, 4, 24), (2, 3, 6, 34)])
def test_grid_counts(rows, cols, inters, segs):
    net = build_grid_network(rows, cols, 3, 300.0)
    assert len(net.intersections) == inters
    assert net.n == segs == 2 * (rows * (cols + 1) + cols * (rows + 1))


def test_grid_geometry():
    net = build_grid_network(2, 2)
    for inter in net.intersections:
        assert inter.n_movements == 12
        assert len(inter.incoming) == 4 and len(inter.outgoing) == 4
        assert inter.always_on == frozenset({2, 5, 8, 11})
        for m in inter.movements:
            assert net.segments[m.up].to_node == inter.id == net.segments[m.down].from_node
            # no U-turns: a movement never returns along the reverse segment
            up, down = net.segments[m.up], net.segments[m.down]
            assert not (down.to_node == up.from_node and down.to_node != BOUNDARY)
    assert len(net.entry_segments) == len(net.exit_segments) == 8


def test_single_crossing_movement_table():
    # ids: 0 E-in, 1 W-out, 2 E-out, 3 W-in, 4 S-in (from north), 5 N-out, 6 S-out, 7 N-in (from south)
    net = build_grid_network(1, 1)
    got = [(m.k, m.up, m.down, m.turn) for m in net.intersections[0].movements]
    assert got == [
        (0, 4, 2, "left"), (1, 4, 6, "straight"), (2, 4, 1, "right"),
        (3, 3, 6, "left"), (4, 3, 1, "straight"), (5, 3, 5, "right"),
        (6, 7, 1, "left"), (7, 7, 5, "straight"), (8, 7, 2, "right"),
        (9, 0, 5, "left"), (10, 0, 2, "straight"), (11, 0, 6, "right"),
    ]


def test_bad_dimensions():
    for args in ((0, 2), (2, 0), (-1, 1)):
        with pytest.raises(ConfigurationError):
            build_grid_network(*args)
    with pytest.raises(ConfigurationError):
        build_grid_network(2, 2, lane_count=0)
    with pytest.raises(ConfigurationError):
        build_grid_network(2, 2, length_m=0.0)


def test_segment_invariants():
    with pytest.raises(ConfigurationError):
        RoadSegment(0, 1, 1)
    with pytest.raises(ConfigurationError):
        RoadSegment(0, 1, 2, lane_count=0)
    with pytest.raises(ConfigurationError):
        RoadSegment(0, 1, 2, length_m=-3.0)


def test_movement_must_meet_at_intersection():
    segs = (RoadSegment(0, BOUNDARY, 0), RoadSegment(1, 5, BOUNDARY))
    inter = Intersection(0, (Movement(0, 0, 1, "straight"),))
    with pytest.raises(ConfigurationError):
        RoadNetwork(segs, (inter,))


def test_duplicate_pair_and_bad_always_on():
    with pytest.raises(ConfigurationError):
        Intersection(0, (Movement(0, 0, 1, "left"), Movement(1, 0, 1, "straight")))
    with pytest.raises(ConfigurationError):
        Intersection(0, (Movement(0, 0, 1, "left"),), frozenset({0}))
    with pytest.raises(ConfigurationError):
        Movement(0, 3, 3, "left")


def test_static_entry_for_left_turn_1_to_8():
    net = crossing_with_roads_1_to_8()
    a = static_adjacency(net)
    assert a[1, 8] == 1.0
    assert net.intersections[0].movements[0] == Movement(0, 1, 8, "left")


def test_phase_p0_activates_1_to_8_and_right_turns():
    net = crossing_with_roads_1_to_8()
    bits = [0] * 12
    bits[0] = 1
    a = phase_adjacency(net, [SignalPhase(bits)])
    expected = np.zeros((9, 9))
    expected[1, 8] = 1
    for m in net.intersections[0].movements:
        if m.turn == "right":
            expected[m.up, m.down] = 1
    np.testing.assert_array_equal(a, expected)


def test_zero_movements_and_empty_always_on():
    segs = (RoadSegment(0, BOUNDARY, 0), RoadSegment(1, 0, BOUNDARY))
    empty = RoadNetwork(segs, (Intersection(0, ()),))
    assert not static_adjacency(empty).any()
    net = RoadNetwork(segs, (Intersection(0, (Movement(0, 0, 1, "straight"),)),))
    assert not phase_adjacency(net, [[0]]).any()


def test_all_green_equals_static():
    net = build_grid_network(2, 2)
    green = [[1] * 12 for _ in net.intersections]
    np.testing.assert_array_equal(phase_adjacency(net, green), static_adjacency(net))


def test_static_matches_brute_force():
    for rows, cols in ((1, 1), (2, 2), (3, 2), (4, 4)):
        net = build_grid_network(rows, cols)
        a = static_adjacency(net)
        np.testing.assert_array_equal(a, brute_force_static(net))
        assert not np.diag(a).any()
        # row sums are the per-segment downstream counts
        downs = {}
        for inter in net.intersections:
            for m in inter.movements:
                downs.setdefault(m.up, set()).add(m.down)
        np.testing.assert_array_equal(a.sum(axis=1), [len(downs.get(i, ())) for i in range(net.n)])


def test_phase_length_mismatch():
    net = build_grid_network(1, 1)
    with pytest.raises(ConfigurationError):
        phase_adjacency(net, [[1] * 11])
    with pytest.raises(ConfigurationError):
        phase_adjacency(net, [[1] * 12, [1] * 12])


@settings(max_examples=60, deadline=None)
@given(st.lists(st.lists(st.integers(0, 1), min_size=12, max_size=12), min_size=4, max_size=4))
def test_phase_adjacency_contained_in_static(phases):
    net = build_grid_network(2, 2)
    a = phase_adjacency(net, phases)
    assert (a <= static_adjacency(net)).all()
    assert set(np.unique(a)) <= {0.0, 1.0}


def test_normalize_examples():
    np.testing.assert_array_equal(normalize_adjacency([[0, 1], [1, 0]]), [[0, 1], [1, 0]])
    np.testing.assert_array_equal(normalize_adjacency(np.zeros((3, 3))), np.zeros((3, 3)))
    path = np.array([[0, 1, 0], [1, 0, 1], [0, 1, 0]], dtype=float)
    s = 1 / np.sqrt(2)
    np.testing.assert_allclose(normalize_adjacency(path), [[0, s, 0], [s, 0, s], [0, s, 0]], rtol=0, atol=1e-15)


def test_normalize_zero_degree_row_and_range():
    net = build_grid_network(2, 2)
    a = normalize_adjacency(static_adjacency(net))
    exits = list(net.exit_segments)
    assert not a[exits].any()
    assert (a >= 0).all() and (a <= 1).all()
    np.testing.assert_array_equal(a, normalize_adjacency(static_adjacency(net)))


def test_json_round_trip(tmp_path):
    net = build_grid_network(2, 3, 2, 150.0)
    path = tmp_path / "net.json"
    save_network(net, path)
    back = load_network(path)
    assert back == net
    doc = json.loads(path.read_text())
    assert set(doc) == {"segments", "intersections"}
    assert set(doc["segments"][0]) == {"id", "from", "to", "lanes", "length_m"}
    assert set(doc["intersections"][0]) == {"id", "movements", "always_on"}
    assert set(doc["intersections"][0]["movements"][0]) == {"k", "up", "down", "turn"}


def test_malformed_json():
    with pytest.raises(ConfigurationError):
        RoadNetwork.from_dict({"segments": [{"id": 0}]})
