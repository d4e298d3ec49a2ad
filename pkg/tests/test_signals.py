import itertools

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from flownet.errors import ConfigurationError, UnsupportedTopologyError
from flownet.roadnet import BOUNDARY, Intersection, Movement, RoadNetwork, RoadSegment, build_grid_network, phase_adjacency
from flownet.signals import (
    CLEARANCE, PHASE_NAMES, PhasePlan, SignalPhase, advance_plan, conflicts, fixed_time_plan, from_one_hot,
    legal_phases, max_pressure_plan, max_pressure_select, movement_index, movement_pressures, one_hot,
    phase_from_index, phase_index, step_signal,
)

NET = build_grid_network(1, 1)
INTER = NET.intersections[0]


def test_eight_phases_of_two_compatible_movements():
    phases = legal_phases(INTER)
    assert len(phases) == 8
    assert len({p.bits for p in phases}) == 8
    for p in phases:
        active = p.active
        assert len(active) == 2
        assert all(k % 3 != 2 for k in active)  # right turns are never part of a phase
        for a, b in itertools.combinations(active, 2):
            assert not conflicts(a, b)


def test_phase_set_is_every_compatible_pair():
    # brute force: all conflict-free pairs of controllable movements
    ctrl = [k for k in range(12) if k % 3 != 2]
    pairs = {frozenset(c) for c in itertools.combinations(ctrl, 2) if not conflicts(*c)}
    assert pairs == {frozenset(p.active) for p in legal_phases(INTER)}


def test_phase_names_match_movements():
    for name, phase in zip(PHASE_NAMES, legal_phases(INTER)):
        expected = set()
        for part in name.split("_"):
            expected.add(movement_index(part[0], {"T": "straight", "L": "left"}[part[1]]))
        assert set(phase.active) == expected


def test_conflict_rules():
    wt, et, wl, nt = (movement_index("W", "straight"), movement_index("E", "straight"),
                      movement_index("W", "left"), movement_index("N", "straight"))
    assert not conflicts(wt, et)
    assert conflicts(wl, et)
    assert conflicts(wt, nt)
    assert not conflicts(wt, wl)
    assert not conflicts(movement_index("N", "right"), nt)


def test_two_approach_intersection_unsupported():
    segs = (RoadSegment(0, BOUNDARY, 0), RoadSegment(1, 0, BOUNDARY), RoadSegment(2, BOUNDARY, 0),
            RoadSegment(3, 0, BOUNDARY))
    moves = (Movement(0, 0, 1, "straight"), Movement(1, 2, 3, "straight"))
    net = RoadNetwork(segs, (Intersection(0, moves),))
    with pytest.raises(UnsupportedTopologyError):
        legal_phases(net.intersections[0])


def test_phase_bits_validated():
    with pytest.raises(ConfigurationError):
        SignalPhase((0, 2, 1))


def test_index_round_trip():
    for i in range(8):
        assert phase_index(phase_from_index(i)) == i
        assert from_one_hot(one_hot(i)) == i
    assert phase_index(SignalPhase.clearance()) == CLEARANCE
    assert one_hot(CLEARANCE) == [0] * 8
    with pytest.raises(ConfigurationError):
        from_one_hot([1, 1, 0, 0, 0, 0, 0, 0])


def test_zero_state_ties_to_phase_zero():
    assert phase_index(max_pressure_select(INTER, np.zeros((NET.n, 3)))) == 0


def test_empty_state_is_zero_pressure():
    assert not movement_pressures(INTER, np.zeros((0, 3))).any()


def test_congested_north_south_through():
    # vehicles from the north intending to go straight: upstream segment 4, channel 1
    x = np.zeros((NET.n, 3))
    x[4, 1] = 20.0
    # hand pressures: NT = 20, every other movement 0, so phases containing NT tie at 20
    totals = [sum(movement_pressures(INTER, x)[k] for k in p.active) for p in legal_phases(INTER)]
    assert totals == [0, 20, 0, 0, 0, 0, 20, 0]
    assert PHASE_NAMES[phase_index(max_pressure_select(INTER, x))] == "NT_ST"


def test_pressure_subtracts_downstream_mean():
    x = np.zeros((NET.n, 3))
    x[4, 1] = 9.0
    x[6] = [3.0, 3.0, 6.0]  # downstream of NT
    p = movement_pressures(INTER, x)
    assert p[movement_index("N", "straight")] == pytest.approx(9.0 - 4.0)


@settings(max_examples=80, deadline=None)
@given(st.integers(0, 2**31 - 1), st.floats(0.01, 100.0), st.floats(-50.0, 50.0))
def test_selection_invariant_to_scale_and_shift(seed, scale, shift):
    x = np.random.default_rng(seed).random((NET.n, 3)) * 10
    base = max_pressure_select(INTER, x)
    assert max_pressure_select(INTER, x * scale) == base
    assert max_pressure_select(INTER, x + shift) == base


def test_plan_validation():
    with pytest.raises(ConfigurationError):
        PhasePlan("fixed_cycle", (), 10.0)
    with pytest.raises(ConfigurationError):
        PhasePlan("controller", (), 4.0, 3.0, 2.0)
    with pytest.raises(ConfigurationError):
        PhasePlan("fixed_cycle", ((phase_from_index(0), 15.0),), 10.0)
    with pytest.raises(ConfigurationError):
        PhasePlan("bogus")
    with pytest.raises(ConfigurationError):
        PhasePlan("controller", (), 10.0, -1.0, 0.0)


def two_phase_plan(yellow=0.0, all_red=0.0):
    a, b = phase_from_index(0), phase_from_index(1)
    return PhasePlan("fixed_cycle", ((a, 30.0), (b, 30.0)), 10.0, yellow, all_red), a, b


def test_fixed_cycle_arithmetic():
    plan, a, b = two_phase_plan()
    got = [advance_plan(plan, t, NET)[0] for t in range(8)]
    assert got == [a, a, a, b, b, b, a, a]


def test_clearance_window_zeroes_controllable_bits():
    plan, a, b = two_phase_plan(3.0, 2.0)
    # no clearance before the very first green
    assert advance_plan(plan, 0, NET)[0] == a
    # step 3 opens the switch to b: clear for the first 5 s, then b
    for offset in (0.0, 2.9, 4.9):
        assert not any(advance_plan(plan, 3, NET, offset_s=offset)[0].bits)
    assert advance_plan(plan, 3, NET, offset_s=5.0)[0] == b
    assert advance_plan(plan, 4, NET)[0] == b
    # the wrap from b back to a also clears
    assert not any(advance_plan(plan, 6, NET)[0].bits)
    # right turns stay active during clearance
    a_t = phase_adjacency(NET, advance_plan(plan, 3, NET))
    assert a_t.sum() == 4
    sig = step_signal(plan, 3, NET)
    assert sig.phases[0] == b and sig.green_fraction[0] == pytest.approx(0.5)
    assert step_signal(plan, 4, NET).green_fraction[0] == 1.0


def test_offset_outside_interval():
    plan, _, _ = two_phase_plan()
    with pytest.raises(ConfigurationError):
        advance_plan(plan, 0, NET, offset_s=10.0)
    with pytest.raises(ConfigurationError):
        advance_plan(plan, -1, NET)


def test_default_fixed_time_plan_cycles_all_phases():
    plan = fixed_time_plan()
    seen = [phase_index(step_signal(plan, t, NET).phases[0]) for t in range(0, 24, 3)]
    assert seen == list(range(8))
    assert plan.cycle_length_s == 240.0


def test_controller_constant_state_repeats():
    plan = max_pressure_plan()
    x = np.random.default_rng(3).random((NET.n, 3))
    prev = None
    chosen = []
    for t in range(5):
        sig = step_signal(plan, t, NET, x, prev)
        chosen.append(sig.phases[0])
        assert sig.green_fraction[0] == 1.0
        prev = sig.phases
    assert len(set(chosen)) == 1


def test_controller_switch_clears_first():
    plan = max_pressure_plan()
    x = np.zeros((NET.n, 3))
    x[4, 1] = 5.0
    prev = [phase_from_index(0)]
    assert not any(advance_plan(plan, 1, NET, x, prev)[0].bits)
    assert PHASE_NAMES[phase_index(advance_plan(plan, 1, NET, x, prev, offset_s=5.0)[0])] == "NT_ST"


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**31 - 1), st.integers(0, 50))
def test_emitted_phases_are_legal(seed, t):
    net = build_grid_network(2, 2)
    legal = {p.bits for p in legal_phases(net.intersections[0])} | {SignalPhase.clearance().bits}
    x = np.random.default_rng(seed).random((net.n, 3)) * 5
    prev = [phase_from_index(int(i)) for i in np.random.default_rng(seed).integers(0, 8, 4)]
    for plan in (fixed_time_plan(), max_pressure_plan()):
        for offset in (0.0, 6.0):
            out = advance_plan(plan, t, net, x, prev, offset_s=offset)
            assert all(p.bits in legal for p in out)
            assert out == advance_plan(plan, t, net, x, prev, offset_s=offset)
