"""Signal phases, fixed-time plans and the MaxPressure controller.

A ``SignalPhase`` holds one bit per movement of an intersection. Right turns
are never part of a phase; the intersection's ``always_on`` set permits them
at all times. The eight standard phases pair two compatible controllable
movements each, in the usual order::

    0 WT+ET   1 NT+ST   2 WL+EL   3 NL+SL
    4 WT+WL   5 ET+EL   6 NT+NL   7 ST+SL

(``NT`` = through traffic arriving from the north, and so on.) During yellow
and all-red clearance every controllable bit is 0; that is the ``CLEARANCE``
index -1 in phase logs.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .errors import ConfigurationError, UnsupportedTopologyError
from .roadnet import APPROACHES, TURNS, Intersection, RoadNetwork

CLEARANCE = -1
N_PHASES = 8

_PHASE_MOVES = (
    (("W", "straight"), ("E", "straight")),
    (("N", "straight"), ("S", "straight")),
    (("W", "left"), ("E", "left")),
    (("N", "left"), ("S", "left")),
    (("W", "straight"), ("W", "left")),
    (("E", "straight"), ("E", "left")),
    (("N", "straight"), ("N", "left")),
    (("S", "straight"), ("S", "left")),
)
PHASE_NAMES = ("WT_ET", "NT_ST", "WL_EL", "NL_SL", "WT_WL", "ET_EL", "NT_NL", "ST_SL")


def movement_index(approach: str, turn: str) -> int:
    return 3 * APPROACHES.index(approach) + TURNS.index(turn)


@dataclass(frozen=True)
class SignalPhase:
    bits: tuple[int, ...]

    def __post_init__(self):
        object.__setattr__(self, "bits", tuple(int(b) for b in self.bits))
        if any(b not in (0, 1) for b in self.bits):
            raise ConfigurationError("phase bits must be 0 or 1")

    @classmethod
    def from_moves(cls, ks, size: int = 12) -> SignalPhase:
        bits = [0] * size
        for k in ks:
            bits[k] = 1
        return cls(tuple(bits))

    @classmethod
    def clearance(cls, size: int = 12) -> SignalPhase:
        return cls((0,) * size)

    @property
    def active(self) -> tuple[int, ...]:
        return tuple(k for k, b in enumerate(self.bits) if b)


def conflicts(k1: int, k2: int) -> bool:
    """Whether two movements of a standard 4-approach intersection cross or merge.

    Right turns are treated as never conflicting. Same-approach movements never
    conflict; opposing approaches conflict only for a left turn against through
    traffic; movements from perpendicular approaches always conflict.
    """
    a1, t1 = divmod(k1, 3)
    a2, t2 = divmod(k2, 3)
    if k1 == k2 or TURNS[t1] == "right" or TURNS[t2] == "right" or a1 == a2:
        return False
    if (a1 - a2) % 4 == 2:
        return {TURNS[t1], TURNS[t2]} == {"left", "straight"}
    return True


def check_standard(inter: Intersection) -> None:
    """Raise unless ``inter`` has the canonical 12-movement N/E/S/W layout."""
    moves = inter.movements
    if len(moves) != 12:
        raise UnsupportedTopologyError(
            f"intersection {inter.id}: {len(moves)} movements, the phase table needs 12")
    ups = []
    for a in range(4):
        trio = moves[3 * a: 3 * a + 3]
        if tuple(m.turn for m in trio) != TURNS or len({m.up for m in trio}) != 1:
            raise UnsupportedTopologyError(f"intersection {inter.id}: approach {APPROACHES[a]} is not L/S/R")
        ups.append(trio[0].up)
    if len(set(ups)) != 4:
        raise UnsupportedTopologyError(f"intersection {inter.id}: approaches share an upstream segment")


_STANDARD = tuple(
    SignalPhase.from_moves([movement_index(a, t) for a, t in pair]) for pair in _PHASE_MOVES)


def legal_phases(inter: Intersection) -> list[SignalPhase]:
    check_standard(inter)
    return list(_STANDARD)


def phase_index(phase: SignalPhase, phases: Sequence[SignalPhase] = _STANDARD) -> int:
    """Position of ``phase`` in ``phases``; ``CLEARANCE`` for an all-zero phase."""
    if not any(phase.bits):
        return CLEARANCE
    for i, p in enumerate(phases):
        if p.bits == phase.bits:
            return i
    raise ConfigurationError(f"phase {phase.bits} is not a legal phase")


def phase_from_index(idx: int, size: int = 12) -> SignalPhase:
    return SignalPhase.clearance(size) if idx == CLEARANCE else _STANDARD[idx]


def one_hot(idx: int) -> list[int]:
    """8-bit phase indicator used in logs; all zeros during clearance."""
    bits = [0] * N_PHASES
    if idx != CLEARANCE:
        bits[idx] = 1
    return bits


def from_one_hot(bits: Sequence[int]) -> int:
    on = [i for i, b in enumerate(bits) if b]
    if len(on) > 1:
        raise ConfigurationError(f"phase indicator {list(bits)} has more than one active phase")
    return on[0] if on else CLEARANCE


def movement_pressures(inter: Intersection, state) -> np.ndarray:
    """Per-movement pressure: upstream turn-matched volume minus mean downstream volume."""
    x = np.asarray(state, dtype=float)
    if x.size == 0:
        return np.zeros(inter.n_movements)
    return np.array([x[m.up, m.channel] - x[m.down].mean() for m in inter.movements])


def max_pressure_select(inter: Intersection, state, phases: Sequence[SignalPhase] | None = None) -> SignalPhase:
    """Phase with the largest summed movement pressure; ties go to the lowest index.

    Pressures within a tiny relative tolerance of the best count as ties, so the
    choice does not flip on rounding noise when volumes are shifted or scaled.
    """
    if phases is None:
        phases = legal_phases(inter)
    press = movement_pressures(inter, state)
    totals = np.array([sum(press[k] for k in p.active) for p in phases])
    best = totals.max()
    scale = max(np.abs(press).sum(), 1e-300)
    tied = np.flatnonzero(totals >= best - 1e-12 * scale)
    return phases[int(tied[0])]


@dataclass(frozen=True)
class PhasePlan:
    """How signals evolve: a fixed cycle, or MaxPressure re-decided every action interval.

    ``cycle`` lists ``(SignalPhase, duration_s)``; durations are whole multiples
    of the action interval. A switch to a different green opens with
    ``yellow_s + all_red_s`` of clearance at the start of the step, and the new
    phase is green for the rest of it.
    """

    kind: str = "fixed_cycle"
    cycle: tuple[tuple[SignalPhase, float], ...] = ()
    action_interval_s: float = 10.0
    yellow_s: float = 3.0
    all_red_s: float = 2.0

    def __post_init__(self):
        if self.kind not in ("fixed_cycle", "controller"):
            raise ConfigurationError(f"unknown plan kind {self.kind!r}")
        if not self.action_interval_s > 0:
            raise ConfigurationError("action_interval_s must be positive")
        if self.yellow_s < 0 or self.all_red_s < 0:
            raise ConfigurationError("yellow_s and all_red_s must be non-negative")
        if self.action_interval_s < self.yellow_s + self.all_red_s:
            raise ConfigurationError("action_interval_s must cover yellow_s + all_red_s")
        if self.kind == "fixed_cycle":
            if not self.cycle:
                raise ConfigurationError("fixed_cycle plan needs at least one phase")
            for _, d in self.cycle:
                ratio = d / self.action_interval_s
                if not d > 0 or abs(ratio - round(ratio)) > 1e-9:
                    raise ConfigurationError("cycle durations must be positive multiples of action_interval_s")

    @property
    def clearance_s(self) -> float:
        return self.yellow_s + self.all_red_s

    @property
    def cycle_length_s(self) -> float:
        return float(sum(d for _, d in self.cycle))


def fixed_time_plan(phase_duration_s: float = 30.0, action_interval_s: float = 10.0,
                    yellow_s: float = 3.0, all_red_s: float = 2.0) -> PhasePlan:
    """All eight standard phases in order, each held for ``phase_duration_s``."""
    return PhasePlan("fixed_cycle", tuple((p, phase_duration_s) for p in _STANDARD),
                     action_interval_s, yellow_s, all_red_s)


def max_pressure_plan(action_interval_s: float = 10.0, yellow_s: float = 3.0, all_red_s: float = 2.0) -> PhasePlan:
    return PhasePlan("controller", (), action_interval_s, yellow_s, all_red_s)


def _cycle_position(plan: PhasePlan, now: float) -> tuple[SignalPhase, float, bool]:
    """Green phase at time ``now``, seconds since it began, and whether it began with a switch."""
    s = now % plan.cycle_length_s
    start = 0.0
    for j, (phase, dur) in enumerate(plan.cycle):
        if s < start + dur - 1e-9:
            break
        start += dur
    # the very first green of the run follows nothing
    first = now < plan.cycle_length_s and j == 0
    switched = not first and plan.cycle[j - 1][0].bits != phase.bits
    return phase, s - start, switched


@dataclass(frozen=True)
class StepSignal:
    """Green phase per intersection for one step, and the share of the step it is green.

    ``green_fraction`` drops below 1 on steps that open with clearance.
    """

    phases: list
    green_fraction: np.ndarray


def step_signal(plan: PhasePlan, t: int, net: RoadNetwork, state=None,
                previous: Sequence[SignalPhase] | None = None) -> StepSignal:
    """Green phases chosen for step ``t``.

    Fixed cycles depend on time only. Controller plans run MaxPressure on
    ``state`` (N x F volumes); ``previous`` holds last step's greens.
    """
    if t < 0:
        raise ConfigurationError("t must be non-negative")
    dt, clear = plan.action_interval_s, plan.clearance_s
    short = (dt - clear) / dt
    if plan.kind == "fixed_cycle":
        phase, since, switched = _cycle_position(plan, t * dt)
        frac = short if switched and since < 1e-9 and clear > 0 else 1.0
        return StepSignal([phase] * len(net.intersections), np.full(len(net.intersections), frac))
    x = np.zeros((net.n, 3)) if state is None else np.asarray(state, dtype=float)
    out, fracs = [], np.ones(len(net.intersections))
    for i, inter in enumerate(net.intersections):
        chosen = max_pressure_select(inter, x, legal_phases(inter))
        prev = previous[i] if previous is not None else None
        if prev is not None and any(prev.bits) and prev.bits != chosen.bits and clear > 0:
            fracs[i] = short
        out.append(chosen)
    return StepSignal(out, fracs)


def advance_plan(plan: PhasePlan, t: int, net: RoadNetwork, state=None,
                 previous: Sequence[SignalPhase] | None = None, offset_s: float = 0.0) -> list[SignalPhase]:
    """Phase of every intersection ``offset_s`` seconds into step ``t``.

    Inside a clearance window every controllable bit is 0.
    """
    if not 0.0 <= offset_s < plan.action_interval_s:
        raise ConfigurationError("offset_s must lie within the action interval")
    sig = step_signal(plan, t, net, state, previous)
    out = []
    for phase, frac in zip(sig.phases, sig.green_fraction):
        if frac < 1.0 and offset_s < plan.clearance_s:
            phase = SignalPhase.clearance(len(phase.bits))
        out.append(phase)
    return out
