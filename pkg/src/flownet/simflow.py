"""Store-and-forward traffic simulation.

State is an ``N x 3`` array of vehicles on each segment, split by turn intent
(left, straight, right). One step, with ``A`` the phase-activated adjacency:

* each channel ``c`` of segment ``q`` releases ``A[q, d] * gamma[q, d] * x[q, c]``
  towards its downstream ``d`` for that turn, never more than ``x[q, c]``; on a
  step that opens with clearance, controllable movements release only the
  green share of it;
* released volume arriving at ``d`` is split over ``d``'s channels by
  ``d``'s turn ratios;
* exit segments drain ``exit_rate * x`` out of the network every step;
* entry segments receive Poisson arrivals with mean
  ``rate * lanes * interval / 3600``, split by their turn ratios.

Everything runs in float64; total volume changes only by arrivals and exits.
"""

from __future__ import annotations

import json
import zlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .errors import ConfigurationError, DomainError
from .roadnet import RoadNetwork, active_movements
from .signals import (
    CLEARANCE, PhasePlan, SignalPhase, fixed_time_plan, from_one_hot, one_hot, phase_from_index,
    phase_index, step_signal,
)

F_CHANNELS = 3
DEFAULT_TURN_RATIOS = (0.2, 0.6, 0.2)


@dataclass(frozen=True)
class StateTensor:
    """Volumes indexed ``[t, segment, channel]`` (time-major), ``interval_s`` seconds per step."""

    volumes: np.ndarray
    interval_s: float = 10.0

    def __post_init__(self):
        v = np.asarray(self.volumes, dtype=float)
        if v.ndim != 3:
            raise ConfigurationError(f"volumes must be T x N x F, got shape {v.shape}")
        if not np.isfinite(v).all() or (v < 0).any():
            raise DomainError("volumes must be finite and non-negative")
        object.__setattr__(self, "volumes", v)

    @property
    def t(self) -> int:
        return self.volumes.shape[0]

    @property
    def n(self) -> int:
        return self.volumes.shape[1]

    @property
    def f(self) -> int:
        return self.volumes.shape[2]


@dataclass(frozen=True)
class DemandSpec:
    arrivals_per_lane_per_hour: float = 180.0
    entry_segments: tuple[int, ...] | None = None
    turn_ratios: tuple[float, float, float] | np.ndarray = DEFAULT_TURN_RATIOS
    seed: int = 0

    def __post_init__(self):
        if self.arrivals_per_lane_per_hour < 0:
            raise ConfigurationError("arrival rate must be non-negative")
        r = np.asarray(self.turn_ratios, dtype=float)
        if r.shape[-1] != F_CHANNELS or r.ndim > 2:
            raise ConfigurationError("turn ratios must be a triple or an N x 3 array")
        if (r < 0).any() or (r > 1).any() or np.abs(r.sum(axis=-1) - 1.0).max() > 1e-9:
            raise ConfigurationError("turn ratios must lie in [0, 1] and sum to 1")
        if self.seed < 0:
            raise ConfigurationError("seed must be non-negative")

    def ratios(self, n: int) -> np.ndarray:
        r = np.asarray(self.turn_ratios, dtype=float)
        if r.ndim == 1:
            return np.broadcast_to(r, (n, F_CHANNELS))
        if r.shape[0] != n:
            raise ConfigurationError(f"turn ratio table has {r.shape[0]} rows for {n} segments")
        return r

    def entries(self, net: RoadNetwork) -> tuple[int, ...]:
        return net.entry_segments if self.entry_segments is None else tuple(self.entry_segments)


@dataclass(frozen=True)
class SaturationRates:
    """Fraction of a turn channel that crosses per step when green.

    ``pairs`` overrides ``default`` for specific ``(up, down)`` movements.
    ``max_release``, when set, caps what one movement can discharge in a step
    (vehicles), which is what makes demand able to saturate an approach.
    """

    default: float = 0.8
    pairs: dict = field(default_factory=dict)
    exit_rate: float = 0.8
    max_release: float | None = None

    def __post_init__(self):
        vals = [self.default, self.exit_rate, *self.pairs.values()]
        if any(not 0.0 <= v <= 1.0 for v in vals):
            raise ConfigurationError("saturation rates must lie in [0, 1]")
        if self.max_release is not None and not self.max_release > 0:
            raise ConfigurationError("max_release must be positive")

    def per_movement(self, net: RoadNetwork) -> np.ndarray:
        tab = net.movement_table
        known = {(int(u), int(d)) for u, d in tab[:, 2:4]}
        unknown = set(self.pairs) - known
        if unknown:
            raise ConfigurationError(f"saturation rates for pairs not in the network: {sorted(unknown)}")
        return np.array([self.pairs.get((int(u), int(d)), self.default) for u, d in tab[:, 2:4]])

    def matrix(self, net: RoadNetwork) -> np.ndarray:
        g = np.zeros((net.n, net.n))
        tab = net.movement_table
        g[tab[:, 2], tab[:, 3]] = self.per_movement(net)
        return g


@dataclass(frozen=True)
class StepFlows:
    state: np.ndarray
    injected: float
    exited: float
    released: float


def _arrivals(net: RoadNetwork, demand: DemandSpec, t: int, interval_s: float) -> np.ndarray:
    counts = np.zeros(net.n)
    entries = demand.entries(net)
    if demand.arrivals_per_lane_per_hour == 0 or not entries:
        return counts
    lanes = np.array([net.segments[e].lane_count for e in entries], dtype=float)
    lam = demand.arrivals_per_lane_per_hour * lanes * interval_s / 3600.0
    rng = np.random.default_rng([demand.seed, t])
    counts[list(entries)] = rng.poisson(lam)
    return counts


def step_flows(state, phases, net: RoadNetwork, gamma: SaturationRates, demand: DemandSpec | None,
               t: int, interval_s: float = 10.0, green_fraction=None) -> StepFlows:
    """Advance one step and report the volume that entered, left and moved.

    ``green_fraction`` (one value per intersection, default 1) scales the
    release of movements that are not always permitted.
    """
    x = np.asarray(state, dtype=float)
    if x.shape != (net.n, F_CHANNELS):
        raise ConfigurationError(f"state must be {net.n} x {F_CHANNELS}, got {x.shape}")
    if (x < 0).any() or not np.isfinite(x).all():
        raise DomainError("state volumes must be finite and non-negative")
    tab = net.movement_table
    up, down, ch = tab[:, 2], tab[:, 3], tab[:, 4]
    on = active_movements(net, phases)

    rate = gamma.per_movement(net)
    if green_fraction is not None:
        g = np.asarray(green_fraction, dtype=float)
        if g.shape != (len(net.intersections),) or (g < 0).any() or (g > 1).any():
            raise ConfigurationError("green_fraction needs one value in [0, 1] per intersection")
        rate = rate * np.where(net.always_on_flags, 1.0, g[tab[:, 0]])
    want = on * rate * x[up, ch]
    if gamma.max_release is not None:
        want = np.minimum(want, gamma.max_release)
    # several movements may share one (segment, channel); scale them to what is there
    asked = np.zeros_like(x)
    np.add.at(asked, (up, ch), want)
    scale = np.ones_like(x)
    over = asked > x
    scale[over] = x[over] / asked[over]
    release = want * scale[up, ch]

    out = np.zeros_like(x)
    np.add.at(out, (up, ch), release)
    into = np.zeros(net.n)
    np.add.at(into, down, release)

    exits = list(net.exit_segments)
    exit_out = gamma.exit_rate * x[exits]
    out[exits] += exit_out
    exited = float(exit_out.sum())

    injected_seg = np.zeros(net.n) if demand is None else _arrivals(net, demand, t, interval_s)
    ratios = (demand or DemandSpec()).ratios(net.n)
    new = x - out + (into + injected_seg)[:, None] * ratios
    return StepFlows(new, float(injected_seg.sum()), exited, float(release.sum()))


def step(state, phases, net: RoadNetwork, gamma: SaturationRates, demand: DemandSpec | None,
         t: int, interval_s: float = 10.0, green_fraction=None) -> np.ndarray:
    return step_flows(state, phases, net, gamma, demand, t, interval_s, green_fraction).state


def simulate(net: RoadNetwork, plan: PhasePlan | None = None, gamma: SaturationRates | None = None,
             demand: DemandSpec | None = None, steps: int = 360,
             interval_s: float | None = None) -> tuple[StateTensor, list[list[SignalPhase]]]:
    """Run ``steps`` steps from an empty network.

    ``volumes[t]`` is the state at the start of step ``t`` and ``log[t]`` the
    green phases of that step. Controller plans read the true state.
    """
    if steps < 1:
        raise ConfigurationError("steps must be >= 1")
    plan = plan or fixed_time_plan()
    gamma = gamma or SaturationRates()
    demand = demand if demand is not None else DemandSpec()
    dt = plan.action_interval_s if interval_s is None else interval_s
    if dt != plan.action_interval_s:
        raise ConfigurationError("simulation interval must equal the plan's action interval")
    x = np.zeros((net.n, F_CHANNELS))
    vols = np.empty((steps, net.n, F_CHANNELS))
    log: list[list[SignalPhase]] = []
    previous = None
    for t in range(steps):
        vols[t] = x
        sig = step_signal(plan, t, net, state=x, previous=previous)
        log.append(sig.phases)
        previous = sig.phases
        x = step(x, sig.phases, net, gamma, demand, t, dt, sig.green_fraction)
    return StateTensor(vols, dt), log


def apply_mask(net: RoadNetwork, unobserved_intersections) -> np.ndarray:
    """``N x 3`` observability mask: 0 on every segment touching an unobserved intersection."""
    hidden = set(int(i) for i in unobserved_intersections)
    known = {x.id for x in net.intersections}
    if not hidden <= known:
        raise ConfigurationError(f"unknown intersections {sorted(hidden - known)}")
    m = np.ones((net.n, F_CHANNELS))
    for s in net.segments:
        if s.from_node in hidden or s.to_node in hidden:
            m[s.id] = 0.0
    return m


def sample_unobserved(net: RoadNetwork, count: int, seed: int) -> list[int]:
    """Deterministic random choice of ``count`` intersection ids."""
    ids = [x.id for x in net.intersections]
    if not 0 <= count <= len(ids):
        raise ConfigurationError(f"cannot mask {count} of {len(ids)} intersections")
    rng = np.random.default_rng([seed, zlib.crc32(b"mask")])
    return sorted(int(i) for i in rng.choice(ids, size=count, replace=False))


def phase_log_to_indices(log: Sequence[Sequence[SignalPhase]]) -> np.ndarray:
    return np.array([[phase_index(p) for p in row] for row in log], dtype=int).reshape(len(log), -1)


def indices_to_phase_log(idx: np.ndarray) -> list[list[SignalPhase]]:
    return [[phase_from_index(int(i)) for i in row] for row in idx]


# ---------------------------------------------------------------- flowpack

@dataclass
class FlowPack:
    """Simulated or recorded dataset: volumes, phase indices and observability mask."""

    volumes: np.ndarray          # T x N x F
    phases: np.ndarray           # T x I phase indices, CLEARANCE during clearance
    mask: np.ndarray             # N x F
    interval_s: float = 10.0

    @property
    def t(self) -> int:
        return self.volumes.shape[0]

    @property
    def n(self) -> int:
        return self.volumes.shape[1]

    @property
    def f(self) -> int:
        return self.volumes.shape[2]

    def to_dict(self) -> dict:
        return {
            "n": self.n,
            "f": self.f,
            "t": self.t,
            "interval_s": float(self.interval_s),
            "volumes": self.volumes.tolist(),
            "phases": [[one_hot(int(i)) for i in row] for row in self.phases],
            "mask": self.mask.astype(int).tolist(),
        }

    @classmethod
    def from_dict(cls, doc: dict) -> FlowPack:
        try:
            vols = np.asarray(doc["volumes"], dtype=float).reshape(doc["t"], doc["n"], doc["f"])
            phases = np.array([[from_one_hot(b) for b in row] for row in doc["phases"]], dtype=int)
            mask = np.asarray(doc["mask"], dtype=float).reshape(doc["n"], doc["f"])
            interval = float(doc["interval_s"])
        except (KeyError, ValueError, TypeError) as exc:
            raise ConfigurationError(f"malformed flowpack: {exc}") from exc
        if phases.shape[0] != vols.shape[0]:
            raise ConfigurationError("flowpack phases and volumes disagree on T")
        return cls(vols, phases.reshape(vols.shape[0], -1), mask, interval)

    def dumps(self) -> str:
        return json.dumps(self.to_dict())

    def save(self, path: str | Path) -> None:
        Path(path).write_text(self.dumps())

    @classmethod
    def load(cls, path: str | Path) -> FlowPack:
        return cls.from_dict(json.loads(Path(path).read_text()))


def to_flowpack(states: StateTensor, log, mask=None) -> FlowPack:
    m = np.ones((states.n, states.f)) if mask is None else np.asarray(mask, dtype=float)
    return FlowPack(states.volumes, phase_log_to_indices(log), m, states.interval_s)


# ---------------------------------------------------------------- closed-loop case study

# An estimator sees the masked history (h x N x F, zeros where unobserved), the
# phase indices applied during those steps (h x I) and the mask; it returns its
# estimate of the state that follows the last history step.
Estimator = Callable[[np.ndarray, np.ndarray, np.ndarray], np.ndarray]


@dataclass(frozen=True)
class CaseStudyResult:
    queue_per_intersection: dict[int, float]
    mean_queue: float
    travel_time_s: float
    injected: float
    phases: np.ndarray


def run_case_study(net: RoadNetwork, transition_model, mask, demand: DemandSpec, steps: int,
                   gamma: SaturationRates | None = None, plan: PhasePlan | None = None) -> CaseStudyResult:
    """Closed-loop control on the simulator.

    ``transition_model`` is ``"truth"`` (controller sees the true state),
    ``"zero"`` (unobserved volumes read as 0) or an ``Estimator``. Each step the
    controller sees observed volumes merged with the estimator's prediction on
    unobserved segments. A fixed-cycle ``plan`` ignores the state entirely.
    """
    if steps < 1:
        raise ConfigurationError("steps must be >= 1")
    gamma = gamma or SaturationRates()
    plan = plan or PhasePlan("controller")
    mask = np.asarray(mask, dtype=float)
    if mask.shape != (net.n, F_CHANNELS):
        raise ConfigurationError(f"mask must be {net.n} x {F_CHANNELS}, got {mask.shape}")
    model_n = getattr(transition_model, "n", net.n)
    if model_n != net.n:
        raise ConfigurationError(f"model expects {model_n} segments, network has {net.n}")
    dt = plan.action_interval_s
    incoming = [list(x.incoming) for x in net.intersections]

    x = np.zeros((net.n, F_CHANNELS))
    obs_hist = np.zeros((steps, net.n, F_CHANNELS))
    phase_hist = np.full((steps, len(net.intersections)), CLEARANCE, dtype=int)
    queues = np.zeros(len(net.intersections))
    vehicle_steps = 0.0
    injected = 0.0
    previous = None
    for t in range(steps):
        obs = x * mask
        obs_hist[t] = obs
        if plan.kind == "controller":
            if isinstance(transition_model, str) and transition_model == "truth":
                seen = x
            elif isinstance(transition_model, str) and transition_model == "zero":
                seen = obs
            else:
                est = np.asarray(transition_model(obs_hist[:t], phase_hist[:t], mask), dtype=float)
                seen = obs + np.maximum(est, 0.0) * (1.0 - mask)
            sig = step_signal(plan, t, net, state=seen, previous=previous)
        else:
            sig = step_signal(plan, t, net)
        previous = sig.phases
        phase_hist[t] = [phase_index(p) for p in sig.phases]
        queues += [x[seg].sum() for seg in incoming]
        vehicle_steps += x.sum()
        flows = step_flows(x, sig.phases, net, gamma, demand, t, dt, sig.green_fraction)
        injected += flows.injected
        x = flows.state
    queues /= steps
    per = {inter.id: float(q) for inter, q in zip(net.intersections, queues)}
    travel = vehicle_steps / injected * dt if injected > 0 else 0.0
    return CaseStudyResult(per, float(queues.mean()), float(travel), injected, phase_hist)
