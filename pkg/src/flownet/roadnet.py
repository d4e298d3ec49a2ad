"""Road networks with signalized movements, and the adjacency matrices they induce.

Road segments are graph nodes. A movement is a permitted traversal from an
upstream segment to a downstream segment through one intersection. The static
adjacency marks every movement; the phase-activated adjacency keeps only
movements whose signal is green (or that are always permitted).

Grid conventions (``build_grid_network``): intersection ``(r, c)`` has id
``r * cols + c``, row 0 is the northern edge. Every edge of the grid, including
the stubs that leave it, carries one segment per direction; a stub's outer end
is the ``BOUNDARY`` virtual node. Movements are ordered by approach N, E, S, W
(the side vehicles arrive from) and then by turn L, S, R, so movement
``k = 3 * approach + turn``.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path

import numpy as np

from .errors import ConfigurationError

BOUNDARY = -1
TURNS = ("left", "straight", "right")
APPROACHES = ("N", "E", "S", "W")

# heading of traffic arriving from each approach, and the heading after each turn
_HEADING_FROM_APPROACH = {"N": "S", "E": "W", "S": "N", "W": "E"}
_LEFT = {"S": "E", "W": "S", "N": "W", "E": "N"}
_RIGHT = {"S": "W", "W": "N", "N": "E", "E": "S"}
_STEP = {"N": (-1, 0), "S": (1, 0), "E": (0, 1), "W": (0, -1)}


@dataclass(frozen=True)
class RoadSegment:
    id: int
    from_node: int
    to_node: int
    lane_count: int = 1
    length_m: float = 100.0

    def __post_init__(self):
        if self.from_node == self.to_node:
            raise ConfigurationError(f"segment {self.id}: from_node equals to_node")
        if self.lane_count < 1:
            raise ConfigurationError(f"segment {self.id}: lane_count must be >= 1")
        if not self.length_m > 0:
            raise ConfigurationError(f"segment {self.id}: length_m must be > 0")

    @property
    def is_entry(self) -> bool:
        return self.from_node == BOUNDARY

    @property
    def is_exit(self) -> bool:
        return self.to_node == BOUNDARY


@dataclass(frozen=True)
class Movement:
    k: int
    up: int
    down: int
    turn: str

    def __post_init__(self):
        if self.turn not in TURNS:
            raise ConfigurationError(f"movement {self.k}: unknown turn {self.turn!r}")
        if self.up == self.down:
            raise ConfigurationError(f"movement {self.k}: up equals down")

    @property
    def channel(self) -> int:
        """Index of the turn-intent channel this movement drains."""
        return TURNS.index(self.turn)


@dataclass(frozen=True)
class Intersection:
    id: int
    movements: tuple[Movement, ...]
    always_on: frozenset[int] = frozenset()

    def __post_init__(self):
        ks = [m.k for m in self.movements]
        if ks != list(range(len(ks))):
            raise ConfigurationError(f"intersection {self.id}: movement indices must be 0..P-1 in order")
        pairs = {(m.up, m.down) for m in self.movements}
        if len(pairs) != len(self.movements):
            raise ConfigurationError(f"intersection {self.id}: duplicate (up, down) pair")
        for k in self.always_on:
            if not 0 <= k < len(self.movements) or self.movements[k].turn != "right":
                raise ConfigurationError(f"intersection {self.id}: always_on {k} is not a right turn")

    @property
    def n_movements(self) -> int:
        return len(self.movements)

    @property
    def incoming(self) -> tuple[int, ...]:
        return tuple(dict.fromkeys(m.up for m in self.movements))

    @property
    def outgoing(self) -> tuple[int, ...]:
        return tuple(dict.fromkeys(m.down for m in self.movements))


@dataclass(frozen=True)
class RoadNetwork:
    segments: tuple[RoadSegment, ...]
    intersections: tuple[Intersection, ...]
    grid_shape: tuple[int, int] | None = field(default=None, compare=False)

    def __post_init__(self):
        ids = [s.id for s in self.segments]
        if ids != list(range(len(ids))):
            raise ConfigurationError("segment ids must be 0..N-1 in order")
        n = len(ids)
        by_id = {x.id: x for x in self.intersections}
        if len(by_id) != len(self.intersections):
            raise ConfigurationError("duplicate intersection id")
        for inter in self.intersections:
            for m in inter.movements:
                if not (0 <= m.up < n and 0 <= m.down < n):
                    raise ConfigurationError(f"intersection {inter.id}: movement {m.k} references unknown segment")
                up, down = self.segments[m.up], self.segments[m.down]
                if up.to_node != inter.id or down.from_node != inter.id:
                    raise ConfigurationError(
                        f"intersection {inter.id}: movement {m.k} does not meet at this intersection")

    @property
    def n(self) -> int:
        return len(self.segments)

    @property
    def boundary_segments(self) -> tuple[int, ...]:
        return tuple(s.id for s in self.segments if s.is_entry or s.is_exit)

    @property
    def entry_segments(self) -> tuple[int, ...]:
        return tuple(s.id for s in self.segments if s.is_entry)

    @property
    def exit_segments(self) -> tuple[int, ...]:
        return tuple(s.id for s in self.segments if s.is_exit)

    def intersection_index(self, inter_id: int) -> int:
        for i, x in enumerate(self.intersections):
            if x.id == inter_id:
                return i
        raise ConfigurationError(f"unknown intersection {inter_id}")

    @cached_property
    def downstream_intersection(self) -> np.ndarray:
        """Position (in ``intersections``) of each segment's downstream intersection, -1 for exits."""
        pos = {x.id: i for i, x in enumerate(self.intersections)}
        return np.array([pos.get(s.to_node, -1) for s in self.segments], dtype=int)

    @cached_property
    def movement_table(self) -> np.ndarray:
        """One row per movement: (intersection position, k, up, down, channel)."""
        rows = [(i, m.k, m.up, m.down, m.channel)
                for i, x in enumerate(self.intersections) for m in x.movements]
        return np.array(rows, dtype=int).reshape(-1, 5)

    @cached_property
    def always_on_flags(self) -> np.ndarray:
        """Boolean per row of ``movement_table``."""
        return np.array([m.k in x.always_on for x in self.intersections for m in x.movements], dtype=bool)

    # serialization
    def to_dict(self) -> dict:
        return {
            "segments": [
                {"id": s.id, "from": s.from_node, "to": s.to_node, "lanes": s.lane_count, "length_m": s.length_m}
                for s in self.segments
            ],
            "intersections": [
                {
                    "id": x.id,
                    "movements": [{"k": m.k, "up": m.up, "down": m.down, "turn": m.turn} for m in x.movements],
                    "always_on": sorted(x.always_on),
                }
                for x in self.intersections
            ],
        }

    @classmethod
    def from_dict(cls, doc: dict) -> RoadNetwork:
        try:
            segments = tuple(
                RoadSegment(int(s["id"]), int(s["from"]), int(s["to"]), int(s["lanes"]), float(s["length_m"]))
                for s in doc["segments"])
            intersections = tuple(
                Intersection(
                    int(x["id"]),
                    tuple(Movement(int(m["k"]), int(m["up"]), int(m["down"]), str(m["turn"]))
                          for m in x["movements"]),
                    frozenset(int(k) for k in x.get("always_on", ())),
                )
                for x in doc["intersections"])
        except (KeyError, TypeError) as exc:
            raise ConfigurationError(f"malformed network document: {exc}") from exc
        return cls(segments, intersections)


def save_network(net: RoadNetwork, path: str | Path) -> None:
    Path(path).write_text(json.dumps(net.to_dict(), indent=1))


def load_network(path: str | Path) -> RoadNetwork:
    return RoadNetwork.from_dict(json.loads(Path(path).read_text()))


def build_grid_network(rows: int, cols: int, lane_count: int = 3, length_m: float = 300.0) -> RoadNetwork:
    """Bidirectional ``rows x cols`` grid with boundary stubs on every outer edge."""
    for name, val in (("rows", rows), ("cols", cols), ("lane_count", lane_count)):
        if not isinstance(val, (int, np.integer)) or val < 1:
            raise ConfigurationError(f"{name} must be a positive integer, got {val!r}")
    if not length_m > 0:
        raise ConfigurationError(f"length_m must be positive, got {length_m!r}")

    def node(r, c):
        return r * cols + c if 0 <= r < rows and 0 <= c < cols else BOUNDARY

    segments: list[RoadSegment] = []
    # (position, heading) -> segment id, where position is the node the segment leaves
    leaving: dict[tuple[tuple[int, int], str], int] = {}
    arriving: dict[tuple[tuple[int, int], str], int] = {}

    def add(src, dst, heading):
        sid = len(segments)
        segments.append(RoadSegment(sid, node(*src), node(*dst), lane_count, float(length_m)))
        leaving[(src, heading)] = sid
        arriving[(dst, heading)] = sid

    for r in range(rows):
        for c in range(-1, cols):
            add((r, c), (r, c + 1), "E")
            add((r, c + 1), (r, c), "W")
    for c in range(cols):
        for r in range(-1, rows):
            add((r, c), (r + 1, c), "S")
            add((r + 1, c), (r, c), "N")

    intersections = []
    for r in range(rows):
        for c in range(cols):
            movements = []
            for a, approach in enumerate(APPROACHES):
                heading = _HEADING_FROM_APPROACH[approach]
                up = arriving[((r, c), heading)]
                for t, turn in enumerate(TURNS):
                    out = {"left": _LEFT[heading], "straight": heading, "right": _RIGHT[heading]}[turn]
                    down = leaving[((r, c), out)]
                    movements.append(Movement(3 * a + t, up, down, turn))
            always_on = frozenset(m.k for m in movements if m.turn == "right")
            intersections.append(Intersection(node(r, c), tuple(movements), always_on))
    return RoadNetwork(tuple(segments), tuple(intersections), grid_shape=(rows, cols))


def static_adjacency(net: RoadNetwork) -> np.ndarray:
    a = np.zeros((net.n, net.n))
    tab = net.movement_table
    if len(tab):
        a[tab[:, 2], tab[:, 3]] = 1.0
    return a


def _phase_bits(net: RoadNetwork, phases) -> np.ndarray:
    """Flatten per-intersection phase vectors to one flag per movement-table row."""
    if len(phases) != len(net.intersections):
        raise ConfigurationError(f"expected {len(net.intersections)} phase vectors, got {len(phases)}")
    flat = []
    for inter, p in zip(net.intersections, phases):
        bits = getattr(p, "bits", p)
        if len(bits) != inter.n_movements:
            raise ConfigurationError(
                f"intersection {inter.id}: phase has {len(bits)} signals, expected {inter.n_movements}")
        flat.extend(bits)
    return np.asarray(flat, dtype=bool).reshape(-1)


def active_movements(net: RoadNetwork, phases) -> np.ndarray:
    """Boolean per movement-table row: green in ``phases`` or always permitted."""
    return _phase_bits(net, phases) | net.always_on_flags


def phase_adjacency(net: RoadNetwork, phases) -> np.ndarray:
    """Connectivity under one signal phase per intersection (green or always-on movements)."""
    a = np.zeros((net.n, net.n))
    tab = net.movement_table
    on = active_movements(net, phases)
    if on.any():
        a[tab[on, 2], tab[on, 3]] = 1.0
    return a


def normalize_adjacency(a) -> np.ndarray:
    """``D^-1/2 A D^-1/2`` with row-sum degrees; zero-degree rows and columns stay zero."""
    a = np.asarray(a, dtype=float)
    deg = a.sum(axis=1)
    inv = np.zeros_like(deg)
    nz = deg > 0
    inv[nz] = 1.0 / np.sqrt(deg[nz])
    return inv[:, None] * a * inv[None, :]
