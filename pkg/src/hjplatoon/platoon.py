"""Platoon structure, hybrid vehicle modes, and the non-reachability control laws.

Vehicles are Free, Leader, Follower, or Faulty. Platoons are single-file:
member lists are ordered leader first, indices are 1-based and contiguous,
and removing a member shifts everyone behind it forward. A platoon created
by a mid-platoon split remembers its parent so it can later dissolve back
into it.

Followers track a slot offset from the leader opposite its direction of
travel; leaders track the highway polyline with a lookahead point. Safety
checking topology: a vehicle checks its immediate platoon neighbors plus
every external threat (faulty vehicles and intruders) in its altitude band.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field

import numpy as np


class Mode(enum.Enum):
    FREE = "free"
    LEADER = "leader"
    FOLLOWER = "follower"
    FAULTY = "faulty"


class TransitionError(RuntimeError):
    """A mode transition request that the automaton does not allow."""


@dataclass
class VehicleRecord:
    """Physical state plus platoon membership and controller bookkeeping."""

    id: int
    state: np.ndarray                      # (p_x, v_x, p_y, v_y)
    mode: Mode = Mode.FREE
    platoon_id: int | None = None
    index: int | None = None               # 1-based, 1 = leader
    altitude_band: int = 0
    last_accel: np.ndarray = field(default_factory=lambda: np.zeros(2))
    fault_clock: float | None = None
    behavior: str = "normal"               # normal | intruder | reverse_track
    spawn_time: float = 0.0
    locked: bool = False                   # liveness lock-in hysteresis flag
    controller: str = "idle"               # tag of the last active control law

    def __post_init__(self):
        self.state = np.asarray(self.state, dtype=float).copy()
        if self.state.shape != (4,):
            raise ValueError("vehicle state is (p_x, v_x, p_y, v_y)")

    @property
    def position(self) -> np.ndarray:
        return self.state[[0, 2]]

    @property
    def velocity(self) -> np.ndarray:
        return self.state[[1, 3]]

    def in_platoon(self) -> bool:
        return self.platoon_id is not None


@dataclass
class Platoon:
    id: int
    members: list[int]                     # vehicle ids, leader first
    parent: int | None = None              # platoon this one split from


class HighwayPath:
    """Arc-length parametrized polyline with a target travel speed."""

    def __init__(self, points, speed: float):
        pts = np.asarray(points, dtype=float)
        if pts.ndim != 2 or pts.shape[0] < 2 or pts.shape[1] != 2:
            raise ValueError("highway needs at least two 2-d points")
        seg = np.diff(pts, axis=0)
        seg_len = np.linalg.norm(seg, axis=1)
        if np.any(seg_len <= 0):
            raise ValueError("highway polyline vertices must be distinct")
        if speed <= 0:
            raise ValueError("highway speed must be positive")
        self.points = pts
        self.speed = float(speed)
        self._seg = seg
        self._seg_len = seg_len
        self._cum = np.concatenate([[0.0], np.cumsum(seg_len)])

    @property
    def length(self) -> float:
        return float(self._cum[-1])

    def reversed(self) -> "HighwayPath":
        return HighwayPath(self.points[::-1].copy(), self.speed)

    def point_at(self, s: float) -> np.ndarray:
        arc = np.clip(s, 0.0, 1.0) * self.length
        i = min(int(np.searchsorted(self._cum, arc, side="right")) - 1, len(self._seg) - 1)
        t = (arc - self._cum[i]) / self._seg_len[i]
        return self.points[i] + t * self._seg[i]

    def direction_at(self, s: float) -> np.ndarray:
        arc = np.clip(s, 0.0, 1.0) * self.length
        i = min(int(np.searchsorted(self._cum, arc, side="right")) - 1, len(self._seg) - 1)
        return self._seg[i] / self._seg_len[i]

    def project(self, point) -> float:
        """Parameter s of the closest polyline point to ``point``."""
        p = np.asarray(point, dtype=float)
        rel = p - self.points[:-1]
        t = np.clip(np.einsum("ij,ij->i", rel, self._seg) / self._seg_len**2, 0.0, 1.0)
        closest = self.points[:-1] + t[:, None] * self._seg
        dist = np.linalg.norm(closest - p, axis=1)
        i = int(np.argmin(dist))
        return float((self._cum[i] + t[i] * self._seg_len[i]) / self.length)


class PlatoonRegistry:
    """Vehicle store plus ordered platoon member lists."""

    def __init__(self, spacing: float, highway: HighwayPath | None = None):
        if spacing <= 0:
            raise ValueError("platoon spacing must be positive")
        self.spacing = spacing
        self.highway = highway
        self.vehicles: dict[int, VehicleRecord] = {}
        self.platoons: dict[int, Platoon] = {}
        self._next_platoon_id = 1

    def add_vehicle(self, rec: VehicleRecord) -> VehicleRecord:
        if rec.id in self.vehicles:
            raise ValueError(f"duplicate vehicle id {rec.id}")
        self.vehicles[rec.id] = rec
        return rec

    def platoon_of(self, vid: int) -> Platoon | None:
        pid = self.vehicles[vid].platoon_id
        return self.platoons.get(pid) if pid is not None else None

    def _reindex(self, platoon: Platoon) -> None:
        for pos, vid in enumerate(platoon.members):
            rec = self.vehicles[vid]
            rec.platoon_id = platoon.id
            rec.index = pos + 1
            rec.mode = Mode.LEADER if pos == 0 else Mode.FOLLOWER

    def create_platoon(self, leader_id: int, parent: int | None = None) -> Platoon:
        pid = self._next_platoon_id
        self._next_platoon_id += 1
        platoon = Platoon(pid, [leader_id], parent)
        self.platoons[pid] = platoon
        self._reindex(platoon)
        return platoon

    def append_member(self, pid: int, vid: int) -> None:
        platoon = self.platoons[pid]
        platoon.members.append(vid)
        self._reindex(platoon)

    def remove_member(self, vid: int) -> None:
        """Drop a vehicle from its platoon; trailing members shift forward."""
        rec = self.vehicles[vid]
        platoon = self.platoon_of(vid)
        if platoon is None:
            return
        platoon.members.remove(vid)
        rec.platoon_id = None
        rec.index = None
        if platoon.members:
            self._reindex(platoon)
        else:
            self._drop_platoon(platoon.id)

    def _drop_platoon(self, pid: int) -> None:
        parent = self.platoons[pid].parent
        del self.platoons[pid]
        for other in self.platoons.values():
            if other.parent == pid:
                other.parent = parent

    def dissolve_into(self, pid: int, target_pid: int) -> None:
        """Append every member of ``pid`` to ``target_pid`` in order."""
        if pid == target_pid:
            raise ValueError("cannot dissolve a platoon into itself")
        source = self.platoons[pid]
        target = self.platoons[target_pid]
        target.members.extend(source.members)
        source.members = []
        self._drop_platoon(pid)
        self._reindex(target)

    def neighbors(self, vid: int) -> list[int]:
        platoon = self.platoon_of(vid)
        if platoon is None:
            return []
        pos = platoon.members.index(vid)
        out = []
        if pos > 0:
            out.append(platoon.members[pos - 1])
        if pos + 1 < len(platoon.members):
            out.append(platoon.members[pos + 1])
        return out

    def check_consistency(self) -> None:
        """Single-file invariant: unique contiguous indices, leader first."""
        seen: set[int] = set()
        for platoon in self.platoons.values():
            if not platoon.members:
                raise AssertionError(f"platoon {platoon.id} is empty")
            for pos, vid in enumerate(platoon.members):
                rec = self.vehicles[vid]
                assert vid not in seen, f"vehicle {vid} in two platoons"
                seen.add(vid)
                assert rec.platoon_id == platoon.id
                assert rec.index == pos + 1
                expected = Mode.LEADER if pos == 0 else Mode.FOLLOWER
                assert rec.mode == expected, f"vehicle {vid}: {rec.mode} at index {pos + 1}"
        for rec in self.vehicles.values():
            if rec.id not in seen:
                assert rec.platoon_id is None and rec.index is None


# ---------------------------------------------------------------------------
# Control laws
# ---------------------------------------------------------------------------

EPS_SPEED = 1e-9


def nominal_offset(i: int, b: float, leader_velocity, fallback_direction=None) -> np.ndarray:
    """Slot offset for member i: (i-1)*b opposite the leader's travel direction."""
    if i < 1:
        raise ValueError("member index is 1-based")
    v = np.asarray(leader_velocity, dtype=float)
    speed = float(np.linalg.norm(v))
    if speed > EPS_SPEED:
        direction = v / speed
    elif fallback_direction is not None:
        direction = np.asarray(fallback_direction, dtype=float)
        direction = direction / np.linalg.norm(direction)
    else:
        raise ValueError("leader speed is ~0 and no fallback direction was given")
    return -(i - 1) * b * direction


def follower_control(self_state, leader_state, leader_accel, i: int, b: float,
                     kp: float, kv: float, u_max: float,
                     fallback_direction=None) -> np.ndarray:
    """Slot-tracking feedback plus the leader's accel as feedforward."""
    if kp <= 0 or kv <= 0:
        raise ValueError("gains must be positive")
    s = np.asarray(self_state, dtype=float)
    l = np.asarray(leader_state, dtype=float)
    offset = nominal_offset(i, b, l[[1, 3]], fallback_direction)
    u = (
        kp * (l[[0, 2]] + offset - s[[0, 2]])
        + kv * (l[[1, 3]] - s[[1, 3]])
        + np.asarray(leader_accel, dtype=float)
    )
    return np.clip(u, -u_max, u_max)


def leader_highway_control(self_state, highway: HighwayPath, lookahead: float,
                           kp: float, kv: float, u_max: float) -> np.ndarray:
    """Track the highway at its target speed.

    Position feedback pulls toward the projection point (lateral error
    only), velocity feedback toward the target speed along the direction a
    lookahead ahead, so the law is stationary when riding the path at
    speed.
    """
    s = np.asarray(self_state, dtype=float)
    p, v = s[[0, 2]], s[[1, 3]]
    s0 = highway.project(p)
    closest = highway.point_at(s0)
    s1 = min(s0 + lookahead / highway.length, 1.0)
    direction = highway.direction_at(s1)
    u = kp * (closest - p) + kv * (highway.speed * direction - v)
    return np.clip(u, -u_max, u_max)


# ---------------------------------------------------------------------------
# Safety-check topology and control arbitration
# ---------------------------------------------------------------------------


def safety_check_set(rec: VehicleRecord, registry: PlatoonRegistry,
                     externals) -> list[int]:
    """Q(i): platoon neighbors plus every external threat, excluding self."""
    out = registry.neighbors(rec.id)
    for ext in externals:
        if ext != rec.id and ext not in out:
            out.append(ext)
    return out


@dataclass(frozen=True)
class SafetyCheck:
    """Outcome of one pairwise safety evaluation."""

    other_id: int
    value: float
    inside: bool
    distance: float                       # planar separation, for tie-breaking
    control: np.ndarray | None = None     # evader accel for this pair if inside


@dataclass(frozen=True)
class Arbitration:
    control: np.ndarray
    breaches: int
    escalate: bool
    against: int | None


def arbitrate_control(liveness_u, checks: list[SafetyCheck]) -> Arbitration:
    """Liveness control unless a breach forces the pairwise safety law.

    One breach: play that pair's safety control. Two or more: still play
    the nearest breacher's safety control but request an altitude change,
    since pairwise guarantees no longer compose in a single band.
    """
    breaches = [c for c in checks if c.inside]
    if not breaches:
        return Arbitration(np.asarray(liveness_u, dtype=float), 0, False, None)
    nearest = min(breaches, key=lambda c: (c.distance, c.other_id))
    if nearest.control is None:
        raise ValueError("breaching check is missing its safety control")
    return Arbitration(nearest.control, len(breaches), len(breaches) >= 2, nearest.other_id)


def assign_escalation_bands(registry: PlatoonRegistry, requesting_ids) -> dict[int, int]:
    """Give each escalating vehicle its own fresh altitude band.

    Distinct bands per escalation keep previously-breaching pairs apart,
    so K simultaneous breaches along a chain resolve with K-1 extra bands.
    """
    used = max((rec.altitude_band for rec in registry.vehicles.values()), default=0)
    assignment = {}
    for vid in sorted(requesting_ids):
        used += 1
        assignment[vid] = used
    return assignment


# ---------------------------------------------------------------------------
# Mode automaton
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Fault:
    pass


@dataclass(frozen=True)
class ReachedHighwayTarget:
    pass


@dataclass(frozen=True)
class ReachedJoinTarget:
    behind_platoon: int


@dataclass(frozen=True)
class Split:
    pass


@dataclass(frozen=True)
class Merge:
    target_platoon: int


@dataclass(frozen=True)
class LeaveHighway:
    pass


def _apply_fault(rec: VehicleRecord, registry: PlatoonRegistry) -> None:
    registry.remove_member(rec.id)
    rec.mode = Mode.FAULTY
    rec.fault_clock = 0.0
    rec.locked = False


def _apply_event(rec: VehicleRecord, registry: PlatoonRegistry, event) -> None:
    if isinstance(event, Fault):
        _apply_fault(rec, registry)
        return
    if isinstance(event, ReachedHighwayTarget):
        if rec.mode is not Mode.FREE:
            raise TransitionError(f"vehicle {rec.id}: highway merge completes from Free, not {rec.mode.value}")
        registry.create_platoon(rec.id)
        rec.locked = False
        return
    if isinstance(event, ReachedJoinTarget):
        if rec.mode is not Mode.FREE:
            raise TransitionError(f"vehicle {rec.id}: platoon join completes from Free, not {rec.mode.value}")
        if event.behind_platoon not in registry.platoons:
            raise TransitionError(f"vehicle {rec.id}: platoon {event.behind_platoon} does not exist")
        registry.append_member(event.behind_platoon, rec.id)
        rec.locked = False
        return
    if isinstance(event, Split):
        if rec.mode is not Mode.FOLLOWER:
            raise TransitionError(f"vehicle {rec.id}: only followers split, not {rec.mode.value}")
        old = registry.platoon_of(rec.id)
        pos = old.members.index(rec.id)
        moving = old.members[pos:]
        old.members = old.members[:pos]
        new = registry.create_platoon(rec.id, parent=old.id)
        new.members = list(moving)
        registry._reindex(new)
        registry._reindex(old)
        rec.locked = False
        return
    if isinstance(event, Merge):
        if rec.mode is not Mode.LEADER:
            raise TransitionError(f"vehicle {rec.id}: only leaders merge, not {rec.mode.value}")
        own = registry.platoon_of(rec.id)
        if event.target_platoon not in registry.platoons:
            raise TransitionError(f"vehicle {rec.id}: platoon {event.target_platoon} does not exist")
        if event.target_platoon == own.id:
            raise TransitionError(f"vehicle {rec.id}: cannot merge a platoon with itself")
        registry.dissolve_into(own.id, event.target_platoon)
        rec.locked = False
        return
    if isinstance(event, LeaveHighway):
        if rec.mode is not Mode.LEADER:
            raise TransitionError(f"vehicle {rec.id}: only leaders leave the highway, not {rec.mode.value}")
        registry.remove_member(rec.id)
        rec.mode = Mode.FREE
        rec.locked = False
        return
    raise TransitionError(f"unknown event {event!r}")


def mode_step(rec: VehicleRecord, registry: PlatoonRegistry, events, dt: float,
              t_internal: float) -> None:
    """Apply this step's transition events and advance the fault clock.

    A Faulty vehicle leaves the highway altitude band once its clock
    reaches t_internal, which drops it out of every Q(i).
    """
    for event in events:
        _apply_event(rec, registry, event)
    if rec.mode is Mode.FAULTY and rec.fault_clock is not None:
        rec.fault_clock += dt
        if rec.fault_clock >= t_internal - 1e-12 and rec.altitude_band == 0:
            bands = assign_escalation_bands(registry, [rec.id])
            rec.altitude_band = bands[rec.id]
