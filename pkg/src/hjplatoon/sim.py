"""Deterministic scenario engine for the three air-highway case studies.

Each step, synchronously for every vehicle: build the checking set Q(i),
evaluate pairwise safety memberships (neighbor checks at the internal
horizon, external threats at the longer external horizon), arbitrate
between the mode's liveness law and the pairwise safety law, integrate
with semi-implicit Euler, then apply mode transitions. Everything iterates
in sorted vehicle-id order and uses no randomness, so a config maps to a
bit-identical trace.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field, replace

import numpy as np
import yaml

from .dynamics import ControlLimits
from .grid import Grid, make_grid
from .hjsolver import ReachEvaluator
from .platoon import (
    Arbitration,
    Fault,
    HighwayPath,
    Merge,
    Mode,
    PlatoonRegistry,
    ReachedHighwayTarget,
    ReachedJoinTarget,
    SafetyCheck,
    Split,
    VehicleRecord,
    arbitrate_control,
    assign_escalation_bands,
    follower_control,
    leader_highway_control,
    mode_step,
    safety_check_set,
)
from .reach import (
    KIND_HIGHWAY,
    KIND_JOIN,
    KIND_SAFETY,
    SafetyParams,
    TargetSpec,
    build_highway_brs,
    build_join_brs,
    build_safety_brs,
    evaluator_fingerprint,
    liveness_control,
    membership,
    pursuit_control,
    safety_control,
)

# Hysteresis band on the liveness value: once locked in, a vehicle stays in
# optimal-control mode until the value drifts above this, preventing
# boundary chatter between the approach and optimal phases.
LOCK_IN_BAND = 0.05


class ConfigMismatchError(RuntimeError):
    """Evaluators were built from different parameters than the config."""


@dataclass(frozen=True)
class GridSpec:
    mins: tuple[float, ...]
    maxs: tuple[float, ...]
    counts: tuple[int, ...]

    def to_grid(self) -> Grid:
        return make_grid(self.mins, self.maxs, self.counts)


@dataclass(frozen=True)
class VehicleSpec:
    id: int
    position: tuple[float, float]
    velocity: tuple[float, float] = (0.0, 0.0)
    spawn_time: float = 0.0


@dataclass(frozen=True)
class FaultSpec:
    time: float
    vehicle: int
    behavior: str = "reverse_track"


@dataclass(frozen=True)
class IntruderSpec:
    id: int
    position: tuple[float, float]
    velocity: tuple[float, float]
    time: float = 0.0
    behavior: str = "constant"      # constant | pursuit (adversarial stress mode)


_DEFAULT_GRIDS = {
    "highway_x": GridSpec((-20.0, -8.0), (28.0, 8.0), (97, 65)),
    "highway_y": GridSpec((-18.0, -8.0), (22.0, 8.0), (81, 65)),
    "join_x": GridSpec((-30.0, -8.0), (14.0, 8.0), (89, 65)),
    "join_y": GridSpec((-30.0, -8.0), (14.0, 8.0), (89, 65)),
    "safety_x": GridSpec((-20.0, -10.0, -6.0), (20.0, 10.0, 6.0), (81, 41, 25)),
    "safety_y": GridSpec((-20.0, -10.0, -6.0), (20.0, 10.0, 6.0), (81, 41, 25)),
}


@dataclass(frozen=True)
class ScenarioConfig:
    name: str
    duration: float
    vehicles: tuple[VehicleSpec, ...]
    platoons: tuple[tuple[int, ...], ...] = ()
    faults: tuple[FaultSpec, ...] = ()
    intruders: tuple[IntruderSpec, ...] = ()
    dt: float = 0.02
    u_max: float = 3.0              # config value; quadrotor accel bound
    d: float = 2.0
    v_max: float = 5.0
    t_internal: float = 1.5
    t_external: float = 3.0
    kp: float = 2.0
    kv: float = 3.0
    spacing: float = 4.0
    lookahead: float = 2.0
    highway_points: tuple[tuple[float, float], ...] = ((-10.0, -5.0), (150.0, 75.0))
    highway_speed: float = 3.0
    entry_point: tuple[float, float] = (4.0, 2.0)
    target_radii: tuple[float, float, float, float] = (0.5, 0.5, 0.5, 0.5)
    horizon_liveness: float = 10.0
    horizon_safety: float = 3.0
    cfl_factor: float = 0.5
    store_stride_liveness: int | None = None
    store_stride_safety: int | None = 4
    grids: dict = field(default_factory=lambda: dict(_DEFAULT_GRIDS))

    def __post_init__(self):
        if self.dt <= 0 or self.duration <= 0:
            raise ValueError("dt and duration must be positive")
        if not self.t_external > self.t_internal > 0:
            raise ValueError("need t_external > t_internal > 0")
        ids = [v.id for v in self.vehicles] + [i.id for i in self.intruders]
        if len(set(ids)) != len(ids):
            raise ValueError("vehicle ids must be unique")
        known = set(ids)
        for f in self.faults:
            if f.vehicle not in known:
                raise ValueError(f"fault references unknown vehicle {f.vehicle}")
        for members in self.platoons:
            for vid in members:
                if vid not in known:
                    raise ValueError(f"platoon references unknown vehicle {vid}")

    @property
    def safety_params(self) -> SafetyParams:
        return SafetyParams(self.d, self.v_max, self.t_internal, self.t_external)

    def highway(self) -> HighwayPath:
        return HighwayPath(self.highway_points, self.highway_speed)

    def highway_direction(self) -> np.ndarray:
        hw = self.highway()
        return hw.direction_at(hw.project(self.entry_point))

    def highway_target(self) -> TargetSpec:
        d = self.highway_direction()
        v = self.highway_speed
        return TargetSpec(
            (self.entry_point[0], v * d[0], self.entry_point[1], v * d[1]),
            self.target_radii,
        )

    def join_target(self) -> TargetSpec:
        d = self.highway_direction()
        b = self.spacing
        return TargetSpec((-b * d[0], 0.0, -b * d[1], 0.0), self.target_radii)

    def grid(self, name: str) -> Grid:
        return self.grids[name].to_grid()


# ---------------------------------------------------------------------------
# Evaluator bundle: build and fingerprint from one config
# ---------------------------------------------------------------------------


@dataclass
class EvaluatorBundle:
    highway: ReachEvaluator
    join: ReachEvaluator
    safety: ReachEvaluator

    def by_kind(self) -> dict[str, ReachEvaluator]:
        return {KIND_HIGHWAY: self.highway, KIND_JOIN: self.join, KIND_SAFETY: self.safety}


def _build_args(config: ScenarioConfig) -> dict[str, tuple]:
    """Builder arguments per evaluator; fingerprints derive from these."""
    return {
        KIND_HIGHWAY: (
            config.highway_target(),
            ControlLimits(config.u_max),
            (config.grid("highway_x"), config.grid("highway_y")),
            config.horizon_liveness,
            config.cfl_factor,
            config.store_stride_liveness,
        ),
        KIND_JOIN: (
            config.join_target(),
            ControlLimits(config.u_max),
            (config.grid("join_x"), config.grid("join_y")),
            config.horizon_liveness,
            config.cfl_factor,
            config.store_stride_liveness,
        ),
        KIND_SAFETY: (
            config.safety_params,
            ControlLimits(config.u_max, config.u_max, config.v_max),
            (config.grid("safety_x"), config.grid("safety_y")),
            config.horizon_safety,
            config.cfl_factor,
            config.store_stride_safety,
        ),
    }


def expected_fingerprints(config: ScenarioConfig) -> dict[str, str]:
    out = {}
    for kind, (params, limits, grids, horizon, cfl, stride) in _build_args(config).items():
        if kind == KIND_HIGHWAY or kind == KIND_JOIN:
            params_sig = (params.center, params.radii)
        else:
            params_sig = (params.d, params.v_max, params.t_internal, params.t_external)
        out[kind] = evaluator_fingerprint(kind, params_sig, limits, grids, horizon, cfl, stride)
    return out


def build_evaluators(config: ScenarioConfig, threads: int = 1) -> EvaluatorBundle:
    args = _build_args(config)
    builders = {
        KIND_HIGHWAY: build_highway_brs,
        KIND_JOIN: build_join_brs,
        KIND_SAFETY: build_safety_brs,
    }

    def build(kind: str) -> ReachEvaluator:
        params, limits, grids, horizon, cfl, stride = args[kind]
        return builders[kind](params, limits, grids, horizon, cfl, stride)

    kinds = [KIND_HIGHWAY, KIND_JOIN, KIND_SAFETY]
    if threads > 1:
        from concurrent.futures import ThreadPoolExecutor

        with ThreadPoolExecutor(max_workers=threads) as pool:
            built = list(pool.map(build, kinds))
        return EvaluatorBundle(*built)
    return EvaluatorBundle(*(build(k) for k in kinds))


def check_evaluators(config: ScenarioConfig, evaluators: EvaluatorBundle) -> None:
    expected = expected_fingerprints(config)
    for kind, ev in evaluators.by_kind().items():
        if ev.params_key != expected[kind]:
            raise ConfigMismatchError(
                f"{kind} evaluator was built from different parameters "
                f"(cache {ev.params_key} != config {expected[kind]}); recompute the caches"
            )


# ---------------------------------------------------------------------------
# Trace log
# ---------------------------------------------------------------------------

_BASE_COLUMNS = [
    "t", "id", "mode", "platoon", "index", "band",
    "px", "py", "vx", "vy", "ux", "uy", "breaches", "controller",
]


@dataclass
class TraceLog:
    """Per-step, per-vehicle rows plus one V_S column per checkable vehicle."""

    check_ids: list[int]
    rows: list[dict] = field(default_factory=list)

    @property
    def columns(self) -> list[str]:
        return _BASE_COLUMNS + [f"vs_{j}" for j in self.check_ids]

    def append(self, **row) -> None:
        self.rows.append(row)

    @staticmethod
    def _fmt(x) -> str:
        if x is None:
            return ""
        if isinstance(x, float):
            return repr(x)
        return str(x)

    def to_csv_text(self) -> str:
        out = io.StringIO()
        out.write(",".join(self.columns) + "\n")
        for row in self.rows:
            vs = row.get("vs", {})
            cells = [self._fmt(row[c]) for c in _BASE_COLUMNS]
            cells += [self._fmt(vs.get(j)) for j in self.check_ids]
            out.write(",".join(cells) + "\n")
        return out.getvalue()

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            fh.write(self.to_csv_text())

    @classmethod
    def read_csv(cls, path) -> "TraceLog":
        with open(path, newline="") as fh:
            reader = csv.DictReader(fh)
            check_ids = [int(c[3:]) for c in reader.fieldnames if c.startswith("vs_")]
            log = cls(check_ids)
            for raw in reader:
                row = {
                    "t": float(raw["t"]),
                    "id": int(raw["id"]),
                    "mode": raw["mode"],
                    "platoon": int(raw["platoon"]) if raw["platoon"] else None,
                    "index": int(raw["index"]) if raw["index"] else None,
                    "band": int(raw["band"]),
                    "px": float(raw["px"]), "py": float(raw["py"]),
                    "vx": float(raw["vx"]), "vy": float(raw["vy"]),
                    "ux": float(raw["ux"]), "uy": float(raw["uy"]),
                    "breaches": int(raw["breaches"]),
                    "controller": raw["controller"],
                    "vs": {
                        j: float(raw[f"vs_{j}"])
                        for j in check_ids
                        if raw.get(f"vs_{j}")
                    },
                }
                log.rows.append(row)
        return log


# ---------------------------------------------------------------------------
# The step loop
# ---------------------------------------------------------------------------


def _in_box(state4: np.ndarray, center, radii) -> bool:
    return bool(np.all(np.abs(state4 - np.asarray(center)) <= np.asarray(radii)))


def _rel_state6(rec: VehicleRecord, other: VehicleRecord) -> np.ndarray:
    """Augmented relative state (p_xr, v_xr, v_xi, p_yr, v_yr, v_yi)."""
    s, o = rec.state, other.state
    return np.array([s[0] - o[0], s[1] - o[1], s[1], s[2] - o[2], s[3] - o[3], s[3]])


def _rel_state4(rec: VehicleRecord, other: VehicleRecord) -> np.ndarray:
    s, o = rec.state, other.state
    return s - o


class _Engine:
    def __init__(self, config: ScenarioConfig, evaluators: EvaluatorBundle):
        check_evaluators(config, evaluators)
        self.config = config
        self.ev = evaluators
        self.highway = config.highway()
        self.reverse_highway = self.highway.reversed()
        self.registry = PlatoonRegistry(config.spacing, self.highway)
        self.tasks: dict[int, tuple] = {}
        self.t = 0.0

        for spec in config.vehicles:
            self.registry.add_vehicle(
                VehicleRecord(
                    spec.id,
                    np.array([spec.position[0], spec.velocity[0], spec.position[1], spec.velocity[1]]),
                    spawn_time=spec.spawn_time,
                )
            )
        for spec in config.intruders:
            self.registry.add_vehicle(
                VehicleRecord(
                    spec.id,
                    np.array([spec.position[0], spec.velocity[0], spec.position[1], spec.velocity[1]]),
                    spawn_time=spec.time,
                    behavior="intruder_pursuit" if spec.behavior == "pursuit" else "intruder",
                    controller="intruder",
                )
            )
        for members in config.platoons:
            platoon = self.registry.create_platoon(members[0])
            for vid in members[1:]:
                self.registry.append_member(platoon.id, vid)

        self.fault_steps: dict[int, list[FaultSpec]] = {}
        for f in config.faults:
            self.fault_steps.setdefault(int(round(f.time / config.dt)), []).append(f)

        self.trace = TraceLog(sorted(self.registry.vehicles))

    # -- helpers ---------------------------------------------------------

    def spawned(self, rec: VehicleRecord) -> bool:
        return self.t >= rec.spawn_time - 1e-9

    def externals(self, band: int) -> list[int]:
        out = []
        for vid in sorted(self.registry.vehicles):
            rec = self.registry.vehicles[vid]
            if not self.spawned(rec) or rec.altitude_band != band:
                continue
            if rec.behavior.startswith("intruder") or rec.mode is Mode.FAULTY:
                out.append(vid)
        return out

    def join_anchor(self) -> tuple[int, VehicleRecord] | None:
        """Oldest platoon and its tail vehicle, the target for joiners."""
        if not self.registry.platoons:
            return None
        pid = min(self.registry.platoons)
        tail_id = self.registry.platoons[pid].members[-1]
        return pid, self.registry.vehicles[tail_id]

    def _approach_law(self, rec: VehicleRecord, target_pos, target_vel) -> np.ndarray:
        cfg = self.config
        u = cfg.kp * (np.asarray(target_pos) - rec.position) + cfg.kv * (
            np.asarray(target_vel) - rec.velocity
        )
        return np.clip(u, -cfg.u_max, cfg.u_max)

    def _liveness_task(self, rec: VehicleRecord) -> tuple[tuple, np.ndarray, np.ndarray, ReachEvaluator]:
        """(task key, query state, absolute target pos/vel, evaluator)."""
        cfg = self.config
        if rec.mode is Mode.FREE:
            anchor = self.join_anchor()
            if anchor is None:
                target = cfg.highway_target()
                return (
                    ("merge",),
                    rec.state.copy(),
                    (np.array(target.center)[[0, 2]], np.array(target.center)[[1, 3]]),
                    self.ev.highway,
                )
            pid, tail = anchor
        else:  # split-platoon leader rejoining its parent
            parent = self.registry.platoon_of(rec.id).parent
            pid = parent
            tail_id = self.registry.platoons[parent].members[-1]
            tail = self.registry.vehicles[tail_id]
        target = cfg.join_target()
        rel = _rel_state4(rec, tail)
        center = np.array(target.center)
        return (
            ("join", pid),
            rel,
            (tail.position + center[[0, 2]], tail.velocity + center[[1, 3]]),
            self.ev.join,
        )

    def _free_or_rejoin_control(self, rec: VehicleRecord) -> tuple[np.ndarray, str]:
        """Approach / lock-in / optimal phases for merge and join tasks."""
        cfg = self.config
        task, query, (tpos, tvel), ev = self._liveness_task(rec)
        if self.tasks.get(rec.id) != task:
            self.tasks[rec.id] = task
            rec.locked = False
        value = ev.value(query, cfg.horizon_liveness)[0]
        if rec.locked and value > LOCK_IN_BAND:
            rec.locked = False
        if not rec.locked and value <= 0.0:
            rec.locked = True
        if rec.locked:
            u = liveness_control(ev, query, cfg.horizon_liveness, slack=LOCK_IN_BAND)
            return u, "liveness"
        return self._approach_law(rec, tpos, tvel), "approach"

    def _nominal_control(self, rec: VehicleRecord) -> tuple[np.ndarray, str]:
        cfg = self.config
        if rec.mode is Mode.FREE:
            return self._free_or_rejoin_control(rec)
        if rec.mode is Mode.FOLLOWER:
            platoon = self.registry.platoon_of(rec.id)
            leader = self.registry.vehicles[platoon.members[0]]
            u = follower_control(
                rec.state, leader.state, leader.last_accel, rec.index, cfg.spacing,
                cfg.kp, cfg.kv, cfg.u_max,
                fallback_direction=self.highway.direction_at(self.highway.project(leader.position)),
            )
            return u, "follower"
        # Leader: split platoons steer toward their parent's tail, root
        # platoons track the highway.
        platoon = self.registry.platoon_of(rec.id)
        if platoon.parent is not None and platoon.parent in self.registry.platoons:
            return self._free_or_rejoin_control(rec)
        u = leader_highway_control(
            rec.state, self.highway, cfg.lookahead, cfg.kp, cfg.kv, cfg.u_max
        )
        return u, "leader"

    def _scripted_control(self, rec: VehicleRecord) -> tuple[np.ndarray, str]:
        cfg = self.config
        if rec.mode is Mode.FAULTY:
            if rec.behavior == "reverse_track":
                u = leader_highway_control(
                    rec.state, self.reverse_highway, cfg.lookahead, cfg.kp, cfg.kv, cfg.u_max
                )
            else:
                u = np.zeros(2)
            return u, "faulty"
        if rec.behavior == "intruder_pursuit":
            prey = [
                v for v in self.registry.vehicles.values()
                if v.id != rec.id and self.spawned(v) and v.altitude_band == rec.altitude_band
                and not v.behavior.startswith("intruder") and v.mode is not Mode.FAULTY
            ]
            if prey:
                target = min(prey, key=lambda v: (np.linalg.norm(v.position - rec.position), v.id))
                rel = _rel_state6(target, rec)
                return pursuit_control(self.ev.safety, rel, cfg.t_external), "intruder"
        return np.zeros(2), "intruder"

    def _plan(self, rec: VehicleRecord) -> tuple[Arbitration, str, dict]:
        cfg = self.config
        if rec.mode is Mode.FAULTY or rec.behavior.startswith("intruder"):
            u, tag = self._scripted_control(rec)
            return Arbitration(u, 0, False, None), tag, {}

        nominal_u, tag = self._nominal_control(rec)
        neighbor_ids = set(self.registry.neighbors(rec.id))
        checks = []
        vs_values = {}
        for j in safety_check_set(rec, self.registry, self.externals(rec.altitude_band)):
            other = self.registry.vehicles[j]
            if not self.spawned(other) or other.altitude_band != rec.altitude_band:
                continue
            horizon = cfg.t_internal if j in neighbor_ids else cfg.t_external
            rel = _rel_state6(rec, other)
            m = membership(self.ev.safety, rel, horizon)
            vs_values[j] = m.value
            control = safety_control(self.ev.safety, rel, horizon) if m.inside else None
            checks.append(
                SafetyCheck(j, m.value, m.inside, float(np.linalg.norm(rec.position - other.position)), control)
            )
        arb = arbitrate_control(nominal_u, checks)
        return arb, (tag if arb.breaches == 0 else "safety"), vs_values

    # -- transitions -----------------------------------------------------

    def _transition_events(self, rec: VehicleRecord, arb: Arbitration, step: int) -> list:
        cfg = self.config
        events = []
        for f in self.fault_steps.get(step, []):
            if f.vehicle == rec.id:
                rec.behavior = f.behavior
                events.append(Fault())
                return events
        if not self.spawned(rec) or rec.mode is Mode.FAULTY or rec.behavior.startswith("intruder"):
            return events

        if rec.mode is Mode.FREE:
            task = self.tasks.get(rec.id)
            if task == ("merge",):
                target = cfg.highway_target()
                if self.join_anchor() is None and _in_box(rec.state, target.center, target.radii):
                    events.append(ReachedHighwayTarget())
            elif task is not None and task[0] == "join":
                pid = task[1]
                if pid in self.registry.platoons:
                    tail = self.registry.vehicles[self.registry.platoons[pid].members[-1]]
                    target = cfg.join_target()
                    if _in_box(_rel_state4(rec, tail), target.center, target.radii):
                        events.append(ReachedJoinTarget(pid))
        elif rec.mode is Mode.FOLLOWER:
            if arb.breaches >= 1:
                events.append(Split())
        elif rec.mode is Mode.LEADER:
            platoon = self.registry.platoon_of(rec.id)
            if (
                platoon.parent is not None
                and platoon.parent in self.registry.platoons
                and arb.breaches == 0
            ):
                tail = self.registry.vehicles[self.registry.platoons[platoon.parent].members[-1]]
                target = cfg.join_target()
                m = membership(self.ev.join, _rel_state4(rec, tail), cfg.horizon_liveness)
                if m.inside:
                    events.append(Merge(platoon.parent))
        return events

    # -- main loop -------------------------------------------------------

    def run(self) -> TraceLog:
        cfg = self.config
        steps = int(round(cfg.duration / cfg.dt))
        for step in range(steps):
            self.t = step * cfg.dt
            order = sorted(self.registry.vehicles)
            plans: dict[int, Arbitration] = {}

            for vid in order:
                rec = self.registry.vehicles[vid]
                if not self.spawned(rec):
                    plans[vid] = Arbitration(np.zeros(2), 0, False, None)
                    self._log(rec, np.zeros(2), 0, "idle", {})
                    continue
                arb, tag, vs_values = self._plan(rec)
                plans[vid] = arb
                self._log(rec, arb.control, arb.breaches, tag, vs_values)

            escalators = [
                vid for vid in order
                if plans[vid].escalate
                and self.registry.vehicles[vid].altitude_band == 0
                and self.registry.vehicles[vid].mode is not Mode.FAULTY
            ]
            for vid, band in assign_escalation_bands(self.registry, escalators).items():
                self.registry.vehicles[vid].altitude_band = band

            for vid in order:
                rec = self.registry.vehicles[vid]
                if not self.spawned(rec):
                    continue
                u = plans[vid].control
                rec.state[1] += u[0] * cfg.dt
                rec.state[3] += u[1] * cfg.dt
                rec.state[0] += rec.state[1] * cfg.dt
                rec.state[2] += rec.state[3] * cfg.dt
                rec.last_accel = np.asarray(u, dtype=float).copy()
                if not np.all(np.isfinite(rec.state)):
                    raise RuntimeError(f"vehicle {vid} state diverged at t={self.t:.3f}")

            for vid in order:
                rec = self.registry.vehicles[vid]
                events = self._transition_events(rec, plans[vid], step)
                mode_step(rec, self.registry, events, cfg.dt, cfg.t_internal)
            self.registry.check_consistency()
        return self.trace

    def _log(self, rec: VehicleRecord, u, breaches: int, tag: str, vs_values: dict) -> None:
        rec.controller = tag
        self.trace.append(
            t=self.t,
            id=rec.id,
            mode=rec.mode.value,
            platoon=rec.platoon_id,
            index=rec.index,
            band=rec.altitude_band,
            px=float(rec.state[0]), py=float(rec.state[2]),
            vx=float(rec.state[1]), vy=float(rec.state[3]),
            ux=float(u[0]), uy=float(u[1]),
            breaches=breaches,
            controller=tag,
            vs={j: float(v) for j, v in vs_values.items()},
        )


def run(config: ScenarioConfig, evaluators: EvaluatorBundle) -> TraceLog:
    """Run a scenario to completion and return its trace."""
    return _Engine(config, evaluators).run()


# ---------------------------------------------------------------------------
# Metrics
# ---------------------------------------------------------------------------


@dataclass
class SimSummary:
    duration: float
    min_separation: float
    collision_events: int
    max_breaches: dict[int, int]
    altitude_changes: int
    faulty_band_exits: dict[int, float]
    mode_transitions: list[tuple[float, int, str, str]]
    final_platoons: dict[int, list[int]]
    spacing_error: float | None
    speed_error: float | None

    def transitions_of(self, vid: int) -> list[tuple[float, str, str]]:
        return [(t, a, b) for t, i, a, b in self.mode_transitions if i == vid]


def metrics(trace: TraceLog, params: SafetyParams, highway: HighwayPath | None = None,
            spacing: float | None = None, target_speed: float | None = None) -> SimSummary:
    """Collision, breach, and steady-state statistics from a trace.

    Collision: a same-altitude-band pair within d in both axes at once.
    Altitude changes count controller-driven escalations only; the mandated
    Faulty descent is reported separately with its exit time.
    """
    by_step: dict[float, list[dict]] = {}
    for row in trace.rows:
        by_step.setdefault(row["t"], []).append(row)
    times = sorted(by_step)
    if not times:
        raise ValueError("empty trace")

    min_sep = float("inf")
    collisions = 0
    max_breaches: dict[int, int] = {}
    transitions: list[tuple[float, int, str, str]] = []
    altitude_changes = 0
    faulty_exits: dict[int, float] = {}
    prev_mode: dict[int, str] = {}
    prev_band: dict[int, int] = {}

    for t in times:
        rows = by_step[t]
        for row in rows:
            vid = row["id"]
            max_breaches[vid] = max(max_breaches.get(vid, 0), row["breaches"])
            if vid in prev_mode and prev_mode[vid] != row["mode"]:
                transitions.append((t, vid, prev_mode[vid], row["mode"]))
            if vid in prev_band and prev_band[vid] != row["band"]:
                if row["mode"] == Mode.FAULTY.value:
                    faulty_exits.setdefault(vid, t)
                else:
                    altitude_changes += 1
            prev_mode[vid] = row["mode"]
            prev_band[vid] = row["band"]
        for i, a in enumerate(rows):
            for b in rows[i + 1:]:
                if a["band"] != b["band"]:
                    continue
                sep = max(abs(a["px"] - b["px"]), abs(a["py"] - b["py"]))
                min_sep = min(min_sep, sep)
                if sep <= params.d:
                    collisions += 1

    final_platoons: dict[int, list[int]] = {}
    for row in by_step[times[-1]]:
        if row["platoon"] is not None:
            final_platoons.setdefault(row["platoon"], []).append((row["index"], row["id"]))
    final_platoons = {pid: [vid for _, vid in sorted(v)] for pid, v in final_platoons.items()}

    spacing_error = None
    speed_error = None
    tail_times = [t for t in times if t >= times[-1] * 0.75]
    if spacing is not None or (highway is not None and target_speed is not None):
        gap_errs: list[float] = []
        speed_errs: list[float] = []
        for t in tail_times:
            members: dict[int, list[tuple[int, dict]]] = {}
            for row in by_step[t]:
                if row["platoon"] is not None:
                    members.setdefault(row["platoon"], []).append((row["index"], row))
            for ordered in members.values():
                ordered.sort()
                rows = [r for _, r in ordered]
                if spacing is not None:
                    for a, b in zip(rows, rows[1:]):
                        gap = float(np.hypot(a["px"] - b["px"], a["py"] - b["py"]))
                        gap_errs.append(abs(gap - spacing) / spacing)
                if highway is not None and target_speed is not None:
                    for r in rows:
                        d = highway.direction_at(highway.project((r["px"], r["py"])))
                        along = r["vx"] * d[0] + r["vy"] * d[1]
                        speed_errs.append(abs(along - target_speed) / target_speed)
        spacing_error = max(gap_errs) if gap_errs else None
        speed_error = max(speed_errs) if speed_errs else None

    return SimSummary(
        duration=times[-1],
        min_separation=min_sep,
        collision_events=collisions,
        max_breaches=max_breaches,
        altitude_changes=altitude_changes,
        faulty_band_exits=faulty_exits,
        mode_transitions=transitions,
        final_platoons=final_platoons,
        spacing_error=spacing_error,
        speed_error=speed_error,
    )


def summary_text(summary: SimSummary) -> str:
    lines = [
        "[outcome]",
        f"duration = {summary.duration}",
        f"min_separation = {summary.min_separation}",
        f"collision_events = {summary.collision_events}",
        f"altitude_changes = {summary.altitude_changes}",
        f"max_simultaneous_breaches = {max(summary.max_breaches.values(), default=0)}",
        "",
        "[per_vehicle_max_breaches]",
    ]
    for vid in sorted(summary.max_breaches):
        lines.append(f"vehicle_{vid} = {summary.max_breaches[vid]}")
    lines += ["", "[faulty_band_exits]"]
    for vid in sorted(summary.faulty_band_exits):
        lines.append(f"vehicle_{vid} = {summary.faulty_band_exits[vid]}")
    lines += ["", "[final_platoons]"]
    for pid in sorted(summary.final_platoons):
        lines.append(f"platoon_{pid} = {summary.final_platoons[pid]}")
    lines += ["", "[steady_state]"]
    lines.append(f"spacing_error = {summary.spacing_error}")
    lines.append(f"speed_error = {summary.speed_error}")
    lines += ["", "[mode_transitions]"]
    for t, vid, frm, to in summary.mode_transitions:
        lines.append(f"t={t:.2f} vehicle={vid} {frm}->{to}")
    return "\n".join(lines) + "\n"


# ---------------------------------------------------------------------------
# Built-in scenarios
# ---------------------------------------------------------------------------


def scenario_form_platoon() -> ScenarioConfig:
    """Five staggered vehicles merge onto an empty highway and platoon up."""
    return ScenarioConfig(
        name="form_platoon",
        duration=45.0,
        vehicles=(
            VehicleSpec(1, (-2.0, -6.0), spawn_time=0.0),
            VehicleSpec(2, (-6.0, 8.0), spawn_time=4.0),
            VehicleSpec(3, (-12.0, -4.0), spawn_time=8.0),
            VehicleSpec(4, (-16.0, 10.0), spawn_time=12.0),
            VehicleSpec(5, (-20.0, -8.0), spawn_time=16.0),
        ),
    )


def _platoon_states(n: int, leader_pos, config_speed=3.0):
    direction = np.array([2.0, 1.0]) / np.sqrt(5.0)
    vel = config_speed * direction
    out = []
    for k in range(n):
        pos = np.asarray(leader_pos) - 4.0 * k * direction
        out.append(VehicleSpec(k + 1, (pos[0], pos[1]), (vel[0], vel[1])))
    return tuple(out)


def scenario_malfunction() -> ScenarioConfig:
    """Middle member of a 5-platoon reverses along the highway at t=0."""
    return ScenarioConfig(
        name="malfunction",
        duration=15.0,
        vehicles=_platoon_states(5, (16.0, 8.0)),
        platoons=((1, 2, 3, 4, 5),),
        faults=(FaultSpec(0.0, 3, "reverse_track"),),
    )


def scenario_intruder() -> ScenarioConfig:
    """A constant-velocity intruder crosses a 4-platoon's path from above."""
    return ScenarioConfig(
        name="intruder",
        duration=25.0,
        vehicles=_platoon_states(4, (16.0, 8.0)),
        platoons=((1, 2, 3, 4),),
        intruders=(IntruderSpec(0, (40.0, 30.0), (-1.72, -2.46)),),
    )


_BUILTIN = {
    "form_platoon": scenario_form_platoon,
    "malfunction": scenario_malfunction,
    "intruder": scenario_intruder,
}


def builtin_scenario(name: str) -> ScenarioConfig:
    if name not in _BUILTIN:
        raise KeyError(f"unknown scenario {name!r}; have {sorted(_BUILTIN)}")
    return _BUILTIN[name]()


def scenario_names() -> list[str]:
    return sorted(_BUILTIN)


# ---------------------------------------------------------------------------
# Config documents
# ---------------------------------------------------------------------------


def config_from_mapping(doc: dict) -> ScenarioConfig:
    """Build a config from a parsed key/value document (see load_config)."""
    doc = dict(doc)
    base = builtin_scenario(doc.pop("scenario")) if "scenario" in doc else None

    kwargs: dict = {}
    simple = [
        "name", "duration", "dt", "u_max", "d", "v_max", "t_internal", "t_external",
        "kp", "kv", "spacing", "lookahead", "highway_speed", "horizon_liveness",
        "horizon_safety", "cfl_factor", "store_stride_liveness", "store_stride_safety",
    ]
    for key in simple:
        if key in doc:
            kwargs[key] = doc.pop(key)
    if "entry_point" in doc:
        kwargs["entry_point"] = tuple(doc.pop("entry_point"))
    if "target_radii" in doc:
        kwargs["target_radii"] = tuple(doc.pop("target_radii"))
    if "highway_points" in doc:
        kwargs["highway_points"] = tuple(tuple(p) for p in doc.pop("highway_points"))
    if "vehicles" in doc:
        kwargs["vehicles"] = tuple(
            VehicleSpec(
                int(v["id"]),
                tuple(v["position"]),
                tuple(v.get("velocity", (0.0, 0.0))),
                float(v.get("spawn_time", 0.0)),
            )
            for v in doc.pop("vehicles")
        )
    if "platoons" in doc:
        kwargs["platoons"] = tuple(tuple(int(m) for m in p) for p in doc.pop("platoons"))
    if "faults" in doc:
        kwargs["faults"] = tuple(
            FaultSpec(float(f["time"]), int(f["vehicle"]), f.get("behavior", "reverse_track"))
            for f in doc.pop("faults")
        )
    if "intruders" in doc:
        kwargs["intruders"] = tuple(
            IntruderSpec(
                int(i["id"]), tuple(i["position"]), tuple(i["velocity"]),
                float(i.get("time", 0.0)), i.get("behavior", "constant"),
            )
            for i in doc.pop("intruders")
        )
    if "grids" in doc:
        grids = dict(_DEFAULT_GRIDS)
        for key, g in doc.pop("grids").items():
            grids[key] = GridSpec(tuple(g["mins"]), tuple(g["maxs"]), tuple(g["counts"]))
        kwargs["grids"] = grids
    if doc:
        raise ValueError(f"unknown config keys: {sorted(doc)}")

    if base is not None:
        return replace(base, **kwargs)
    return ScenarioConfig(**kwargs)


def load_config(path) -> ScenarioConfig:
    """Read a scenario config document (YAML key/value with nested sections)."""
    with open(path) as fh:
        doc = yaml.safe_load(fh)
    if not isinstance(doc, dict):
        raise ValueError("config document must be a mapping")
    return config_from_mapping(doc)
