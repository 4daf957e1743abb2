"""Reachable-set products for the platoon maneuvers.

Three coupled sets drive everything online:

* highway set -- absolute states from which a vehicle can be driven into a
  small box around the highway entry state within the horizon;
* join set -- relative states (w.r.t. a coasting platoon tail) from which
  the joining slot can be reached within the horizon;
* safety set -- augmented relative states from which the evader *cannot*
  keep the pair separated for the horizon against a worst-case adversary.

Each is built from two per-axis solves sharing one time lattice and
combined by time-matched reconstruction. Controls are extracted from the
axis slab gradients at the reconstruction's minimizing stored time: that
is the time at which the combined constraint binds.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass

import numpy as np

from .dynamics import ControlLimits, Kind, Role, Subsystem, optimal_control, EPS_GRAD
from .grid import Grid, LevelSet, gradient_at, signed_box
from .hjsolver import ReachEvaluator, SolveOptions, cfl_time_step, reconstruct_coupled, solve

KIND_HIGHWAY = "liveness-absolute"
KIND_JOIN = "liveness-relative"
KIND_SAFETY = "safety-game"


class OutsideReachableSet(RuntimeError):
    """Liveness control was requested for a state not yet locked in."""


@dataclass(frozen=True)
class TargetSpec:
    """Box target around a (p_x, v_x, p_y, v_y) state, absolute or relative."""

    center: tuple[float, float, float, float]
    radii: tuple[float, float, float, float]

    def __post_init__(self):
        if len(self.center) != 4 or len(self.radii) != 4:
            raise ValueError("target center and radii are 4-vectors")
        object.__setattr__(self, "center", tuple(float(c) for c in self.center))
        object.__setattr__(self, "radii", tuple(float(r) for r in self.radii))
        if any(r <= 0 for r in self.radii):
            raise ValueError("target radii must be positive")


@dataclass(frozen=True)
class SafetyParams:
    """Collision geometry and the two checking horizons."""

    d: float
    v_max: float
    t_internal: float
    t_external: float

    def __post_init__(self):
        if self.d <= 0:
            raise ValueError("collision half-width d must be positive")
        if self.v_max <= 0:
            raise ValueError("v_max must be positive")
        if not self.t_external > self.t_internal > 0:
            raise ValueError("need t_external > t_internal > 0")


@dataclass(frozen=True)
class Membership:
    value: float
    inside: bool


def evaluator_fingerprint(kind: str, params, limits: ControlLimits, grids, horizon: float,
                          cfl_factor: float, store_stride: int | None) -> str:
    """Content hash of everything a build depends on; drives cache reuse."""
    def grid_sig(g: Grid):
        return (g.mins, g.maxs, g.counts)

    payload = (
        kind,
        params,
        (limits.u_max_self, limits.u_max_other, limits.v_max),
        tuple(grid_sig(g) for g in grids),
        float(horizon),
        float(cfl_factor),
        store_stride,
    )
    return hashlib.sha256(repr(payload).encode()).hexdigest()[:16]


def _paired_solve(sub_x: Subsystem, sub_y: Subsystem, grids: tuple[Grid, Grid],
                  targets: tuple[LevelSet, LevelSet], horizon: float,
                  cfl_factor: float, store_stride: int | None):
    """Two unfrozen solves on a common time lattice (the tighter CFL wins)."""
    dt = min(
        cfl_time_step(sub_x, grids[0], cfl_factor),
        cfl_time_step(sub_y, grids[1], cfl_factor),
    )
    steps = max(1, int(np.ceil(horizon / dt - 1e-12)))
    opts = SolveOptions(
        horizon=horizon,
        cfl_factor=cfl_factor,
        store_stride=store_stride,
        freeze=False,
        time_step=horizon / steps,
    )
    return solve(sub_x, grids[0], targets[0], opts), solve(sub_y, grids[1], targets[1], opts)


def build_highway_brs(target: TargetSpec, limits: ControlLimits, grids: tuple[Grid, Grid],
                      horizon: float, cfl_factor: float = 0.5,
                      store_stride: int | None = None) -> ReachEvaluator:
    """Absolute-state merge set: axis states (p_x, v_x) and (p_y, v_y)."""
    if horizon <= 0:
        raise ValueError("horizon must be positive")
    sub = Subsystem(Kind.DOUBLE_INTEGRATOR, Role.REACH, ControlLimits(limits.u_max_self))
    c, r = target.center, target.radii
    targets = (
        signed_box(grids[0], (c[0], c[1]), (r[0], r[1])),
        signed_box(grids[1], (c[2], c[3]), (r[2], r[3])),
    )
    sx, sy = _paired_solve(sub, sub, grids, targets, horizon, cfl_factor, store_stride)
    key = evaluator_fingerprint(KIND_HIGHWAY, (c, r), limits, grids, horizon,
                                cfl_factor, store_stride)
    return reconstruct_coupled(sx, sy, KIND_HIGHWAY, key)


def build_join_brs(target: TargetSpec, limits: ControlLimits, grids: tuple[Grid, Grid],
                   horizon: float, cfl_factor: float = 0.5,
                   store_stride: int | None = None) -> ReachEvaluator:
    """Relative-state join set; the vehicle ahead coasts (u_other = 0)."""
    if horizon <= 0:
        raise ValueError("horizon must be positive")
    sub = Subsystem(
        Kind.RELATIVE_DOUBLE_INTEGRATOR, Role.REACH, ControlLimits(limits.u_max_self, 0.0)
    )
    c, r = target.center, target.radii
    targets = (
        signed_box(grids[0], (c[0], c[1]), (r[0], r[1])),
        signed_box(grids[1], (c[2], c[3]), (r[2], r[3])),
    )
    sx, sy = _paired_solve(sub, sub, grids, targets, horizon, cfl_factor, store_stride)
    key = evaluator_fingerprint(KIND_JOIN, (c, r), limits, grids, horizon,
                                cfl_factor, store_stride)
    return reconstruct_coupled(sx, sy, KIND_JOIN, key)


def _proximity_target(grid: Grid, d: float) -> LevelSet:
    """Per-axis capture slab |p_r| <= d, independent of the velocity dims."""
    margin = np.abs(grid.broadcast_coords(0)) - d
    return LevelSet(grid, np.broadcast_to(margin, grid.shape).copy())


def build_safety_brs(params: SafetyParams, limits: ControlLimits, grids: tuple[Grid, Grid],
                     horizon: float | None = None, cfl_factor: float = 0.5,
                     store_stride: int | None = None) -> ReachEvaluator:
    """Pairwise game set: axis states (p_r, v_r, v_self); membership at
    horizon tau means the evader cannot guarantee avoidance for tau."""
    if horizon is None:
        horizon = params.t_external
    if horizon < params.t_external:
        raise ValueError("safety horizon must cover t_external")
    sub = Subsystem(
        Kind.AUGMENTED_RELATIVE,
        Role.GAME,
        ControlLimits(limits.u_max_self, limits.u_max_other, params.v_max),
    )
    targets = (_proximity_target(grids[0], params.d), _proximity_target(grids[1], params.d))
    sx, sy = _paired_solve(sub, sub, grids, targets, horizon, cfl_factor, store_stride)
    key = evaluator_fingerprint(
        KIND_SAFETY,
        (params.d, params.v_max, params.t_internal, params.t_external),
        limits, grids, horizon, cfl_factor, store_stride,
    )
    return reconstruct_coupled(sx, sy, KIND_SAFETY, key)


def membership(ev: ReachEvaluator, state, tau: float) -> Membership:
    """Reconstruction value at (tau, state); inside means value <= 0."""
    value, _ = ev.value(state, tau)
    return Membership(value, value <= 0.0)


def _axis_controls(ev: ReachEvaluator, state, tau: float, eps: float, player: str) -> np.ndarray:
    value_idx = ev.value(state, tau)[1]
    sx, sy = ev.split_state(state)
    out = []
    for series, axis_state in ((ev.series_x, sx), (ev.series_y, sy)):
        grad = gradient_at(series.slab(value_idx), axis_state)
        out.append(optimal_control(series.subsystem, axis_state, grad, eps=eps, player=player))
    return np.array(out)


def liveness_control(ev: ReachEvaluator, state, tau: float, eps: float = EPS_GRAD,
                     slack: float = 0.0) -> np.ndarray:
    """Per-axis optimal accel toward the target; requires the state to be
    inside the set at tau (locked in, up to the caller's hysteresis slack)."""
    value, s_star = ev.value(state, tau)
    if value > slack:
        raise OutsideReachableSet(
            f"state is outside the {ev.kind} set at horizon {tau} (value {value:.4g}); "
            "use the approach-phase controller instead"
        )
    sx, sy = ev.split_state(state)
    out = []
    for series, axis_state in ((ev.series_x, sx), (ev.series_y, sy)):
        grad = gradient_at(series.slab(s_star), axis_state)
        out.append(optimal_control(series.subsystem, axis_state, grad, eps=eps))
    return np.array(out)


def safety_control(ev: ReachEvaluator, rel_state, tau: float, eps: float = EPS_GRAD) -> np.ndarray:
    """Evader accel maximizing time-to-capture, speed cap respected."""
    return _axis_controls(ev, rel_state, tau, eps, "self")


def pursuit_control(ev: ReachEvaluator, rel_state, tau: float, eps: float = EPS_GRAD) -> np.ndarray:
    """Worst-case adversary accel, for adversarial rollouts and stress tests."""
    return _axis_controls(ev, rel_state, tau, eps, "other")
