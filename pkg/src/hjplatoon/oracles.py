"""Independent oracles for checking the solver and the extracted controllers.

Nothing here touches the PDE marching path: the reach oracle enumerates
two-phase constant-control profiles of the double integrator on a fine
switch-time lattice, the game oracles integrate closed-loop rollouts, and
the reconstruction cross-check compares against a direct full-dimensional
solve of the product system.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .dynamics import ControlLimits, Kind, ProductSubsystem, Role, Subsystem
from .grid import Grid, make_grid
from .hjsolver import ReachEvaluator, SolveOptions, ValueSeries, solve
from .reach import liveness_control, pursuit_control, safety_control

# ---------------------------------------------------------------------------
# Two-phase bang-bang reach oracle for the planar double integrator
# ---------------------------------------------------------------------------


def _phase_entry(p0, v0, u, t_max, p_lo, p_hi, v_lo, v_hi):
    """Can a constant-control phase from (p0, v0) enter the box within t_max?

    The velocity constraint gives an admissible time interval; the position
    (a quadratic in time) sweeps a connected range over it, so entry needs
    only interval overlap. Vectorized over initial states.
    """
    p0 = np.asarray(p0, dtype=float)
    v0 = np.asarray(v0, dtype=float)
    if u != 0.0:
        ta = (v_lo - v0) / u
        tb = (v_hi - v0) / u
        t_lo = np.minimum(ta, tb)
        t_hi = np.maximum(ta, tb)
    else:
        ok = (v0 >= v_lo) & (v0 <= v_hi)
        t_lo = np.where(ok, 0.0, np.inf)
        t_hi = np.where(ok, t_max, -np.inf)
    t_lo = np.clip(t_lo, 0.0, None)
    t_hi = np.minimum(t_hi, t_max)
    valid = t_hi >= t_lo

    def pos(t):
        return p0 + v0 * t + 0.5 * u * t * t

    cand_min = np.minimum(pos(t_lo), pos(t_hi))
    cand_max = np.maximum(pos(t_lo), pos(t_hi))
    if u != 0.0:
        t_v = -v0 / u
        at_vertex = (t_v >= t_lo) & (t_v <= t_hi)
        vertex = pos(np.clip(t_v, 0.0, None))
        cand_min = np.where(at_vertex, np.minimum(cand_min, vertex), cand_min)
        cand_max = np.where(at_vertex, np.maximum(cand_max, vertex), cand_max)
    return valid & (cand_min <= p_hi) & (cand_max >= p_lo)


def double_integrator_reachable(p0, v0, center, radii, u_max: float, horizon: float,
                                num_switch: int = 241) -> np.ndarray:
    """Membership of (p0, v0) in the reach-within-horizon set of a box target.

    Exhaustive search over two-phase constant-control profiles with controls
    in {-u_max, 0, +u_max} and switch times on a lattice; time-optimal
    double-integrator extremals are single-switch bang-bang, so this covers
    the true set up to lattice resolution.
    """
    p0 = np.asarray(p0, dtype=float)
    v0 = np.asarray(v0, dtype=float)
    cp, cv = center
    rp, rv = radii
    p_lo, p_hi, v_lo, v_hi = cp - rp, cp + rp, cv - rv, cv + rv
    controls = (-u_max, 0.0, u_max)

    member = np.zeros(p0.shape, dtype=bool)
    switch_times = np.linspace(0.0, horizon, num_switch)
    for u1 in controls:
        member |= _phase_entry(p0, v0, u1, horizon, p_lo, p_hi, v_lo, v_hi)
    for ts in switch_times[1:-1]:
        for u1 in controls:
            pa = p0 + v0 * ts + 0.5 * u1 * ts * ts
            va = v0 + u1 * ts
            for u2 in controls:
                if u2 == u1:
                    continue
                member |= _phase_entry(pa, va, u2, horizon - ts, p_lo, p_hi, v_lo, v_hi)
    return member


def double_integrator_min_time(state, center, radii, u_max: float, t_cap: float,
                               resolution: float = 0.005) -> float:
    """Minimum time to the box target along two-phase profiles (inf if > t_cap)."""
    p0, v0 = float(state[0]), float(state[1])
    horizons = np.arange(resolution, t_cap + resolution / 2, resolution)
    arr_p = np.array([p0])
    arr_v = np.array([v0])
    for T in horizons:
        if double_integrator_reachable(arr_p, arr_v, center, radii, u_max, float(T))[0]:
            return float(T)
    return float("inf")


def boundary_band(oracle_member: np.ndarray, cells: int = 2) -> np.ndarray:
    """Nodes within ``cells`` (Chebyshev) of the oracle set's boundary."""
    band = np.zeros_like(oracle_member)
    n1, n2 = oracle_member.shape
    for di in range(-cells, cells + 1):
        for dj in range(-cells, cells + 1):
            if di == 0 and dj == 0:
                continue
            src = oracle_member[
                max(di, 0): n1 + min(di, 0),
                max(dj, 0): n2 + min(dj, 0),
            ]
            dst = band[
                max(-di, 0): n1 + min(-di, 0),
                max(-dj, 0): n2 + min(-dj, 0),
            ]
            dst |= src != oracle_member[
                max(-di, 0): n1 + min(-di, 0),
                max(-dj, 0): n2 + min(-dj, 0),
            ]
    return band


# ---------------------------------------------------------------------------
# Closed-loop rollout oracles
# ---------------------------------------------------------------------------


@dataclass
class GameRollout:
    captured: bool
    min_separation: float          # min over time of max(|p_xr|, |p_yr|)
    capture_time: float | None


def rollout_safety_game(ev: ReachEvaluator, rel_state, d: float, horizon: float,
                        dt: float = 0.01, pursuer: str = "optimal",
                        rng: np.random.Generator | None = None,
                        switch_every: float = 0.25) -> GameRollout:
    """Integrate the pairwise game: evader plays the safety law at the
    shrinking remaining horizon, pursuer plays its capture law or a random
    piecewise-constant strategy. Capture: both axis gaps within d at once.
    """
    state = np.asarray(rel_state, dtype=float).copy()
    u_other_max = ev.series_x.subsystem.limits.u_max_other
    steps = int(round(horizon / dt))
    min_sep = float("inf")
    hold = max(1, int(round(switch_every / dt)))
    u_j = np.zeros(2)
    for k in range(steps + 1):
        sep = max(abs(state[0]), abs(state[3]))
        min_sep = min(min_sep, sep)
        if abs(state[0]) <= d and abs(state[3]) <= d:
            return GameRollout(True, min_sep, k * dt)
        if k == steps:
            break
        tau = max(horizon - k * dt, 0.0)
        u_i = safety_control(ev, state, tau)
        if pursuer == "optimal":
            u_j = pursuit_control(ev, state, tau)
        elif pursuer == "random":
            if k % hold == 0:
                u_j = rng.uniform(-u_other_max, u_other_max, size=2)
        else:
            raise ValueError(f"unknown pursuer policy {pursuer!r}")
        # per-axis semi-implicit Euler on (p_r, v_r, v_self)
        for axis, (ui, uj) in enumerate(zip(u_i, u_j)):
            base = 3 * axis
            state[base + 1] += (ui - uj) * dt
            state[base + 2] += ui * dt
            state[base] += state[base + 1] * dt
    return GameRollout(False, min_sep, None)


@dataclass
class LivenessRollout:
    reached: bool
    time_to_target: float | None
    final_state: np.ndarray


def rollout_liveness(ev: ReachEvaluator, state4, center, radii, horizon: float,
                     dt: float = 0.02, slack: float = 0.05) -> LivenessRollout:
    """Integrate the liveness law from a member state until the target box."""
    state = np.asarray(state4, dtype=float).copy()
    steps = int(round((horizon + dt) / dt))
    for k in range(steps + 1):
        if np.all(np.abs(state - np.asarray(center)) <= np.asarray(radii)):
            return LivenessRollout(True, k * dt, state)
        if k == steps:
            break
        u = liveness_control(ev, state, horizon, slack=slack)
        state[1] += u[0] * dt
        state[3] += u[1] * dt
        state[0] += state[1] * dt
        state[2] += state[3] * dt
    return LivenessRollout(False, None, state)


# ---------------------------------------------------------------------------
# Reconstruction cross-check against a direct product solve
# ---------------------------------------------------------------------------


@dataclass
class ReconstructionComparison:
    disagreement_fraction: float
    compared_nodes: int
    excluded_nodes: int
    direct_series: ValueSeries


def relative_game_subsystem(u_max: float) -> Subsystem:
    return Subsystem(
        Kind.RELATIVE_DOUBLE_INTEGRATOR, Role.GAME, ControlLimits(u_max, u_max)
    )


def reconstruction_vs_direct(u_max: float = 3.0, d: float = 2.0, horizon: float = 1.5,
                             p_extent: float = 10.0, v_extent: float = 5.0,
                             nodes_per_dim: int = 21, cfl_factor: float = 0.5
                             ) -> ReconstructionComparison:
    """Sign agreement between the time-matched reconstruction and a direct
    (frozen) solve of the 4-d relative game, away from both zero levels.

    Per-axis reach-exactly solves run on the matching 2-d grids with the
    same stored lattice; cells within one cell-width of either zero level
    are excluded, since first-order smearing moves both boundaries.
    """
    axis_grid = make_grid((-p_extent, -v_extent), (p_extent, v_extent),
                          (nodes_per_dim, nodes_per_dim))
    sub = relative_game_subsystem(u_max)
    target_axis = np.abs(axis_grid.broadcast_coords(0)) - d
    target_axis = np.broadcast_to(target_axis, axis_grid.shape).copy()

    from .grid import LevelSet

    opts = SolveOptions(horizon=horizon, cfl_factor=cfl_factor, freeze=False, store_stride=1)
    series = solve(sub, axis_grid, LevelSet(axis_grid, target_axis), opts)

    n = nodes_per_dim
    m = series.num_times
    axis_vals = series.values.reshape(m, n, n)
    recon = np.full((n, n, n, n), np.inf)
    for s in range(m):
        combined = np.maximum(
            axis_vals[s][:, :, None, None], axis_vals[s][None, None, :, :]
        )
        np.minimum(recon, combined, out=recon)

    grid4 = make_grid(
        (-p_extent, -v_extent, -p_extent, -v_extent),
        (p_extent, v_extent, p_extent, v_extent),
        (n, n, n, n),
    )
    prod = ProductSubsystem(sub, sub)
    margin_x = np.abs(grid4.broadcast_coords(0)) - d
    margin_y = np.abs(grid4.broadcast_coords(2)) - d
    target4 = np.broadcast_to(np.maximum(margin_x, margin_y), grid4.shape).copy()
    direct = solve(
        prod, grid4, LevelSet(grid4, target4),
        SolveOptions(horizon=horizon, cfl_factor=cfl_factor, freeze=True),
    )
    direct_vals = direct.values[-1]

    cell = max(grid4.spacings)
    keep = (np.abs(direct_vals) >= cell) & (np.abs(recon) >= cell)
    disagree = ((direct_vals <= 0) != (recon <= 0)) & keep
    frac = float(disagree.sum()) / max(1, int(keep.sum()))
    return ReconstructionComparison(frac, int(keep.sum()), int((~keep).sum()), direct)
