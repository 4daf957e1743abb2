"""Analytic Hamiltonians and bang-bang control laws for the solver's subsystems.

Three per-axis subsystems cover every reachability computation in the
project:

* ``DOUBLE_INTEGRATOR`` -- state (p, v), one minimizing player steering to
  a target (absolute highway merge).
* ``RELATIVE_DOUBLE_INTEGRATOR`` -- state (p_r, v_r) between two vehicles;
  reach role with the lead vehicle coasting (platoon join), or game role
  with both vehicles accelerating (cross-validation of safety sets).
* ``AUGMENTED_RELATIVE`` -- state (p_r, v_r, v_self); the collision
  avoidance game where the evader maximizes time-to-capture subject to a
  speed cap and the pursuer plays worst case.

The speed cap is enforced as a state-dependent admissible control
interval: once the evader's own velocity sits at the cap it may only
decelerate. All functions broadcast over numpy arrays so the PDE solver
can evaluate them on whole grids.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass
from typing import Sequence, Union

import numpy as np

from .grid import Grid

# Default sign deadband on costate coefficients; interpolated gradients
# chatter near kinks of max/min-combined value functions.
EPS_GRAD = 1e-3

ArrayLike = Union[float, np.ndarray]


@dataclass(frozen=True)
class ControlLimits:
    """Per-axis acceleration bounds and optional speed cap."""

    u_max_self: float
    u_max_other: float = 0.0
    v_max: float | None = None

    def __post_init__(self):
        if self.u_max_self <= 0:
            raise ValueError("u_max_self must be positive")
        if self.u_max_other < 0:
            raise ValueError("u_max_other must be nonnegative")
        if self.v_max is not None and self.v_max <= 0:
            raise ValueError("v_max must be positive when present")


class Kind(enum.Enum):
    DOUBLE_INTEGRATOR = "double_integrator"
    RELATIVE_DOUBLE_INTEGRATOR = "relative_double_integrator"
    AUGMENTED_RELATIVE = "augmented_relative"


class Role(enum.Enum):
    REACH = "reach"  # single minimizing player
    GAME = "game"    # self maximizes (avoids), other minimizes (captures)


_DIMS = {
    Kind.DOUBLE_INTEGRATOR: 2,
    Kind.RELATIVE_DOUBLE_INTEGRATOR: 2,
    Kind.AUGMENTED_RELATIVE: 3,
}


@dataclass(frozen=True)
class Subsystem:
    """A per-axis dynamics model paired with its optimization role."""

    kind: Kind
    role: Role
    limits: ControlLimits

    def __post_init__(self):
        if self.kind is Kind.DOUBLE_INTEGRATOR and self.role is not Role.REACH:
            raise ValueError("double integrator is only used as a reach problem")
        if self.kind is Kind.AUGMENTED_RELATIVE and self.role is not Role.GAME:
            raise ValueError("augmented relative dynamics are only used as a game")
        if (
            self.kind is Kind.RELATIVE_DOUBLE_INTEGRATOR
            and self.role is Role.REACH
            and self.limits.u_max_other != 0.0
        ):
            raise ValueError("relative reach assumes the lead vehicle coasts (u_max_other = 0)")

    @property
    def dim(self) -> int:
        return _DIMS[self.kind]


@dataclass(frozen=True)
class ProductSubsystem:
    """Direct product of two axis subsystems, for full-dimensional solves."""

    x: Subsystem
    y: Subsystem

    @property
    def dim(self) -> int:
        return self.x.dim + self.y.dim


AnySubsystem = Union[Subsystem, ProductSubsystem]


def admissible_interval(limits: ControlLimits, v_self: ArrayLike) -> tuple[ArrayLike, ArrayLike]:
    """Admissible self-acceleration interval [lo, hi] at own velocity v_self.

    At or beyond the cap only deceleration is allowed (pure sign condition,
    the most conservative reading of the cap).
    """
    u = limits.u_max_self
    if limits.v_max is None:
        return -u * np.ones_like(np.asarray(v_self, dtype=float)), u * np.ones_like(
            np.asarray(v_self, dtype=float)
        )
    v = np.asarray(v_self, dtype=float)
    hi = np.where(v >= limits.v_max, 0.0, u)
    lo = np.where(v <= -limits.v_max, 0.0, -u)
    return lo, hi


def hamiltonian(sub: AnySubsystem, state: Sequence[ArrayLike], costate: Sequence[ArrayLike]) -> ArrayLike:
    """Closed form of the inner control optimization q . f(x, u...).

    Reach subsystems minimize over the self control; game subsystems
    maximize over the self control (restricted by the speed cap where
    present) and minimize over the other agent's control.
    """
    if isinstance(sub, ProductSubsystem):
        dx = sub.x.dim
        if len(state) != sub.dim or len(costate) != sub.dim:
            raise ValueError(f"product subsystem is {sub.dim}-d")
        return hamiltonian(sub.x, state[:dx], costate[:dx]) + hamiltonian(
            sub.y, state[dx:], costate[dx:]
        )

    if len(state) != sub.dim or len(costate) != sub.dim:
        raise ValueError(f"{sub.kind.value} state/costate must be {sub.dim}-d")
    lim = sub.limits

    if sub.kind in (Kind.DOUBLE_INTEGRATOR, Kind.RELATIVE_DOUBLE_INTEGRATOR):
        v, (q1, q2) = state[1], costate
        advect = q1 * np.asarray(v, dtype=float)
        if sub.role is Role.REACH:
            return advect - lim.u_max_self * np.abs(q2)
        return advect + lim.u_max_self * np.abs(q2) - lim.u_max_other * np.abs(q2)

    v_r, v_self = state[1], state[2]
    q1, q2, q3 = costate
    lo, hi = admissible_interval(lim, v_self)
    c = np.asarray(q2) + np.asarray(q3)
    self_term = np.maximum(c * lo, c * hi)
    return q1 * np.asarray(v_r, dtype=float) + self_term - lim.u_max_other * np.abs(q2)


def _deadband_sign(c: float, eps: float) -> float:
    if abs(c) <= eps:
        return 0.0
    return 1.0 if c > 0 else -1.0


def optimal_control(
    sub: Subsystem,
    state: Sequence[float],
    costate: Sequence[float],
    eps: float = EPS_GRAD,
    player: str = "self",
) -> float:
    """Bang-bang control achieving the Hamiltonian value.

    ``player="self"`` gives the subsystem's own optimal law (minimizing for
    reach, maximizing within the admissible interval for the game evader);
    ``player="other"`` gives the adversary's capture law, used for
    adversarial simulation. A coefficient within ``eps`` of zero yields a
    zero control.
    """
    if isinstance(sub, ProductSubsystem):
        raise TypeError("optimal_control works per axis; split the product state")
    lim = sub.limits
    if player == "other":
        if sub.role is not Role.GAME:
            raise ValueError("only game subsystems have an adversary")
        q2 = float(costate[1])
        return lim.u_max_other * _deadband_sign(q2, eps)
    if player != "self":
        raise ValueError(f"unknown player {player!r}")

    if sub.role is Role.REACH:
        q2 = float(costate[1])
        return -lim.u_max_self * _deadband_sign(q2, eps)

    if sub.kind is Kind.RELATIVE_DOUBLE_INTEGRATOR:
        c = float(costate[1])
        return lim.u_max_self * _deadband_sign(c, eps)

    c = float(costate[1]) + float(costate[2])
    lo, hi = admissible_interval(lim, float(state[2]))
    s = _deadband_sign(c, eps)
    if s > 0:
        return float(hi)
    if s < 0:
        return float(lo)
    return 0.0


def dissipation_bounds(sub: AnySubsystem, grid: Grid) -> np.ndarray:
    """Global bounds of |dH/dq_k| over the grid box (Lax-Friedrichs alphas).

    Position dimensions are advected by a velocity state, so their bound is
    the largest velocity magnitude on the grid; velocity dimensions are
    bounded by the applicable acceleration limits.
    """
    if isinstance(sub, ProductSubsystem):
        dx = sub.x.dim
        gx = make_subgrid(grid, range(dx))
        gy = make_subgrid(grid, range(dx, grid.ndim))
        return np.concatenate([dissipation_bounds(sub.x, gx), dissipation_bounds(sub.y, gy)])

    if grid.ndim != sub.dim:
        raise ValueError(f"grid is {grid.ndim}-d, subsystem needs {sub.dim}-d")
    lim = sub.limits
    v_bound = max(abs(grid.mins[1]), abs(grid.maxs[1]))
    if sub.kind is Kind.DOUBLE_INTEGRATOR:
        return np.array([v_bound, lim.u_max_self])
    if sub.kind is Kind.RELATIVE_DOUBLE_INTEGRATOR:
        return np.array([v_bound, lim.u_max_self + lim.u_max_other])
    return np.array([v_bound, lim.u_max_self + lim.u_max_other, lim.u_max_self])


def make_subgrid(grid: Grid, dims: Sequence[int]) -> Grid:
    """Grid restricted to a subset of dimensions (same nodes along each)."""
    dims = list(dims)
    return Grid(
        tuple(grid.mins[k] for k in dims),
        tuple(grid.maxs[k] for k in dims),
        tuple(grid.counts[k] for k in dims),
        tuple(grid.spacings[k] for k in dims),
    )
