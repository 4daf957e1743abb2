"""n-dimensional Cartesian grids and implicit surface functions.

A state set is represented by a scalar field sampled on a regular grid:
negative values inside the set, zero on the boundary, positive outside.
Everything downstream (the PDE solver, reachable-set evaluators, control
extraction) works on these two types, so the node-coordinate formula and
the storage layout are fixed here once: node ``i`` of dimension ``k`` sits
at ``mins[k] + i * spacings[k]``, and fields are stored as C-ordered
(row-major, last dimension fastest) float64 arrays.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np


@dataclass(frozen=True)
class Grid:
    """Regular Cartesian grid over a box domain."""

    mins: tuple[float, ...]
    maxs: tuple[float, ...]
    counts: tuple[int, ...]
    spacings: tuple[float, ...]

    @property
    def ndim(self) -> int:
        return len(self.counts)

    @property
    def shape(self) -> tuple[int, ...]:
        return self.counts

    @property
    def num_nodes(self) -> int:
        return int(np.prod(self.counts))

    def coords(self, k: int) -> np.ndarray:
        """Node coordinates along dimension k."""
        return self.mins[k] + self.spacings[k] * np.arange(self.counts[k])

    def axes(self) -> list[np.ndarray]:
        return [self.coords(k) for k in range(self.ndim)]

    def broadcast_coords(self, k: int) -> np.ndarray:
        """coords(k) reshaped to broadcast against a field of this grid's shape."""
        shape = [1] * self.ndim
        shape[k] = self.counts[k]
        return self.coords(k).reshape(shape)

    def clamp(self, point: np.ndarray) -> np.ndarray:
        return np.clip(point, self.mins, self.maxs)


def make_grid(mins: Sequence[float], maxs: Sequence[float], counts: Sequence[int]) -> Grid:
    """Build a grid; each dimension needs at least 3 nodes and positive extent."""
    if not (len(mins) == len(maxs) == len(counts)):
        raise ValueError(
            f"dimension mismatch: mins has {len(mins)}, maxs has {len(maxs)}, counts has {len(counts)}"
        )
    if len(mins) == 0:
        raise ValueError("grid needs at least one dimension")
    mins_t = tuple(float(m) for m in mins)
    maxs_t = tuple(float(m) for m in maxs)
    counts_t = tuple(int(c) for c in counts)
    for k, (lo, hi, n) in enumerate(zip(mins_t, maxs_t, counts_t)):
        if n < 3:
            raise ValueError(f"dimension {k}: counts must be >= 3, got {n}")
        if not hi > lo:
            raise ValueError(f"dimension {k}: non-positive extent [{lo}, {hi}]")
    spacings = tuple((hi - lo) / (n - 1) for lo, hi, n in zip(mins_t, maxs_t, counts_t))
    return Grid(mins_t, maxs_t, counts_t, spacings)


@dataclass(frozen=True)
class LevelSet:
    """A scalar field on a grid whose zero sublevel set is the represented set."""

    grid: Grid
    values: np.ndarray = field(repr=False)

    def __post_init__(self):
        values = np.ascontiguousarray(self.values, dtype=np.float64)
        if values.shape != self.grid.shape:
            raise ValueError(f"values shape {values.shape} != grid shape {self.grid.shape}")
        if not np.all(np.isfinite(values)):
            raise ValueError("level set values must be finite")
        object.__setattr__(self, "values", values)


def signed_box(grid: Grid, center: Sequence[float], half_widths: Sequence[float]) -> LevelSet:
    """Axis-aligned box as max of per-axis margins |x_k - c_k| - h_k."""
    if len(center) != grid.ndim or len(half_widths) != grid.ndim:
        raise ValueError(
            f"dimension mismatch: grid is {grid.ndim}-d, center has {len(center)}, "
            f"half_widths has {len(half_widths)}"
        )
    if any(h <= 0 for h in half_widths):
        raise ValueError("half_widths must be positive")
    values = np.full(grid.shape, -np.inf)
    for k in range(grid.ndim):
        margin = np.abs(grid.broadcast_coords(k) - center[k]) - half_widths[k]
        values = np.maximum(values, margin)
    return LevelSet(grid, values)


def combine(kind: str, a: LevelSet, b: LevelSet | None = None) -> LevelSet:
    """Pointwise set algebra: union=min, intersection=max, complement=negation."""
    if kind == "complement":
        if b is not None:
            raise ValueError("complement takes a single operand")
        return LevelSet(a.grid, -a.values)
    if b is None:
        raise ValueError(f"{kind} needs two operands")
    if a.grid != b.grid:
        raise ValueError("operands live on different grids")
    if kind == "union":
        return LevelSet(a.grid, np.minimum(a.values, b.values))
    if kind == "intersection":
        return LevelSet(a.grid, np.maximum(a.values, b.values))
    raise ValueError(f"unknown combination kind {kind!r}")


def cell_weights(grid: Grid, point: Sequence[float]) -> tuple[np.ndarray, np.ndarray, float]:
    """Multilinear interpolation stencil for a query point.

    Returns flat node indices of the enclosing cell's corners, the matching
    weights (summing to 1), and the L1 distance from the query to its clamp
    onto the domain (0 for in-domain points). The same stencil can be reused
    across any number of fields on the same grid.
    """
    p = np.asarray(point, dtype=np.float64)
    if p.shape != (grid.ndim,):
        raise ValueError(f"point has shape {p.shape}, grid is {grid.ndim}-d")
    clamped = grid.clamp(p)
    penalty = float(np.sum(np.abs(p - clamped)))

    frac = (clamped - np.array(grid.mins)) / np.array(grid.spacings)
    base = np.minimum(np.floor(frac).astype(np.intp), np.array(grid.counts) - 2)
    rem = frac - base  # in [0, 1]

    strides = np.ones(grid.ndim, dtype=np.intp)
    for k in range(grid.ndim - 2, -1, -1):
        strides[k] = strides[k + 1] * grid.counts[k + 1]

    num_corners = 1 << grid.ndim
    indices = np.empty(num_corners, dtype=np.intp)
    weights = np.empty(num_corners)
    for corner in range(num_corners):
        idx = 0
        w = 1.0
        for k in range(grid.ndim):
            hi = (corner >> k) & 1
            idx += (base[k] + hi) * strides[k]
            w *= rem[k] if hi else 1.0 - rem[k]
        indices[corner] = idx
        weights[corner] = w
    return indices, weights, penalty


def interpolate(levelset: LevelSet, point: Sequence[float]) -> float:
    """Multilinear interpolation; out-of-domain queries clamp and add the L1 gap."""
    indices, weights, penalty = cell_weights(levelset.grid, point)
    return float(levelset.values.ravel()[indices] @ weights) + penalty


def _node_gradient(values: np.ndarray, grid: Grid, idx: np.ndarray) -> np.ndarray:
    """Central-difference gradient at a node, one-sided on domain faces."""
    g = np.empty(grid.ndim)
    for k in range(grid.ndim):
        n = grid.counts[k]
        lo = tuple(idx[j] if j != k else max(idx[k] - 1, 0) for j in range(grid.ndim))
        hi = tuple(idx[j] if j != k else min(idx[k] + 1, n - 1) for j in range(grid.ndim))
        span = (hi[k] - lo[k]) * grid.spacings[k]
        g[k] = (values[hi] - values[lo]) / span
    return g


def gradient_at(levelset: LevelSet, point: Sequence[float]) -> np.ndarray:
    """Spatial gradient at a point: node gradients multilinearly interpolated.

    Queries outside the domain are clamped first; kinks of min/max-combined
    fields are not treated specially here (downstream control extraction
    applies its own sign deadband).
    """
    grid = levelset.grid
    p = grid.clamp(np.asarray(point, dtype=np.float64))
    frac = (p - np.array(grid.mins)) / np.array(grid.spacings)
    base = np.minimum(np.floor(frac).astype(np.intp), np.array(grid.counts) - 2)
    rem = frac - base

    grad = np.zeros(grid.ndim)
    for corner in range(1 << grid.ndim):
        idx = base.copy()
        w = 1.0
        for k in range(grid.ndim):
            hi = (corner >> k) & 1
            idx[k] = base[k] + hi
            w *= rem[k] if hi else 1.0 - rem[k]
        if w != 0.0:
            grad += w * _node_gradient(levelset.values, grid, idx)
    return grad
