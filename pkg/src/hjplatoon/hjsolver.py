"""Backward marching of terminal-value HJI/HJB PDEs on a grid.

The solver integrates, in nonnegative horizon time tau,

    d/dtau V = min{0, H(x, grad V)}    (freeze on: reach-within semantics)
    d/dtau V = H(x, grad V)            (freeze off: reach-exactly semantics)

with V(0, x) equal to a terminal implicit surface function, using a
first-order upwind scheme with global Lax-Friedrichs dissipation and
forward Euler in time. The update is

    V <- V + dtau * phi( H(x, (q- + q+)/2) + sum_k alpha_k (q+_k - q-_k)/2 )

where q-/q+ are one-sided differences, alpha_k bounds |dH/dq_k| over the
grid, and phi is min{0, .} when freezing. Applying the clamp to the full
numerical Hamiltonian makes frozen solves pointwise non-increasing in tau
by construction, and equals taking the pointwise min with the previous
slab after an unfrozen step.

Coupled reachable sets are recovered from per-axis solves by time-matched
reconstruction: the combined value at horizon tau is the minimum over
stored times s <= tau of the max of the per-axis values at s, i.e. both
axis targets must be met at a common elapsed time.
"""

from __future__ import annotations

import struct
import zlib
from dataclasses import dataclass, field
from typing import BinaryIO, Sequence

import numpy as np

from .dynamics import (
    AnySubsystem,
    ControlLimits,
    Kind,
    ProductSubsystem,
    Role,
    Subsystem,
    dissipation_bounds,
    hamiltonian,
)
from .grid import Grid, LevelSet, cell_weights, make_grid

# Auto store stride keeps at most this many slabs per series.
MAX_STORED_SLABS = 200


class SolveError(RuntimeError):
    """Marching failure (non-finite values, degenerate CFL, bad options)."""


@dataclass(frozen=True)
class SolveOptions:
    """Marching controls. ``time_step`` overrides the CFL-derived step so
    that paired axis solves can share one time lattice."""

    horizon: float
    cfl_factor: float = 0.5
    store_stride: int | None = None
    freeze: bool = True
    time_step: float | None = None

    def __post_init__(self):
        if self.horizon <= 0:
            raise ValueError("horizon must be positive")
        if not 0 < self.cfl_factor < 1:
            raise ValueError("cfl_factor must be in (0, 1)")
        if self.store_stride is not None and self.store_stride < 1:
            raise ValueError("store_stride must be >= 1")
        if self.time_step is not None and self.time_step <= 0:
            raise ValueError("time_step must be positive")


def cfl_time_step(sub: AnySubsystem, grid: Grid, cfl_factor: float = 0.5) -> float:
    """Largest admissible explicit step for this subsystem on this grid."""
    alphas = dissipation_bounds(sub, grid)
    rate = float(sum(a / dx for a, dx in zip(alphas, grid.spacings)))
    if rate <= 0.0:
        raise SolveError("CFL-degenerate grid: all dissipation bounds are zero")
    return cfl_factor / rate


@dataclass(eq=False)
class ValueSeries:
    """Time-stacked PDE solution: one value slab per stored horizon."""

    grid: Grid
    subsystem: Subsystem
    times: np.ndarray          # strictly increasing, times[0] == 0
    values: np.ndarray         # shape (len(times),) + grid.shape
    frozen: bool
    store_stride: int | None = None
    _slabs: dict = field(default_factory=dict, repr=False)

    @property
    def num_times(self) -> int:
        return len(self.times)

    @property
    def horizon(self) -> float:
        return float(self.times[-1])

    def slab(self, i: int) -> LevelSet:
        if i not in self._slabs:
            self._slabs[i] = LevelSet(self.grid, self.values[i])
        return self._slabs[i]

    def interp_times(self, point: Sequence[float]) -> np.ndarray:
        """Interpolated value at ``point`` for every stored time at once."""
        indices, weights, penalty = cell_weights(self.grid, point)
        flat = self.values.reshape(self.num_times, -1)
        return flat[:, indices] @ weights + penalty

    def time_index(self, tau: float) -> int:
        """Index of the last stored time <= tau (with float slack)."""
        if tau < -1e-12:
            raise ValueError(f"horizon must be nonnegative, got {tau}")
        if tau > self.horizon + 1e-9:
            raise ValueError(f"horizon {tau} exceeds built horizon {self.horizon}")
        return int(np.searchsorted(self.times, tau + 1e-9, side="right")) - 1


def _one_sided_diffs(values: np.ndarray, axis: int, dx: float) -> tuple[np.ndarray, np.ndarray]:
    """Left/right one-sided differences; domain faces replicate the interior
    one-sided difference so boundary nodes see a consistent gradient."""
    d = np.diff(values, axis=axis) / dx
    first = np.take(d, [0], axis=axis)
    last = np.take(d, [-1], axis=axis)
    q_minus = np.concatenate([first, d], axis=axis)
    q_plus = np.concatenate([d, last], axis=axis)
    return q_minus, q_plus


def solve(sub: AnySubsystem, grid: Grid, terminal: LevelSet, opts: SolveOptions) -> ValueSeries:
    """March the PDE backward from the terminal condition over [0, horizon]."""
    if terminal.grid != grid:
        raise ValueError("terminal condition lives on a different grid")
    if grid.ndim != sub.dim:
        raise ValueError(f"grid is {grid.ndim}-d, subsystem needs {sub.dim}-d")

    dt_max = cfl_time_step(sub, grid, opts.cfl_factor)
    if opts.time_step is not None:
        dt = opts.time_step
        if dt > dt_max * (1.0 + 1e-12):
            raise SolveError(f"time_step {dt} violates the CFL bound {dt_max}")
        steps = int(round(opts.horizon / dt))
        if steps < 1 or abs(steps * dt - opts.horizon) > 1e-9 * max(1.0, opts.horizon):
            raise SolveError("time_step must divide the horizon evenly")
    else:
        steps = max(1, int(np.ceil(opts.horizon / dt_max - 1e-12)))
        dt = opts.horizon / steps

    stride = opts.store_stride
    if stride is None:
        stride = max(1, int(np.ceil((steps + 1) / MAX_STORED_SLABS)))

    alphas = dissipation_bounds(sub, grid)
    state = tuple(grid.broadcast_coords(k) for k in range(grid.ndim))

    stored_steps = list(range(0, steps + 1, stride))
    if stored_steps[-1] != steps:
        stored_steps.append(steps)
    stored = np.zeros((len(stored_steps),) + grid.shape)
    stored[0] = terminal.values
    next_store = 1

    v = terminal.values.copy()
    for step in range(1, steps + 1):
        q_minus, q_plus = zip(
            *(_one_sided_diffs(v, k, grid.spacings[k]) for k in range(grid.ndim))
        )
        q_mid = tuple((qm + qp) / 2.0 for qm, qp in zip(q_minus, q_plus))
        num = hamiltonian(sub, state, q_mid)
        for k in range(grid.ndim):
            num = num + 0.5 * alphas[k] * (q_plus[k] - q_minus[k])
        if opts.freeze:
            v = v + dt * np.minimum(0.0, num)
        else:
            v = v + dt * num
        if not np.all(np.isfinite(v)):
            raise SolveError(f"non-finite values while marching at tau={step * dt:.6g}")
        if next_store < len(stored_steps) and step == stored_steps[next_store]:
            stored[next_store] = v
            next_store += 1

    times = np.array(stored_steps, dtype=float) * dt
    return ValueSeries(grid, sub, times, stored, opts.freeze, opts.store_stride)


@dataclass(eq=False)
class ReachEvaluator:
    """Queryable coupled reachable set built from two per-axis series.

    The full state is the concatenation of the x-axis state and the y-axis
    state (e.g. (p_x, v_x, p_y, v_y) for liveness sets or
    (p_xr, v_xr, v_xi, p_yr, v_yr, v_yi) for safety sets).
    """

    series_x: ValueSeries
    series_y: ValueSeries
    kind: str = "reconstructed"
    params_key: str = ""

    def __post_init__(self):
        if self.series_x.frozen or self.series_y.frozen:
            raise ValueError("reconstruction needs unfrozen (reach-exactly) series")
        if not np.array_equal(self.series_x.times, self.series_y.times):
            raise ValueError("per-axis series have mismatched time lattices")

    @property
    def times(self) -> np.ndarray:
        return self.series_x.times

    @property
    def horizon(self) -> float:
        return self.series_x.horizon

    @property
    def dim(self) -> int:
        return self.series_x.grid.ndim + self.series_y.grid.ndim

    def split_state(self, state: Sequence[float]) -> tuple[np.ndarray, np.ndarray]:
        s = np.asarray(state, dtype=float)
        if s.shape != (self.dim,):
            raise ValueError(f"state must be {self.dim}-d, got shape {s.shape}")
        dx = self.series_x.grid.ndim
        return s[:dx], s[dx:]

    def combined_over_times(self, state: Sequence[float]) -> np.ndarray:
        """max of per-axis values at every stored time for this state."""
        sx, sy = self.split_state(state)
        return np.maximum(self.series_x.interp_times(sx), self.series_y.interp_times(sy))

    def value(self, state: Sequence[float], tau: float) -> tuple[float, int]:
        """Reconstruction value at horizon tau and the minimizing stored
        time index (the time at which the combined constraint binds)."""
        last = self.series_x.time_index(tau)
        combined = self.combined_over_times(state)[: last + 1]
        s_star = int(np.argmin(combined))
        return float(combined[s_star]), s_star


def reconstruct_coupled(
    series_x: ValueSeries,
    series_y: ValueSeries,
    kind: str = "reconstructed",
    params_key: str = "",
) -> ReachEvaluator:
    """Combine per-axis reach-exactly series into a coupled evaluator."""
    return ReachEvaluator(series_x, series_y, kind, params_key)


# ---------------------------------------------------------------------------
# Cache file format ("HJVF"): little-endian, magic + version, grid header,
# frozen flag, subsystem descriptor, time lattice, time-major slabs, CRC32
# of everything between the version field and the checksum.
# ---------------------------------------------------------------------------

MAGIC = b"HJVF"
FORMAT_VERSION = 1

_KIND_CODES = {
    (Kind.DOUBLE_INTEGRATOR, Role.REACH): 1,
    (Kind.RELATIVE_DOUBLE_INTEGRATOR, Role.REACH): 2,
    (Kind.RELATIVE_DOUBLE_INTEGRATOR, Role.GAME): 3,
    (Kind.AUGMENTED_RELATIVE, Role.GAME): 4,
}
_CODE_KINDS = {v: k for k, v in _KIND_CODES.items()}


class CacheError(RuntimeError):
    """Base class for cache file problems."""


class CacheVersionError(CacheError):
    """Wrong magic bytes or unsupported format version."""


class CacheTruncationError(CacheError):
    """File shorter (or longer) than its header promises."""


class CacheChecksumError(CacheError):
    """Payload does not match the stored CRC32."""


def _payload_bytes(series: ValueSeries) -> bytes:
    grid = series.grid
    parts = [struct.pack("<I", grid.ndim)]
    for k in range(grid.ndim):
        parts.append(struct.pack("<ddI", grid.mins[k], grid.maxs[k], grid.counts[k]))
    parts.append(struct.pack("<B", 1 if series.frozen else 0))
    sub = series.subsystem
    if isinstance(sub, ProductSubsystem):
        raise CacheError("product-subsystem series are cross-validation only, not cached")
    code = _KIND_CODES[(sub.kind, sub.role)]
    v_max = sub.limits.v_max if sub.limits.v_max is not None else float("nan")
    parts.append(struct.pack("<Bddd", code, sub.limits.u_max_self, sub.limits.u_max_other, v_max))
    parts.append(struct.pack("<I", series.num_times))
    parts.append(np.ascontiguousarray(series.times, dtype="<f8").tobytes())
    parts.append(np.ascontiguousarray(series.values, dtype="<f8").tobytes())
    return b"".join(parts)


def save_series(series: ValueSeries, path) -> None:
    payload = _payload_bytes(series)
    crc = zlib.crc32(payload) & 0xFFFFFFFF
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", FORMAT_VERSION))
        fh.write(payload)
        fh.write(struct.pack("<I", crc))


class _Reader:
    def __init__(self, data: bytes, offset: int):
        self.data = data
        self.offset = offset

    def take(self, n: int, what: str) -> bytes:
        if self.offset + n > len(self.data):
            raise CacheTruncationError(
                f"truncated while reading {what}: expected {self.offset + n} bytes, "
                f"file has {len(self.data)}"
            )
        chunk = self.data[self.offset : self.offset + n]
        self.offset += n
        return chunk

    def unpack(self, fmt: str, what: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt), what))


def load_series(path) -> ValueSeries:
    with open(path, "rb") as fh:
        data = fh.read()
    if data[:4] != MAGIC:
        raise CacheVersionError(f"bad magic bytes {data[:4]!r}, expected {MAGIC!r}")
    rd = _Reader(data, 4)
    (version,) = rd.unpack("<I", "format version")
    if version != FORMAT_VERSION:
        raise CacheVersionError(f"unsupported format version {version}, expected {FORMAT_VERSION}")
    payload_start = rd.offset

    (ndim,) = rd.unpack("<I", "dimension")
    mins, maxs, counts = [], [], []
    for k in range(ndim):
        lo, hi, n = rd.unpack("<ddI", f"dimension {k} extent")
        mins.append(lo)
        maxs.append(hi)
        counts.append(n)
    (frozen_flag,) = rd.unpack("<B", "frozen flag")
    code, u_self, u_other, v_max = rd.unpack("<Bddd", "subsystem descriptor")
    if code not in _CODE_KINDS:
        raise CacheError(f"unknown subsystem code {code}")
    (num_times,) = rd.unpack("<I", "time count")
    times = np.frombuffer(rd.take(8 * num_times, "times"), dtype="<f8").copy()
    num_nodes = int(np.prod(counts))
    slab_bytes = rd.take(8 * num_times * num_nodes, "slabs")
    values = np.frombuffer(slab_bytes, dtype="<f8").reshape((num_times,) + tuple(counts)).copy()
    (crc_stored,) = rd.unpack("<I", "checksum")
    if rd.offset != len(data):
        raise CacheTruncationError(
            f"trailing bytes: expected {rd.offset} bytes total, file has {len(data)}"
        )
    crc = zlib.crc32(data[payload_start:-4]) & 0xFFFFFFFF
    if crc != crc_stored:
        raise CacheChecksumError(f"payload CRC32 {crc:#010x} != stored {crc_stored:#010x}")

    grid = make_grid(mins, maxs, counts)
    kind, role = _CODE_KINDS[code]
    limits = ControlLimits(u_self, u_other, None if np.isnan(v_max) else v_max)
    sub = Subsystem(kind, role, limits)
    return ValueSeries(grid, sub, times, values, bool(frozen_flag))
