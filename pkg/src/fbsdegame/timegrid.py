"""Time grid and seeded Brownian / compensated-Poisson noise.

Noise is generated in fixed-size path blocks, each block drawing from its own
Philox stream keyed by ``(seed, block)``.  Path ``p`` therefore sees the same
increments whatever the total batch size, and large batches can be streamed
block by block without materialising everything.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterator, Sequence

import numpy as np

from .errors import DeltaExceedsHorizon, InvalidHorizon, NonCommensurateDelay

BLOCK_SIZE = 4096


@dataclass(frozen=True)
class TimeGrid:
    T: float
    n_steps: int
    delay_steps: tuple[int, ...] = ()

    @property
    def dt(self) -> float:
        return self.T / self.n_steps

    @property
    def times(self) -> np.ndarray:
        return np.linspace(0.0, self.T, self.n_steps + 1)

    @property
    def deltas(self) -> tuple[float, ...]:
        return tuple(d * self.dt for d in self.delay_steps)

    def delay_steps_for(self, deltas: Sequence[float]) -> tuple[int, ...]:
        return make_grid(self.T, self.n_steps, deltas).delay_steps

    def step_of(self, t: float) -> int:
        """Grid index of time ``t`` (must lie on the grid)."""
        s = int(round(t / self.dt))
        if abs(s * self.dt - t) > 1e-9 * max(1.0, abs(t)) or not 0 <= s <= self.n_steps:
            raise ValueError(f"time {t} is not a grid point of {self}")
        return s


def make_grid(T: float, n_steps: int, deltas: Sequence[float] = ()) -> TimeGrid:
    if not T > 0:
        raise InvalidHorizon(f"horizon must be positive, got T={T}")
    if n_steps < 1:
        raise InvalidHorizon(f"n_steps must be >= 1, got {n_steps}")
    dt = T / n_steps
    steps = []
    for delta in deltas:
        if delta < 0:
            raise NonCommensurateDelay(f"delay must be non-negative, got {delta}")
        if delta > T:
            raise DeltaExceedsHorizon(f"delay {delta} exceeds horizon {T}")
        exact = delta / dt
        d = int(round(exact))
        if abs(d - exact) > 1e-9 * max(1.0, abs(exact)):
            raise NonCommensurateDelay(
                f"delay {delta} is not an integer multiple of dt={dt} ({exact} steps)"
            )
        steps.append(d)
    return TimeGrid(float(T), int(n_steps), tuple(steps))


@dataclass(frozen=True)
class JumpSpec:
    """Finite-mark compensated Poisson random measure.

    ``nu`` (the Levy measure) is ``intensity * probs`` on the points ``marks``.
    """

    intensity: float = 0.0
    marks: tuple[float, ...] = (0.0,)
    probs: tuple[float, ...] = (1.0,)

    def __post_init__(self):
        if self.intensity < 0:
            raise ValueError("jump intensity must be >= 0")
        if len(self.marks) != len(self.probs) or len(self.marks) == 0:
            raise ValueError("marks and probs must be non-empty and of equal length")
        if any(p < 0 for p in self.probs) or abs(sum(self.probs) - 1.0) > 1e-12:
            raise ValueError("mark probabilities must be non-negative and sum to 1")

    @property
    def n_marks(self) -> int:
        return len(self.marks)

    @property
    def nu(self) -> np.ndarray:
        return self.intensity * np.asarray(self.probs, dtype=float)

    @property
    def active(self) -> bool:
        return self.intensity > 0


NO_JUMPS = JumpSpec()


@dataclass(frozen=True, eq=False)
class NoiseBatch:
    grid: TimeGrid
    n_paths: int
    seed: int
    jump_spec: JumpSpec
    dB: np.ndarray  # (n_paths, n_steps)
    counts: np.ndarray  # (n_paths, n_steps, n_marks) Poisson counts
    path_offset: int = 0
    _B: np.ndarray | None = field(default=None, repr=False)
    _dN: np.ndarray | None = field(default=None, repr=False)

    @property
    def compensator(self) -> np.ndarray:
        """Expected jump count per step and mark, ``nu_j * dt``."""
        return self.jump_spec.nu * self.grid.dt

    @property
    def dN_tilde(self) -> np.ndarray:
        """Compensated counts, shape (n_paths, n_steps, n_marks)."""
        if self._dN is None:
            object.__setattr__(self, "_dN", np.asfortranarray(self.counts - self.compensator))
        return self._dN

    @property
    def B(self) -> np.ndarray:
        """Brownian path on the grid, shape (n_paths, n_steps + 1), B[:, 0] = 0."""
        if self._B is None:
            B = np.zeros((self.grid.n_steps + 1, self.n_paths)).T
            np.cumsum(self.dB, axis=1, out=B[:, 1:])
            object.__setattr__(self, "_B", B)
        return self._B

    def jumps(self, path: int) -> list[tuple[int, int]]:
        """(step, mark) pairs for one path; repeated pairs for multiple jumps."""
        steps, marks = np.nonzero(self.counts[path])
        out = []
        for s, j in zip(steps, marks):
            out.extend([(int(s), int(j))] * int(self.counts[path, s, j]))
        return out


def _block(grid: TimeGrid, seed: int, block: int, jump_spec: JumpSpec):
    ss = np.random.SeedSequence(entropy=seed, spawn_key=(block,))
    gen = np.random.Generator(np.random.Philox(ss))
    dB = gen.standard_normal((BLOCK_SIZE, grid.n_steps)) * np.sqrt(grid.dt)
    if jump_spec.active:
        jgen = np.random.Generator(np.random.Philox(ss.spawn(1)[0]))
        counts = jgen.poisson(jump_spec.nu * grid.dt, (BLOCK_SIZE, grid.n_steps, jump_spec.n_marks))
    else:
        counts = None
    return dB, counts


def paths_major(n_paths: int, n_cols: int, *extra: int) -> np.ndarray:
    """Uninitialised (n_paths, n_cols, ...) array whose per-step columns are contiguous."""
    return np.empty((n_cols, n_paths) + extra).swapaxes(0, 1)


def sample_noise(
    grid: TimeGrid,
    n_paths: int,
    seed: int,
    jump_spec: JumpSpec = NO_JUMPS,
    path_offset: int = 0,
) -> NoiseBatch:
    """Noise for paths ``path_offset .. path_offset + n_paths - 1``."""
    if n_paths < 1:
        raise ValueError("n_paths must be >= 1")
    first = path_offset // BLOCK_SIZE
    last = (path_offset + n_paths - 1) // BLOCK_SIZE
    dBs, cs = [], []
    for b in range(first, last + 1):
        dB, counts = _block(grid, seed, b, jump_spec)
        dBs.append(dB)
        cs.append(counts)
    lo = path_offset - first * BLOCK_SIZE
    dB = np.asfortranarray(np.concatenate(dBs)[lo : lo + n_paths])
    if jump_spec.active:
        counts = np.asfortranarray(np.concatenate(cs)[lo : lo + n_paths].astype(np.int64))
    else:
        counts = np.zeros((n_paths, grid.n_steps, jump_spec.n_marks), dtype=np.int64)
    dB.flags.writeable = False
    counts.flags.writeable = False
    return NoiseBatch(grid, n_paths, seed, jump_spec, dB, counts, path_offset)


def iter_noise(
    grid: TimeGrid,
    n_paths: int,
    seed: int,
    jump_spec: JumpSpec = NO_JUMPS,
    chunk: int = 16 * BLOCK_SIZE,
) -> Iterator[NoiseBatch]:
    """Stream ``n_paths`` paths in chunks; concatenation equals ``sample_noise``."""
    done = 0
    while done < n_paths:
        k = min(chunk, n_paths - done)
        yield sample_noise(grid, k, seed, jump_spec, path_offset=done)
        done += k
