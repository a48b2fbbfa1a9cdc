"""Euler-Maruyama simulation of the controlled forward SDE with delay and noisy memory.

State at step ``s`` consists of ``X``, the delayed values ``Y_i = X(t - delta_i)``
and the noisy memories ``L_i = int_{t-delta_i}^t X dB``.  Before time zero the
state is frozen at ``x0`` and the Brownian motion at zero.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .errors import AdmissibilityViolation, ConfigError, NumericalBlowup
from .timegrid import NO_JUMPS, JumpSpec, NoiseBatch, TimeGrid, paths_major


@dataclass
class StepState:
    """Everything a coefficient, driver or regressor may look at on one step."""

    s: int
    t: float
    X: np.ndarray
    Y: tuple[np.ndarray, ...]
    L: tuple[np.ndarray, ...]
    U: tuple[np.ndarray, ...] = ()
    B: np.ndarray | None = None
    sol: object = None

    @property
    def n_paths(self) -> int:
        return self.X.shape[0]

    def coord(self, name: str) -> np.ndarray:
        if name == "X":
            return self.X
        if name == "B":
            if self.B is None:
                raise KeyError("Brownian level not attached to this state")
            return self.B
        if name == "logX":
            return np.log(self.X)
        if name == "invX":
            return 1.0 / self.X
        if name[0] in "YL" and name[1:].isdigit():
            i = int(name[1:]) - 1
            seq = self.Y if name[0] == "Y" else self.L
            return seq[i] if i < len(seq) else np.zeros_like(self.X)
        raise KeyError(f"unknown state coordinate {name!r}")


Coefficient = Callable[[StepState], np.ndarray]


def _zero(st: StepState) -> np.ndarray:
    return np.zeros_like(st.X)


@dataclass(frozen=True)
class ModelSpec:
    """Coefficients of dX = b dt + sigma dB + int gamma N~(dt, dzeta).

    ``jump(state)`` returns gamma evaluated on every mark, shape
    (n_paths, n_marks).  ``scheme="log-euler"`` steps ``log X`` exactly for
    multiplicative models (b, sigma, gamma proportional to X, X > 0).
    """

    x0: float
    deltas: tuple[float, ...] = (0.0, 0.0)
    drift: Coefficient = _zero
    vol: Coefficient = _zero
    jump: Coefficient | None = None
    jump_spec: JumpSpec = NO_JUMPS
    scheme: str = "euler"
    guard: float = 1e12

    def __post_init__(self):
        if self.scheme not in ("euler", "log-euler"):
            raise ConfigError(f"unknown scheme {self.scheme!r}")
        if self.scheme == "log-euler" and not self.x0 > 0:
            raise ConfigError("log-euler scheme needs x0 > 0")


@dataclass(frozen=True, eq=False)
class ControlProcess:
    """Control of one player: per-step deterministic values or a feedback map.

    Deterministic values hold on ``[t_s, t_{s+1})``.  Feedback controls are
    evaluated as ``fn(t, X)`` on the pre-step state.
    """

    player: int
    values: np.ndarray | None = None
    fn: Callable[[float, np.ndarray], np.ndarray] | None = None
    bounds: tuple[float, float] = (-np.inf, np.inf)

    def __post_init__(self):
        if (self.values is None) == (self.fn is None):
            raise ValueError("give exactly one of values or fn")
        if self.values is not None:
            v = np.asarray(self.values, dtype=float)
            if not np.all(np.isfinite(v)):
                raise AdmissibilityViolation(f"player {self.player}: non-finite control values")
            lo, hi = self.bounds
            if np.any(v < lo) or np.any(v > hi):
                raise AdmissibilityViolation(
                    f"player {self.player}: control outside [{lo}, {hi}]"
                )
            v.flags.writeable = False
            object.__setattr__(self, "values", v)

    @property
    def kind(self) -> str:
        return "deterministic" if self.values is not None else "feedback"

    def at(self, s: int, t: float, X: np.ndarray) -> np.ndarray:
        if self.values is not None:
            return np.full_like(X, self.values[s])
        u = np.asarray(self.fn(t, X), dtype=float)
        return np.broadcast_to(u, X.shape).astype(float)

    @classmethod
    def from_function(cls, player, fn, grid: TimeGrid, sample="mid", bounds=(-np.inf, np.inf)):
        """Sample a deterministic ``fn(t)`` once per step (left end or midpoint)."""
        t = grid.times[:-1]
        if sample == "mid":
            t = t + 0.5 * grid.dt
        elif sample != "left":
            raise ValueError(f"sample must be 'mid' or 'left', got {sample!r}")
        return cls(player, values=np.array([fn(ti) for ti in t], dtype=float), bounds=bounds)

    @classmethod
    def constant(cls, player, value, grid: TimeGrid, bounds=(-np.inf, np.inf)):
        return cls(player, values=np.full(grid.n_steps, float(value)), bounds=bounds)

    def scaled(self, factor: float) -> "ControlProcess":
        if self.values is None:
            fn = self.fn
            return ControlProcess(self.player, fn=lambda t, x: factor * fn(t, x), bounds=self.bounds)
        return ControlProcess(self.player, values=factor * self.values, bounds=self.bounds)


@dataclass(frozen=True, eq=False)
class PathBundle:
    grid: TimeGrid
    x0: float
    X: np.ndarray  # (n_paths, n_steps + 1)
    Y: tuple[np.ndarray, ...]
    L: tuple[np.ndarray, ...]
    U: tuple[np.ndarray, ...]  # (n_paths, n_steps) each
    B: np.ndarray | None = field(default=None, repr=False)

    @property
    def n_paths(self) -> int:
        return self.X.shape[0]

    def state(self, s: int, control_step: int | None = None) -> StepState:
        """State at step ``s``; controls are those applied on step ``control_step``
        (default ``min(s, n_steps - 1)``)."""
        n = self.grid.n_steps
        cs = min(s, n - 1) if control_step is None else control_step
        return StepState(
            s=s,
            t=s * self.grid.dt,
            X=self.X[:, s],
            Y=tuple(y[:, s] for y in self.Y),
            L=tuple(lam[:, s] for lam in self.L),
            U=tuple(u[:, cs] for u in self.U),
            B=None if self.B is None else self.B[:, s],
        )


def _delay_value(X, s, d, x0):
    return X[:, s - d] if s >= d else np.full(X.shape[0], x0)


def simulate_forward(
    model: ModelSpec,
    controls: Sequence[ControlProcess],
    noise: NoiseBatch,
    grid: TimeGrid | None = None,
) -> PathBundle:
    grid = noise.grid if grid is None else grid
    if grid != noise.grid:
        raise ConfigError("noise was generated on a different grid")
    dt, n = grid.dt, grid.n_steps
    dsteps = grid.delay_steps_for(model.deltas)
    for c in controls:
        if c.values is not None and c.values.shape != (n,):
            raise ConfigError(f"player {c.player}: control has {c.values.shape} values, grid has {n} steps")

    P = noise.n_paths
    dB = noise.dB
    jumps = model.jump is not None and noise.jump_spec.active
    dN = noise.dN_tilde if jumps else None
    counts = noise.counts if jumps else None
    nu_dt = noise.compensator

    X = paths_major(P, n + 1)
    X[:, 0] = model.x0
    XdB = paths_major(P, n)
    Ys = [paths_major(P, n + 1) for _ in dsteps]
    Ls = [paths_major(P, n + 1) for _ in dsteps]
    Us = [paths_major(P, n) for _ in controls]
    B = noise.B

    def fill_memory(s):
        for i, d in enumerate(dsteps):
            Ys[i][:, s] = _delay_value(X, s, d, model.x0)
            lo = max(s - d, 0)
            Ls[i][:, s] = XdB[:, lo:s].sum(axis=1) if s > lo else 0.0

    for s in range(n):
        fill_memory(s)
        t = s * dt
        x = X[:, s]
        u = []
        for k, c in enumerate(controls):
            Us[k][:, s] = c.at(s, t, x)
            u.append(Us[k][:, s])
        st = StepState(s, t, x, tuple(y[:, s] for y in Ys), tuple(lam[:, s] for lam in Ls), tuple(u), B[:, s])
        b = np.asarray(model.drift(st), dtype=float)
        sig = np.asarray(model.vol(st), dtype=float)
        if model.scheme == "euler":
            nxt = x + b * dt + sig * dB[:, s]
            if jumps:
                gam = np.asarray(model.jump(st), dtype=float)
                nxt = nxt + np.sum(gam * dN[:, s, :], axis=1)
        else:
            if np.any(x <= 0):
                p = int(np.argmax(x <= 0))
                raise NumericalBlowup(f"log-euler state non-positive on path {p}, step {s}", p, s)
            rb, rs = b / x, sig / x
            expo = (rb - 0.5 * rs * rs) * dt + rs * dB[:, s]
            nxt = x * np.exp(expo)
            if jumps:
                rg = np.asarray(model.jump(st), dtype=float) / x[:, None]
                if np.any(rg <= -1):
                    raise NumericalBlowup(f"relative jump <= -1 at step {s}", None, s)
                nxt = nxt * np.exp(np.sum(counts[:, s, :] * np.log1p(rg) - rg * nu_dt, axis=1))
        bad = ~np.isfinite(nxt) | (np.abs(nxt) > model.guard)
        if np.any(bad):
            p = int(np.argmax(bad))
            raise NumericalBlowup(
                f"|X| exceeded guard {model.guard:g} on path {p + noise.path_offset} at step {s + 1}",
                p + noise.path_offset,
                s + 1,
            )
        X[:, s + 1] = nxt
        XdB[:, s] = x * dB[:, s]
    fill_memory(n)
    return PathBundle(grid, model.x0, X, tuple(Ys), tuple(Ls), tuple(Us), B)


def noisy_memory_variance_probe(x: float, delta: float, t: float, noise: NoiseBatch) -> float:
    """Sample variance of the noisy memory of a constant process ``X = x``.

    Ito isometry gives ``x**2 * min(delta, t)``.
    """
    model = ModelSpec(x0=x, deltas=(delta,))
    paths = simulate_forward(model, (), noise)
    return float(np.var(paths.L[0][:, noise.grid.step_of(t)], ddof=1))
