"""Wiener functionals with closed-form projected Malliavin derivatives.

For every catalog member ``F`` we know ``xi(t) = E[D_t F | F_t]`` in closed
form, which lets us check Clark-Ocone, the variance identity and the duality
formula by Monte Carlo.  When no closed form exists, ``E[D_t F | F_t]`` is
estimated by regressing ``F dB(t) / dt`` on time-t regressors.
"""
from __future__ import annotations

import math
import re
from dataclasses import dataclass, field
from typing import Callable, Iterable

import numpy as np

from .bsde import Projector, RegressionBasis
from .errors import CatalogMiss
from .forward import PathBundle, StepState
from .timegrid import NoiseBatch, TimeGrid

# Discretisation allowance is ALLOWANCE_C * dt * max(1, E[F^2]).  Grid defects
# grow with the size of F (Clark-Ocone MSE is 2 dt for B(1)^2, 9 dt for B(1)^3);
# C = 2 leaves a factor 3 on B(1)^2 and at least 2 on every catalog member.
ALLOWANCE_C = 2.0


def _allowance(dt: float, second_moment: float) -> float:
    return ALLOWANCE_C * dt * max(1.0, float(second_moment))


def _double_factorial(k: int) -> int:
    return math.prod(range(k, 0, -2)) if k > 0 else 1


def _gaussian_moment(j: int, var) -> float:
    if j % 2:
        return 0.0
    return _double_factorial(j - 1) * var ** (j // 2)


def _cond_power(B_t: np.ndarray, t: float, t0: float, k: int) -> np.ndarray:
    """E[B(t0)^k | F_t] for t <= t0."""
    out = np.zeros_like(B_t)
    for j in range(0, k + 1, 2):
        out = out + math.comb(k, j) * _gaussian_moment(j, t0 - t) * B_t ** (k - j)
    return out


class WienerFunctional:
    name = "F"

    def evaluate(self, B: np.ndarray, grid: TimeGrid) -> np.ndarray:
        raise NotImplementedError

    def projected_derivative(self, B: np.ndarray, grid: TimeGrid) -> np.ndarray:
        """E[D_t F | F_t] at the left end of every step, shape (n_paths, n_steps)."""
        raise CatalogMiss(f"no closed-form derivative for {self.name}")

    def mean(self) -> float:
        raise CatalogMiss(f"no closed-form mean for {self.name}")

    def __add__(self, other):
        return LinearCombination([(1.0, self), (1.0, other)])

    def __sub__(self, other):
        return LinearCombination([(1.0, self), (-1.0, other)])

    def __rmul__(self, a: float):
        return LinearCombination([(float(a), self)])

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return LinearCombination([(float(other), self)])
        return Product(self, other)

    def __repr__(self):
        return self.name


@dataclass(repr=False)
class Constant(WienerFunctional):
    c: float

    def __post_init__(self):
        self.name = f"const({self.c:g})"

    def evaluate(self, B, grid):
        return np.full(B.shape[0], float(self.c))

    def projected_derivative(self, B, grid):
        return np.zeros((B.shape[0], grid.n_steps))

    def mean(self):
        return float(self.c)


@dataclass(repr=False)
class BrownianPower(WienerFunctional):
    """B(t0)^m; m = 1 is the plain Brownian value."""

    t0: float
    m: int = 1

    def __post_init__(self):
        self.name = f"B({self.t0:g})" + (f"^{self.m}" if self.m != 1 else "")

    def evaluate(self, B, grid):
        return B[:, grid.step_of(self.t0)] ** self.m

    def projected_derivative(self, B, grid):
        s0 = grid.step_of(self.t0)
        out = np.zeros((B.shape[0], grid.n_steps))
        t = grid.times
        for s in range(min(s0, grid.n_steps)):
            out[:, s] = self.m * _cond_power(B[:, s], t[s], self.t0, self.m - 1)
        return out

    def mean(self):
        return _gaussian_moment(self.m, self.t0)


def BrownianValue(t0: float) -> BrownianPower:
    return BrownianPower(t0, 1)


@dataclass(repr=False)
class Increment(WienerFunctional):
    t0: float
    t1: float

    def __post_init__(self):
        self.name = f"B({self.t1:g})-B({self.t0:g})"

    def evaluate(self, B, grid):
        return B[:, grid.step_of(self.t1)] - B[:, grid.step_of(self.t0)]

    def projected_derivative(self, B, grid):
        out = np.zeros((B.shape[0], grid.n_steps))
        out[:, grid.step_of(self.t0) : grid.step_of(self.t1)] = 1.0
        return out

    def mean(self):
        return 0.0


@dataclass(repr=False)
class Product(WienerFunctional):
    """F * G.  Closed form only when both factors are Brownian values."""

    F: WienerFunctional
    G: WienerFunctional

    def __post_init__(self):
        self.name = f"{self.F.name}*{self.G.name}"

    def _values(self):
        F, G = self.F, self.G
        if isinstance(F, BrownianPower) and isinstance(G, BrownianPower) and F.m == G.m == 1:
            return sorted((F.t0, G.t0))
        raise CatalogMiss(f"no closed-form derivative for {self.name}")

    def evaluate(self, B, grid):
        return self.F.evaluate(B, grid) * self.G.evaluate(B, grid)

    def projected_derivative(self, B, grid):
        a, b = self._values()
        sa, sb = grid.step_of(a), grid.step_of(b)
        out = np.zeros((B.shape[0], grid.n_steps))
        # D_t[B(a)B(b)] = 1{t<a} B(b) + 1{t<b} B(a);  E[B(u)|F_t] = B(min(u, t))
        for s in range(min(sb, grid.n_steps)):
            out[:, s] = B[:, min(s, sa)] + (B[:, s] if s < sa else 0.0)
        return out

    def mean(self):
        return self._values()[0]


@dataclass(repr=False)
class LinearCombination(WienerFunctional):
    terms: list = field(default_factory=list)

    def __post_init__(self):
        self.name = " + ".join(f"{a:g}*{F.name}" for a, F in self.terms)

    def evaluate(self, B, grid):
        return sum(a * F.evaluate(B, grid) for a, F in self.terms)

    def projected_derivative(self, B, grid):
        return sum(a * F.projected_derivative(B, grid) for a, F in self.terms)

    def mean(self):
        return sum(a * F.mean() for a, F in self.terms)


_NUM = r"([0-9]*\.?[0-9]+(?:[eE][-+]?[0-9]+)?)"


def parse_functional(text: str) -> WienerFunctional:
    """Parse ``const(c)``, ``B(t)``, ``B(t)^m``, ``B(a)*B(b)`` or ``B(b)-B(a)``."""
    t = text.replace(" ", "")
    if m := re.fullmatch(rf"const\((-?{_NUM[1:-1]})\)", t):
        return Constant(float(m.group(1)))
    if m := re.fullmatch(rf"B\({_NUM}\)(?:\^(\d+))?", t):
        return BrownianPower(float(m.group(1)), int(m.group(2) or 1))
    if m := re.fullmatch(rf"B\({_NUM}\)\*B\({_NUM}\)", t):
        return Product(BrownianValue(float(m.group(1))), BrownianValue(float(m.group(2))))
    if m := re.fullmatch(rf"B\({_NUM}\)-B\({_NUM}\)", t):
        return Increment(float(m.group(2)), float(m.group(1)))
    raise CatalogMiss(f"functional {text!r} is not in the catalog")


DEFAULT_CATALOG = ("const(1)", "B(1)", "B(1)^2", "B(1)^3", "B(0.5)*B(1)", "B(1)-B(0.5)")

PHIS: dict[str, Callable[[np.ndarray, float], np.ndarray]] = {
    "zero": lambda B_t, t: np.zeros_like(B_t),
    "one": lambda B_t, t: np.ones_like(B_t),
    "B": lambda B_t, t: B_t,
    "t": lambda B_t, t: np.full_like(B_t, t),
}


@dataclass
class IdentityReport:
    name: str
    lhs: float
    rhs: float
    se_lhs: float
    se_rhs: float
    allowance: float
    n_paths: int

    @property
    def tolerance(self) -> float:
        return 3.0 * (self.se_lhs + self.se_rhs) + self.allowance

    @property
    def passed(self) -> bool:
        return abs(self.lhs - self.rhs) <= self.tolerance

    @property
    def wide_se(self) -> bool:
        return 3.0 * (self.se_lhs + self.se_rhs) > 0.1 * max(1.0, abs(self.rhs), abs(self.lhs))


class _Moments:
    """Running sums for sample means and standard errors."""

    def __init__(self, k: int):
        self.n = 0
        self.s1 = np.zeros(k)
        self.s2 = np.zeros(k)
        self.centre = None

    def add(self, *cols):
        X = np.column_stack(cols)
        if self.centre is None:
            self.centre = X.mean(axis=0)
        Xc = X - self.centre
        self.n += X.shape[0]
        self.s1 += Xc.sum(axis=0)
        self.s2 += (Xc * Xc).sum(axis=0)

    def mean(self):
        return self.centre + self.s1 / self.n

    def var(self):
        m = self.s1 / self.n
        return (self.s2 / self.n - m * m) * self.n / max(self.n - 1, 1)

    def se(self):
        return np.sqrt(np.maximum(self.var(), 0.0) / self.n)


def _batches(noise) -> Iterable[NoiseBatch]:
    return [noise] if isinstance(noise, NoiseBatch) else noise


def _phi_matrix(phi, B, grid):
    t = grid.times
    return np.column_stack([phi(B[:, s], t[s]) for s in range(grid.n_steps)])


def check_duality(F: WienerFunctional, phi, noise) -> IdentityReport:
    """E[F int phi dB] against E[int E[D_t F|F_t] phi dt], on the same paths."""
    if isinstance(phi, str):
        phi = PHIS[phi]
    acc = _Moments(3)
    grid = None
    for nb in _batches(noise):
        grid, B = nb.grid, nb.B
        xi = F.projected_derivative(B, grid)
        ph = _phi_matrix(phi, B, grid)
        Fv = F.evaluate(B, grid)
        lhs = Fv * np.einsum("ij,ij->i", ph, nb.dB)
        rhs = np.einsum("ij,ij->i", xi, ph) * grid.dt
        acc.add(lhs, rhs, Fv * Fv)
    m, se = acc.mean(), acc.se()
    return IdentityReport(
        f"duality[{F.name}]", float(m[0]), float(m[1]), float(se[0]), float(se[1]), _allowance(grid.dt, m[2]), acc.n
    )


def check_clark_ocone(F: WienerFunctional, noise) -> IdentityReport:
    """Mean-square error of F - (E[F] + int E[D_t F|F_t] dB); lhs is the MSE, rhs 0."""
    acc = _Moments(2)
    grid = None
    EF = F.mean()
    for nb in _batches(noise):
        grid, B = nb.grid, nb.B
        recon = EF + np.einsum("ij,ij->i", F.projected_derivative(B, grid), nb.dB)
        Fv = F.evaluate(B, grid)
        acc.add((Fv - recon) ** 2, Fv * Fv)
    m = acc.mean()
    return IdentityReport(
        f"clark-ocone[{F.name}]", float(m[0]), 0.0, float(acc.se()[0]), 0.0, _allowance(grid.dt, m[1]), acc.n
    )


def check_variance_identity(F: WienerFunctional, noise) -> IdentityReport:
    """E[int E[D_t F|F_t]^2 dt] against Var(F)."""
    acc = _Moments(3)
    grid = None
    EF = F.mean()
    for nb in _batches(noise):
        grid, B = nb.grid, nb.B
        xi = F.projected_derivative(B, grid)
        Fv = F.evaluate(B, grid)
        acc.add(np.einsum("ij,ij->i", xi, xi) * grid.dt, Fv - EF, (Fv - EF) ** 2)
    m, var = acc.mean(), acc.var()
    lhs, se_lhs = m[0], float(np.sqrt(var[0] / acc.n))
    rhs = m[2] - m[1] ** 2
    se_rhs = float(np.sqrt(var[2] / acc.n))
    m2 = m[2] + EF * (2 * m[1] + EF)
    return IdentityReport(
        f"variance[{F.name}]", float(lhs), float(rhs), se_lhs, se_rhs, _allowance(grid.dt, m2), acc.n
    )


def brownian_state(noise: NoiseBatch, s: int) -> StepState:
    """Regression state for pure Wiener functionals: the Brownian level only."""
    b = noise.B[:, s]
    return StepState(s, s * noise.grid.dt, b, (), (), (), b)


def projected_derivative_regression(
    F: np.ndarray,
    noise: NoiseBatch,
    s: int,
    basis: RegressionBasis = RegressionBasis(coords=("B",)),
    paths: PathBundle | None = None,
    center: bool = True,
) -> np.ndarray:
    """Per-path estimate of E[D_t F | F_t] at step s from E[F dB(t) | F_t] / dt.

    With ``center`` the F_t-measurable projection of F is removed first; this
    leaves the estimator's conditional mean unchanged and reduces its variance.
    The Monte Carlo error scales like sd(F) / sqrt(dt * n_paths).
    """
    st = brownian_state(noise, s) if paths is None else paths.state(s)
    if st.B is None:
        st.B = noise.B[:, s]
    proj = Projector(basis.design(st), basis.ridge)
    F = np.asarray(F, dtype=float)
    if center:
        F = F - proj(F)
    return proj(F * noise.dB[:, s]) / noise.grid.dt
