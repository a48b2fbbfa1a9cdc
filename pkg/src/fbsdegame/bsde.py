"""Least-squares Monte Carlo solvers for backward equations

    dW = -g(t, state, W, Z, K) dt + Z dB + sum_j K_j dN~_j,   W(T) = h(state_T).

Conditional expectations are regressions over paths on a basis of the
current state.  Z and K come from the covariation estimators
``E[W(t+dt) dB | F_t] / dt`` and ``E[W(t+dt) dN~_j | F_t] / (nu_j dt)``.
"""
from __future__ import annotations

import itertools
import warnings
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
from scipy import linalg

from .errors import ConfigError, InsufficientPaths, SingularRegression
from .forward import ControlProcess, ModelSpec, PathBundle, StepState, simulate_forward
from .timegrid import NoiseBatch, paths_major


@dataclass(frozen=True)
class RegressionBasis:
    """Regressors for E[. | F_t] built from named state coordinates.

    ``polynomial``: all monomials of the standardised coordinates up to
    ``degree`` (intercept handled separately).  ``bins``: indicators of
    ``n_bins`` quantile bins of the first coordinate.
    """

    kind: str = "polynomial"
    degree: int = 2
    coords: tuple[str, ...] = ("X", "Y1", "Y2", "L1", "L2")
    ridge: float = 1e-8
    n_bins: int = 10

    def __post_init__(self):
        if self.kind not in ("polynomial", "bins"):
            raise ConfigError(f"unknown basis kind {self.kind!r}")
        if self.ridge < 0:
            raise ConfigError("ridge must be >= 0")
        if self.degree < 0 or self.n_bins < 1:
            raise ConfigError("degree must be >= 0 and n_bins >= 1")

    @property
    def dimension(self) -> int:
        """Number of regression coefficients including the intercept."""
        if self.kind == "bins":
            return self.n_bins
        k = len(self.coords)
        return sum(len(list(itertools.combinations_with_replacement(range(k), d))) for d in range(self.degree + 1))

    def design(self, st: StepState) -> np.ndarray:
        """Non-constant regressors at one step, shape (n_paths, <= dimension - 1)."""
        cols = []
        for name in self.coords:
            v = st.coord(name)
            mu = v.mean()
            sd = np.sqrt(np.dot(v - mu, v - mu) / v.size)
            if sd > 1e-12 * max(1.0, abs(mu)):
                cols.append((v - mu) / sd)
        n = st.n_paths
        if not cols:
            return np.empty((n, 0))
        if self.kind == "bins":
            edges = np.quantile(cols[0], np.linspace(0, 1, self.n_bins + 1)[1:-1])
            idx = np.searchsorted(edges, cols[0], side="right")
            onehot = np.zeros((self.n_bins, n))
            onehot[idx, np.arange(n)] = 1.0
            keep = onehot.sum(axis=1) > 0
            return onehot[keep][1:].T
        combos = [c for d in range(1, self.degree + 1)
                  for c in itertools.combinations_with_replacement(range(len(cols)), d)]
        feats = np.empty((len(combos), n))
        for row, combo in zip(feats, combos):
            row[:] = cols[combo[0]]
            for c in combo[1:]:
                row *= cols[c]
        return feats.T


class Projector:
    """Ridge least squares onto span{1, design}, factorised once for many targets.

    Columns are centred so the intercept is unpenalised and fitted values keep
    the sample mean of the target exactly.
    """

    def __init__(self, design: np.ndarray, ridge: float = 0.0):
        self.n = design.shape[0]
        self.k = 0
        if design.shape[1] == 0:
            return
        At = np.array(design.T, order="C")  # (k, n), one contiguous row per regressor
        At -= At.mean(axis=1, keepdims=True)
        sd = np.sqrt(np.einsum("ij,ij->i", At, At) / self.n)
        keep = sd > 1e-14
        At = At[keep] / sd[keep, None]
        self.k = At.shape[0]
        self.At = At
        if self.k == 0:
            return
        G = At @ At.T / self.n
        ev = np.linalg.eigvalsh(G)
        if ridge == 0 and ev[0] <= 1e-12 * ev[-1]:
            raise SingularRegression(
                f"rank-deficient design ({self.k} columns, min eigenvalue {ev[0]:.3g}); use ridge > 0"
            )
        G[np.diag_indices_from(G)] += ridge
        self.cho = linalg.cho_factor(G)

    def coef(self, Y: np.ndarray) -> np.ndarray:
        return linalg.cho_solve(self.cho, self.At @ Y / self.n)

    def __call__(self, Y: np.ndarray) -> np.ndarray:
        """Fitted values for target(s) Y of shape (n,) or (n, m)."""
        Y = np.asarray(Y, dtype=float)
        mean = Y.mean(axis=0)
        if self.k == 0:
            return np.broadcast_to(mean, Y.shape).copy()
        # At rows are centred, so regressing the raw target gives the centred fit
        return mean + self.At.T @ self.coef(Y)


@dataclass(frozen=True)
class DriverSpec:
    """Driver ``g(state, w, z, k)`` and terminal ``h(state_T)``, both vectorised over paths.

    ``k`` has shape (n_paths, n_marks).  The state passed to the driver carries
    the partially filled solution as ``state.sol`` (later steps are final), which
    is how time-advanced drivers read ``W(t + delta)``.  Such drivers are not
    F_t-measurable and must set ``anticipating`` so the solver projects them.
    """

    driver: Callable
    terminal: Callable = lambda st: np.zeros_like(st.X)
    lipschitz_bound: float | None = None
    anticipating: bool = False


@dataclass(eq=False)
class BsdeSolution:
    W: np.ndarray  # (n_paths, n_steps + 1)
    Z: np.ndarray  # (n_paths, n_steps)
    K: np.ndarray  # (n_paths, n_steps, n_marks)
    pathwise: np.ndarray  # realised W(0) per path, mean-zero martingale removed
    dt: float
    aux: dict = field(default_factory=dict)

    @property
    def w0(self) -> float:
        return float(self.W[:, 0].mean())

    @property
    def w0_se(self) -> float:
        return float(self.pathwise.std(ddof=1) / np.sqrt(self.pathwise.size))


def _check_lipschitz(spec: DriverSpec, st: StepState, w, z, k):
    h = 1e-4 * (1.0 + np.abs(w).mean())
    g0 = spec.driver(st, w, z, k)
    slope = np.abs(spec.driver(st, w + h, z, k) - g0).max() / h
    slope = max(slope, np.abs(spec.driver(st, w, z + h, k) - g0).max() / h)
    if slope > spec.lipschitz_bound:
        warnings.warn(f"driver slope {slope:.3g} exceeds Lipschitz bound {spec.lipschitz_bound}", RuntimeWarning)


def solve_bsde_lsmc(
    driver: DriverSpec,
    paths: PathBundle,
    noise: NoiseBatch,
    basis: RegressionBasis = RegressionBasis(),
    scheme: str = "left",
) -> BsdeSolution:
    """Backward induction with regressed conditional expectations.

    ``scheme`` picks where the driver is sampled on each step:
    ``left``   W_s = E_s[W_{s+1}] + g(state_s, E_s[W_{s+1}], Z_s, K_s) dt
    ``implicit`` as ``left`` but implicit in w after linearising around
               E_s[W_{s+1}] (stable for stiff linear terms)
    ``right``  W_s = E_s[W_{s+1} + g(state_{s+1}, W_{s+1}, Z_s, K_s) dt]
    ``trapezoid`` averages the two, with the left end implicit in w after
    linearising around E_s[W_{s+1}] (Crank-Nicolson for linear drivers).
    The control of step s is used throughout.
    """
    if scheme not in ("left", "implicit", "right", "trapezoid"):
        raise ConfigError(f"unknown scheme {scheme!r}")
    grid = paths.grid
    n, dt, P = grid.n_steps, grid.dt, paths.n_paths
    if P < 10 * basis.dimension:
        raise InsufficientPaths(f"{P} paths for a basis of dimension {basis.dimension}; need >= {10 * basis.dimension}")
    jumps = noise.jump_spec.active
    m = noise.jump_spec.n_marks
    nu_dt = noise.compensator
    dN = noise.dN_tilde if jumps else None

    W = paths_major(P, n + 1)
    Z = paths_major(P, n)
    K = paths_major(P, n, m)
    K[:] = 0.0
    sol = BsdeSolution(W, Z, K, np.empty(P), dt)
    stT = paths.state(n)
    stT.sol = sol
    W[:, n] = driver.terminal(stT)
    gsum = np.zeros(P)
    mart = np.zeros(P)

    for s in range(n - 1, -1, -1):
        st = paths.state(s)
        st.sol = sol
        proj = Projector(basis.design(st), basis.ridge)
        nxt = W[:, s + 1]
        ew = proj(nxt)
        # centring by E_s[W_{s+1}] leaves the covariation unchanged and cuts its variance
        innov = nxt - ew
        targets = [innov * noise.dB[:, s]]
        if jumps:
            targets.extend(innov * dN[:, s, j] for j in range(m))
        fitted = proj(np.column_stack(targets))
        Z[:, s] = fitted[:, 0] / dt
        if jumps:
            K[:, s, :] = fitted[:, 1:] / nu_dt
        z, k = Z[:, s], K[:, s, :]
        if driver.lipschitz_bound is not None and s == n - 1:
            _check_lipschitz(driver, st, ew, z, k)
        if scheme in ("left", "implicit"):
            g = driver.driver(st, ew, z, k)
            if scheme == "implicit":
                hw = 1e-6 * (1.0 + np.abs(ew))
                gw = (driver.driver(st, ew + hw, z, k) - g) / hw
            if driver.anticipating:
                g = proj(g)
                if scheme == "implicit":
                    gw = proj(gw)
            if scheme == "implicit":
                W[:, s] = ew + g * dt / (1.0 - dt * gw)
                g = g + gw * (W[:, s] - ew)
            else:
                W[:, s] = ew + g * dt
        else:
            st1 = paths.state(s + 1, control_step=s)
            st1.sol = sol
            g1 = driver.driver(st1, nxt, z, k)
            if scheme == "right":
                g = g1
                W[:, s] = ew + dt * proj(g1)
            else:
                g0 = driver.driver(st, ew, z, k)
                # implicit in w around E_s[W_{s+1}]: stable for stiff linear terms
                hw = 1e-6 * (1.0 + np.abs(ew))
                gw = (driver.driver(st, ew + hw, z, k) - g0) / hw
                if driver.anticipating:
                    g0 = proj(g0)
                    gw = proj(gw)
                W[:, s] = ew + 0.5 * dt * (g0 + proj(g1)) / (1.0 - 0.5 * dt * gw)
                g = 0.5 * (g0 + gw * (W[:, s] - ew) + g1)
        gsum += g * dt
        mart += z * noise.dB[:, s]
        if jumps:
            mart += np.sum(k * dN[:, s, :], axis=1)
    sol.pathwise[:] = W[:, n] + gsum - mart
    return sol


def solve_linear_bsde_gamma(
    paths: PathBundle,
    noise: NoiseBatch,
    rate: np.ndarray,
    vol: np.ndarray,
    source: np.ndarray,
    basis: RegressionBasis = RegressionBasis(),
    jump: np.ndarray | None = None,
    terminal: np.ndarray | None = None,
    quadrature: str = "left",
    scheme: str = "log-euler",
) -> BsdeSolution:
    """Linear BSDE  dp = -[a p + b q + sum_j c_j r_j nu_j + f] dt + q dB + r dN~.

    ``rate`` (a), ``vol`` (b), ``jump`` (c, per mark) and ``source`` (f) are
    per-path, per-step arrays of shape (n_paths, n_steps [+1]).  With Gamma
    the solution of dGamma = Gamma[a dt + b dB + c dN~], Gamma(0) = 1,

        Gamma(t) p(t) = E[Gamma(T) p(T) + int_t^T f Gamma ds | F_t].

    When ``f * Gamma`` is identical across paths at every step (the
    recursive-utility case, where x Gamma = X) the conditional expectation
    is the integral itself and no regression is done.
    """
    grid = paths.grid
    n, dt, P = grid.n_steps, grid.dt, paths.n_paths
    rate = np.broadcast_to(rate, (P, n))
    vol = np.broadcast_to(vol, (P, n))
    jumps = jump is not None and noise.jump_spec.active
    jump_arr = np.broadcast_to(jump, (P, n, noise.jump_spec.n_marks)) if jumps else None

    gmodel = ModelSpec(
        x0=1.0,
        deltas=(),
        drift=lambda st: st.X * rate[:, st.s],
        vol=lambda st: st.X * vol[:, st.s],
        jump=(lambda st: st.X[:, None] * jump_arr[:, st.s, :]) if jumps else None,
        jump_spec=noise.jump_spec,
        scheme=scheme,
    )
    gamma = simulate_forward(gmodel, (), noise).X
    source = np.asarray(source, dtype=float)
    if source.shape[1] == n:
        source = np.concatenate([source, source[:, -1:]], axis=1)
    weighted = source * gamma
    if quadrature == "left":
        inc = weighted[:, :-1] * dt
    elif quadrature == "trapezoid":
        inc = 0.5 * (weighted[:, :-1] + weighted[:, 1:]) * dt
    else:
        raise ConfigError(f"unknown quadrature {quadrature!r}")
    term = np.zeros(P) if terminal is None else np.asarray(terminal, dtype=float) * gamma[:, n]
    tail = paths_major(P, n + 1)
    tail[:, n] = term
    tail[:, :n] = term[:, None] + np.cumsum(inc[:, ::-1], axis=1)[:, ::-1]

    scale = np.abs(tail).max() + 1e-300
    deterministic = bool(np.all(np.ptp(tail, axis=0) <= 1e-10 * scale))
    gp = np.empty_like(tail)
    if deterministic:
        gp[:] = tail.mean(axis=0)
    else:
        gp[:, n] = tail[:, n]
        for s in range(n):
            gp[:, s] = Projector(basis.design(paths.state(s)), basis.ridge)(tail[:, s])
    p = gp / gamma
    q = paths_major(P, n)
    for s in range(n):
        proj = Projector(basis.design(paths.state(s)), basis.ridge)
        q[:, s] = proj((p[:, s + 1] - proj(p[:, s + 1])) * noise.dB[:, s]) / dt
    pathwise = tail[:, 0]
    K = np.zeros((P, n, noise.jump_spec.n_marks))
    return BsdeSolution(p, q, K, pathwise, dt, aux={"gamma": gamma, "gamma_p": gp, "deterministic": deterministic})


def linear_driver(a: float, b: float, c: float = 0.0) -> DriverSpec:
    """g = a W + b + c X with zero terminal value."""
    return DriverSpec(lambda st, w, z, k: a * w + b + c * st.X)
