"""Performance functionals, Gateaux derivatives, best responses and Nash certificates.

All comparisons between controls reuse one ``NoiseBatch`` (common random
numbers), so differences of J carry far less noise than J itself.  Control
families are finite-dimensional; a certificate therefore only covers
deviations inside the families it was given.
"""
from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .adjoint import (
    AdjointSolution,
    ConcavityReport,
    HamiltonianSpec,
    check_concavity_hatH,
    ham_args,
    solve_adjoint_triple,
    solve_lambda_forward,
)
from .bsde import BsdeSolution, DriverSpec, Projector, RegressionBasis, solve_bsde_lsmc
from .errors import AdmissibilityViolation, ConfigError, NonConvergence
from .forward import ControlProcess, ModelSpec, PathBundle, simulate_forward
from .timegrid import NoiseBatch, TimeGrid


@dataclass(frozen=True, eq=False)
class PerformanceSpec:
    """J = E[int f dt + phi(X_T) + psi(W(0))] for one player.

    ``f`` takes a StepState (controls in ``st.U``), ``phi`` the terminal
    state, ``psi`` the scalar W(0).  ``driver`` defines the player's BSDE;
    without it the psi term is absent.
    """

    f: Callable | None = None
    phi: Callable | None = None
    psi: Callable | None = None
    psi_prime: Callable | None = None
    driver: DriverSpec | None = None

    def check_psi_monotone(self, lo=-10.0, hi=10.0, n=201) -> bool:
        if self.psi is None:
            return True
        w = np.linspace(lo, hi, n)
        return bool(np.all(np.diff([self.psi(x) for x in w]) >= -1e-12))


@dataclass(frozen=True, eq=False)
class Game:
    """Forward model, both players' objectives and the solver settings."""

    model: ModelSpec
    perfs: tuple[PerformanceSpec, PerformanceSpec]
    hamiltonians: tuple[HamiltonianSpec | None, HamiltonianSpec | None] = (None, None)
    basis: RegressionBasis = RegressionBasis()
    scheme: str = "left"
    bounds: tuple[tuple[float, float], tuple[float, float]] = ((-np.inf, np.inf), (-np.inf, np.inf))
    adjoint_scheme: str = "implicit"
    # optional (game, player, paths, noise, bsde) -> AdjointSolution replacing the generic route
    adjoint_solver: Callable | None = None


@dataclass(eq=False)
class PerformanceEstimate:
    value: float
    se: float
    pathwise: np.ndarray
    bsde: BsdeSolution | None
    paths: PathBundle


def estimate_performance(game: Game, controls: Sequence[ControlProcess], noise: NoiseBatch,
                         players=(1, 2), paths: PathBundle | None = None) -> dict[int, PerformanceEstimate]:
    """J_i per player with a per-path estimator for standard errors.

    The running reward is integrated by the trapezoid rule with the control
    of each step held on both ends.  The psi term enters the per-path
    estimator through its linearisation around W(0), so the Monte Carlo
    error of the BSDE shows up in the SE.
    """
    paths = simulate_forward(game.model, controls, noise) if paths is None else paths
    grid = paths.grid
    n, dt, P = grid.n_steps, grid.dt, paths.n_paths
    out = {}
    for i in players:
        perf = game.perfs[i - 1]
        per = np.zeros(P)
        if perf.f is not None:
            left = np.column_stack([perf.f(paths.state(s)) for s in range(n)])
            right = np.column_stack([perf.f(paths.state(s + 1, control_step=s)) for s in range(n)])
            per = per + 0.5 * (left + right).sum(axis=1) * dt
        if perf.phi is not None:
            per = per + perf.phi(paths.X[:, n])
        value = float(per.mean())
        bsde = None
        if perf.driver is not None and perf.psi is not None:
            bsde = solve_bsde_lsmc(perf.driver, paths, noise, game.basis, game.scheme)
            w0 = bsde.w0
            slope = perf.psi_prime(w0) if perf.psi_prime is not None else 1.0
            value += float(perf.psi(w0))
            per = per + perf.psi(w0) + slope * (bsde.pathwise - w0)
        se = float(per.std(ddof=1) / np.sqrt(P)) if P > 1 else 0.0
        out[i] = PerformanceEstimate(value, se, per, bsde, paths)
    return out


def _with_values(controls, player, values, bounds):
    out = list(controls)
    out[player - 1] = ControlProcess(player, values=values, bounds=bounds)
    return out


def _values(c: ControlProcess) -> np.ndarray:
    if c.values is None:
        raise ConfigError("perturbations need deterministic (per-step) controls")
    return c.values


def step_directions(grid: TimeGrid, n_points: int = 10) -> list[tuple[str, np.ndarray]]:
    """beta = 1 and the step functions 1_(t0, T] for t0 at bin midpoints."""
    t = grid.times[:-1]
    dirs = [("one", np.ones(grid.n_steps))]
    for k in range(n_points):
        t0 = (k + 0.5) * grid.T / n_points
        dirs.append((f"step@{t0:.4g}", (t >= t0 - 1e-12).astype(float)))
    return dirs


def admissible_radius(values: np.ndarray, beta: np.ndarray, bounds) -> float:
    """Largest kappa with values + s beta inside the bounds for |s| < kappa."""
    lo, hi = bounds
    m = np.abs(beta) > 0
    if not np.any(m):
        return np.inf
    room = np.minimum(values[m] - lo, hi - values[m]) / np.abs(beta[m])
    return float(room.min())


@dataclass
class GateauxResult:
    name: str
    fd: float
    fd_se: float
    richardson: float
    ham: float
    ham_se: float
    s0: float
    kappa: float


def hamiltonian_gradient(game: Game, player: int, paths: PathBundle, bsde: BsdeSolution,
                         adj: AdjointSolution) -> np.ndarray:
    """dH_i/du_i per path and step, shape (n_paths, n_steps).

    Matches the BSDE scheme: with the trapezoid scheme the gradient is the
    average of both step ends, each evaluated with the control of the step.
    """
    spec = game.hamiltonians[player - 1]
    n = paths.grid.n_steps
    name = f"u{player}"
    G = np.empty((paths.n_paths, n))

    def at(s, cs):
        q = min(s, n - 1)
        a = ham_args(paths, bsde, s, cs, lam=adj.lam[:, s], p=adj.p[:, s], q=adj.q[:, q], r=adj.r[:, q, :])
        return spec.partial(name, a)

    for s in range(n):
        G[:, s] = at(s, s)
        if game.scheme == "trapezoid":
            G[:, s] = 0.5 * (G[:, s] + at(s + 1, s))
        elif game.scheme == "right":
            G[:, s] = at(s + 1, s)
    return G


def gateaux_derivative(game: Game, controls: Sequence[ControlProcess], player: int, beta: np.ndarray,
                       noise: NoiseBatch, s0: float | None = None, grad: np.ndarray | None = None,
                       name: str = "beta") -> GateauxResult:
    """d/ds J_i(u + s beta) at s = 0 by central differences on common noise.

    ``grad`` (dH_i/du_i per path and step) gives the Hamiltonian form
    E[int beta dH/du dt] for comparison.  A second difference at 2 s0 gives
    the Richardson value (4 D(s0) - D(2 s0)) / 3.
    """
    c = controls[player - 1]
    u = _values(c)
    beta = np.asarray(beta, dtype=float)
    if s0 is None:
        s0 = 1e-3 * max(float(np.mean(np.abs(u))), 1e-12)
    kappa = admissible_radius(u, beta, c.bounds)
    if 2 * s0 >= kappa:
        raise AdmissibilityViolation(f"bump {2 * s0:g} leaves the admissible set (kappa={kappa:g})")

    def J(s):
        return estimate_performance(game, _with_values(controls, player, u + s * beta, c.bounds), noise, (player,))[player]

    jp, jm = J(s0), J(-s0)
    d1 = (jp.value - jm.value) / (2 * s0)
    d2 = (J(2 * s0).value - J(-2 * s0).value) / (4 * s0)
    diff = (jp.pathwise - jm.pathwise) / (2 * s0)
    fd = float(d1)
    P = diff.size
    fd_se = float(diff.std(ddof=1) / np.sqrt(P))
    rich = float((4 * d1 - d2) / 3)
    ham = ham_se = np.nan
    if grad is not None:
        h = (grad * beta).sum(axis=1) * noise.grid.dt
        ham, ham_se = float(h.mean()), float(h.std(ddof=1) / np.sqrt(P))
    return GateauxResult(name, fd, fd_se, rich, ham, ham_se, s0, kappa)


@dataclass(frozen=True, eq=False)
class ControlFamily:
    """Deterministic controls of one player indexed by a parameter vector."""

    player: int
    build: Callable[[np.ndarray], np.ndarray]  # theta -> per-step values
    theta0: np.ndarray
    lower: np.ndarray
    upper: np.ndarray
    bounds: tuple[float, float] = (-np.inf, np.inf)

    @property
    def dim(self) -> int:
        return len(self.theta0)

    def control(self, theta: np.ndarray) -> ControlProcess:
        return ControlProcess(self.player, values=self.build(np.asarray(theta, dtype=float)), bounds=self.bounds)


def _bins(grid: TimeGrid, n_bins: int) -> np.ndarray:
    if grid.n_steps % n_bins:
        raise ConfigError(f"{grid.n_steps} steps do not split into {n_bins} equal bins")
    return np.repeat(np.arange(n_bins), grid.n_steps // n_bins)


def multiplicative_family(player: int, reference: np.ndarray, grid: TimeGrid, n_bins: int = 10,
                          bounds=(1e-4, 1e4), span: float = 3.0) -> ControlFamily:
    """u = reference * exp(theta_k) on bin k; theta = 0 is the reference itself."""
    ref = np.asarray(reference, dtype=float)
    idx = _bins(grid, n_bins)
    return ControlFamily(
        player,
        lambda th: np.clip(ref * np.exp(th[idx]), *bounds),
        np.zeros(n_bins),
        np.full(n_bins, -span),
        np.full(n_bins, span),
        bounds,
    )


def piecewise_constant_family(player: int, grid: TimeGrid, theta0: np.ndarray, n_bins: int = 10,
                              bounds=(1e-4, 1e4)) -> ControlFamily:
    """u = exp(theta_k) on bin k."""
    idx = _bins(grid, n_bins)
    return ControlFamily(
        player,
        lambda th: np.exp(th[idx]),
        np.asarray(theta0, dtype=float),
        np.full(n_bins, np.log(bounds[0])),
        np.full(n_bins, np.log(bounds[1])),
        bounds,
    )


@dataclass
class BestResponse:
    theta: np.ndarray
    control: ControlProcess
    value: float
    start_value: float
    gap_se: float
    sweeps: int
    converged: bool


def best_response(game: Game, controls: Sequence[ControlProcess], family: ControlFamily, noise: NoiseBatch,
                  max_sweeps: int = 20, h: float = 0.05, tol: float = 1e-9, strict: bool = False) -> BestResponse:
    """Coordinate ascent over the family parameters on common noise.

    Each coordinate takes a Newton step from a three-point difference (or a
    fixed step where the second difference is not negative), halved until
    J improves.  Runs from ``family.theta0``.
    """
    player = family.player
    cache: dict[bytes, object] = {}

    def est(theta):
        key = np.asarray(theta, dtype=float).tobytes()
        if key not in cache:
            ctl = list(controls)
            ctl[player - 1] = family.control(theta)
            cache[key] = estimate_performance(game, ctl, noise, (player,))[player]
        return cache[key]

    def J(theta):
        return est(theta).value

    theta = family.theta0.copy()
    start = est(theta)
    best = start.value
    sweeps, converged = 0, False
    for sweeps in range(1, max_sweeps + 1):
        before = best
        for k in range(family.dim):
            e = np.zeros(family.dim)
            e[k] = h
            plus = np.clip(theta + e, family.lower, family.upper)
            minus = np.clip(theta - e, family.lower, family.upper)
            up, dn = J(plus), J(minus)
            d1 = (up - dn) / (2 * h)
            d2 = (up - 2 * best + dn) / (h * h)
            step = -d1 / d2 if d2 < 0 else np.sign(d1) * 0.5
            step = float(np.clip(step, -1.0, 1.0))
            moved = theta
            for _ in range(8):
                trial = theta.copy()
                trial[k] = np.clip(trial[k] + step, family.lower[k], family.upper[k])
                val = J(trial)
                if val > best:
                    moved, best = trial, val
                    break
                step *= 0.5
            for cand, v in ((plus, up), (minus, dn)):
                if v > best:
                    moved, best = cand, v
            theta = moved
        if best - before <= tol * (1.0 + abs(best)):
            converged = True
            break
    if not converged:
        msg = f"best response for player {player} not converged after {max_sweeps} sweeps"
        if strict:
            raise NonConvergence(msg)
        warnings.warn(msg, RuntimeWarning)
    diff = est(theta).pathwise - start.pathwise
    gap_se = float(diff.std(ddof=1) / np.sqrt(diff.size))
    return BestResponse(theta, family.control(theta), best, start.value, gap_se, sweeps, converged)


@dataclass(frozen=True)
class Tolerances:
    """Allowances added to the 3 SE bands; all must be positive.

    With common random numbers and deterministic controls the SEs of J
    differences are close to zero, so the allowances carry the
    discretisation error of the scheme.
    """

    gap_rel: float = 1e-4  # best-response gap, relative to 1 + |J|
    deriv_rel: float = 0.02  # Gateaux derivative, relative to E int |beta dH/du_own| dt
    hamiltonian_rel: float = 0.05  # relative L1 size of E[dH/du]
    concavity: float = 1e-8

    def __post_init__(self):
        for k, v in self.__dict__.items():
            if not v > 0:
                raise ConfigError(f"tolerance {k} must be > 0, got {v}")


@dataclass
class PlayerCertificate:
    player: int
    candidate_value: float
    best_response: BestResponse
    gap: float
    gap_se: float
    gap_allowance: float
    gateaux: list[GateauxResult]
    deriv_scale: float
    ham_mean: np.ndarray  # per-step E[dH/du]
    ham_cond_max: np.ndarray  # per-step max |E[dH/du | F_t]|
    ham_relative: float
    concavity: ConcavityReport | None
    reasons: list[str] = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return not self.reasons


@dataclass
class NashCertificate:
    candidates: tuple[ControlProcess, ControlProcess]
    players: list[PlayerCertificate]
    tolerances: Tolerances
    note: str = "Nash inequalities checked against the supplied control families only"

    @property
    def verdict(self) -> str:
        return "PASS" if all(p.passed for p in self.players) else "FAIL"


def solve_adjoint_for(game: Game, player: int, paths: PathBundle, noise: NoiseBatch,
                      bsde: BsdeSolution) -> AdjointSolution:
    if game.adjoint_solver is not None:
        return game.adjoint_solver(game, player, paths, noise, bsde)
    return solve_adjoint_generic(game, player, paths, noise, bsde)


def solve_adjoint_generic(game: Game, player: int, paths: PathBundle, noise: NoiseBatch,
                          bsde: BsdeSolution) -> AdjointSolution:
    spec = game.hamiltonians[player - 1]
    lam = solve_lambda_forward(spec, bsde, paths, noise)
    return solve_adjoint_triple(spec, paths, bsde, lam, noise, game.basis, game.adjoint_scheme)


def certify_nash(game: Game, candidates: Sequence[ControlProcess], families: Sequence[ControlFamily],
                 noise: NoiseBatch, tolerances: Tolerances = Tolerances(),
                 directions: list | None = None, concavity_samples: int = 10_000) -> NashCertificate:
    """Best-response gaps, Gateaux derivatives, Hamiltonian gradient and concavity.

    PASS needs, for both players: gap <= 3 SE + gap_rel (1 + |J|); every
    |derivative| <= 3 SE + deriv_rel * scale; relative L1 size of
    E[dH/du] <= hamiltonian_rel; no concavity violations and lam(T) >= 0.
    """
    grid = noise.grid
    dt = grid.dt
    directions = step_directions(grid) if directions is None else directions
    paths = simulate_forward(game.model, candidates, noise)
    perf = estimate_performance(game, candidates, noise, paths=paths)
    out = []
    for i in (1, 2):
        fam = next(f for f in families if f.player == i)
        br = best_response(game, candidates, fam, noise)
        gap = br.value - perf[i].value
        gap_allow = tolerances.gap_rel * (1.0 + abs(perf[i].value))
        reasons = []
        if gap > 3 * br.gap_se + gap_allow:
            reasons.append(f"best-response gap {gap:.4g} > 3 SE + {gap_allow:.2g}")

        spec = game.hamiltonians[i - 1]
        grad = conc = None
        ham_mean = ham_cond = np.zeros(grid.n_steps)
        ham_rel = np.nan
        deriv_scale = 1.0
        if spec is not None and perf[i].bsde is not None:
            adj = solve_adjoint_for(game, i, paths, noise, perf[i].bsde)
            grad = hamiltonian_gradient(game, i, paths, perf[i].bsde, adj)
            ham_mean = grad.mean(axis=0)
            ham_cond = np.array([
                np.abs(Projector(game.basis.design(paths.state(s)), game.basis.ridge)(grad[:, s])).max()
                for s in range(grid.n_steps)
            ])
            # scale: the reward part of the gradient, d(f + lam g)/du
            z = np.zeros(paths.n_paths)
            rz = np.zeros((paths.n_paths, noise.jump_spec.n_marks))
            own = np.column_stack([
                np.abs(spec.partial(f"u{i}", ham_args(paths, perf[i].bsde, s, s, lam=adj.lam[:, s], p=z, q=z, r=rz)))
                for s in range(grid.n_steps)
            ])
            denom = float(own.mean(axis=0).sum() * dt)
            ham_rel = float(np.abs(ham_mean).sum() * dt / max(denom, 1e-300))
            deriv_scale = denom
            if not ham_rel <= tolerances.hamiltonian_rel:
                reasons.append(f"Hamiltonian gradient relative size {ham_rel:.4g} > {tolerances.hamiltonian_rel}")
            conc = check_concavity_hatH(spec, adj, paths, fam.bounds, n_samples=concavity_samples,
                                        tol=tolerances.concavity)
            if not conc.passed:
                reasons.append(f"concavity: {conc.n_violations} violations, lambda(T) min {conc.lambda_T_min:.3g}")

        gats = []
        for name, beta in directions:
            g = gateaux_derivative(game, candidates, i, beta, noise, grad=grad, name=name)
            allow = tolerances.deriv_rel * deriv_scale * max(float(np.mean(np.abs(beta))), 1e-12)
            if abs(g.fd) > 3 * g.fd_se + allow:
                reasons.append(f"Gateaux derivative {name} = {g.fd:.4g} (SE {g.fd_se:.2g})")
            gats.append(g)
        out.append(PlayerCertificate(
            i, perf[i].value, br, gap, br.gap_se, gap_allow, gats, deriv_scale,
            ham_mean, ham_cond, ham_rel, conc, reasons,
        ))
    return NashCertificate(tuple(candidates), out, tolerances)
