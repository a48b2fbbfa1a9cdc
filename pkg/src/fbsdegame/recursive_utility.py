"""Two consumers sharing one wealth process, each with a recursive utility.

Wealth follows

    dX = X (mu - c1 - c2) dt + X sigma dB + X int zeta N~(dt, dzeta),

and player i values consumption through the BSDE

    dW_i = -[alpha_i W_i + eta_i ln Y_i + ln(c_i X)] dt + Z_i dB + K_i dN~,  W_i(T) = 0,

with ``Y_i(t) = X(t - delta_i)`` and J_i = W_i(0).  The equilibrium is

    c_i*(t) = lam_i(t) / int_t^T (lam_i(s) + lam_i(s + delta_i) eta_i(s + delta_i) 1{s <= T - delta_i}) ds,

with ``lam_i(t) = exp(int_0^t alpha_i)``.  Each c_i* does not depend on the
other player's choice.
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy import integrate

from .adjoint import AdjointSolution, HamiltonianSpec, solve_lambda_forward
from .bsde import DriverSpec, RegressionBasis, solve_linear_bsde_gamma
from .errors import ConfigError, HorizonBoundary
from .forward import ControlProcess, ModelSpec, simulate_forward
from .game import (
    Game,
    NashCertificate,
    PerformanceSpec,
    Tolerances,
    best_response,
    certify_nash,
    multiplicative_family,
    piecewise_constant_family,
    estimate_performance,
    solve_adjoint_for,
    solve_adjoint_generic,
)
from .timegrid import NO_JUMPS, JumpSpec, TimeGrid, make_grid, sample_noise


def _as_steps(v) -> tuple[float, ...]:
    return (float(v),) if np.isscalar(v) else tuple(float(x) for x in v)


@dataclass(frozen=True)
class RecursiveUtilityParams:
    """Market and preference parameters.

    ``alpha`` and ``eta`` entries are constants or lists of values on equal
    pieces of [0, T].  Jump marks are relative jump sizes of wealth.
    """

    alpha: tuple = (0.0, 0.1)
    eta: tuple = (0.0, 1.0)
    kappa: tuple = (0.0, 0.0)
    delta: tuple[float, float] = (0.2, 0.5)
    mu: float = 0.05
    sigma: float = 0.2
    jumps: JumpSpec = NO_JUMPS
    x0: float = 1.0
    T: float = 1.0
    c_bounds: tuple[float, float] = (1e-4, 1e4)

    def __post_init__(self):
        object.__setattr__(self, "alpha", tuple(_as_steps(a) for a in self.alpha))
        object.__setattr__(self, "eta", tuple(_as_steps(e) for e in self.eta))
        if not self.x0 > 0:
            raise ConfigError("initial wealth must be positive")
        if not 0 < self.c_bounds[0] <= self.c_bounds[1]:
            raise ConfigError("consumption bounds need 0 < c_min <= c_max")
        if any(k != 0 for k in self.kappa):
            raise ConfigError("only kappa = 0 is supported (no ln of the noisy memory)")
        if any(m <= -1 for m in self.jumps.marks):
            raise ConfigError("relative jump sizes must exceed -1")
        if len(self.alpha) != 2 or len(self.eta) != 2 or len(self.delta) != 2:
            raise ConfigError("alpha, eta and delta need one entry per player")
        for d in self.delta:
            if not 0 <= d <= self.T:
                raise ConfigError(f"delay {d} outside [0, T]")

    def piece(self, values: tuple[float, ...], t: float) -> float:
        k = min(int(t / self.T * len(values)), len(values) - 1) if t >= 0 else 0
        return values[k]

    def alpha_at(self, player: int, t: float) -> float:
        return self.piece(self.alpha[player - 1], t)

    def eta_at(self, player: int, t: float) -> float:
        return self.piece(self.eta[player - 1], t)

    def breakpoints(self, player: int) -> list[float]:
        out = set()
        for vals in (self.alpha[player - 1], self.eta[player - 1]):
            out.update(self.T * k / len(vals) for k in range(1, len(vals)))
        return sorted(out)


def closed_form_lambda(params: RecursiveUtilityParams, player: int, t: float) -> float:
    """exp(int_0^t alpha), exact for piecewise-constant alpha."""
    if not -1e-12 <= t <= params.T + 1e-12:
        raise ConfigError(f"t={t} outside [0, T]")
    vals = params.alpha[player - 1]
    width = params.T / len(vals)
    total = 0.0
    for k, a in enumerate(vals):
        lo = k * width
        total += a * max(0.0, min(t, lo + width) - lo)
    return math.exp(total)


def consumption_denominator(params: RecursiveUtilityParams, player: int, t: float) -> float:
    T, d = params.T, params.delta[player - 1]

    def lam(s):
        return closed_form_lambda(params, player, min(s, T))

    pts = [p for p in params.breakpoints(player) if t < p < T]
    first, _ = integrate.quad(lam, t, T, points=pts or None, limit=200, epsabs=1e-13, epsrel=1e-12)
    second = 0.0
    if t < T - d:
        pts2 = sorted({p - d for p in params.breakpoints(player)} | set(pts))
        pts2 = [p for p in pts2 if t < p < T - d]
        second, _ = integrate.quad(
            lambda s: lam(s + d) * params.eta_at(player, s + d), t, T - d,
            points=pts2 or None, limit=200, epsabs=1e-13, epsrel=1e-12,
        )
    return first + second


def closed_form_consumption(params: RecursiveUtilityParams, player: int, t: float, dt: float | None = None) -> float:
    """Equilibrium consumption rate of one player at time t.

    The denominator vanishes at T.  Requests past ``T - dt / 2`` (the last
    step midpoint) or at/after T raise HorizonBoundary.
    """
    T = params.T
    limit = T if dt is None else T - 0.5 * dt
    if t >= T or t > limit + 1e-12:
        raise HorizonBoundary(f"consumption undefined this close to the horizon (t={t}, T={T})")
    return closed_form_lambda(params, player, t) / consumption_denominator(params, player, t)


def consumption_schedule(params: RecursiveUtilityParams, player: int, grid: TimeGrid, sample: str = "mid") -> ControlProcess:
    return ControlProcess.from_function(
        player, lambda t: closed_form_consumption(params, player, t, grid.dt), grid, sample, params.c_bounds
    )


def closed_form_controls(params: RecursiveUtilityParams, grid: TimeGrid) -> tuple[ControlProcess, ControlProcess]:
    return consumption_schedule(params, 1, grid), consumption_schedule(params, 2, grid)


def build_model(params: RecursiveUtilityParams) -> ModelSpec:
    mu, sig = params.mu, params.sigma
    marks = np.asarray(params.jumps.marks, dtype=float)
    return ModelSpec(
        x0=params.x0,
        deltas=tuple(params.delta),
        drift=lambda st: st.X * (mu - st.U[0] - st.U[1]),
        vol=lambda st: sig * st.X,
        jump=(lambda st: st.X[:, None] * marks) if params.jumps.active else None,
        jump_spec=params.jumps,
        scheme="log-euler",
    )


def _driver_terms(params: RecursiveUtilityParams, player: int):
    i = player - 1

    def g(st, w):
        t = st.t
        out = params.alpha_at(player, t) * w + np.log(st.U[i] * st.X)
        eta = params.eta_at(player, t)
        if eta != 0:
            out = out + eta * np.log(st.Y[i])
        return out

    return g


def build_game(params: RecursiveUtilityParams, basis: RegressionBasis | None = None, scheme: str = "trapezoid") -> Game:
    """Game with J_i = W_i(0) and analytic Hamiltonian partials."""
    model = build_model(params)
    basis = basis or RegressionBasis(coords=("X", "invX", "Y1", "Y2"), degree=2, ridge=1e-8)
    nu = params.jumps.nu if params.jumps.active else np.zeros(0)
    marks = np.asarray(params.jumps.marks, dtype=float)
    perfs, hams = [], []
    for player in (1, 2):
        i = player - 1
        g = _driver_terms(params, player)
        perfs.append(PerformanceSpec(
            psi=lambda w: w,
            psi_prime=lambda w: 1.0,
            driver=DriverSpec(lambda st, w, z, k, g=g: g(st, w)),
        ))

        def dx(a, i=i):
            out = a.lam / a.X + a.p * (params.mu - a.U[0] - a.U[1]) + a.q * params.sigma
            if len(nu):
                out = out + np.sum(a.r * marks * nu, axis=1)
            return out

        partials = {
            "x": dx,
            f"y{player}": lambda a, i=i, pl=player: a.lam * params.eta_at(pl, a.t) / a.Y[i],
            f"L{player}": lambda a: np.zeros_like(a.X),
            "w": lambda a, pl=player: a.lam * params.alpha_at(pl, a.t),
            "z": lambda a: np.zeros_like(a.X),
            "k": lambda a: np.zeros((a.X.shape[0], len(nu))),
            f"u{player}": lambda a, i=i: a.lam / a.U[i] - a.p * a.X,
            f"u{3 - player}": lambda a: -a.p * a.X,
        }
        hams.append(HamiltonianSpec.from_model(
            model, player, g=lambda a, g=g: g(a, a.w), partials=partials,
        ))
    return Game(model, tuple(perfs), tuple(hams), basis, scheme, (params.c_bounds, params.c_bounds),
                adjoint_solver=lambda *a: gamma_adjoint(params, *a))


def gamma_adjoint(params: RecursiveUtilityParams, game: Game, player: int, paths, noise, bsde) -> AdjointSolution:
    """Backward adjoint from its Gamma representation.

    The adjoint BSDE is linear with rate mu - c1 - c2, volatility sigma,
    relative jumps zeta and source (lam(t) + lam(t + delta) eta 1{t <= T - delta}) / X,
    so Gamma p is a conditional expectation of a source integral.  Since
    x Gamma = X, that integral is deterministic.
    """
    spec = game.hamiltonians[player - 1]
    lam = solve_lambda_forward(spec, bsde, paths, noise)
    grid = paths.grid
    n = grid.n_steps
    d = grid.delay_steps_for((params.delta[player - 1],))[0]
    t = grid.times
    src = lam.copy()
    eta = np.array([params.eta_at(player, x) for x in t])
    src[:, : n + 1 - d] += lam[:, d:] * eta[d:]
    u1, u2 = paths.U
    marks = np.asarray(params.jumps.marks, dtype=float)
    sol = solve_linear_bsde_gamma(
        paths, noise,
        rate=params.mu - u1 - u2,
        vol=np.full((1, n), params.sigma),
        source=src / paths.X,
        jump=marks[None, None, :] if params.jumps.active else None,
        basis=game.basis,
        quadrature="trapezoid",
    )
    P = paths.n_paths
    zeros = np.zeros((P, n + 1))
    return AdjointSolution(
        lam=lam, p=sol.W, q=sol.Z, r=sol.K,
        p2=zeros, q2=zeros, r2=np.zeros_like(sol.K),
        dHdL=zeros, bsde=bsde, delay_steps=d,
        diagnostics={"gamma": sol.aux["gamma"], "deterministic": sol.aux["deterministic"]},
    )


def xp_quadrature(params: RecursiveUtilityParams, player: int, t: float) -> float:
    """int_t^T (lam(s) + lam(s + delta) eta(s + delta) 1{s <= T - delta}) ds."""
    return consumption_denominator(params, player, t)


@dataclass
class BenchmarkReport:
    params: RecursiveUtilityParams
    grid: TimeGrid
    n_paths: int
    seed: int
    bin_mid: np.ndarray
    c_star: np.ndarray  # (2, n_bins)
    best: np.ndarray  # (2, n_bins)
    rel_err: np.ndarray  # (2, n_bins)
    xgamma_err: float
    xp_rel_err: np.ndarray  # (2,) Gamma route against quadrature
    xp_adjoint_rel_err: np.ndarray  # (2,) generic adjoint route against quadrature, at t = 0
    certificate: NashCertificate
    checks: dict = field(default_factory=dict)

    @property
    def passed(self) -> bool:
        return all(self.checks.values())


def run_benchmark(params: RecursiveUtilityParams, n_steps: int = 100, n_paths: int = 4000, seed: int = 0,
                  n_bins: int = 10, tolerances: Tolerances = Tolerances(), br_tol: float = 0.05,
                  xp_tol: float = 0.02, concavity_samples: int = 10_000, candidates=None) -> BenchmarkReport:
    """Closed form against the numerical pipeline.

    ``candidates`` defaults to the closed-form pair; pass another pair to see
    the certificate fail.
    """
    grid = make_grid(params.T, n_steps, params.delta)
    noise = sample_noise(grid, n_paths, seed, params.jumps)
    game = build_game(params)
    cstar = closed_form_controls(params, grid)
    cand = cstar if candidates is None else tuple(candidates)

    # per-bin best responses in the absolute piecewise-constant family
    width = params.T / n_bins
    mids = (np.arange(n_bins) + 0.5) * width
    cs = np.array([[closed_form_consumption(params, i, t) for t in mids] for i in (1, 2)])
    best = np.empty_like(cs)
    for i in (1, 2):
        fam = piecewise_constant_family(i, grid, np.log(cs[i - 1]), n_bins, params.c_bounds)
        br = best_response(game, cstar, fam, noise)
        best[i - 1] = np.exp(br.theta)
    rel = np.abs(best - cs) / cs

    # x Gamma = X and the p representation, at the candidate
    paths = simulate_forward(game.model, cand, noise)
    n, dt = grid.n_steps, grid.dt
    t = grid.times
    u1, u2 = cand[0].values, cand[1].values
    xg_err = 0.0
    xp_err = np.zeros(2)
    xp_adj = np.zeros(2)
    perf = estimate_performance(game, cand, noise, paths=paths)
    marks = np.asarray(params.jumps.marks, dtype=float)
    for i in (1, 2):
        d = grid.delay_steps_for((params.delta[i - 1],))[0]
        lam = np.array([closed_form_lambda(params, i, s) for s in t])
        src_t = lam.copy()
        for s in range(n + 1):
            if s + d <= n:
                src_t[s] += lam[s + d] * params.eta_at(i, t[s + d])
        sol = solve_linear_bsde_gamma(
            paths, noise,
            rate=(params.mu - u1 - u2)[None, :],
            vol=np.full((1, n), params.sigma),
            source=src_t[None, :] / paths.X,
            jump=marks[None, None, :] if params.jumps.active else None,
            quadrature="trapezoid",
        )
        gamma = sol.aux["gamma"]
        xg_err = max(xg_err, float(np.max(np.abs(params.x0 * gamma - paths.X) / paths.X)))
        xp = (paths.X * sol.W).mean(axis=0)
        exact = np.array([xp_quadrature(params, i, s) for s in t[:-1]])
        xp_err[i - 1] = float(np.max(np.abs(xp[:-1] - exact) / exact))
        adj = solve_adjoint_generic(game, i, paths, noise, perf[i].bsde)
        xp_adj[i - 1] = float(abs((paths.X[:, 0] * adj.p[:, 0]).mean() - exact[0]) / exact[0])

    fams = [multiplicative_family(i, cand[i - 1].values, grid, n_bins, params.c_bounds) for i in (1, 2)]
    cert = certify_nash(game, cand, fams, noise, tolerances, concavity_samples=concavity_samples)
    checks = {
        "best response within 5% of c* per bin": bool(np.all(rel <= br_tol)),
        "x Gamma equals X": xg_err <= 1e-10,
        "X p matches quadrature within 2%": bool(np.all(xp_err <= xp_tol)),
        "certificate": cert.verdict == "PASS",
    }
    return BenchmarkReport(params, grid, n_paths, seed, mids, cs, best, rel, xg_err, xp_err, xp_adj, cert, checks)


def write_benchmark(report: BenchmarkReport, out_dir: str | Path) -> list[Path]:
    """benchmark.csv (one row per time bin) and benchmark.txt (summary)."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    f = lambda x: "%.17g" % x  # noqa: E731
    rows = out / "benchmark.csv"
    cert = report.certificate
    with open(rows, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["t", "c1_star", "c2_star", "br1", "br2", "rel_err1", "rel_err2",
                    "gateaux1", "gateaux1_se", "gateaux2", "gateaux2_se", "verdict"])
        for k, t in enumerate(report.bin_mid):
            g1 = cert.players[0].gateaux[k + 1] if len(cert.players[0].gateaux) > k + 1 else None
            g2 = cert.players[1].gateaux[k + 1] if len(cert.players[1].gateaux) > k + 1 else None
            w.writerow([
                f(t), f(report.c_star[0, k]), f(report.c_star[1, k]), f(report.best[0, k]), f(report.best[1, k]),
                f(report.rel_err[0, k]), f(report.rel_err[1, k]),
                f(g1.fd if g1 else np.nan), f(g1.fd_se if g1 else np.nan),
                f(g2.fd if g2 else np.nan), f(g2.fd_se if g2 else np.nan),
                cert.verdict,
            ])
    summary = out / "benchmark.txt"
    lines = [
        "recursive-utility benchmark",
        f"grid: T={report.grid.T:g} n_steps={report.grid.n_steps} n_paths={report.n_paths} seed={report.seed}",
        "pre-history: X = x0 and B = 0 before time 0",
        f"max relative error of best response vs c*: {report.rel_err.max():.6g}",
        f"max relative |x Gamma - X|: {report.xgamma_err:.3g}",
        f"X p vs quadrature (Gamma route): {report.xp_rel_err[0]:.4g} / {report.xp_rel_err[1]:.4g}",
        f"X p vs quadrature (adjoint route): {report.xp_adjoint_rel_err[0]:.4g} / {report.xp_adjoint_rel_err[1]:.4g}",
    ]
    lines += certificate_lines(cert)
    lines += [f"{'PASS' if ok else 'FAIL'}  {name}" for name, ok in report.checks.items()]
    summary.write_text("\n".join(lines) + "\n")
    return [rows, summary]


def certificate_lines(cert: NashCertificate) -> list[str]:
    out = [f"certificate: {cert.verdict} ({cert.note})"]
    for pc in cert.players:
        out.append(
            f"  player {pc.player}: J={pc.candidate_value:.10g} gap={pc.gap:.4g} (SE {pc.gap_se:.2g}, "
            f"allowance {pc.gap_allowance:.2g}) hamiltonian={pc.ham_relative:.4g} "
            f"max|gateaux|={max(abs(g.fd) for g in pc.gateaux):.4g}"
        )
        if pc.concavity is not None:
            out.append(f"    concavity: {pc.concavity.n_violations}/{pc.concavity.n_samples} violations, "
                       f"lambda(T) min {pc.concavity.lambda_T_min:.6g}")
        out.extend(f"    reason: {r}" for r in pc.reasons)
    return out
