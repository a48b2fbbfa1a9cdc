"""Pipeline assembly from a RunConfig and the CSV / summary writers.

All floats are written with 17 significant digits so reruns with the same
configuration and seed are byte-identical.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path
from typing import Callable

import numpy as np

from .adjoint import HamiltonianSpec, verify_memory_residual, write_adjoint_csv
from .bsde import DriverSpec, RegressionBasis
from .config import RunConfig
from .errors import ConfigError
from .forward import ControlProcess, ModelSpec, PathBundle, simulate_forward
from .game import (
    Game,
    NashCertificate,
    PerformanceSpec,
    Tolerances,
    certify_nash,
    estimate_performance,
    multiplicative_family,
    solve_adjoint_for,
    solve_adjoint_generic,
)
from .malliavin import (
    check_clark_ocone,
    check_duality,
    check_variance_identity,
    parse_functional,
)
from .recursive_utility import (
    RecursiveUtilityParams,
    build_game,
    certificate_lines,
    closed_form_controls,
    run_benchmark,
    write_benchmark,
    xp_quadrature,
)
from .timegrid import JumpSpec, NoiseBatch, iter_noise, make_grid, sample_noise

PRE_HISTORY = "pre-history: B = 0 and X = x0 before time 0"
RESIDUAL_QUADRATURE = {"left": "left", "implicit": "left", "right": "right", "trapezoid": "trapezoid"}
PATH_COLUMNS = ["path", "step", "t", "X", "Y1", "Y2", "L1", "L2", "u1", "u2"]


def fmt(x) -> str:
    return "%.17g" % x


def jump_spec(cfg: RunConfig) -> JumpSpec:
    j = cfg.jumps
    return JumpSpec(j.intensity, tuple(j.marks), tuple(j.probs))


def ru_params(cfg: RunConfig) -> RecursiveUtilityParams:
    m = cfg.model
    return RecursiveUtilityParams(
        alpha=m.alpha, eta=m.eta, kappa=m.kappa, delta=m.delta, mu=m.mu, sigma=m.sigma,
        jumps=jump_spec(cfg), x0=m.x0, T=cfg.grid.T, c_bounds=tuple(m.c_bounds),
    )


def _basis(cfg: RunConfig, default: tuple[str, ...]) -> RegressionBasis:
    s = cfg.solver
    coords = tuple(s.basis) if s.basis is not None else default
    return RegressionBasis(coords=coords, degree=s.degree, ridge=s.ridge)


def _table_game(cfg: RunConfig) -> Game:
    m = cfg.model
    js = jump_spec(cfg)
    marks = np.asarray(js.marks, dtype=float)
    model = ModelSpec(
        x0=m.x0, deltas=tuple(m.delta), drift=m.drift, vol=m.vol,
        jump=(lambda st: m.jump(st)[:, None] * marks) if js.active else None,
        jump_spec=js, scheme=m.scheme,
    )
    perfs, hams = [], []
    for i, pl in enumerate(m.players, start=1):
        def g(st, w, pl=pl):
            return pl.a * w + pl.running(st)

        def h(st, pl=pl):
            return pl.h0 + pl.hx * st.X

        perfs.append(PerformanceSpec(psi=lambda w: w, psi_prime=lambda w: 1.0,
                                     driver=DriverSpec(lambda st, w, z, k, g=g: g(st, w), h)))
        hams.append(HamiltonianSpec.from_model(model, i, g=lambda a, g=g: g(a, a.w),
                                               h_prime=lambda x, pl=pl: pl.hx + 0.0 * x))
    bounds = tuple(tuple(pl.bounds) for pl in m.players)
    basis = _basis(cfg, ("X", "Y1", "Y2", "L1", "L2"))
    return Game(model, tuple(perfs), tuple(hams), basis, cfg.solver.scheme or "left", bounds)


def build_from_config(cfg: RunConfig) -> Game:
    if cfg.model.kind == "recursive_utility":
        game = build_game(ru_params(cfg))
        basis = _basis(cfg, game.basis.coords)
        return Game(game.model, game.perfs, game.hamiltonians, basis, cfg.solver.scheme or game.scheme,
                    game.bounds, game.adjoint_scheme, game.adjoint_solver)
    return _table_game(cfg)


def grid_for(cfg: RunConfig):
    return make_grid(cfg.grid.T, cfg.grid.n_steps, tuple(cfg.model.delta))


def noise_for(cfg: RunConfig) -> NoiseBatch:
    return sample_noise(grid_for(cfg), cfg.solver.n_paths, cfg.seed, jump_spec(cfg))


def default_controls(cfg: RunConfig, grid) -> tuple[ControlProcess, ControlProcess]:
    if cfg.model.kind == "recursive_utility":
        return closed_form_controls(ru_params(cfg), grid)
    return tuple(ControlProcess.constant(i, pl.control, grid, tuple(pl.bounds))
                 for i, pl in enumerate(cfg.model.players, start=1))


def candidate_controls(cfg: RunConfig, grid, required: bool = False) -> tuple[ControlProcess, ControlProcess]:
    c = cfg.candidate
    if c is None:
        if required:
            raise ConfigError("candidate: section missing (use kind 'closed-form', 'constant' or 'values')")
        return default_controls(cfg, grid)
    bounds = (ru_params(cfg).c_bounds,) * 2 if cfg.model.kind == "recursive_utility" else \
        tuple(tuple(pl.bounds) for pl in cfg.model.players)
    if c.kind == "closed-form":
        if cfg.model.kind != "recursive_utility":
            raise ConfigError("candidate.kind: 'closed-form' needs model.kind 'recursive_utility'")
        base = closed_form_controls(ru_params(cfg), grid)
        return tuple(b.scaled(f) for b, f in zip(base, c.scale))
    if c.kind == "constant":
        if c.constant is None:
            raise ConfigError("candidate.constant: required for kind 'constant'")
        return tuple(ControlProcess.constant(i, v * f, grid, bounds[i - 1])
                     for i, (v, f) in enumerate(zip(c.constant, c.scale), start=1))
    if c.values is None:
        raise ConfigError("candidate.values: required for kind 'values'")
    out = []
    for i, (v, f) in enumerate(zip(c.values, c.scale), start=1):
        if len(v) != grid.n_steps:
            raise ConfigError(f"candidate.values.{i - 1}: expected {grid.n_steps} entries, got {len(v)}")
        out.append(ControlProcess(i, values=f * np.asarray(v, dtype=float), bounds=bounds[i - 1]))
    return tuple(out)


def _prep(out_dir) -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _write_summary(path: Path, lines: list[str]) -> Path:
    path.write_text("\n".join(lines) + "\n")
    return path


# ---------------------------------------------------------------- simulate

def write_paths_csv(path, paths: PathBundle, max_paths: int | None = None) -> Path:
    """One row per (path, step); controls at the last node repeat the last step."""
    grid = paths.grid
    n = grid.n_steps
    t = grid.times
    P = paths.n_paths if max_paths is None else min(max_paths, paths.n_paths)
    cs = np.minimum(np.arange(n + 1), n - 1)
    Y = [paths.Y[k] if k < len(paths.Y) else np.zeros_like(paths.X) for k in range(2)]
    L = [paths.L[k] if k < len(paths.L) else np.zeros_like(paths.X) for k in range(2)]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(PATH_COLUMNS)
        for p in range(P):
            u1, u2 = paths.U[0][p, cs], paths.U[1][p, cs]
            for s in range(n + 1):
                w.writerow([p, s, fmt(t[s]), fmt(paths.X[p, s]), fmt(Y[0][p, s]), fmt(Y[1][p, s]),
                            fmt(L[0][p, s]), fmt(L[1][p, s]), fmt(u1[s]), fmt(u2[s])])
    return Path(path)


def cmd_simulate(cfg: RunConfig) -> tuple[int, list[Path]]:
    out = _prep(cfg.out)
    game = build_from_config(cfg)
    noise = noise_for(cfg)
    controls = candidate_controls(cfg, noise.grid)
    paths = simulate_forward(game.model, controls, noise)
    files = []
    if cfg.output.paths_csv:
        files.append(write_paths_csv(out / "paths.csv", paths, cfg.output.max_csv_paths))
    XT = paths.X[:, -1]
    se = XT.std(ddof=1) / np.sqrt(XT.size) if XT.size > 1 else 0.0
    files.append(_write_summary(out / "simulate.txt", [
        f"model: {cfg.model.kind}",
        f"grid: T={cfg.grid.T:g} n_steps={cfg.grid.n_steps} n_paths={paths.n_paths} seed={cfg.seed}",
        PRE_HISTORY,
        f"mean X(T): {fmt(XT.mean())}",
        f"se X(T): {fmt(se)}",
        f"var X(T): {fmt(XT.var(ddof=1) if XT.size > 1 else 0.0)}",
        f"min X: {fmt(paths.X.min())}",
        f"max X: {fmt(paths.X.max())}",
    ]))
    return 0, files


# ---------------------------------------------------------------- bsde

def write_bsde_csv(path, sol, max_paths: int | None = None) -> Path:
    P, n1 = sol.W.shape
    P = P if max_paths is None else min(P, max_paths)
    m = sol.K.shape[2]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["path", "step", "W", "Z"] + [f"K{j}" for j in range(m)])
        for p in range(P):
            for s in range(n1):
                if s < n1 - 1:
                    tail = [fmt(sol.Z[p, s])] + [fmt(x) for x in sol.K[p, s]]
                else:
                    tail = [""] * (1 + m)
                w.writerow([p, s, fmt(sol.W[p, s])] + tail)
    return Path(path)


def cmd_bsde(cfg: RunConfig) -> tuple[int, list[Path]]:
    out = _prep(cfg.out)
    game = build_from_config(cfg)
    noise = noise_for(cfg)
    controls = candidate_controls(cfg, noise.grid)
    perf = estimate_performance(game, controls, noise)
    files = []
    lines = [
        f"model: {cfg.model.kind}",
        f"grid: T={cfg.grid.T:g} n_steps={cfg.grid.n_steps} n_paths={noise.n_paths} seed={cfg.seed}",
        f"scheme: {game.scheme}  basis: {','.join(game.basis.coords)} degree {game.basis.degree}",
        PRE_HISTORY,
    ]
    for i in (1, 2):
        sol = perf[i].bsde
        if cfg.output.paths_csv:
            files.append(write_bsde_csv(out / f"bsde_player{i}.csv", sol, cfg.output.max_csv_paths))
        lines.append(f"player {i}: W(0) = {fmt(sol.w0)}  se = {fmt(sol.w0_se)}")
    files.append(_write_summary(out / "bsde.txt", lines))
    return 0, files


# ---------------------------------------------------------------- malliavin

def malliavin_reports(cfg: RunConfig) -> list:
    grid = make_grid(cfg.grid.T, cfg.grid.n_steps)
    mc = cfg.malliavin
    n = cfg.solver.n_paths

    def stream():
        return iter_noise(grid, n, cfg.seed, chunk=mc.chunk)

    reports = []
    for text in mc.catalog:
        F = parse_functional(text)
        for phi in mc.phis:
            r = check_duality(F, phi, stream())
            r.name = f"duality {text} phi={phi}"
            reports.append(r)
        r = check_clark_ocone(F, stream())
        r.name = f"clark-ocone {text}"
        reports.append(r)
        r = check_variance_identity(F, stream())
        r.name = f"variance {text}"
        reports.append(r)
    return reports


def report_status(r) -> str:
    if not r.passed:
        return "FAIL"
    return "WIDE-SE" if r.wide_se else "PASS"


def cmd_check_malliavin(cfg: RunConfig) -> tuple[int, list[Path]]:
    out = _prep(cfg.out)
    reports = malliavin_reports(cfg)
    table = out / "malliavin.csv"
    with open(table, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["name", "lhs", "rhs", "se_lhs", "se_rhs", "allowance", "status"])
        for r in reports:
            w.writerow([r.name, fmt(r.lhs), fmt(r.rhs), fmt(r.se_lhs), fmt(r.se_rhs), fmt(r.allowance),
                        report_status(r)])
    lines = [f"grid: T={cfg.grid.T:g} n_steps={cfg.grid.n_steps} n_paths={cfg.solver.n_paths} seed={cfg.seed}"]
    lines += [f"{report_status(r):7s} {r.name}: lhs={r.lhs:.6g} rhs={r.rhs:.6g} tol={r.tolerance:.3g}"
              for r in reports]
    n_fail = sum(not r.passed for r in reports)
    n_wide = sum(r.passed and r.wide_se for r in reports)
    lines.append(f"{len(reports)} checks, {n_fail} failed, {n_wide} with wide standard errors")
    summary = _write_summary(out / "malliavin.txt", lines)
    return (1 if n_fail else 0), [table, summary]


# ---------------------------------------------------------------- adjoint

def cmd_adjoint(cfg: RunConfig) -> tuple[int, list[Path]]:
    """Adjoint triple per player with the structural residual check."""
    out = _prep(cfg.out)
    game = build_from_config(cfg)
    noise = noise_for(cfg)
    grid = noise.grid
    controls = candidate_controls(cfg, grid)
    paths = simulate_forward(game.model, controls, noise)
    perf = estimate_performance(game, controls, noise, paths=paths)
    files = []
    lines = [
        f"model: {cfg.model.kind}",
        f"grid: T={cfg.grid.T:g} n_steps={cfg.grid.n_steps} n_paths={noise.n_paths} seed={cfg.seed}",
        PRE_HISTORY,
    ]
    for i in (1, 2):
        spec = game.hamiltonians[i - 1]
        adj = solve_adjoint_generic(game, i, paths, noise, perf[i].bsde)
        rep = verify_memory_residual(adj, spec, paths, noise, game.basis,
                                        quadrature=RESIDUAL_QUADRATURE[game.adjoint_scheme])
        write_adjoint_csv(out / f"adjoint_player{i}.csv", adj, grid.times, rep.residual)
        files.append(out / f"adjoint_player{i}.csv")
        lines += [
            f"player {i}: p(0) = {fmt(adj.p[:, 0].mean())}  lambda(T) mean = {fmt(adj.lam[:, -1].mean())}",
            f"  residual mean|.| = {rep.mean_abs:.4g}  max|.| = {rep.max_abs:.4g}",
            f"  lambda vs lambda-tilde max gap = {rep.lambda_gap:.3g}",
            f"  round trip gap = {rep.roundtrip_gap:.4g} (SE {rep.roundtrip_se:.2g}) "
            f"{'ok' if rep.roundtrip_ok else 'MISMATCH'}",
        ]
        if game.adjoint_solver is not None:
            ref = solve_adjoint_for(game, i, paths, noise, perf[i].bsde)
            xp0 = float((paths.X[:, 0] * ref.p[:, 0]).mean())
            lines.append(f"  Gamma route X(0)p(0) = {fmt(xp0)}  quadrature = "
                         f"{fmt(xp_quadrature(ru_params(cfg), i, 0.0))}")
    files.append(_write_summary(out / "adjoint.txt", lines))
    return 0, files


# ---------------------------------------------------------------- verify-nash

def tolerances_for(cfg: RunConfig) -> Tolerances:
    t = cfg.solver.tolerances
    return Tolerances(t.gap_rel, t.deriv_rel, t.hamiltonian_rel, t.concavity)


def write_certificate_csv(path, cert: NashCertificate) -> Path:
    """Long format: one row per (player, check)."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["player", "check", "name", "value", "se", "allowance", "pass"])
        tol = cert.tolerances
        for pc in cert.players:
            i = pc.player
            w.writerow([i, "performance", "J", fmt(pc.candidate_value), "", "", ""])
            w.writerow([i, "best_response_gap", "family", fmt(pc.gap), fmt(pc.gap_se), fmt(pc.gap_allowance),
                        int(pc.gap <= 3 * pc.gap_se + pc.gap_allowance)])
            w.writerow([i, "hamiltonian_gradient", "relative_l1", fmt(pc.ham_relative), "",
                        fmt(tol.hamiltonian_rel), int(pc.ham_relative <= tol.hamiltonian_rel)])
            for g in pc.gateaux:
                w.writerow([i, "gateaux", g.name, fmt(g.fd), fmt(g.fd_se), "", ""])
            if pc.concavity is not None:
                c = pc.concavity
                w.writerow([i, "concavity", "violations", c.n_violations, "", fmt(tol.concavity), int(c.passed)])
            w.writerow([i, "verdict", "player", "", "", "", int(pc.passed)])
    return Path(path)


def run_certificate(cfg: RunConfig) -> NashCertificate:
    game = build_from_config(cfg)
    noise = noise_for(cfg)
    grid = noise.grid
    cand = candidate_controls(cfg, grid, required=True)
    fams = [multiplicative_family(i, cand[i - 1].values, grid, cfg.solver.n_bins, game.bounds[i - 1])
            for i in (1, 2)]
    return certify_nash(game, cand, fams, noise, tolerances_for(cfg),
                        concavity_samples=cfg.solver.concavity_samples)


def cmd_verify_nash(cfg: RunConfig) -> tuple[int, list[Path]]:
    if cfg.candidate is None:
        raise ConfigError("candidate: section missing (use kind 'closed-form', 'constant' or 'values')")
    out = _prep(cfg.out)
    cert = run_certificate(cfg)
    table = write_certificate_csv(out / "certificate.csv", cert)
    lines = [
        f"model: {cfg.model.kind}",
        f"grid: T={cfg.grid.T:g} n_steps={cfg.grid.n_steps} n_paths={cfg.solver.n_paths} seed={cfg.seed}",
        PRE_HISTORY,
    ] + certificate_lines(cert)
    summary = _write_summary(out / "certificate.txt", lines)
    return (0 if cert.verdict == "PASS" else 1), [table, summary]


# ---------------------------------------------------------------- example-recursive

def cmd_example_recursive(cfg: RunConfig) -> tuple[int, list[Path]]:
    if cfg.model.kind != "recursive_utility":
        raise ConfigError("model.kind: example-recursive needs 'recursive_utility'")
    t = cfg.solver.tolerances
    params = ru_params(cfg)
    cand = None
    if cfg.candidate is not None:
        cand = candidate_controls(cfg, make_grid(params.T, cfg.grid.n_steps, params.delta))
    rep = run_benchmark(params, n_steps=cfg.grid.n_steps, n_paths=cfg.solver.n_paths, seed=cfg.seed,
                        n_bins=cfg.solver.n_bins, tolerances=tolerances_for(cfg), br_tol=t.best_response,
                        xp_tol=t.xp, concavity_samples=cfg.solver.concavity_samples, candidates=cand)
    files = write_benchmark(rep, _prep(cfg.out))
    return (0 if rep.passed else 1), files


@dataclass(frozen=True)
class Command:
    name: str
    run: Callable[[RunConfig], tuple[int, list[Path]]]
    help: str


COMMANDS = {
    c.name: c for c in (
        Command("simulate", cmd_simulate, "simulate forward paths (paths.csv, simulate.txt)"),
        Command("bsde", cmd_bsde, "solve each player's performance BSDE (bsde_player*.csv, bsde.txt)"),
        Command("check-malliavin", cmd_check_malliavin, "duality, Clark-Ocone and variance identities"),
        Command("adjoint", cmd_adjoint, "adjoint processes and residual check (adjoint_player*.csv)"),
        Command("verify-nash", cmd_verify_nash, "certify a candidate pair; exit 0 iff PASS"),
        Command("example-recursive", cmd_example_recursive, "recursive-utility benchmark against closed form"),
    )
}
