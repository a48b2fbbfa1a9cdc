import csv

import numpy as np
import pytest
from hypothesis import given, strategies as st

from fbsdegame.adjoint import (
    HamArgs,
    HamiltonianSpec,
    _malliavin_term,
    check_concavity_hatH,
    evaluate_hamiltonian,
    finite_difference,
    maximize_control,
    solve_adjoint_triple,
    solve_lambda_forward,
    verify_memory_residual,
    write_adjoint_csv,
)
from fbsdegame.bsde import DriverSpec, RegressionBasis, solve_bsde_lsmc
from fbsdegame.errors import DomainError
from fbsdegame.forward import ModelSpec, simulate_forward
from fbsdegame.game import estimate_performance
from fbsdegame.recursive_utility import RecursiveUtilityParams, build_game, closed_form_controls
from fbsdegame.timegrid import make_grid, sample_noise

DELTA = 0.2
BASIS = RegressionBasis(coords=("X", "L1"), degree=2)


def memory_problem(n_steps, n_paths=20_000, seed=11, f=None):
    """X = B, player 1 with H = X L1 (so H_L = B, H_x = L1) and a zero BSDE."""
    g = make_grid(1.0, n_steps, (DELTA,))
    nb = sample_noise(g, n_paths, seed)
    model = ModelSpec(x0=0.0, deltas=(DELTA,), vol=lambda s: np.ones_like(s.X))
    paths = simulate_forward(model, (), nb)
    bs = solve_bsde_lsmc(DriverSpec(lambda s, w, z, k: np.zeros_like(s.X)), paths, nb, BASIS)
    spec = HamiltonianSpec.from_model(model, 1, f=f or (lambda a: a.X * a.L[0]))
    lam = solve_lambda_forward(spec, bs, paths, nb)
    adj = solve_adjoint_triple(spec, paths, bs, lam, nb, BASIS)
    return g, nb, paths, spec, adj


def ru_args(**kw):
    params = RecursiveUtilityParams(alpha=(0.0, 0.0), eta=(0.0, 0.0))
    game = build_game(params)
    one = np.ones(1)
    base = dict(s=0, t=0.0, X=one, Y=(one, one), L=(0 * one, 0 * one), U=(0.5 * one, 0.5 * one),
                w=0 * one, z=0 * one, k=np.zeros((1, 1)), lam=one, p=one, q=0 * one, r=np.zeros((1, 1)))
    base.update(kw)
    return game, HamArgs(**base)


def test_hamiltonian_examples():
    game, a = ru_args()
    assert evaluate_hamiltonian(game.hamiltonians[0], a)[0] == pytest.approx(np.log(0.5) - 0.95, abs=1e-12)
    empty = HamiltonianSpec(player=1)
    assert evaluate_hamiltonian(empty, a)[0] == 0.0
    game, bad = ru_args(U=(np.array([-1.0]), np.array([0.5])))
    with pytest.raises(DomainError):
        evaluate_hamiltonian(game.hamiltonians[0], bad)


def test_first_order_condition():
    game, a = ru_args(p=np.array([2.0]))
    c = maximize_control(game.hamiltonians[0], a, (1e-4, 1e4))
    assert c[0] == pytest.approx(0.5, rel=1e-6)
    # additive search when the lower bound is not positive
    quad = HamiltonianSpec(player=1, f=lambda a: -(a.U[0] - 0.3) ** 2)
    assert maximize_control(quad, a, (-2.0, 2.0))[0] == pytest.approx(0.3, abs=1e-6)


@given(st.integers(0, 2**31))
def test_analytic_partials_match_finite_differences(seed):
    r = np.random.default_rng(seed)
    params = RecursiveUtilityParams()
    game = build_game(params)
    n = 1000
    pos = lambda: np.exp(r.normal(size=n))  # noqa: E731
    a = HamArgs(s=30, t=0.3, X=pos(), Y=(pos(), pos()), L=(r.normal(size=n), r.normal(size=n)),
                U=(pos(), pos()), w=r.normal(size=n), z=r.normal(size=n), k=np.zeros((n, 1)),
                lam=pos(), p=r.normal(size=n), q=r.normal(size=n), r=np.zeros((n, 1)))
    for spec in game.hamiltonians:
        for name in spec.partials:
            if name == "k":
                continue
            an = spec.partial(name, a)
            fd = finite_difference(spec, name, a)
            assert np.allclose(an, fd, rtol=1e-4, atol=1e-4 * (1 + np.abs(an).max()) * 1e-2)


def test_lambda_forward_examples():
    params = RecursiveUtilityParams(alpha=(0.0, 0.1))
    game = build_game(params)
    g = make_grid(1.0, 100, params.delta)
    nb = sample_noise(g, 200, 0)
    cs = closed_form_controls(params, g)
    perf = estimate_performance(game, cs, nb)
    paths = perf[1].paths
    lam1 = solve_lambda_forward(game.hamiltonians[0], perf[1].bsde, paths, nb)
    lam2 = solve_lambda_forward(game.hamiltonians[1], perf[2].bsde, paths, nb)
    assert np.all(lam1 == 1.0)
    assert lam2[0, -1] == pytest.approx(np.exp(0.1), rel=1e-3)
    assert np.all(lam2[:, 0] == 1.0)


def test_lambda_with_z_dependence():
    g = make_grid(1.0, 50)
    nb = sample_noise(g, 5000, 2)
    model = ModelSpec(x0=1.0, deltas=(0.0,))
    paths = simulate_forward(model, (), nb)
    bs = solve_bsde_lsmc(DriverSpec(lambda s, w, z, k: np.zeros_like(s.X)), paths, nb, RegressionBasis(coords=("X",)))
    spec = HamiltonianSpec(player=1, f=lambda a: 0.7 * a.z)
    lam = solve_lambda_forward(spec, bs, paths, nb)
    assert np.allclose(lam, 1.0 + 0.7 * nb.B, atol=1e-8)
    se = lam[:, -1].std(ddof=1) / np.sqrt(lam.shape[0])
    assert abs(lam[:, -1].mean() - 1.0) <= 3 * se


def test_q2_window_law():
    g, nb, paths, spec, adj = memory_problem(100)
    q2 = adj.q2.mean(axis=0)
    for t in np.linspace(0.0, 0.9, 10):
        s = g.step_of(round(t, 10))
        want = min(t + DELTA, 1.0) - t
        assert q2[s] == pytest.approx(want, rel=0.05)


def test_terminal_and_initial_conditions():
    g, nb, paths, spec, adj = memory_problem(50, 4000)
    assert np.all(adj.p[:, -1] == 0.0)
    assert np.all(adj.p2[:, -1] == 0.0)
    assert np.all(adj.lam[:, 0] == 1.0)
    # with a bequest and a terminal driver value
    spec2 = HamiltonianSpec.from_model(ModelSpec(x0=0.0, deltas=(DELTA,), vol=lambda s: np.ones_like(s.X)), 1,
                                       phi_prime=lambda x: 2 * x, h_prime=lambda x: 3 + 0 * x)
    adj2 = solve_adjoint_triple(spec2, paths, adj.bsde, adj.lam, nb, BASIS)
    assert np.array_equal(adj2.p[:, -1], 2 * paths.X[:, -1] + 3 * adj.lam[:, -1])


def test_zero_memory_dependence():
    g, nb, paths, spec, adj = memory_problem(50, 4000, f=lambda a: a.X ** 2)
    assert not adj.p2.any() and not adj.q2.any()
    assert not _malliavin_term(adj, paths, nb, BASIS).any()
    # p = E[int 2X ds]: with X = B the mean of p(0) is 0 within noise
    assert abs(adj.p[:, 0].mean()) < 0.05


def test_residual_small_and_round_trip():
    g, nb, paths, spec, adj = memory_problem(100)
    n = g.n_steps
    oracle = lambda s: np.full(paths.n_paths, min(s + g.delay_steps[0], n) * g.dt - s * g.dt)  # noqa: E731
    rep = verify_memory_residual(adj, spec, paths, nb, BASIS, oracle=oracle)
    assert abs(rep.residual[0]) <= 5 * rep.se[0] + 1.0 * g.dt
    assert rep.lambda_gap < 1e-8
    assert rep.roundtrip_ok
    reg = verify_memory_residual(adj, spec, paths, nb, BASIS)
    assert abs(reg.residual[0]) <= 5 * reg.se[0] + 1.0 * g.dt


def test_concavity_reports():
    params = RecursiveUtilityParams()
    game = build_game(params)
    g = make_grid(1.0, 50, params.delta)
    nb = sample_noise(g, 500, 1)
    cs = closed_form_controls(params, g)
    perf = estimate_performance(game, cs, nb)
    adj = game.adjoint_solver(game, 2, perf[2].paths, nb, perf[2].bsde)
    rep = check_concavity_hatH(game.hamiltonians[1], adj, perf[2].paths, params.c_bounds, n_samples=10_000)
    assert rep.n_violations == 0 and rep.lambda_T_ok and rep.passed
    assert rep.lambda_T_min == pytest.approx(np.exp(0.1), rel=1e-3)
    convex = HamiltonianSpec.from_model(game.model, 2, f=lambda a: a.X ** 4 + np.log(a.U[1]),
                                        g=game.hamiltonians[1].g)
    bad = check_concavity_hatH(convex, adj, perf[2].paths, params.c_bounds, n_samples=2000)
    assert bad.n_violations > 0 and not bad.passed


def test_adjoint_csv(tmp_path):
    g, nb, paths, spec, adj = memory_problem(20, 2000)
    path = tmp_path / "adj.csv"
    write_adjoint_csv(path, adj, g.times)
    rows = list(csv.reader(open(path)))
    assert rows[0] == ["step", "t", "mean_lambda", "mean_p", "mean_q2", "residual"]
    assert len(rows) == g.n_steps + 2
