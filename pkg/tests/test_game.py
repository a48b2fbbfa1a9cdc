import numpy as np
import pytest

from fbsdegame.errors import AdmissibilityViolation, ConfigError
from fbsdegame.forward import ControlProcess, ModelSpec
from fbsdegame.game import (
    ControlFamily,
    Game,
    PerformanceSpec,
    Tolerances,
    best_response,
    certify_nash,
    estimate_performance,
    gateaux_derivative,
    hamiltonian_gradient,
    multiplicative_family,
    solve_adjoint_for,
    step_directions,
)
from fbsdegame.recursive_utility import RecursiveUtilityParams, build_game, closed_form_controls
from fbsdegame.timegrid import make_grid, sample_noise


def const(player, v, n, bounds=(-np.inf, np.inf)):
    return ControlProcess(player, values=np.full(n, float(v)), bounds=bounds)


def identity_family(player, n, n_bins=5, start=0.0):
    idx = np.repeat(np.arange(n_bins), n // n_bins)
    return ControlFamily(player, lambda th: th[idx].copy(), np.full(n_bins, start),
                         np.full(n_bins, -5.0), np.full(n_bins, 5.0))


def quadratic_game():
    """Player i earns -(u_i - target_i)^2 + X, X moved only by noise."""
    model = ModelSpec(x0=1.0, vol=lambda st: np.ones_like(st.X))
    perfs = (
        PerformanceSpec(f=lambda st: -(st.U[0] - 0.3) ** 2 + st.X),
        PerformanceSpec(f=lambda st: -(st.U[1] + 0.2) ** 2 + st.X),
    )
    return Game(model, perfs)


def test_constant_performance():
    game = Game(ModelSpec(x0=0.0), (PerformanceSpec(phi=lambda x: 1.0 + 0 * x), PerformanceSpec()))
    nb = sample_noise(make_grid(1.0, 10), 100, 0)
    perf = estimate_performance(game, (), nb)
    assert perf[1].value == 1.0 and perf[1].se == 0.0
    assert perf[2].value == 0.0


def test_recursive_value_is_w0():
    params = RecursiveUtilityParams()
    game = build_game(params)
    g = make_grid(1.0, 50, params.delta)
    nb = sample_noise(g, 400, 3)
    perf = estimate_performance(game, closed_form_controls(params, g), nb)
    for i in (1, 2):
        assert perf[i].value == pytest.approx(perf[i].bsde.w0, abs=1e-14)
        assert perf[i].se > 0


def test_deterministic_market_quadrature():
    params = RecursiveUtilityParams(alpha=(0.0, 0.0), eta=(0.0, 0.0), sigma=0.0)
    game = build_game(params)
    g = make_grid(1.0, 40, params.delta)
    nb = sample_noise(g, 200, 0)
    cs = (const(1, 0.5, 40, params.c_bounds), const(2, 0.5, 40, params.c_bounds))
    perf = estimate_performance(game, cs, nb)
    # int_0^1 ln(0.5) + (0.05 - 1) t dt
    assert perf[1].value == pytest.approx(np.log(0.5) - 0.475, abs=1e-10)
    assert perf[1].se < 1e-10


def test_psi_monotone_check():
    assert PerformanceSpec(psi=lambda w: w).check_psi_monotone()
    assert not PerformanceSpec(psi=lambda w: -w).check_psi_monotone()


def test_control_free_game_certifies():
    game = Game(ModelSpec(x0=1.0, vol=lambda st: np.ones_like(st.X)),
                (PerformanceSpec(f=lambda st: st.X), PerformanceSpec(phi=lambda x: x ** 2)))
    g = make_grid(1.0, 20)
    nb = sample_noise(g, 500, 4)
    cs = (const(1, 1.0, 20), const(2, 1.0, 20))
    fams = [identity_family(i, 20, start=1.0) for i in (1, 2)]
    gd = gateaux_derivative(game, cs, 1, np.ones(20), nb)
    assert gd.fd == 0.0 and gd.fd_se == 0.0
    cert = certify_nash(game, cs, fams, nb, directions=step_directions(g, 4))
    assert cert.verdict == "PASS"
    assert all(p.gap == 0.0 for p in cert.players)


def test_quadratic_best_response():
    game = quadratic_game()
    g = make_grid(1.0, 20)
    nb = sample_noise(g, 200, 5)
    cs = (const(1, 0.0, 20), const(2, 0.0, 20))
    br1 = best_response(game, cs, identity_family(1, 20), nb)
    br2 = best_response(game, cs, identity_family(2, 20), nb)
    assert np.allclose(br1.theta, 0.3, atol=1e-4)
    assert np.allclose(br2.theta, -0.2, atol=1e-4)
    assert br1.converged and br1.value > br1.start_value
    # the optimum certifies, a shifted candidate does not
    opt = (const(1, 0.3, 20), const(2, -0.2, 20))
    fams = [identity_family(1, 20, start=0.3), identity_family(2, 20, start=-0.2)]
    cert = certify_nash(game, opt, fams, nb, directions=step_directions(g, 4))
    assert cert.verdict == "PASS"
    assert "supplied control families" in cert.note
    bad = certify_nash(game, (const(1, 0.8, 20), opt[1]),
                       [identity_family(1, 20, start=0.8), fams[1]], nb, directions=step_directions(g, 4))
    assert bad.verdict == "FAIL"
    assert bad.players[0].reasons and bad.players[1].passed


@pytest.fixture(scope="module")
def doubled():
    params = RecursiveUtilityParams()
    game = build_game(params)
    g = make_grid(1.0, 50, params.delta)
    nb = sample_noise(g, 1000, 7)
    c1, c2 = closed_form_controls(params, g)
    cs = (ControlProcess(1, values=2 * c1.values, bounds=params.c_bounds), c2)
    return game, g, nb, cs


def test_gateaux_negative_at_doubled_consumption(doubled):
    game, g, nb, cs = doubled
    res = gateaux_derivative(game, cs, 1, np.ones(g.n_steps), nb)
    assert res.fd < -3 * res.fd_se
    assert res.richardson == pytest.approx(res.fd, rel=1e-3)


def test_common_noise_shrinks_se(doubled):
    game, g, nb, cs = doubled
    res = gateaux_derivative(game, cs, 1, np.ones(g.n_steps), nb)
    s0 = res.s0
    up = estimate_performance(game, (ControlProcess(1, values=cs[0].values + s0), cs[1]), nb, (1,))[1]
    other = sample_noise(g, 1000, 8)
    dn = estimate_performance(game, (ControlProcess(1, values=cs[0].values - s0), cs[1]), other, (1,))[1]
    indep = np.hypot(up.se, dn.se) / (2 * s0)
    assert indep / res.fd_se > 10


def test_fd_matches_hamiltonian_form(doubled):
    game, g, nb, cs = doubled
    perf = estimate_performance(game, cs, nb)
    paths = perf[1].paths
    adj = solve_adjoint_for(game, 1, paths, nb, perf[1].bsde)
    grad = hamiltonian_gradient(game, 1, paths, perf[1].bsde, adj)
    for name, beta in step_directions(g, 3):
        res = gateaux_derivative(game, cs, 1, beta, nb, grad=grad, name=name)
        assert res.ham == pytest.approx(res.fd, rel=0.03, abs=3 * res.fd_se + 1e-4)


def test_local_concavity_probe(doubled):
    game, g, nb, cs = doubled
    beta = np.ones(g.n_steps)
    J = lambda s: estimate_performance(  # noqa: E731
        game, (ControlProcess(1, values=cs[0].values * np.exp(s * beta)), cs[1]), nb, (1,))[1].value
    h = 0.05
    assert J(h) - 2 * J(0.0) + J(-h) < 0


def test_tolerances_must_be_positive():
    with pytest.raises(ConfigError):
        Tolerances(gap_rel=0.0)
    with pytest.raises(ConfigError):
        Tolerances(concavity=-1.0)


def test_admissibility_violation():
    game = quadratic_game()
    g = make_grid(1.0, 10)
    nb = sample_noise(g, 10, 0)
    cs = (const(1, 1.0, 10, (0.0, 1.0 + 1e-4)), const(2, 0.0, 10))
    with pytest.raises(AdmissibilityViolation):
        gateaux_derivative(game, cs, 1, np.ones(10), nb, s0=0.1)
    with pytest.raises(AdmissibilityViolation):
        const(1, 2.0, 10, (0.0, 1.0))


def test_family_shapes():
    g = make_grid(1.0, 20)
    ref = np.linspace(1.0, 2.0, 20)
    fam = multiplicative_family(1, ref, g, 10)
    assert np.allclose(fam.control(fam.theta0).values, ref)
    with pytest.raises(ConfigError):
        multiplicative_family(1, ref, g, 3)
