import numpy as np
import pytest
from hypothesis import given, strategies as st

from fbsdegame.errors import DeltaExceedsHorizon, InvalidHorizon, NonCommensurateDelay
from fbsdegame.timegrid import BLOCK_SIZE, JumpSpec, iter_noise, make_grid, sample_noise


def test_grid_examples():
    g = make_grid(1.0, 100, [0.5, 0.2])
    assert g.dt == pytest.approx(0.01)
    assert g.delay_steps == (50, 20)
    assert make_grid(1.0, 100, [0, 0]).delay_steps == (0, 0)
    with pytest.raises(NonCommensurateDelay):
        make_grid(1.0, 3, [0.5])


def test_grid_errors():
    with pytest.raises(InvalidHorizon):
        make_grid(0.0, 10)
    with pytest.raises(InvalidHorizon):
        make_grid(1.0, 0)
    with pytest.raises(DeltaExceedsHorizon):
        make_grid(1.0, 10, [1.5])


@given(st.integers(1, 400), st.floats(0.1, 50.0), st.data())
def test_grid_invariants(n, T, data):
    k = data.draw(st.integers(0, n))
    g = make_grid(T, n, [k * T / n])
    assert abs(g.dt * g.n_steps - T) <= 4 * np.finfo(float).eps * T
    assert g.delay_steps == (k,)
    assert 0 <= g.deltas[0] <= T * (1 + 1e-12)
    assert g.times[0] == 0 and g.times[-1] == T


def test_noise_law():
    g = make_grid(1.0, 50)
    nb = sample_noise(g, 100_000, 7)
    dt = g.dt
    assert np.all(np.abs(nb.dB.mean(axis=0)) <= 5 * np.sqrt(dt / nb.n_paths))
    var = nb.dB.var(axis=0)
    assert np.all((var >= 0.9 * dt) & (var <= 1.1 * dt))


def test_noise_deterministic_and_block_independent():
    g = make_grid(1.0, 20)
    a = sample_noise(g, 5000, 3)
    b = sample_noise(g, 5000, 3)
    assert np.array_equal(a.dB, b.dB)
    # path p has the same increments whatever the batch size or offset
    small = sample_noise(g, 10, 3, path_offset=BLOCK_SIZE - 5)
    assert np.array_equal(small.dB, a.dB[BLOCK_SIZE - 5 : BLOCK_SIZE + 5])
    streamed = np.concatenate([nb.dB for nb in iter_noise(g, 5000, 3, chunk=1000)])
    assert np.array_equal(streamed, a.dB)
    assert not np.array_equal(sample_noise(g, 10, 4).dB, a.dB[:10])


def test_no_jumps():
    g = make_grid(1.0, 10)
    nb = sample_noise(g, 100, 1)
    assert all(nb.jumps(p) == [] for p in range(nb.n_paths))
    assert np.all(nb.dN_tilde == 0)


def test_compensated_jumps_mean_zero():
    js = JumpSpec(intensity=3.0, marks=(-0.2, 0.1), probs=(0.4, 0.6))
    g = make_grid(1.0, 50)
    nb = sample_noise(g, 40_000, 5, js)
    assert np.allclose(js.nu, [1.2, 1.8])
    total = np.einsum("psj,j->p", nb.dN_tilde, np.asarray(js.marks))
    se = total.std(ddof=1) / np.sqrt(total.size)
    assert abs(total.mean()) <= 5 * se
    # per-step Poisson counts have mean nu dt
    assert nb.counts.mean(axis=(0, 1)) == pytest.approx(js.nu * g.dt, rel=0.05)
    p = int(np.argmax(nb.counts.sum(axis=(1, 2))))
    assert len(nb.jumps(p)) == nb.counts[p].sum()


@pytest.mark.parametrize("kw", [dict(intensity=-1.0), dict(marks=(0.0, 1.0), probs=(0.5, 0.4))])
def test_jumpspec_validation(kw):
    with pytest.raises(ValueError):
        JumpSpec(**kw)
