import numpy as np
import pytest

from deepfbsde.errors import ConfigError, SimulationError
from deepfbsde.paths import (
    InitialStateSpec,
    ModelSpec,
    PathBatch,
    TimeGrid,
    build_uniform_grid,
    euler_step,
    sample_initial_states,
    simulate_increments,
    simulate_paths,
)
from deepfbsde.rng import RandomStream


def frozen_model(dim=1):
    return ModelSpec(dim=dim, drift=lambda t, x: np.zeros_like(x),
                     lognormal_vol=lambda t, x: np.zeros((dim, dim)),
                     short_rate=lambda t: 0.0)


# -- grids ------------------------------------------------------------------

def test_paper_grid():
    g = build_uniform_grid(0.0, 0.5, 50)
    assert g.times.size == 51
    np.testing.assert_allclose(g.dt, 0.01, rtol=0, atol=1e-15)


def test_single_step_grid():
    assert build_uniform_grid(0.0, 1.0, 1).times.tolist() == [0.0, 1.0]


def test_offset_grid():
    g = build_uniform_grid(0.25, 0.5, 5)
    np.testing.assert_allclose(g.dt, 0.05, atol=1e-15)
    assert g.t0 == 0.25 and g.maturity == 0.5


@pytest.mark.parametrize("times", [[0.0], [0.0, 0.0], [0.0, 0.2, 0.1], [0.0, np.nan]])
def test_bad_grids(times):
    with pytest.raises(ConfigError):
        TimeGrid(np.array(times))


def test_bad_step_count():
    with pytest.raises(ConfigError):
        build_uniform_grid(0.0, 1.0, 0)
    with pytest.raises(ConfigError):
        build_uniform_grid(1.0, 1.0, 5)


def test_index_of():
    g = build_uniform_grid(0.0, 0.5, 50)
    assert g.index_of(0.25) == 25
    with pytest.raises(ConfigError):
        g.index_of(0.255)


# -- initial states ------------------------------------------------------------

def test_fixed_start_copies():
    x = sample_initial_states(InitialStateSpec.fixed(120.0), 512, RandomStream(0))
    assert x.shape == (512, 1) and np.all(x == 120.0)


def test_uniform_box_law_of_large_numbers():
    x = sample_initial_states(InitialStateSpec.uniform(70.0, 170.0), 10**6, RandomStream(1))
    assert x.min() >= 70.0 and x.max() <= 170.0
    se = 100.0 / np.sqrt(12.0) / np.sqrt(x.size)
    assert abs(x.mean() - 120.0) < 3 * se


def test_degenerate_box():
    x = sample_initial_states(InitialStateSpec.uniform(95.0, 95.0), 10, RandomStream(1))
    assert np.all(x == 95.0)


def test_inverted_box_rejected():
    with pytest.raises(ConfigError):
        InitialStateSpec.uniform(170.0, 70.0)


# -- increments ------------------------------------------------------------------

def test_increment_moments():
    dt = 0.01
    g = build_uniform_grid(0.0, dt, 1)
    dW = simulate_increments(g, 10**6, 1, RandomStream(4))
    assert abs(dW.var() / dt - 1.0) < 0.01
    assert abs(dW.mean()) < 3 * np.sqrt(dt / 10**6)


def test_increments_reproducible():
    g = build_uniform_grid(0.0, 0.5, 50)
    a = simulate_increments(g, 64, 1, RandomStream(9, (1,)))
    b = simulate_increments(g, 64, 1, RandomStream(9, (1,)))
    assert np.array_equal(a, b)


# -- Euler step ------------------------------------------------------------------

def test_frozen_dynamics():
    x = np.array([[120.0], [80.0]])
    out = euler_step(x, 0.0, 0.01, np.array([[0.3], [-0.2]]), frozen_model())
    assert np.array_equal(out, x)


def test_deterministic_part():
    m = ModelSpec.black_scholes(0.06, 0.2)
    out = euler_step(np.array([[120.0]]), 0.0, 0.01, np.array([[0.0]]), m)
    assert out[0, 0] == pytest.approx(120.072, abs=1e-12)


def test_displayed_update():
    m = ModelSpec.black_scholes(0.06, 0.2)
    out = euler_step(np.array([[120.0]]), 0.0, 0.01, np.array([[0.05]]), m)
    assert out[0, 0] == pytest.approx(120.0 + 0.072 + 1.2, abs=1e-12)


def test_euler_rejects_non_finite():
    m = ModelSpec.black_scholes(0.06, 0.2)
    with pytest.raises(SimulationError):
        euler_step(np.array([[np.nan]]), 0.0, 0.01, np.array([[0.0]]), m)


def test_euler_two_factor_uses_matrix():
    sig = np.array([[0.2, 0.0], [0.1, 0.3]])
    m = ModelSpec(dim=2, drift=lambda t, x: np.zeros_like(x), lognormal_vol=lambda t, x: sig,
                  short_rate=lambda t: 0.0)
    x = np.array([[100.0, 50.0]])
    dW = np.array([[0.1, -0.2]])
    out = euler_step(x, 0.0, 0.01, dW, m)
    expected = x[0] + (sig * x[0][:, None]) @ dW[0]
    np.testing.assert_allclose(out[0], expected, rtol=1e-15)


# -- path simulation ---------------------------------------------------------

def test_zero_vol_paths_compound():
    g = build_uniform_grid(0.0, 0.5, 50)
    m = ModelSpec.black_scholes(0.06, 0.0)
    p = simulate_paths(g, m, InitialStateSpec.fixed(120.0), 4, RandomStream(0))
    np.testing.assert_allclose(p.states[:, -1, 0], 120.0 * 1.0006**50, rtol=1e-14)


def test_terminal_mean_risk_neutral():
    g = build_uniform_grid(0.0, 0.5, 50)
    m = ModelSpec.black_scholes(0.06, 0.2)
    n = 10**6
    xT = np.empty(0)
    for c in range(4):
        p = simulate_paths(g, m, InitialStateSpec.fixed(120.0), n // 4, RandomStream(2, (c,)))
        xT = np.concatenate([xT, p.states[:, -1, 0]])
    se = xT.std() / np.sqrt(n)
    # the Euler scheme in levels has the exact discrete mean x0 (1 + r dt)^N
    assert abs(xT.mean() - 120.0 * 1.0006**50) < 3 * se
    assert abs(xT.mean() - 120.0 * np.exp(0.03)) < 3 * se + 120.0 * (np.exp(0.03) - 1.0006**50)


def test_discounted_martingale_exact_scheme():
    g = build_uniform_grid(0.0, 0.5, 10)
    m = ModelSpec.black_scholes(0.06, 0.2)
    p = simulate_paths(g, m, InitialStateSpec.fixed(120.0), 10**5, RandomStream(3), scheme="exact")
    disc = np.exp(-0.06 * 0.5) * p.states[:, -1, 0]
    assert abs(disc.mean() - 120.0) < 3 * disc.std() / np.sqrt(disc.size)


def test_one_step_grid_matches_euler_step():
    g = build_uniform_grid(0.0, 0.01, 1)
    m = ModelSpec.black_scholes(0.06, 0.2)
    p = simulate_paths(g, m, InitialStateSpec.fixed(120.0), 8, RandomStream(6))
    direct = euler_step(p.states[:, 0], 0.0, 0.01, p.increments[:, 0], m)
    assert np.array_equal(p.states[:, 1], direct)


def test_paths_deterministic_and_shaped():
    g = build_uniform_grid(0.0, 0.5, 50)
    m = ModelSpec.black_scholes(0.06, 0.2)
    init = InitialStateSpec.uniform(70.0, 170.0)
    a = simulate_paths(g, m, init, 32, RandomStream(1, (4,)))
    b = simulate_paths(g, m, init, 32, RandomStream(1, (4,)))
    assert np.array_equal(a.states, b.states)
    assert a.states.shape == (32, 51, 1) and a.increments.shape == (32, 50, 1)


def test_negative_states_not_floored():
    g = build_uniform_grid(0.0, 1.0, 2)
    m = ModelSpec.black_scholes(0.0, 3.0)
    found = False
    for seed in range(20):
        p = simulate_paths(g, m, InitialStateSpec.fixed(1.0), 256, RandomStream(seed))
        found |= bool((p.states < 0).any())
    assert found


def test_path_batch_shape_check():
    with pytest.raises(SimulationError):
        PathBatch(np.linspace(0, 1, 3), np.zeros((4, 3, 1)), np.zeros((4, 3, 1)))


def test_exact_scheme_needs_model_support():
    g = build_uniform_grid(0.0, 1.0, 2)
    with pytest.raises(ConfigError):
        simulate_paths(g, frozen_model(), InitialStateSpec.fixed(1.0), 4, RandomStream(0),
                       scheme="exact")


def test_simulation_overflow_raises():
    g = build_uniform_grid(0.0, 1.0, 5)
    m = ModelSpec(dim=1, drift=lambda t, x: 1e308 * x, lognormal_vol=lambda t, x: np.zeros((1, 1)),
                  short_rate=lambda t: 0.0)
    with np.errstate(over="ignore", invalid="ignore"):
        with pytest.raises(SimulationError):
            simulate_paths(g, m, InitialStateSpec.fixed(10.0), 4, RandomStream(0))
