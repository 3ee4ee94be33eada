import csv
from functools import partial

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy.optimize import brentq

from deepfp.exceptions import DomainError, SimulationError
from deepfp.game import GameSpec
from deepfp.sde import (Partition, brownian_increments, delta0_fixed_point, mc_cost,
                        sample_initial, simulate_controlled, simulate_driftless)
from deepfp.systemic_risk import InterBankParams, build_game, optimal_policy, value_and_gradient


def _scalar_game(sigma=1.0, drift=0.0, running=0.0, terminal=None, multiplicative=False):
    def b(t, x, a):
        return drift * x + a[..., 0]

    def diff(t, x):
        if multiplicative:
            return (sigma * x)[..., None]
        return np.broadcast_to(np.array([[sigma]]), np.shape(x)[:-1] + (1, 1))

    return GameSpec(
        n=1, N=1, k=1, d_alpha=1, T=1.0, drift=b, diffusion=diff,
        phi=lambda t, x, a: b(t, x, a) / sigma,
        running_cost=lambda t, x, a: np.full(np.shape(x)[:-1] + (1,), running),
        terminal_cost=terminal or (lambda x: np.zeros(np.shape(x)[:-1] + (1,))),
        constant_sigma=None if multiplicative else np.array([[sigma]]))


def _zero_policy(t, x):
    return np.zeros(np.shape(x)[:-1] + (1, 1))


@settings(max_examples=30, deadline=None)
@given(st.lists(st.floats(1e-3, 1.0), min_size=1, max_size=30))
def test_partition_telescopes(steps):
    times = np.concatenate([[0.0], np.cumsum(steps)])
    part = Partition(times)
    assert abs(part.dt.sum() - part.T) < 1e-12
    assert part.mesh == max(np.diff(times))
    assert np.all(part.floor(part.left_points) == part.left_points)


def test_partition_validation():
    with pytest.raises(DomainError):
        Partition([0.0, 0.5, 0.5, 1.0])
    with pytest.raises(DomainError):
        Partition([0.1, 1.0])


def test_degenerate_initial_law_and_determinism():
    assert np.all(sample_initial(0.0, 3, 10, 1) == 0)
    assert np.array_equal(sample_initial(0.5, 3, 10, 1), sample_initial(0.5, 3, 10, 1))
    assert sample_initial(1.0, 3, 0, 1).shape == (0, 3)


def test_initial_law_moments():
    x = sample_initial(1.0, 1, 100_000, 3)
    assert abs(x.mean()) < 0.01
    assert abs(x.var() / (1 / 3) - 1) < 0.03


def test_increment_variance_matches_the_grid():
    part = Partition(np.array([0.0, 0.1, 0.4, 0.5, 1.0]))
    B = 40_000
    dw = brownian_increments(part, 3, B, 5)
    var = dw.var(axis=(0, 2))
    assert np.all(np.abs(var / part.dt - 1) < 5 / np.sqrt(B))


def test_no_noise_no_motion():
    g = _scalar_game(sigma=0.0)
    paths = simulate_driftless(g, Partition.uniform(1.0, 5), np.ones((4, 1)), 0)
    assert np.all(paths.states == 1.0)


def test_single_step_with_injected_increments(game5):
    part = Partition.uniform(1.0, 1)
    x0 = np.arange(5.0)[None]
    dw = np.linspace(-1, 1, 6)[None, None]
    paths = simulate_driftless(game5, part, x0, 0, increments=dw)
    assert np.allclose(paths.states[0, 1], x0[0] + game5.constant_sigma @ dw[0, 0], atol=0, rtol=1e-15)


def test_terminal_covariance(game5):
    B = 100_000
    paths = simulate_driftless(game5, Partition.uniform(1.0, 4), np.zeros((B, 5)), 2)
    d = paths.states[:, -1]
    cov = np.cov(d.T)
    target = game5.constant_sigma @ game5.constant_sigma.T
    # standard error of a sample covariance entry is sqrt((s_ii s_jj + s_ij^2) / B)
    se = np.sqrt((np.outer(np.diag(target), np.diag(target)) + target**2) / B)
    assert np.all(np.abs(cov - target) < 3.5 * se)


def test_driftless_equals_controlled_without_drift():
    g = build_game(InterBankParams(N=3, a=0.0))
    part = Partition.uniform(1.0, 6)
    x0 = sample_initial(1.0, 3, 8, 4)
    zero = lambda t, x: np.zeros(np.shape(x)[:-1] + (3, 1))
    a = simulate_driftless(g, part, x0, 9)
    b = simulate_controlled(g, zero, part, x0, 9)
    assert np.array_equal(a.states, b.states)


def _coupled_terminal_errors(game, policy, x0, levels, seed=0):
    B = x0.shape[0]
    finest = max(levels)
    inc = brownian_increments(Partition.uniform(1.0, finest), game.k, B, seed)
    out = {}
    for K in levels:
        coarse = inc.reshape(B, K, finest // K, game.k).sum(axis=2)
        out[K] = simulate_controlled(game, policy, Partition.uniform(1.0, K), x0, seed,
                                     increments=coarse).states[:, -1]
    return [float(np.mean(np.abs(out[K] - out[2 * K]))) for K in sorted(levels)[:-1]]


def test_strong_order_with_multiplicative_noise():
    # Euler-Maruyama converges with strong order 1/2 when the noise depends on the state
    g = _scalar_game(sigma=1.0, multiplicative=True)
    e = _coupled_terminal_errors(g, _zero_policy, np.ones((20_000, 1)), [8, 16, 32, 64, 128])
    ratios = np.array(e[:-1]) / np.array(e[1:])
    assert np.all(np.abs(ratios / np.sqrt(2) - 1) < 0.2)


def test_strong_order_on_the_inter_bank_sde(game5, riccati5):
    # the inter-bank noise is additive, where Euler-Maruyama coincides with Milstein (order 1)
    x0 = sample_initial(0.7, 5, 20_000, 1)
    e = _coupled_terminal_errors(game5, partial(optimal_policy, riccati5), x0, [20, 40, 80, 160])
    ratios = np.array(e[:-1]) / np.array(e[1:])
    assert np.all(np.abs(ratios / 2 - 1) < 0.2)


def test_cost_without_running_term_is_mean_terminal():
    g = _scalar_game(terminal=lambda x: x**2)
    paths = simulate_driftless(g, Partition.uniform(1.0, 5), sample_initial(1.0, 1, 500, 0), 0)
    mean, se = mc_cost(g, _zero_policy, paths)
    assert mean[0] == pytest.approx(np.mean(paths.states[:, -1, 0] ** 2), rel=1e-14)
    assert se[0] > 0


def test_unit_running_cost_telescopes():
    g = _scalar_game(running=1.0)
    part = Partition(np.array([0.0, 0.13, 0.5, 0.77, 1.0]))
    paths = simulate_driftless(g, part, np.zeros((3, 1)), 0)
    mean, _ = mc_cost(g, _zero_policy, paths)
    assert mean[0] == pytest.approx(1.0, abs=1e-12)


def test_empty_batch_cost():
    g = _scalar_game()
    paths = simulate_driftless(g, Partition.uniform(1.0, 2), np.zeros((0, 1)), 0)
    with pytest.raises(DomainError):
        mc_cost(g, _zero_policy, paths)


def test_oracle_cost_matches_the_value(game5, riccati5):
    pol = partial(optimal_policy, riccati5)
    B = 20_000
    x0 = sample_initial(0.7, 5, B, 8)
    v0, _ = value_and_gradient(riccati5, 0.0, x0)
    costs = {}
    for K in (40, 80):
        part = Partition.uniform(1.0, K)
        paths = simulate_controlled(game5, pol, part, x0, 8)
        costs[K] = mc_cost(game5, pol, paths)
    mean, se = costs[40]
    # first-order time bias, estimated from the refinement
    bias = 2 * np.abs(costs[40][0] - costs[80][0])
    assert np.all(np.abs(mean - v0.mean(axis=0)) <= 3 * se + bias)


def test_failing_policy_reports_its_step():
    g = _scalar_game()

    def bad(t, x):
        if t[0] > 0.5:
            raise ValueError("boom")
        return _zero_policy(t, x)

    with pytest.raises(SimulationError) as info:
        simulate_controlled(g, bad, Partition.uniform(1.0, 4), np.zeros((2, 1)), 0)
    assert info.value.step == 3


@pytest.mark.filterwarnings("ignore:overflow")
def test_overflow_is_reported():
    g = _scalar_game(drift=1e308)
    with pytest.raises(SimulationError, match="non-finite"):
        simulate_controlled(g, _zero_policy, Partition.uniform(1.0, 4), np.ones((2, 1)), 0)


def test_fixed_point_without_noise_contracts_to_zero():
    g = _scalar_game(sigma=0.0)
    with pytest.warns(RuntimeWarning):
        delta, converged = delta0_fixed_point(g, _zero_policy, Partition.uniform(1.0, 4), batch=64)
    assert not converged
    assert delta < 3.0**-9


def test_fixed_point_of_a_brownian_state():
    part = Partition.uniform(1.0, 10)
    g = _scalar_game(sigma=0.8)
    delta, converged = delta0_fixed_point(g, _zero_policy, part, batch=50_000, rel_tol=1e-4,
                                          max_iter=60)
    assert converged
    # stddev at t_k is sqrt(delta^2 / 3 + sigma^2 t_k); the fixed point equates delta with its mean
    target = brentq(lambda d: np.mean(np.sqrt(d**2 / 3 + 0.64 * part.times)) - d, 1e-6, 10)
    assert delta == pytest.approx(target, rel=0.01)


def test_fixed_point_is_deterministic(game5, riccati5):
    pol = partial(optimal_policy, riccati5)
    part = Partition.uniform(1.0, 10)
    a = delta0_fixed_point(game5, pol, part, batch=512, seed=3)
    b = delta0_fixed_point(game5, pol, part, batch=512, seed=3)
    assert a == b


def test_path_csv_export(tmp_path, game5):
    paths = simulate_driftless(game5, Partition.uniform(1.0, 3), np.zeros((2, 5)), 0)
    out = tmp_path / "paths.csv"
    paths.to_csv(out)
    rows = list(csv.reader(open(out)))
    assert rows[0] == ["path_id", "k", "t"] + [f"x_{j}" for j in range(1, 6)]
    assert len(rows) == 1 + 2 * 4
    assert float(rows[-1][3]) == paths.states[1, 3, 0]
