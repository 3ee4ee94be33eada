import numpy as np
import pytest
from scipy.integrate import solve_ivp

from deepfp.exceptions import DomainError
from deepfp.game import best_responses, nash_fixed_point
from deepfp.systemic_risk import (InterBankParams, build_game, hjb_residual, optimal_policy,
                                  oracle_z, riccati_solve, sigma_matrix, value_and_gradient)


def test_everything_vanishes_at_the_origin(game5):
    x, alpha = np.zeros(5), np.zeros((5, 1))
    assert np.all(game5.drift(0.0, x, alpha) == 0)
    assert np.all(game5.running_cost(0.0, x, alpha) == 0)
    assert np.all(game5.terminal_cost(x) == 0)


def test_sigma_rows_have_norm_sigma(params5):
    p = InterBankParams(N=5, sigma=1.7, rho=0.3)
    assert np.allclose(np.sum(sigma_matrix(p) ** 2, axis=1), 1.7**2, rtol=1e-14)


def test_phi_matches_pointwise_least_squares(game5, rng):
    sig = game5.constant_sigma
    for _ in range(1000 // 50):
        t, x, a = rng.uniform(size=50), rng.normal(size=(50, 5)), rng.normal(size=(50, 5, 1))
        b = game5.drift(t, x, a)
        phi = game5.phi(t, x, a)
        for j in range(50):
            ref = np.linalg.lstsq(sig, b[j], rcond=None)[0]
            assert np.max(np.abs(sig @ phi[j] - b[j])) < 1e-10
            assert np.allclose(phi[j], ref, atol=1e-12)


def test_parameter_validation():
    with pytest.raises(DomainError):
        InterBankParams(sigma=0.0)
    with pytest.raises(DomainError):
        InterBankParams(rho=1.5)
    with pytest.warns(RuntimeWarning):
        InterBankParams(q=1.0, eps=0.5)


def test_terminal_condition_and_hjb_gate(params5, riccati5):
    assert riccati5.eta[-1] == params5.c
    assert riccati5.mu0[-1] == 0.0
    res = hjb_residual(build_game(params5), riccati5.grid, riccati5.eta, riccati5.mu0, params5)
    assert np.max(res) < 1e-8


def test_step_halving(params5):
    coarse = riccati_solve(params5, n_grid=2001, validate=False)
    fine = riccati_solve(params5, n_grid=4001, validate=False)
    assert abs(coarse.eta[0] - fine.eta[0]) < 1e-10
    assert np.all(np.isfinite(fine.eta))


def test_eta_against_an_independent_integrator(params5, riccati5):
    p = params5

    def rhs(t, y):
        return [2 * (p.a + p.q) * y[0] + (1 - 1 / p.N**2) * y[0] ** 2 - (p.eps - p.q**2)]

    sol = solve_ivp(rhs, (p.T, 0.0), [p.c], rtol=1e-12, atol=1e-14, dense_output=True)
    t = np.linspace(0, 1, 17)
    assert np.allclose(riccati5.eta_at(t), sol.sol(t)[0], atol=1e-9)


def test_policy_update_iteration_converges_to_the_riccati_gain(params5, riccati5):
    # every player on alpha_j = kappa(t) (xbar - x_j): player i's value is eta/2 (xbar - x_i)^2 + mu
    # with eta' = 2 (a + kappa) eta - kappa^2 + 2 q kappa - eps, and the improved gain is
    # q + (1 - 1/N) eta
    p = params5
    grid = np.linspace(0, p.T, 401)
    kappa = np.zeros_like(grid)
    for _ in range(8):
        def rhs(t, y, kap=kappa):
            k = np.interp(t, grid, kap)
            return [2 * (p.a + k) * y[0] - k**2 + 2 * p.q * k - p.eps]

        sol = solve_ivp(rhs, (p.T, 0.0), [p.c], rtol=1e-12, atol=1e-14, dense_output=True)
        new = p.q + (1 - 1 / p.N) * sol.sol(grid)[0]
        step = np.max(np.abs(new - kappa))
        kappa = new
    assert step < 1e-7
    assert np.allclose(kappa, riccati5.policy_coefficient(grid), atol=1e-6)


def test_policy_is_zero_on_the_diagonal(riccati5):
    x = np.full((4, 5), 0.37)
    assert np.all(optimal_policy(riccati5, np.linspace(0, 1, 4), x) == 0)


def test_terminal_gain_matches_the_best_response(game5, riccati5, rng):
    x = rng.normal(size=(20, 5))
    t = np.ones(20)
    br = best_responses(game5, t, x, np.zeros((20, 5, 1)), oracle_z(riccati5, t, x))
    y = x.mean(axis=1, keepdims=True) - x
    gain = br[..., 0] / y
    p = riccati5.params
    assert np.allclose(gain, p.q + (1 - 1 / p.N) * p.c, rtol=1e-12)


def test_one_best_response_step_leaves_the_oracle_fixed(game5, riccati5, rng):
    t, x = rng.uniform(size=200), rng.normal(size=(200, 5))
    star = optimal_policy(riccati5, t, x)
    br = best_responses(game5, t, x, star, oracle_z(riccati5, t, x))
    assert np.max(np.abs(br[:, 0] - star[:, 0])) < 1e-6


def test_full_fixed_point_reproduces_the_oracle(game5, riccati5, rng):
    t, x = rng.uniform(size=200), rng.normal(size=(200, 5))
    alpha = nash_fixed_point(game5, t, x, oracle_z(riccati5, t, x), method="iterate")
    assert np.max(np.abs(alpha - optimal_policy(riccati5, t, x))) < 1e-8


def test_value_on_the_diagonal(riccati5):
    v, g = value_and_gradient(riccati5, 0.3, np.full(5, -1.2))
    assert np.allclose(v, riccati5.mu_at(0.3), rtol=0, atol=1e-15)
    assert np.all(g == 0)


def test_gradient_matches_central_differences(riccati5, rng):
    t, x, h = 0.42, rng.normal(size=5), 1e-5
    _, grad = value_and_gradient(riccati5, t, x)
    fd = np.empty((5, 5))
    for j in range(5):
        e = np.zeros(5)
        e[j] = h
        fd[j] = (value_and_gradient(riccati5, t, x + e)[0] - value_and_gradient(riccati5, t, x - e)[0]) / (2 * h)
    scale = np.max(np.abs(grad))
    assert np.max(np.abs(grad - fd)) / scale < 1e-6


def test_swapping_two_banks_swaps_their_values(riccati5, rng):
    x = rng.normal(size=5)
    v, _ = value_and_gradient(riccati5, 0.1, x)
    v2, _ = value_and_gradient(riccati5, 0.1, x[[1, 0, 2, 3, 4]])
    assert v2[0] == pytest.approx(v[1]) and v2[1] == pytest.approx(v[0])


def test_time_outside_the_horizon(riccati5):
    with pytest.raises(DomainError):
        optimal_policy(riccati5, 1.5, np.zeros(5))
    with pytest.raises(DomainError):
        value_and_gradient(riccati5, -0.1, np.zeros(5))
