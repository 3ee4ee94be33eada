import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from deepfp.exceptions import ConvergenceError, NumericError, OptimizationError, ShapeError
from deepfp.game import (GameSpec, best_response, best_responses, drift_relation_residual,
                         hamiltonian, min_norm_phi, nash_fixed_point)
from deepfp.systemic_risk import InterBankParams, build_game


def _quadratic_game(linear=0.0, cross=0.0, curvature=1.0):
    """Two players, x in R^2, dX = alpha dt + dW, f^i = c/2 a_i^2 + l a_i + k a_0 a_1."""
    def drift(t, x, alpha):
        return alpha[..., 0]

    def diffusion(t, x):
        return np.broadcast_to(np.eye(2), np.shape(x)[:-1] + (2, 2))

    def running(t, x, alpha):
        a = alpha[..., 0]
        own = 0.5 * curvature * a**2 + linear * a
        return own + cross * a[..., ::-1] * a

    return GameSpec(n=2, N=2, k=2, d_alpha=1, T=1.0, drift=drift, diffusion=diffusion,
                    phi=min_norm_phi(drift, constant_sigma=np.eye(2)), running_cost=running,
                    terminal_cost=lambda x: np.zeros(np.shape(x)[:-1] + (2,)))


def _zero_game():
    zeros = lambda t, x, a: np.zeros(np.shape(x)[:-1] + (2,))
    return GameSpec(n=2, N=2, k=2, d_alpha=1, T=1.0, drift=zeros,
                    diffusion=lambda t, x: np.broadcast_to(np.eye(2), np.shape(x)[:-1] + (2, 2)),
                    phi=zeros, running_cost=zeros, terminal_cost=lambda x: np.zeros(2))


def test_hamiltonian_vanishes_for_zero_game(rng):
    g = _zero_game()
    h = hamiltonian(g, 1, 0.3, rng.normal(size=2), rng.normal(size=(2, 1)), rng.normal(size=2))
    assert h == 0.0


def test_zero_adjoint_gives_running_cost(game5, rng):
    x, alpha = rng.normal(size=5), rng.normal(size=(5, 1))
    h = hamiltonian(game5, 2, 0.4, x, alpha, np.zeros(6))
    assert h == pytest.approx(game5.running_cost(0.4, x, alpha)[2], abs=0, rel=0)


def test_hamiltonian_hand_value():
    # N=2, sigma=1, rho=0, a=0.1, q=0.1, eps=0.5
    # x=(0.3,-0.5): xbar=-0.1, y=(-0.4, 0.4); alpha=(0.2,-0.1): b=(0.16,-0.06)
    # Sigma=[0 I], so phi=(0, 0.16, -0.06); p=(0.7,-0.4,1.1): phi.p=-0.13
    # f^0 = 0.02 + 0.008 + 0.04 = 0.068; H^0 = -0.062
    g = build_game(InterBankParams(a=0.1, q=0.1, c=0.5, eps=0.5, rho=0.0, sigma=1.0, N=2))
    h = hamiltonian(g, 0, 0.5, [0.3, -0.5], [[0.2], [-0.1]], [0.7, -0.4, 1.1])
    assert h == pytest.approx(-0.062, abs=1e-14)


def test_hamiltonian_shape_and_finiteness_errors(game5):
    with pytest.raises(ShapeError):
        hamiltonian(game5, 0, 0.0, np.zeros(4), np.zeros((5, 1)), np.zeros(6))
    with pytest.raises(ShapeError):
        hamiltonian(game5, 0, 0.0, np.zeros(5), np.zeros((5, 1)), np.zeros(5))
    bad = GameSpec(**{**game5.__dict__, "running_cost": lambda t, x, a: np.full(5, np.nan)})
    with pytest.raises(NumericError, match="running_cost"):
        hamiltonian(bad, 0, 0.0, np.zeros(5), np.zeros((5, 1)), np.zeros(6))


def test_best_response_pure_quadratic_is_zero():
    beta = best_response(_quadratic_game(), 0, 0.0, np.zeros(2), np.zeros((2, 1)), np.zeros(2))
    assert np.allclose(beta, 0.0, atol=1e-12)


def test_best_response_shifted_quadratic():
    beta = best_response(_quadratic_game(linear=2.0), 0, 0.0, np.zeros(2), np.zeros((2, 1)),
                         np.zeros(2))
    assert beta == pytest.approx([-2.0], abs=1e-9)


def test_newton_matches_analytic_interbank(game5, rng):
    B = 100
    t = rng.uniform(0, 1, B)
    x = rng.normal(size=(B, 5))
    alpha = rng.normal(size=(B, 5, 1))
    p = rng.normal(size=(B, 6))
    for i in (0, 3):
        exact = best_response(game5, i, t, x, alpha, p)
        newton = best_response(game5, i, t, x, alpha, p, method="newton")
        assert np.max(np.abs(exact - newton)) < 1e-10


def test_newton_rejects_concave_hamiltonian():
    with pytest.raises(OptimizationError):
        best_response(_quadratic_game(curvature=-1.0), 0, 0.0, np.zeros(2), np.zeros((2, 1)),
                      np.zeros(2))


def test_fixed_point_of_decoupled_map_takes_one_best_response():
    g = _quadratic_game(linear=0.5)
    p = np.array([[0.3, 0.0], [0.0, -0.2]])
    alpha, it, res = nash_fixed_point(g, 0.0, np.zeros(2), p, full_output=True)
    assert it == 1
    assert alpha[:, 0] == pytest.approx([-0.8, -0.3], abs=1e-9)


def test_fixed_point_with_cross_terms_matches_linear_solve():
    kappa = 0.4
    g = _quadratic_game(cross=kappa)
    p = np.array([[0.7, 0.1], [-0.3, -0.5]])
    # stationarity: p_ii + a_i + kappa a_j = 0
    direct = np.linalg.solve([[1.0, kappa], [kappa, 1.0]], -np.diag(p))
    alpha = nash_fixed_point(g, 0.0, np.zeros(2), p)
    assert alpha[:, 0] == pytest.approx(direct, abs=1e-9)


def test_fixed_point_started_at_solution_returns_it_unchanged():
    g = _quadratic_game(cross=0.4)
    p = np.array([[0.7, 0.1], [-0.3, -0.5]])
    star = nash_fixed_point(g, 0.0, np.zeros(2), p)
    again, it, res = nash_fixed_point(g, 0.0, np.zeros(2), p, alpha_init=star, full_output=True)
    assert it == 0
    assert np.array_equal(again, star)


def test_fixed_point_reports_failure_when_not_a_contraction():
    # the antisymmetric mode of the best-response map has gain +1.5; damping cannot tame it
    g = _quadratic_game(cross=1.5)
    with pytest.raises(ConvergenceError) as info:
        nash_fixed_point(g, 0.0, np.zeros(2), np.array([[1.0, 0.0], [0.0, -1.0]]), max_iter=30)
    assert info.value.residual is not None


_points = st.integers(min_value=0, max_value=2**31 - 1)


@settings(max_examples=25, deadline=None)
@given(seed=_points, rho=st.floats(0.0, 0.95), N=st.integers(1, 6))
def test_sigma_phi_equals_drift(seed, rho, N):
    g = build_game(InterBankParams(N=N, rho=rho))
    r = np.random.default_rng(seed)
    B = 50
    res = drift_relation_residual(g, r.uniform(0, 1, B), r.normal(size=(B, N)),
                                  r.normal(size=(B, N, 1)))
    assert np.max(res) <= 1e-10


@settings(max_examples=25, deadline=None)
@given(seed=_points)
def test_best_response_beats_perturbations(seed):
    g = build_game(InterBankParams(N=4))
    r = np.random.default_rng(seed)
    t, x, alpha, p = r.uniform(), r.normal(size=4), r.normal(size=(4, 1)), r.normal(size=5)
    beta = best_response(g, 1, t, x, alpha, p)
    base = hamiltonian(g, 1, t, x, np.vstack([alpha[:1], beta[None], alpha[2:]]), p)
    delta = r.uniform(-1e-2, 1e-2, size=100)
    trial = np.repeat(alpha[None], 100, axis=0)
    trial[:, 1, 0] = beta[0] + delta
    h = hamiltonian(g, 1, np.full(100, t), np.repeat(x[None], 100, axis=0), trial,
                    np.repeat(p[None], 100, axis=0))
    assert np.all(base <= h + 1e-15)


@settings(max_examples=25, deadline=None)
@given(seed=_points)
def test_fixed_point_residual(seed):
    g = build_game(InterBankParams(N=3))
    r = np.random.default_rng(seed)
    t, x, p = r.uniform(size=8), r.normal(size=(8, 3)), r.normal(size=(8, 4, 3))
    star = nash_fixed_point(g, t, x, p, method="iterate")
    assert np.max(np.abs(star - best_responses(g, t, x, star, p))) <= 1e-9


@settings(max_examples=25, deadline=None)
@given(seed=_points, i=st.integers(1, 4))
def test_fixed_point_permutation_equivariance(seed, i):
    g = build_game(InterBankParams(N=5))
    r = np.random.default_rng(seed)
    x, p = r.normal(size=5), r.normal(size=(6, 5))
    sp, npm = g.symmetry(i)
    star = nash_fixed_point(g, 0.3, x, p, method="iterate")
    # permute states, players (columns of p) and the idiosyncratic noises together
    moved = nash_fixed_point(g, 0.3, x[sp], p[npm][:, sp], method="iterate")
    assert np.allclose(moved, star[sp], atol=1e-12)
