"""Inter-bank lending game with common noise and its closed-form solution.

Bank ``i`` holds log-reserves ``X^i`` with

    dX^i = [a (xbar - X^i) + alpha^i] dt + sigma (rho dW^0 + sqrt(1 - rho^2) dW^i)

and costs ``f^i = alpha^2/2 - q alpha (xbar - x^i) + eps/2 (xbar - x^i)^2``,
``g^i = c/2 (xbar - x^i)^2``. The equilibrium value is quadratic,
``V^i = eta(t)/2 (xbar - x^i)^2 + mu(t)``, where ``eta`` solves

    eta' = 2 (a + q) eta + (1 - 1/N^2) eta^2 - (eps - q^2),   eta(T) = c
    mu'  = -sigma^2 (1 - rho^2) (1 - 1/N) eta / 2,           mu(T) = 0

and the equilibrium control is ``(q + (1 - 1/N) eta(t)) (xbar - x^i)``.
"""
import warnings
from dataclasses import asdict, dataclass
from functools import lru_cache

import numpy as np

from ._validation import as_float_array, check_last_dims
from .exceptions import ConstructionError, DerivationError, DomainError, IntegrationError
from .game import GameSpec, hamiltonians, nash_fixed_point

HJB_TOL = 1e-8
DEFAULT_GRID = 4001


@dataclass(frozen=True)
class InterBankParams:
    a: float = 0.1
    q: float = 0.1
    c: float = 0.5
    eps: float = 0.5
    rho: float = 0.2
    sigma: float = 1.0
    N: int = 10
    T: float = 1.0

    def __post_init__(self):
        if not self.sigma > 0:
            raise DomainError(f"sigma must be > 0, got {self.sigma}")
        if not 0 <= self.rho <= 1:
            raise DomainError(f"rho must lie in [0, 1], got {self.rho}")
        if not self.c >= 0:
            raise DomainError(f"c must be >= 0, got {self.c}")
        if int(self.N) != self.N or self.N < 1:
            raise DomainError(f"N must be a positive integer, got {self.N}")
        if not self.T > 0:
            raise DomainError(f"T must be > 0, got {self.T}")
        if self.q**2 > self.eps:
            warnings.warn(
                f"q^2 = {self.q**2:g} exceeds eps = {self.eps:g}; the running cost is not convex",
                RuntimeWarning,
                stacklevel=3,
            )

    def to_dict(self):
        return asdict(self)


def sigma_matrix(params):
    N = params.N
    sig = np.zeros((N, N + 1))
    sig[:, 0] = params.sigma * params.rho
    sig[:, 1:] = params.sigma * np.sqrt(1.0 - params.rho**2) * np.eye(N)
    return sig


def _deviation(x):
    return np.mean(x, axis=-1, keepdims=True) - x


def _swap(size, i, j):
    perm = np.arange(size)
    perm[[i, j]] = perm[[j, i]]
    return perm


def build_game(params):
    """Assemble the :class:`GameSpec` of the inter-bank game."""
    N = params.N
    sig = sigma_matrix(params)
    if np.linalg.matrix_rank(sig) < N:
        raise ConstructionError("diffusion matrix is rank deficient; Sigma phi = b has no solution")
    pinv = np.linalg.pinv(sig)  # (N+1, N)
    pinv_t = pinv.T
    a, q, c, eps = params.a, params.q, params.c, params.eps

    def drift(t, x, alpha):
        return a * _deviation(x) + alpha[..., 0]

    def diffusion(t, x):
        return np.broadcast_to(sig, np.shape(x)[:-1] + sig.shape)

    def phi(t, x, alpha):
        return drift(t, x, alpha) @ pinv_t

    def running_cost(t, x, alpha):
        y = _deviation(x)
        u = alpha[..., 0]
        return 0.5 * u**2 - q * u * y + 0.5 * eps * y**2

    def terminal_cost(x):
        return 0.5 * c * _deviation(x) ** 2

    def best_response(i, t, x, alpha, p_i):
        u = np.asarray(p_i) @ pinv[:, i]
        return (q * _deviation(x)[..., i] - u)[..., None]

    def fixed_point(t, x, p):
        u = np.einsum("...ki,ki->...i", np.asarray(p), pinv)
        return (q * _deviation(x) - u)[..., None]

    def symmetry(i):
        return _swap(N, 0, i), _swap(N + 1, 1, i + 1)

    return GameSpec(
        n=N, N=N, k=N + 1, d_alpha=1, T=float(params.T),
        drift=drift, diffusion=diffusion, phi=phi,
        running_cost=running_cost, terminal_cost=terminal_cost,
        best_response=best_response, fixed_point=fixed_point,
        separable=True, symmetry=symmetry, constant_sigma=sig,
        name="inter_bank",
    )


def _rhs(params, y):
    eta = y[0]
    N = params.N
    d_eta = 2 * (params.a + params.q) * eta + (1 - 1 / N**2) * eta**2 - (params.eps - params.q**2)
    d_mu = -0.5 * params.sigma**2 * (1 - params.rho**2) * (1 - 1 / N) * eta
    return np.array([d_eta, d_mu])


def _rk4_backward(params, n_grid):
    grid = np.linspace(0.0, params.T, n_grid)
    out = np.empty((n_grid, 2))
    y = np.array([params.c, 0.0])
    out[-1] = y
    for j in range(n_grid - 1, 0, -1):
        h = grid[j - 1] - grid[j]
        k1 = _rhs(params, y)
        k2 = _rhs(params, y + 0.5 * h * k1)
        k3 = _rhs(params, y + 0.5 * h * k2)
        k4 = _rhs(params, y + h * k3)
        y = y + h / 6 * (k1 + 2 * k2 + 2 * k3 + k4)
        if not np.all(np.isfinite(y)):
            raise IntegrationError(f"Riccati solution blew up at t = {grid[j - 1]:.6g}")
        out[j - 1] = y
    return grid, out[:, 0], out[:, 1]


@dataclass(frozen=True, eq=False)
class RiccatiSolution:
    grid: np.ndarray
    eta: np.ndarray
    mu0: np.ndarray
    params: InterBankParams

    @property
    def T(self):
        return self.params.T

    def _check_time(self, t):
        t = np.asarray(t, dtype=np.float64)
        if np.any(t < -1e-12) or np.any(t > self.T + 1e-12):
            raise DomainError(f"t must lie in [0, {self.T}]")
        return t

    def eta_at(self, t):
        return np.interp(self._check_time(t), self.grid, self.eta)

    def mu_at(self, t):
        return np.interp(self._check_time(t), self.grid, self.mu0)

    def policy_coefficient(self, t):
        """Feedback gain multiplying ``xbar - x^i`` in the equilibrium control."""
        return self.params.q + (1 - 1 / self.params.N) * self.eta_at(t)

    def to_csv(self, path):
        rows = np.column_stack([self.grid, self.eta, self.mu0])
        np.savetxt(path, rows, delimiter=",", header="t,eta,mu", comments="", fmt="%.17g")


def hjb_residual(game, grid, eta, mu, params, n_points=10_000, seed=0, scale=1.0):
    """Residual of the quadratic ansatz in the HJB system at random ``(t, x)``.

    Times are drawn from the interior grid nodes so that time derivatives of
    ``eta`` and ``mu`` can be taken with a fourth-order central stencil. The
    minimizer, Hamiltonian and trace term come from the generic game
    machinery, independently of the Riccati right-hand side.
    """
    rng = np.random.default_rng(seed)
    N = params.N
    h = grid[1] - grid[0]
    idx = rng.integers(2, len(grid) - 2, size=n_points)

    def d_dt(v):
        return (-v[idx + 2] + 8 * v[idx + 1] - 8 * v[idx - 1] + v[idx - 2]) / (12 * h)

    t = grid[idx]
    x = rng.normal(scale=scale, size=(n_points, N))
    y = _deviation(x)
    w = np.full((N, N), 1.0 / N) - np.eye(N)  # column i: d(xbar - x^i)/dx
    grad = eta[idx][:, None, None] * y[:, None, :] * w[None, :, :]  # (P, n, N)
    sig = game.constant_sigma
    p = np.einsum("nk,...ni->...ki", sig, grad)
    alpha = nash_fixed_point(game, t, x, p, method="iterate")
    ham = hamiltonians(game, t, x, alpha, p)
    trace = eta[idx][:, None] * np.sum((sig.T @ w) ** 2, axis=0)[None, :]
    v_t = 0.5 * d_dt(eta)[:, None] * y**2 + d_dt(mu)[:, None]
    return np.abs(v_t + ham + 0.5 * trace)


@lru_cache(maxsize=32)
def _validated(params):
    grid, eta, mu = _rk4_backward(params, DEFAULT_GRID)
    res = hjb_residual(build_game(params), grid, eta, mu, params)
    worst = float(np.max(res))
    if worst >= HJB_TOL:
        raise DerivationError(f"HJB residual of the quadratic ansatz is {worst:.3e} >= {HJB_TOL:g}")
    return worst


def riccati_solve(params, n_grid=DEFAULT_GRID, validate=True):
    """Integrate the Riccati terminal-value problem backward with classic RK4.

    With ``validate`` the ODE is first checked against the HJB system on a
    fine grid; a residual above ``1e-8`` raises :class:`DerivationError`.
    """
    if n_grid < 2:
        raise DomainError("n_grid must be >= 2")
    if validate:
        _validated(params)
    grid, eta, mu = _rk4_backward(params, int(n_grid))
    for arr in (grid, eta, mu):
        arr.setflags(write=False)
    return RiccatiSolution(grid=grid, eta=eta, mu0=mu, params=params)


def optimal_policy(riccati, t, x):
    """Equilibrium joint control, shape ``x.shape[:-1] + (N, 1)``."""
    x = check_last_dims(as_float_array(x, "x"), (riccati.params.N,), "x")
    coef = riccati.policy_coefficient(t)
    return (np.asarray(coef)[..., None] * _deviation(x))[..., None]


def value_and_gradient(riccati, t, x):
    """Values ``V`` (shape ``S + (N,)``) and gradients (shape ``S + (n, N)``)."""
    N = riccati.params.N
    x = check_last_dims(as_float_array(x, "x"), (N,), "x")
    eta = np.asarray(riccati.eta_at(t))[..., None]
    y = _deviation(x)
    values = 0.5 * eta * y**2 + np.asarray(riccati.mu_at(t))[..., None]
    w = np.full((N, N), 1.0 / N) - np.eye(N)
    grad = (eta * y)[..., None, :] * w
    return values, grad


def oracle_z(riccati, t, x):
    """``Sigma^T grad V`` for all players, shape ``S + (k, N)``."""
    _, grad = value_and_gradient(riccati, t, x)
    return np.einsum("nk,...ni->...ki", sigma_matrix(riccati.params), grad)
