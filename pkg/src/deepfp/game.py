"""N-player game description and the Hamiltonian machinery.

Every callback of a :class:`GameSpec` is vectorized over leading batch
dimensions. With batch shape ``S`` the conventions are

* ``t``: array of shape ``S`` (scalars are broadcast by the public helpers)
* ``x``: ``S + (n,)``
* ``alpha`` (joint control): ``S + (N, d_alpha)``, player-major
* ``p`` (adjoint columns): ``S + (k, N)``; column ``i`` belongs to player ``i``

Players are indexed ``0 .. N-1``.
"""
from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np

from ._validation import as_float_array, check_finite, check_last_dims, check_player
from .exceptions import ConvergenceError, OptimizationError, ShapeError

NEWTON_TOL = 1e-10
NEWTON_MAX_ITER = 50
FIXED_POINT_TOL = 1e-10
FIXED_POINT_MAX_ITER = 200


@dataclass(frozen=True)
class GameSpec:
    """Complete description of an N-player stochastic differential game.

    Attributes
    ----------
    n, N, k, d_alpha : int
        State dimension, number of players, Brownian dimension and the
        per-player control dimension.
    T : float
        Horizon.
    drift, diffusion, phi, running_cost, terminal_cost : callable
        ``b(t, x, alpha)``, ``Sigma(t, x)``, ``phi(t, x, alpha)`` with
        ``Sigma @ phi == b``, ``f(t, x, alpha)`` (one entry per player) and
        ``g(x)`` (one entry per player).
    best_response : callable, optional
        ``best_response(i, t, x, alpha, p_i)`` returning the analytic
        minimizer of player ``i``'s Hamiltonian over its own control.
    fixed_point : callable, optional
        ``fixed_point(t, x, p)`` returning the analytic joint fixed point.
    separable : bool
        True when player ``i``'s best response does not depend on the other
        players' controls. Policy recursions can then skip the chain.
    symmetry : callable, optional
        ``symmetry(i) -> (state_perm, noise_perm)``: player ``i`` sees the
        game exactly as player 0 does after permuting state coordinates by
        ``state_perm`` and noise coordinates by ``noise_perm`` (involutions).
    constant_sigma : ndarray, optional
        The diffusion matrix when it does not depend on ``(t, x)``.
    """

    n: int
    N: int
    k: int
    d_alpha: int
    T: float
    drift: Callable
    diffusion: Callable
    phi: Callable
    running_cost: Callable
    terminal_cost: Callable
    best_response: Optional[Callable] = None
    fixed_point: Optional[Callable] = None
    separable: bool = False
    symmetry: Optional[Callable] = None
    constant_sigma: Optional[np.ndarray] = None
    name: str = "game"


def _prepare(game, t, x, alpha=None):
    x = check_last_dims(as_float_array(x, "x"), (game.n,), "x")
    batch = x.shape[:-1]
    t = np.broadcast_to(as_float_array(t, "t"), batch)
    if alpha is not None:
        alpha = as_float_array(alpha, "alpha")
        if alpha.shape != batch + (game.N, game.d_alpha):
            raise ShapeError(
                f"joint control must have shape {batch + (game.N, game.d_alpha)}, got {alpha.shape}"
            )
    return t, x, alpha


def eval_phi(game, t, x, alpha):
    return check_finite(game.phi(t, x, alpha), "phi")


def hamiltonian(game, i, t, x, alpha, p_i):
    """Player ``i``'s Hamiltonian ``phi(t, x, alpha) . p_i + f^i(t, x, alpha)``."""
    i = check_player(game, i)
    t, x, alpha = _prepare(game, t, x, alpha)
    p_i = as_float_array(p_i, "p_i")
    if p_i.shape != x.shape[:-1] + (game.k,):
        raise ShapeError(f"p_i must have shape {x.shape[:-1] + (game.k,)}, got {p_i.shape}")
    phi = eval_phi(game, t, x, alpha)
    f = check_finite(game.running_cost(t, x, alpha), "running_cost")
    return np.sum(phi * p_i, axis=-1) + f[..., i]


def hamiltonians(game, t, x, alpha, p):
    """All players' Hamiltonians at once; ``p`` has shape ``S + (k, N)``."""
    t, x, alpha = _prepare(game, t, x, alpha)
    phi = eval_phi(game, t, x, alpha)
    f = check_finite(game.running_cost(t, x, alpha), "running_cost")
    return np.einsum("...k,...kn->...n", phi, p) + f


def _with_own(alpha, i, beta):
    out = np.array(alpha, dtype=np.float64, copy=True)
    out[..., i, :] = beta
    return out


def best_response(game, i, t, x, alpha, p_i, method="auto"):
    """Minimize player ``i``'s Hamiltonian over its own control.

    ``alpha`` is the full joint control; its row ``i`` is ignored. The
    analytic callback is used when the game provides one and ``method`` is
    ``"auto"``; ``method="newton"`` forces the damped Newton fallback.
    """
    i = check_player(game, i)
    t, x, alpha = _prepare(game, t, x, alpha)
    if method not in ("auto", "newton", "analytic"):
        raise ValueError(f"unknown method {method!r}")
    if game.best_response is not None and method != "newton":
        beta = np.asarray(game.best_response(i, t, x, alpha, p_i), dtype=np.float64)
        return check_finite(beta, "best_response")
    if method == "analytic":
        raise ValueError("game has no analytic best_response")
    return _newton_best_response(game, i, t, x, alpha, p_i)


def _newton_best_response(game, i, t, x, alpha, p_i, h=1e-4):
    d = game.d_alpha
    batch = x.shape[:-1]
    eye = np.eye(d)

    def objective(beta):
        return hamiltonian(game, i, t, x, _with_own(alpha, i, beta), p_i)

    beta = np.zeros(batch + (d,))
    for _ in range(NEWTON_MAX_ITER):
        h0 = objective(beta)
        plus = np.stack([objective(beta + h * eye[j]) for j in range(d)], axis=-1)
        minus = np.stack([objective(beta - h * eye[j]) for j in range(d)], axis=-1)
        grad = (plus - minus) / (2 * h)
        hess = np.empty(batch + (d, d))
        for j in range(d):
            hess[..., j, j] = (plus[..., j] - 2 * h0 + minus[..., j]) / h**2
            for l in range(j + 1, d):
                e = eye[j] + eye[l]
                f = eye[j] - eye[l]
                val = (objective(beta + h * e) - objective(beta + h * f)
                       - objective(beta - h * f) + objective(beta - h * e)) / (4 * h**2)
                hess[..., j, l] = hess[..., l, j] = val
        min_eig = np.linalg.eigvalsh(hess)[..., 0]
        if np.any(min_eig <= 1e-7 * (1.0 + np.abs(h0))):
            raise OptimizationError(
                f"Hamiltonian of player {i} is not strictly convex in its own control "
                f"(min curvature {float(np.min(min_eig)):.3e})"
            )
        if np.max(np.linalg.norm(grad, axis=-1), initial=0.0) < NEWTON_TOL:
            return beta
        step = -np.linalg.solve(hess, grad[..., None])[..., 0]
        lam = np.ones(batch + (1,))
        trial = beta + lam * step
        for _ in range(30):
            worse = objective(trial) > h0 + 1e-14 * (1.0 + np.abs(h0))
            if not np.any(worse):
                break
            lam = np.where(worse[..., None], lam / 2, lam)
            trial = beta + lam * step
        moved = np.max(np.abs(trial - beta), initial=0.0)
        beta = trial
        if moved < 1e-14 * (1.0 + np.max(np.abs(beta), initial=0.0)):
            return beta
    raise ConvergenceError(
        f"Newton best response of player {i} did not converge in {NEWTON_MAX_ITER} iterations",
        last=beta,
    )


def best_responses(game, t, x, alpha, p, method="auto"):
    """Simultaneous best responses ``a(t, x, alpha, p)`` of all players."""
    t, x, alpha = _prepare(game, t, x, alpha)
    p = as_float_array(p, "p")
    if p.shape != x.shape[:-1] + (game.k, game.N):
        raise ShapeError(f"p must have shape {x.shape[:-1] + (game.k, game.N)}, got {p.shape}")
    return np.stack(
        [best_response(game, i, t, x, alpha, p[..., :, i], method=method) for i in range(game.N)],
        axis=-2,
    )


def nash_fixed_point(game, t, x, p, alpha_init=None, method="auto", damping=1.0,
                     tol=FIXED_POINT_TOL, max_iter=FIXED_POINT_MAX_ITER, full_output=False):
    """Fixed point ``alpha = a(t, x, alpha, p)`` by damped simultaneous best responses.

    The damping factor is halved whenever the residual grows. With
    ``full_output`` the tuple ``(alpha, n_iter, residual)`` is returned.
    """
    t, x, _ = _prepare(game, t, x)
    if game.fixed_point is not None and method == "auto":
        alpha = check_finite(np.asarray(game.fixed_point(t, x, p), dtype=np.float64), "fixed_point")
        return (alpha, 0, 0.0) if full_output else alpha
    if alpha_init is None:
        alpha = np.zeros(x.shape[:-1] + (game.N, game.d_alpha))
    else:
        alpha = check_finite(as_float_array(alpha_init, "alpha_init"), "alpha_init").copy()
    br_method = "newton" if method == "newton" else "auto"
    prev = np.inf
    for it in range(max_iter):
        br = best_responses(game, t, x, alpha, p, method=br_method)
        res = float(np.max(np.abs(br - alpha), initial=0.0))
        if res < tol:
            return (alpha, it, res) if full_output else alpha
        if res > prev:
            damping /= 2
        alpha = alpha + damping * (br - alpha)
        prev = res
    raise ConvergenceError(
        f"best-response iteration did not converge in {max_iter} iterations (residual {prev:.3e})",
        last=alpha,
        residual=prev,
    )


def minimized_hamiltonian(game, t, x, p, **kwargs):
    """The vector of Hamiltonians evaluated at the equilibrium control map."""
    alpha = nash_fixed_point(game, t, x, p, **kwargs)
    t, x, _ = _prepare(game, t, x)
    return hamiltonians(game, t, x, alpha, p)


def min_norm_phi(drift, diffusion=None, constant_sigma=None):
    """Build ``phi`` as the minimum-norm solution of ``Sigma phi = b``.

    With ``constant_sigma`` the pseudoinverse is computed once.
    """
    if constant_sigma is not None:
        pinv_t = np.linalg.pinv(np.asarray(constant_sigma, dtype=np.float64)).T

        def phi(t, x, alpha):
            return drift(t, x, alpha) @ pinv_t

        return phi
    if diffusion is None:
        raise ValueError("either diffusion or constant_sigma is required")

    def phi(t, x, alpha):
        sig = diffusion(t, x)
        return np.einsum("...kn,...n->...k", np.linalg.pinv(sig), drift(t, x, alpha))

    return phi


def drift_relation_residual(game, t, x, alpha):
    """Pointwise ``|Sigma phi - b| / (1 + |b|)``."""
    t, x, alpha = _prepare(game, t, x, alpha)
    b = game.drift(t, x, alpha)
    sig = np.broadcast_to(game.diffusion(t, x), x.shape[:-1] + (game.n, game.k))
    sphi = np.einsum("...nk,...k->...n", sig, game.phi(t, x, alpha))
    return np.linalg.norm(sphi - b, axis=-1) / (1.0 + np.linalg.norm(b, axis=-1))


def permute_player_view(game, i, x):
    """State as seen by player ``i`` under the game's symmetry."""
    state_perm, _ = game.symmetry(i)
    return x[..., state_perm]
