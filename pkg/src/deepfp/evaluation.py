"""Ground-truth comparisons against the closed-form inter-bank equilibrium."""
from dataclasses import dataclass
from functools import partial

import numpy as np

from . import rng
from ._validation import as_float_array
from .exceptions import NumericError, ShapeError
from .sde import Partition, sample_initial, simulate_controlled, simulate_driftless
from .systemic_risk import optimal_policy, value_and_gradient

DEFAULT_J = 256


@dataclass(frozen=True)
class RiccatiOracle:
    """Duck-typed oracle used by the fictitious-play driver."""

    riccati: object

    def policy(self, t, x):
        return optimal_policy(self.riccati, t, x)

    def value_and_gradient(self, t, x):
        return value_and_gradient(self.riccati, t, x)


@dataclass(frozen=True)
class RseReport:
    rse: float
    J: int
    N_T: int
    times: np.ndarray
    sq_err: np.ndarray
    sq_dev: np.ndarray

    def to_dict(self):
        return {"rse": self.rse, "J": self.J, "N_T": self.N_T}

    def to_csv(self, path):
        with open(path, "w") as fh:
            fh.write("k,t,sq_err,sq_dev\n")
            for k, (t, e, d) in enumerate(zip(self.times, self.sq_err, self.sq_dev)):
                fh.write(f"{k},{t!r},{e!r},{d!r}\n")


def _sums(truth, pred):
    truth = as_float_array(truth, "truth")
    pred = as_float_array(pred, "pred")
    if truth.shape != pred.shape:
        raise ShapeError(f"truth {truth.shape} and pred {pred.shape} differ in shape")
    if truth.ndim != 3:
        raise ShapeError("rse expects arrays of shape (J, N_T, n)")
    err = np.sum((truth - pred) ** 2, axis=(0, 2))
    dev = np.sum((truth - truth.mean(axis=(0, 1))) ** 2, axis=(0, 2))
    return err, dev


def rse(truth, pred):
    """Relative squared error of value gradients.

    ``truth`` and ``pred`` have shape ``(J, N_T, n)``. The deviation in the
    denominator is taken from the mean over all paths and times, one mean
    per state coordinate.
    """
    err, dev = _sums(truth, pred)
    denom = float(dev.sum())
    if not denom > 0:
        raise NumericError("truth has no variation; the relative error is undefined")
    return float(err.sum()) / denom


def rse_report(truth, pred, partition):
    err, dev = _sums(truth, pred)
    return RseReport(rse=rse(truth, pred), J=truth.shape[0], N_T=truth.shape[1],
                     times=np.asarray(partition.left_points), sq_err=err, sq_dev=dev)


def ground_truth_paths(game, riccati, partition, delta0, J=DEFAULT_J, seed=0, player=0):
    """Evaluation paths and player ``player``'s true value gradients along them.

    The paths follow the driftless forward process started from
    ``uniform[-delta0, delta0]``. Returns ``(paths, grads)`` with ``grads``
    of shape ``(J, N_T, n)`` taken at the left grid points.
    """
    stream = rng.derive_stream(rng.STREAM_EVAL, 0)
    x0 = sample_initial(delta0, game.n, J, seed, stream=stream)
    paths = simulate_driftless(game, partition, x0, seed, stream=stream)
    K = partition.n_steps
    _, grad = value_and_gradient(riccati, np.broadcast_to(partition.left_points, (J, K)),
                                 paths.states[:, :K])
    return paths, grad[..., player]


def predicted_gradients(nets, paths):
    K = paths.partition.n_steps
    t = np.broadcast_to(paths.partition.left_points, (paths.batch_size, K))
    return nets.value_gradient_grid(t, paths.states[:, :K])


def path_comparison(game, riccati, learned_policy, partition, x0, seed=0, path=None):
    """One Brownian path driving both the oracle and the learned closed loop.

    Writes ``t,player,x_true,x_pred,alpha_true,alpha_pred`` to ``path`` when
    given and returns the rows as an array of shape ``(K + 1) * N x 6``.
    Controls are reported at the left end of each step, so the row at ``T``
    repeats the policy of the last step evaluated at the terminal state.
    """
    x0 = as_float_array(x0, "x0").reshape(1, game.n)
    stream = rng.derive_stream(rng.STREAM_EVAL, 1)
    oracle = partial(optimal_policy, riccati)
    true = simulate_controlled(game, oracle, partition, x0, seed, stream=stream)
    pred = simulate_controlled(game, learned_policy, partition, x0, seed, stream=stream,
                               increments=true.increments)
    times = partition.times
    K1 = times.size
    held = partition.floor(times)[None, :]
    a_true = oracle(held, true.states)[0, :, :, 0]
    a_pred = learned_policy(held, pred.states)[0, :, :, 0]
    rows = np.column_stack([
        np.repeat(times, game.N),
        np.tile(np.arange(game.N), K1),
        true.states[0].reshape(-1),
        pred.states[0].reshape(-1),
        a_true.reshape(-1),
        a_pred.reshape(-1),
    ])
    if path is not None:
        fmt = ["%.17g", "%d", "%.17g", "%.17g", "%.17g", "%.17g"]
        np.savetxt(path, rows, delimiter=",", fmt=fmt, comments="",
                   header="t,player,x_true,x_pred,alpha_true,alpha_pred")
    return rows


def oracle_loss(game, riccati, partition, delta0, B=4096, seed=0, player=0, chunk=512):
    """Deep BSDE loss of the exact solution on a given partition.

    ``Y_0`` and ``Z`` are the closed-form value and ``Sigma^T grad V``; the
    driver is the equilibrium Hamiltonian. What remains is the time
    discretization error of the scheme. Returns ``(loss, stderr)``.
    """
    stream = rng.derive_stream(rng.STREAM_EVAL, 2)
    x0 = sample_initial(delta0, game.n, B, seed, stream=stream)
    paths = simulate_driftless(game, partition, x0, seed, stream=stream)
    K = partition.n_steps
    sig = game.constant_sigma
    sq = np.empty(B)
    for lo in range(0, B, chunk):
        X = paths.states[lo:lo + chunk]
        dW = paths.increments[lo:lo + chunk]
        b = X.shape[0]
        t = np.broadcast_to(partition.left_points, (b, K))
        _, grad = value_and_gradient(riccati, t, X[:, :K])
        zi = grad[..., player] @ sig
        alpha = optimal_policy(riccati, t, X[:, :K])
        F = np.sum(game.phi(t, X[:, :K], alpha) * zi, axis=-1)
        F += game.running_cost(t, X[:, :K], alpha)[..., player]
        y0 = value_and_gradient(riccati, np.zeros(b), X[:, 0])[0][:, player]
        yT = y0 + np.sum(-F * partition.dt + np.einsum("bkj,bkj->bk", zi, dW), axis=1)
        sq[lo:lo + b] = (game.terminal_cost(X[:, K])[:, player] - yT) ** 2
    return float(sq.mean()), float(sq.std(ddof=1) / np.sqrt(B))


def refinement_study(game, riccati, T, n_steps_list, delta0, B=4096, seed=0):
    """Oracle loss for each partition size and the ratios between successive ones."""
    losses = [oracle_loss(game, riccati, Partition.uniform(T, n), delta0, B, seed)[0]
              for n in n_steps_list]
    ratios = [a / b for a, b in zip(losses[:-1], losses[1:])]
    return losses, ratios
