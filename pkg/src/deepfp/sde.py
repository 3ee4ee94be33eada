"""Time grids, Brownian sampling, Euler-Maruyama simulation and Monte Carlo costs."""
import warnings
from dataclasses import dataclass

import numpy as np

from . import rng
from ._validation import as_float_array, check_positive
from .exceptions import DomainError, SimulationError


@dataclass(frozen=True, eq=False)
class Partition:
    """Time grid ``0 = t_0 < ... < t_N_T = T``."""

    times: np.ndarray

    def __post_init__(self):
        times = np.asarray(self.times, dtype=np.float64)
        if times.ndim != 1 or times.size < 2:
            raise DomainError("a partition needs at least two time points")
        if times[0] != 0.0:
            raise DomainError("a partition must start at t = 0")
        if np.any(np.diff(times) <= 0):
            raise DomainError("partition times must be strictly increasing")
        times = times.copy()
        times.setflags(write=False)
        object.__setattr__(self, "times", times)

    @classmethod
    def uniform(cls, T, n_steps):
        if n_steps < 1:
            raise DomainError("n_steps must be >= 1")
        return cls(np.linspace(0.0, float(T), int(n_steps) + 1))

    @property
    def T(self):
        return float(self.times[-1])

    @property
    def n_steps(self):
        return self.times.size - 1

    @property
    def dt(self):
        return np.diff(self.times)

    @property
    def mesh(self):
        return float(np.max(self.dt))

    @property
    def left_points(self):
        """The grid without its terminal time."""
        return self.times[:-1]

    def step_index(self, t):
        """Index ``k`` with ``t_k <= t < t_{k+1}`` (the last interval is closed)."""
        t = np.asarray(t, dtype=np.float64)
        if np.any(t < 0) or np.any(t > self.T):
            raise DomainError(f"t must lie in [0, {self.T}]")
        return np.clip(np.searchsorted(self.times, t, side="right") - 1, 0, self.n_steps - 1)

    def floor(self, t):
        """The step function mapping ``t`` to the left end of its interval."""
        return self.times[self.step_index(t)]

    def __eq__(self, other):
        return isinstance(other, Partition) and np.array_equal(self.times, other.times)

    def __hash__(self):
        return hash(self.times.tobytes())


@dataclass(frozen=True, eq=False)
class PathBatch:
    """Simulated trajectories with the Brownian increments that generated them.

    ``states`` has shape ``(B, N_T + 1, n)`` and ``increments`` ``(B, N_T, k)``.
    """

    states: np.ndarray
    increments: np.ndarray
    partition: Partition
    seed: int = 0
    stream: int = 0

    @property
    def batch_size(self):
        return self.states.shape[0]

    @property
    def x0(self):
        return self.states[:, 0, :]

    def to_csv(self, path):
        """Write ``path_id,k,t,x_1..x_n`` rows."""
        B, K1, n = self.states.shape
        ids = np.repeat(np.arange(B), K1)
        ks = np.tile(np.arange(K1), B)
        ts = self.partition.times[ks]
        cols = np.column_stack([ids, ks, ts, self.states.reshape(B * K1, n)])
        header = ",".join(["path_id", "k", "t"] + [f"x_{j + 1}" for j in range(n)])
        fmt = ["%d", "%d", "%.17g"] + ["%.17g"] * n
        np.savetxt(path, cols, delimiter=",", header=header, comments="", fmt=fmt)


def sample_initial(delta0, n, B, seed, stream=0):
    """i.i.d. uniforms on ``[-delta0, delta0]``, shape ``(B, n)``."""
    check_positive(delta0, "delta0", strict=False)
    if B == 0:
        return np.zeros((0, n))
    u = rng.uniforms(seed, rng.derive_stream(rng.STREAM_INITIAL, stream), np.arange(B), n)
    return delta0 * (2.0 * u - 1.0)


def brownian_increments(partition, k, B, seed, stream=0):
    """Gaussian increments with variance ``dt_k``, shape ``(B, N_T, k)``."""
    K = partition.n_steps
    if B == 0:
        return np.zeros((0, K, k))
    z = rng.normals(seed, rng.derive_stream(rng.STREAM_INCREMENTS, stream), np.arange(B), K * k)
    return z.reshape(B, K, k) * np.sqrt(partition.dt)[None, :, None]


def _diffusion_step(game, t, x, dw):
    if game.constant_sigma is not None:
        return dw @ game.constant_sigma.T
    sig = game.diffusion(np.full(x.shape[:-1], t), x)
    return np.einsum("...nk,...k->...n", sig, dw)


def simulate_driftless(game, partition, x0, seed, stream=0, increments=None):
    """Euler scheme for ``dX = Sigma(t, X) dW``. Increments may be injected."""
    x0 = as_float_array(x0, "x0")
    B = x0.shape[0]
    if increments is None:
        increments = brownian_increments(partition, game.k, B, seed, stream)
    return _simulate(game, partition, x0, increments, None, seed, stream)


def simulate_controlled(game, policy, partition, x0, seed, stream=0, increments=None):
    """Euler scheme for ``dX = b(t, X, policy(t, X)) dt + Sigma(t, X) dW``."""
    x0 = as_float_array(x0, "x0")
    B = x0.shape[0]
    if increments is None:
        increments = brownian_increments(partition, game.k, B, seed, stream)
    return _simulate(game, partition, x0, increments, policy, seed, stream)


def _simulate(game, partition, x0, increments, policy, seed, stream):
    K = partition.n_steps
    B = x0.shape[0]
    states = np.empty((B, K + 1, game.n))
    states[:, 0] = x0
    x = x0
    dts = partition.dt
    for k in range(K):
        t = partition.times[k]
        step = _diffusion_step(game, t, x, increments[:, k])
        if policy is not None:
            try:
                alpha = policy(np.full(B, t), x)
            except Exception as exc:
                raise SimulationError(f"policy evaluation failed at step {k}: {exc}", step=k) from exc
            step = step + game.drift(np.full(B, t), x, alpha) * dts[k]
        x = x + step
        if not np.all(np.isfinite(x)):
            raise SimulationError(f"non-finite state at step {k + 1}", step=k + 1)
        states[:, k + 1] = x
    return PathBatch(states=states, increments=increments, partition=partition, seed=seed, stream=stream)


def path_costs(game, policy, paths):
    """Per-path realized cost, shape ``(B, N)``: Riemann sum of ``f`` plus ``g``."""
    B = paths.batch_size
    part = paths.partition
    K = part.n_steps
    x = paths.states[:, :K]
    t = np.broadcast_to(part.left_points, (B, K))
    alpha = policy(t, x)
    running = game.running_cost(t, x, alpha)  # (B, K, N)
    total = np.einsum("bkn,k->bn", running, part.dt)
    return total + game.terminal_cost(paths.states[:, K])


def mc_cost(game, policy, paths):
    """Monte Carlo estimate of every player's cost and its standard error."""
    if paths.batch_size == 0:
        raise DomainError("cannot estimate a cost from an empty batch")
    samples = path_costs(game, policy, paths)
    B = samples.shape[0]
    mean = samples.mean(axis=0)
    stderr = samples.std(axis=0, ddof=1) / np.sqrt(B) if B > 1 else np.full_like(mean, np.inf)
    return mean, stderr


def delta0_fixed_point(game, policy, partition, delta_init=1.0, batch=4096, max_iter=20,
                       rel_tol=0.05, seed=0):
    """Spread of the initial law that matches the spread of controlled paths.

    Starting from ``delta_init``, paths are simulated from
    ``uniform[-delta, delta]`` under ``policy`` and ``delta`` is replaced by
    the cross-sectional standard deviation of each coordinate, averaged
    over the grid times and coordinates. Returns ``(delta, converged)``; a warning is emitted when the
    iteration cap is reached.
    """
    delta = float(delta_init)
    for it in range(max_iter):
        x0 = sample_initial(delta, game.n, batch, seed, stream=it)
        paths = simulate_controlled(game, policy, partition, x0, seed, stream=it)
        new = float(np.mean(np.std(paths.states, axis=0)))
        change = abs(new - delta) / max(delta, 1e-300)
        delta = new
        if change < rel_tol or delta == 0.0:
            return delta, True
    warnings.warn(f"delta0 fixed point did not settle within {max_iter} iterations", RuntimeWarning,
                  stacklevel=2)
    return delta, False
