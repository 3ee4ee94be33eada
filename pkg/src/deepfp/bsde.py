"""Deep BSDE solver for decoupled BSDEs with a driftless forward process.

The discrete scheme is

    Y_0 = psi_0(X_0),  Z_k = phi(t_k, X_k),
    Y_{k+1} = Y_k - F(t_k, X_k, Z_k) dt_k + Z_k . dW_k

and the nets minimize ``E |g(X_T) - Y_T|^2``. Because the forward paths do
not depend on ``(Y, Z)``, all ``Z_k`` are produced by one batched network
call and the recursion reduces to a cumulative sum.
"""
from dataclasses import dataclass, field
from typing import Callable, List, Optional, Union

import numpy as np

from .exceptions import DomainError, NumericError, RolloutError, TrainingError
from .nn import INFER, TRAIN, AdamHyper, AdamState, Mlp, MlpConfig, adam_step

TIME = "time"
PER_STEP = "per_step"
DIRECT = "direct"
GRADIENT = "gradient"


@dataclass(frozen=True, eq=False)
class BsdeProblem:
    """A decoupled BSDE ``Y_t = g(X_T) + int F(s, X_s, Z_s) ds - int Z_s dW_s``.

    ``driver(t, x, z)`` is vectorized over leading dimensions. Its gradient in
    ``z`` comes from ``driver.value_and_grad`` when the driver object has one,
    else from ``driver_grad``, else from central differences.
    """

    driver: Callable
    terminal: Callable
    n: int
    k: int
    partition: object
    driver_grad: Optional[Callable] = None

    def evaluate_driver(self, t, x, z):
        if hasattr(self.driver, "value_and_grad"):
            return self.driver.value_and_grad(t, x, z)
        value = np.asarray(self.driver(t, x, z), dtype=np.float64)
        if self.driver_grad is not None:
            return value, np.asarray(self.driver_grad(t, x, z), dtype=np.float64)
        h = 1e-6
        grad = np.empty(z.shape)
        for j in range(z.shape[-1]):
            e = np.zeros(z.shape[-1])
            e[j] = h
            grad[..., j] = (self.driver(t, x, z + e) - self.driver(t, x, z - e)) / (2 * h)
        return value, grad


@dataclass(eq=False)
class StageNets:
    """Networks for ``Y_0`` and ``Z``.

    ``representation`` is ``"time"`` (one net fed ``(t, x)``) or
    ``"per_step"`` (one net per grid time). With ``head="gradient"`` the
    Z-nets output an estimate of ``grad V`` and ``Z = Sigma^T grad V`` with the
    constant matrix ``sigma``; with ``head="direct"`` they output ``Z``.
    """

    y0_net: Mlp
    z_net: Union[Mlp, List[Mlp]]
    representation: str = TIME
    head: str = DIRECT
    sigma: Optional[np.ndarray] = None
    times: Optional[np.ndarray] = None

    def __post_init__(self):
        if self.representation not in (TIME, PER_STEP):
            raise ValueError(f"unknown representation {self.representation!r}")
        if self.head not in (DIRECT, GRADIENT):
            raise ValueError(f"unknown head {self.head!r}")
        if self.head == GRADIENT and self.sigma is None:
            raise ValueError("a gradient head needs the constant diffusion matrix")
        if self.representation == PER_STEP and self.times is None:
            raise ValueError("per-step nets need the grid times")

    @property
    def z_nets(self):
        return [self.z_net] if self.representation == TIME else list(self.z_net)

    def copy(self):
        z = self.z_net.copy() if self.representation == TIME else [net.copy() for net in self.z_net]
        return StageNets(self.y0_net.copy(), z, self.representation, self.head,
                         self.sigma, self.times)

    def named_nets(self):
        out = {"y0": self.y0_net}
        for j, net in enumerate(self.z_nets):
            out[f"z{j}"] = net
        return out

    def describe(self):
        return {
            "representation": self.representation,
            "head": self.head,
            "sigma": None if self.sigma is None else np.asarray(self.sigma).tolist(),
            "times": None if self.times is None else np.asarray(self.times).tolist(),
        }

    @classmethod
    def from_named(cls, description, nets):
        n_z = len([k for k in nets if k.startswith("z")])
        z = [nets[f"z{j}"] for j in range(n_z)]
        rep = description["representation"]
        sigma = description.get("sigma")
        times = description.get("times")
        return cls(nets["y0"], z[0] if rep == TIME else z, rep, description["head"],
                   None if sigma is None else np.asarray(sigma),
                   None if times is None else np.asarray(times))

    # -- evaluation of Z -----------------------------------------------------

    def _z_forward(self, t, x, mode, update_stats=True):
        """Raw net outputs at ``x`` of shape ``(B, K, n)`` and times ``t`` of shape ``(K,)``."""
        B, K, n = x.shape
        if self.representation == TIME:
            inp = np.empty((B, K, n + 1))
            inp[..., 0] = t[None, :]
            inp[..., 1:] = x
            out, cache = self.z_net.forward(inp.reshape(B * K, n + 1), mode, update_stats)
            return out.reshape(B, K, -1), cache
        idx = self._grid_index(t)
        outs, caches = [], []
        for j, k in enumerate(idx):
            o, c = self.z_net[k].forward(x[:, j], mode, update_stats)
            outs.append(o)
            caches.append((k, c))
        return np.stack(outs, axis=1), caches

    def _z_backward(self, cache, grad_out):
        """Gradients of the Z nets given ``dL/d(raw output)`` of shape ``(B, K, m)``."""
        B, K, m = grad_out.shape
        if self.representation == TIME:
            g, _ = self.z_net.backward(cache, grad_out.reshape(B * K, m))
            return [g]
        grads = [np.zeros(net.size) for net in self.z_net]
        for j, (k, c) in enumerate(cache):
            g, _ = self.z_net[k].backward(c, grad_out[:, j])
            grads[k] += g
        return grads

    def _grid_index(self, t):
        t = np.atleast_1d(np.asarray(t, dtype=np.float64))
        grid = np.asarray(self.times)[:-1]
        idx = np.searchsorted(grid, t)
        idx = np.clip(idx, 0, grid.size - 1)
        if not np.allclose(grid[idx], t, rtol=0, atol=1e-12):
            raise DomainError("per-step Z nets are only defined on the partition times")
        return idx

    def head_to_z(self, raw):
        return raw @ self.sigma if self.head == GRADIENT else raw

    def head_grad(self, grad_z):
        return grad_z @ self.sigma.T if self.head == GRADIENT else grad_z

    def raw_at(self, t, x):
        """Infer-mode raw net output at points of any batch shape ``S``.

        ``t`` broadcasts to ``S`` and ``x`` has shape ``S + (n,)``. Per-step
        nets require every ``t`` to be a partition time.
        """
        x = np.asarray(x, dtype=np.float64)
        batch = x.shape[:-1]
        n = x.shape[-1]
        t = np.broadcast_to(np.asarray(t, dtype=np.float64), batch).reshape(-1)
        flat = x.reshape(-1, n)
        if self.representation == TIME:
            out = self.z_net(np.column_stack([t, flat]))
            return out.reshape(batch + (-1,))
        idx = self._grid_index(t) if t.size else np.zeros(0, dtype=int)
        out = None
        for k in np.unique(idx):
            rows = idx == k
            o = self.z_net[k](flat[rows])
            if out is None:
                out = np.empty((flat.shape[0], o.shape[1]))
            out[rows] = o
        if out is None:
            out = np.empty((0, self.z_net[0].config.output_dim))
        return out.reshape(batch + (-1,))

    def z_at(self, t, x):
        """Infer-mode ``Z`` at points of any batch shape, see :meth:`raw_at`."""
        return self.head_to_z(self.raw_at(t, x))

    def z(self, t, x):
        """Infer-mode ``Z`` at a common time ``t`` for a ``(B, n)`` batch."""
        return self.z_at(t, x)

    def z_grid(self, t, x):
        """Infer-mode ``Z`` on ``x`` of shape ``(B, K, n)`` at times ``t`` of shape ``(K,)``."""
        return self.z_at(t, x)

    def value_gradient_grid(self, t, x):
        """Estimate of ``grad_x V`` at points of any batch shape, see :meth:`raw_at`."""
        raw = self.raw_at(t, x)
        if self.head == GRADIENT:
            return raw
        if self.sigma is None:
            raise ValueError("recovering grad V from Z needs the diffusion matrix")
        return raw @ np.linalg.pinv(np.asarray(self.sigma))


def make_stage_nets(n, k, partition, hidden=(40, 40, 40), activation="tanh", batchnorm=True,
                    representation=TIME, head=DIRECT, sigma=None, seed=0, momentum=0.99,
                    init="glorot_uniform"):
    out_dim = n if head == GRADIENT else k
    common = dict(hidden=tuple(hidden), activation=activation, batchnorm=batchnorm,
                  momentum=momentum, init=init)
    y0 = Mlp(MlpConfig(n, 1, seed=seed, **common))
    if representation == TIME:
        z = Mlp(MlpConfig(n + 1, out_dim, seed=seed + 1, **common))
    else:
        z = [Mlp(MlpConfig(n, out_dim, seed=seed + 1 + j, **common)) for j in range(partition.n_steps)]
    return StageNets(y0, z, representation, head,
                     None if sigma is None else np.asarray(sigma, dtype=np.float64),
                     np.asarray(partition.times))


def _forward_pass(problem, nets, paths, mode):
    part = paths.partition
    K = part.n_steps
    X = paths.states
    B = X.shape[0]
    y0_out, y0_cache = nets.y0_net.forward(X[:, 0], mode)
    raw, z_cache = nets._z_forward(part.left_points, X[:, :K], mode)
    Z = nets.head_to_z(raw)
    t = np.broadcast_to(part.left_points, (B, K))
    F, dF = problem.evaluate_driver(t, X[:, :K], Z)
    inc = -F * part.dt[None, :] + np.einsum("bkj,bkj->bk", Z, paths.increments)
    Y = np.empty((B, K + 1))
    Y[:, 0] = y0_out[:, 0]
    np.cumsum(inc, axis=1, out=Y[:, 1:])
    Y[:, 1:] += Y[:, :1]
    bad = ~np.isfinite(Y)
    if np.any(bad):
        k = int(np.argmax(np.any(bad, axis=0)))
        raise RolloutError(f"non-finite Y at step {k}", step=k)
    mismatch = problem.terminal(X[:, K]) - Y[:, K]
    return Y, mismatch, (y0_cache, z_cache, dF)


def rollout(problem, nets, paths, mode=INFER):
    """Return the ``Y`` path ``(B, N_T + 1)`` and the terminal mismatch ``g(X_T) - Y_T``."""
    Y, mismatch, _ = _forward_pass(problem, nets, paths, mode)
    return Y, mismatch


def loss(problem, nets, paths, mode=INFER):
    _, mismatch = rollout(problem, nets, paths, mode)
    return float(np.mean(mismatch**2))


def loss_and_grads(problem, nets, paths, mode=TRAIN):
    """Loss and exact gradients ``(loss, y0_grad, [z_grads])`` through the whole rollout."""
    Y, mismatch, (y0_cache, z_cache, dF) = _forward_pass(problem, nets, paths, mode)
    B = Y.shape[0]
    value = float(np.mean(mismatch**2))
    d_yT = -2.0 * mismatch / B
    y0_grad, _ = nets.y0_net.backward(y0_cache, d_yT[:, None])
    dt = paths.partition.dt
    d_z = d_yT[:, None, None] * (paths.increments - dF * dt[None, :, None])
    z_grads = nets._z_backward(z_cache, nets.head_grad(d_z))
    return value, y0_grad, z_grads


@dataclass(frozen=True)
class TrainConfig:
    steps: int = 30000
    batch: int = 256
    lr: float = 5e-4
    seed: int = 0
    eval_every: int = 500


@dataclass
class TrainHistory:
    rows: list = field(default_factory=list)

    def append(self, **row):
        self.rows.append(row)

    @property
    def losses(self):
        return [r["loss"] for r in self.rows]

    def to_csv(self, path):
        with open(path, "w") as fh:
            fh.write("step,loss,rse\n")
            for r in self.rows:
                rse = r.get("rse")
                fh.write(f"{r['step']},{r['loss']!r},{'' if rse is None else repr(rse)}\n")


def train(problem, nets, config, path_source, evaluator=None, adam=None):
    """Fit ``nets`` to ``problem`` with Adam on fresh path batches.

    ``path_source(step)`` must return a driftless :class:`PathBatch` for the
    given training step. ``evaluator(nets)`` may return a dict of extra
    metrics (for example ``rse``) recorded every ``eval_every`` steps and
    once more after the last update.
    Returns ``(nets, history)``; the input nets are modified in place.
    """
    hyper = adam or AdamHyper(lr=config.lr)
    states = [AdamState.zeros(net.size) for net in [nets.y0_net] + nets.z_nets]
    history = TrainHistory()
    last_good = nets.copy()
    for step in range(config.steps):
        paths = path_source(step)
        try:
            value, y0_grad, z_grads = loss_and_grads(problem, nets, paths)
        except RolloutError as exc:
            raise TrainingError(f"step {step}: {exc}", step=step, last_good=last_good) from exc
        if not np.isfinite(value):
            raise TrainingError(f"non-finite loss at step {step}", step=step, last_good=last_good)
        if step % config.eval_every == 0:
            row = {"step": step, "loss": value}
            if evaluator is not None:
                row.update(evaluator(nets))
            history.append(**row)
            last_good = nets.copy()
        try:
            for j, (net, grad) in enumerate(zip([nets.y0_net] + nets.z_nets, [y0_grad] + z_grads)):
                net.params, states[j] = adam_step(states[j], net.params, grad, hyper, step)
        except NumericError as exc:
            raise TrainingError(str(exc), step=step, last_good=last_good) from exc
    if config.steps > 0:
        paths = path_source(config.steps)
        row = {"step": config.steps, "loss": loss(problem, nets, paths, mode=TRAIN)}
        if evaluator is not None:
            row.update(evaluator(nets))
        history.append(**row)
    return nets, history


def evaluate_yz(nets, t, x):
    """Infer-mode ``(Y, Z)`` at time ``t``; ``Y`` is only parameterized at ``t = 0``."""
    x = np.asarray(x, dtype=np.float64)
    z = nets.z(t, x)
    y = nets.y0_net(x)[:, 0] if float(t) == 0.0 else None
    return y, z
