"""Feedforward networks with batch normalization, exact gradients and Adam.

Only the fixed multilayer-perceptron composition needed by the solver is
supported: an optional input batch-norm layer, then ``affine -> batch norm
-> activation`` blocks, then an affine output layer. Everything is 64-bit.
"""
from dataclasses import asdict, dataclass
from typing import Optional

import numpy as np

from .exceptions import NumericError, UsageError

TRAIN = "train"
INFER = "infer"


@dataclass(frozen=True)
class MlpConfig:
    input_dim: int
    output_dim: int
    hidden: tuple = (40, 40, 40)
    activation: str = "tanh"
    batchnorm: bool = True
    input_batchnorm: Optional[bool] = None
    momentum: float = 0.99
    bn_eps: float = 1e-6
    seed: int = 0
    init: str = "glorot_uniform"

    def __post_init__(self):
        object.__setattr__(self, "hidden", tuple(int(w) for w in self.hidden))
        if self.input_dim < 1 or self.output_dim < 1 or any(w < 1 for w in self.hidden):
            raise ValueError("layer widths must be positive")
        if self.activation not in _ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")
        if self.init not in ("glorot_uniform", "zeros"):
            raise ValueError(f"unknown init scheme {self.init!r}")
        if self.input_batchnorm is None:
            object.__setattr__(self, "input_batchnorm", bool(self.batchnorm))

    def to_dict(self):
        d = asdict(self)
        d["hidden"] = list(self.hidden)
        return d


def _tanh(z):
    a = np.tanh(z, out=z)
    return a, a


def _tanh_grad(cache, g):
    d = cache * cache
    np.subtract(1.0, d, out=d)
    d *= g
    return d


def _relu(z):
    return np.maximum(z, 0.0), z


def _relu_grad(cache, g):
    return g * (cache > 0)


_ACTIVATIONS = {"tanh": (_tanh, _tanh_grad), "relu": (_relu, _relu_grad)}


@dataclass
class _BatchNormStats:
    mean: np.ndarray
    var: np.ndarray
    count: int = 0

    def estimate(self, momentum):
        if self.count == 0:
            return np.zeros_like(self.mean), np.ones_like(self.var)
        corr = 1.0 - momentum**self.count
        return self.mean / corr, self.var / corr


class Mlp:
    """Multilayer perceptron over one flat parameter vector.

    ``layout`` maps parameter names (``W0``, ``gamma0``, ``beta0``, ...,
    ``W_out``, ``b_out``, and ``gamma_in``/``beta_in`` for the input batch
    norm) to ``(start, stop, shape)``. Running batch-norm statistics are
    exponential moving averages with bias correction.
    """

    def __init__(self, config, params=None):
        self.config = config
        self.layout = self._build_layout(config)
        self.size = max(stop for _, stop, _ in self.layout.values())
        if params is None:
            params = self._init_params()
        params = np.asarray(params, dtype=np.float64)
        if params.shape != (self.size,):
            raise UsageError(f"expected {self.size} parameters, got shape {params.shape}")
        self.params = params.copy()
        self.stats = {}
        if config.input_batchnorm:
            self.stats["in"] = _BatchNormStats(np.zeros(config.input_dim), np.zeros(config.input_dim))
        if config.batchnorm:
            for l, w in enumerate(config.hidden):
                self.stats[l] = _BatchNormStats(np.zeros(w), np.zeros(w))

    @staticmethod
    def _build_layout(config):
        layout = {}
        pos = 0

        def add(name, shape):
            nonlocal pos
            size = int(np.prod(shape))
            layout[name] = (pos, pos + size, tuple(shape))
            pos += size

        if config.input_batchnorm:
            add("gamma_in", (config.input_dim,))
            add("beta_in", (config.input_dim,))
        fan_in = config.input_dim
        for l, w in enumerate(config.hidden):
            add(f"W{l}", (fan_in, w))
            if config.batchnorm:
                add(f"gamma{l}", (w,))
                add(f"beta{l}", (w,))
            else:
                add(f"b{l}", (w,))
            fan_in = w
        add("W_out", (fan_in, config.output_dim))
        add("b_out", (config.output_dim,))
        return layout

    def _init_params(self):
        rng = np.random.default_rng(self.config.seed)
        params = np.zeros(self.size)
        if self.config.init == "zeros":
            return params
        for name, (start, stop, shape) in self.layout.items():
            if name.startswith("W"):
                bound = np.sqrt(6.0 / (shape[0] + shape[1]))
                params[start:stop] = rng.uniform(-bound, bound, size=stop - start)
            elif name.startswith("gamma"):
                params[start:stop] = 1.0
        return params

    def view(self, name, array=None):
        start, stop, shape = self.layout[name]
        src = self.params if array is None else array
        return src[start:stop].reshape(shape)

    def weight_names(self):
        """Multiplicative parameters (weight matrices and batch-norm scales)."""
        return [n for n in self.layout if n.startswith("W") or n.startswith("gamma")]

    def copy(self):
        other = Mlp(self.config, self.params)
        for key, st in self.stats.items():
            other.stats[key] = _BatchNormStats(st.mean.copy(), st.var.copy(), st.count)
        return other

    # -- forward / backward ---------------------------------------------------

    def _bn_forward(self, key, z, prefix, mode, update_stats):
        gamma = self.view(f"gamma{prefix}")
        beta = self.view(f"beta{prefix}")
        st = self.stats[key]
        if mode == TRAIN:
            m = z.shape[0]
            if m < 2:
                raise UsageError("batch normalization in train mode needs a batch of at least 2")
            mean = z.mean(axis=0)
            xhat = z - mean
            var = np.einsum("ij,ij->j", xhat, xhat) / (m - 1)
            if update_stats:
                mom = self.config.momentum
                st.mean = mom * st.mean + (1 - mom) * mean
                st.var = mom * st.var + (1 - mom) * var
                st.count += 1
        else:
            mean, var = st.estimate(self.config.momentum)
            xhat = z - mean
        inv = 1.0 / np.sqrt(var + self.config.bn_eps)
        xhat *= inv
        out = xhat * gamma
        out += beta
        return out, (xhat, inv, mode)

    def _bn_backward(self, prefix, cache, g, grads):
        xhat, inv, mode = cache
        gamma = self.view(f"gamma{prefix}")
        d_gamma = np.einsum("ij,ij->j", g, xhat)
        d_beta = g.sum(axis=0)
        self.view(f"gamma{prefix}", grads)[...] = d_gamma
        self.view(f"beta{prefix}", grads)[...] = d_beta
        scale = gamma * inv
        if mode != TRAIN:
            return g * scale
        m = g.shape[0]
        # batch statistics: dz = gamma/s * (g - mean(g) - xhat * sum(g xhat) / (m - 1))
        dz = xhat * (d_gamma / (m - 1))
        np.subtract(g, dz, out=dz)
        dz -= d_beta / m
        dz *= scale
        return dz

    def forward(self, x, mode=TRAIN, update_stats=True):
        """Evaluate the network on a ``(B, input_dim)`` batch.

        Returns ``(output, cache)``. Train mode normalizes with batch
        statistics (and folds them into the running averages unless
        ``update_stats`` is False); infer mode is a pure function.
        """
        if mode not in (TRAIN, INFER):
            raise UsageError(f"unknown mode {mode!r}")
        x = np.asarray(x, dtype=np.float64)
        if x.ndim != 2 or x.shape[1] != self.config.input_dim:
            raise UsageError(f"input must have shape (B, {self.config.input_dim}), got {x.shape}")
        act, _ = _ACTIVATIONS[self.config.activation]
        cache = {"mode": mode, "x_shape": x.shape, "size": self.size, "layers": []}
        h = x
        if self.config.input_batchnorm:
            h, cache["bn_in"] = self._bn_forward("in", h, "_in", mode, update_stats)
        for l in range(len(self.config.hidden)):
            z = h @ self.view(f"W{l}")
            if self.config.batchnorm:
                z, bn = self._bn_forward(l, z, l, mode, update_stats)
            else:
                z = z + self.view(f"b{l}")
                bn = None
            a, act_cache = act(z)
            cache["layers"].append((h, bn, act_cache))
            h = a
        cache["h_last"] = h
        out = h @ self.view("W_out") + self.view("b_out")
        cache["out_shape"] = out.shape
        return out, cache

    def backward(self, cache, upstream):
        """Reverse-mode gradients ``(param_grads, input_grads)`` of ``sum(out * upstream)``."""
        upstream = np.asarray(upstream, dtype=np.float64)
        if cache.get("size") != self.size or upstream.shape != cache["out_shape"]:
            raise UsageError("cache does not match this network or the upstream gradient shape")
        _, act_grad = _ACTIVATIONS[self.config.activation]
        grads = np.zeros(self.size)
        h = cache["h_last"]
        self.view("W_out", grads)[...] = h.T @ upstream
        self.view("b_out", grads)[...] = upstream.sum(axis=0)
        g = upstream @ self.view("W_out").T
        for l in range(len(self.config.hidden) - 1, -1, -1):
            h_in, bn, act_cache = cache["layers"][l]
            g = act_grad(act_cache, g)
            if bn is not None:
                g = self._bn_backward(l, bn, g, grads)
            else:
                self.view(f"b{l}", grads)[...] = g.sum(axis=0)
            self.view(f"W{l}", grads)[...] = h_in.T @ g
            g = g @ self.view(f"W{l}").T
        if self.config.input_batchnorm:
            g = self._bn_backward("_in", cache["bn_in"], g, grads)
        return grads, g

    def folded(self):
        """Infer-mode network as plain affine layers ``[(W, b), ...]``.

        Running batch-norm statistics are folded into the adjacent affine
        maps, so evaluation needs one matmul and one activation per layer.
        """
        cfg = self.config
        eps = cfg.bn_eps
        layers = []
        pre_scale, pre_shift = None, None
        if cfg.input_batchnorm:
            mean, var = self.stats["in"].estimate(cfg.momentum)
            s = self.view("gamma_in") / np.sqrt(var + eps)
            pre_scale, pre_shift = s, self.view("beta_in") - mean * s
        for l in range(len(cfg.hidden)):
            W = self.view(f"W{l}")
            if pre_scale is not None:
                b = pre_shift @ W
                W = pre_scale[:, None] * W
            else:
                b = np.zeros(W.shape[1])
            if cfg.batchnorm:
                mean, var = self.stats[l].estimate(cfg.momentum)
                s = self.view(f"gamma{l}") / np.sqrt(var + eps)
                W = W * s
                b = (b - mean) * s + self.view(f"beta{l}")
            else:
                b = b + self.view(f"b{l}")
            layers.append((W, b))
            pre_scale, pre_shift = None, None
        layers.append((self.view("W_out"), self.view("b_out")))
        return layers

    def __call__(self, x):
        """Infer-mode output; equals ``forward(x, INFER)[0]`` up to rounding."""
        x = np.asarray(x, dtype=np.float64)
        if x.ndim != 2 or x.shape[1] != self.config.input_dim:
            raise UsageError(f"input must have shape (B, {self.config.input_dim}), got {x.shape}")
        layers = self.folded()
        act, _ = _ACTIVATIONS[self.config.activation]
        h = x
        for W, b in layers[:-1]:
            z = h @ W
            z += b
            h, _ = act(z)
        W, b = layers[-1]
        return h @ W + b

    # -- persistence ------------------------------------------------------------

    def state(self):
        """``(meta, arrays)`` describing the network exactly."""
        meta = {"config": self.config.to_dict(), "stats_count": {}}
        arrays = {"params": self.params}
        for key, st in self.stats.items():
            meta["stats_count"][str(key)] = st.count
            arrays[f"stats_mean_{key}"] = st.mean
            arrays[f"stats_var_{key}"] = st.var
        return meta, arrays

    @classmethod
    def from_state(cls, meta, arrays):
        cfg = dict(meta["config"])
        cfg["hidden"] = tuple(cfg["hidden"])
        net = cls(MlpConfig(**cfg), arrays["params"])
        for key in list(net.stats):
            st = net.stats[key]
            st.mean = np.array(arrays[f"stats_mean_{key}"], dtype=np.float64)
            st.var = np.array(arrays[f"stats_var_{key}"], dtype=np.float64)
            st.count = int(meta["stats_count"][str(key)])
        return net


# -- optimizer ------------------------------------------------------------------


@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    step: int = 0

    @classmethod
    def zeros(cls, size):
        return cls(np.zeros(size), np.zeros(size), 0)


@dataclass(frozen=True)
class AdamHyper:
    lr: float = 5e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


def adam_step(state, params, grads, hyper=AdamHyper(), step_index=None):
    """One bias-corrected Adam update; returns ``(new_params, new_state)``."""
    grads = np.asarray(grads, dtype=np.float64)
    if grads.shape != params.shape or state.m.shape != params.shape:
        raise UsageError("parameter, gradient and optimizer-state shapes differ")
    if not np.all(np.isfinite(grads)):
        where = "" if step_index is None else f" at step {step_index}"
        raise NumericError(f"non-finite gradient{where}")
    t = state.step + 1
    m = hyper.beta1 * state.m + (1 - hyper.beta1) * grads
    v = hyper.beta2 * state.v + (1 - hyper.beta2) * grads * grads
    m_hat = m / (1 - hyper.beta1**t)
    v_hat = v / (1 - hyper.beta2**t)
    new = params - hyper.lr * m_hat / (np.sqrt(v_hat) + hyper.eps)
    return new, AdamState(m, v, t)


# -- diagnostics ------------------------------------------------------------------


def relative_error(analytic, numeric, floor=1e-4):
    """Elementwise ``|a - n| / max(|a|, |n|, floor)``."""
    return np.abs(analytic - numeric) / np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)


def gradcheck(net, x, upstream=None, step=1e-6, mode=TRAIN, seed=0):
    """Max relative error of :meth:`Mlp.backward` against central differences.

    Checks every parameter and every input entry of the scalar
    ``sum(forward(x) * upstream)``.
    """
    rng = np.random.default_rng(seed)
    x = np.asarray(x, dtype=np.float64)
    out, cache = net.forward(x, mode=mode, update_stats=False)
    if upstream is None:
        upstream = rng.normal(size=out.shape)
    p_grad, x_grad = net.backward(cache, upstream)

    def objective(params=None, inputs=None):
        saved = net.params
        if params is not None:
            net.params = params
        try:
            o, _ = net.forward(x if inputs is None else inputs, mode=mode, update_stats=False)
        finally:
            net.params = saved
        return float(np.sum(o * upstream))

    num_p = np.empty(net.size)
    base = net.params
    for j in range(net.size):
        e = np.zeros(net.size)
        e[j] = step
        num_p[j] = (objective(params=base + e) - objective(params=base - e)) / (2 * step)
    num_x = np.empty(x.size)
    flat = x.reshape(-1)
    for j in range(x.size):
        e = np.zeros(x.size)
        e[j] = step
        num_x[j] = (objective(inputs=(flat + e).reshape(x.shape))
                    - objective(inputs=(flat - e).reshape(x.shape))) / (2 * step)
    return max(float(np.max(relative_error(p_grad, num_p))),
               float(np.max(relative_error(x_grad.reshape(-1), num_x))))
