"""Deep fictitious play: decoupled stage problems solved by the deep BSDE method.

At stage ``m + 1`` every player faces a BSDE whose driver freezes the
stage-``m`` policy, either for the opponents only (fictitious play, the
driver minimizes over the own control) or for everybody (policy update,
the driver is linear in ``z``). The next policy is obtained from the new
Z-networks through the best-response map,

    alpha^{m+1}(t, x) = a(t, x, alpha^m(t, x), Z^{m+1}(t, x)).
"""
import hashlib
import json
import threading
import time
from collections import OrderedDict
from dataclasses import asdict, dataclass, field
from typing import Callable, List, Optional

import numpy as np

from . import checkpoint, rng
from .bsde import (DIRECT, GRADIENT, TIME, BsdeProblem, StageNets, TrainConfig, make_stage_nets,
                   rollout, train)
from .evaluation import ground_truth_paths, predicted_gradients, rse
from .exceptions import (ConfigError, ConvergenceError, DeepFPError, DomainError, OptimizationError,
                         TrainingError, UsageError)
from .game import _with_own, best_response, best_responses, eval_phi
from .sde import path_costs, sample_initial, simulate_controlled, simulate_driftless

FICTITIOUS_PLAY = "fictitious_play"
POLICY_UPDATE = "policy_update"
MODES = (FICTITIOUS_PLAY, POLICY_UPDATE)

_TAG_TRAIN = 11
_TAG_EVAL = 12
_TAG_BEST_RESPONSE = 13
_TAG_COST = 14
_TAG_INIT = 15


def zero_policy(game):
    def policy(t, x):
        return np.zeros(np.shape(x)[:-1] + (game.N, game.d_alpha))

    return policy


def _digest(*arrays):
    h = hashlib.blake2b(digest_size=16)
    for a in arrays:
        a = np.ascontiguousarray(a, dtype=np.float64)
        h.update(str(a.shape).encode())
        h.update(a.tobytes())
    return h.digest()


class StagePolicy:
    """The stage-``m`` joint policy as a chain of trained Z-networks.

    ``chain[j]`` holds the networks trained at stage ``j + 1``: a list with
    one :class:`StageNets` per player, or a single entry shared by all
    players through the game's symmetry. Evaluation runs the best-response
    recursion from ``alpha0``; for separable games only the last stage is
    needed. Results are memoized per ``(t, x)`` content behind a lock.
    """

    def __init__(self, game, chain=(), alpha0=None, shared=False, cache_size=8):
        if shared and game.symmetry is None:
            raise UsageError("player sharing needs a game with a symmetry callback")
        self.game = game
        self.chain = [list(stage) for stage in chain]
        for stage in self.chain:
            if len(stage) != (1 if shared else game.N):
                raise UsageError("each stage needs one set of nets per player (or one shared set)")
        self.alpha0 = alpha0 if alpha0 is not None else zero_policy(game)
        self.shared = bool(shared)
        self._cache = OrderedDict()
        self._cache_size = cache_size
        self._lock = threading.Lock()
        if shared:
            self._perms = [game.symmetry(i) for i in range(game.N)]

    @property
    def stage(self):
        return len(self.chain)

    def extend(self, stage_nets):
        return StagePolicy(self.game, self.chain + [list(stage_nets)], self.alpha0, self.shared,
                           self._cache_size)

    def truncated(self, m):
        return StagePolicy(self.game, self.chain[:m], self.alpha0, self.shared, self._cache_size)

    def player_nets(self, j, i):
        """Networks of player ``i`` at stage ``j`` (1-based stage)."""
        stage = self.chain[j - 1]
        return stage[0] if self.shared else stage[i]

    def z(self, j, t, x):
        """All players' ``Z`` from stage ``j``; shape ``S + (k, N)``."""
        x = np.asarray(x, dtype=np.float64)
        game = self.game
        stage = self.chain[j - 1]
        if not self.shared:
            return np.stack([nets.z_at(t, x) for nets in stage], axis=-1)
        batch = x.shape[:-1]
        views = np.stack([x[..., sp] for sp, _ in self._perms], axis=0)
        t_all = np.broadcast_to(np.asarray(t, dtype=np.float64), batch)
        t_all = np.broadcast_to(t_all, (game.N,) + batch)
        z0 = stage[0].z_at(t_all, views)  # (N,) + S + (k,)
        out = np.empty(batch + (game.k, game.N))
        for i, (_, npm) in enumerate(self._perms):
            out[..., i] = z0[i][..., npm]
        return out

    def _evaluate(self, t, x):
        game = self.game
        alpha = np.asarray(self.alpha0(t, x), dtype=np.float64)
        if self.stage == 0:
            return alpha
        start = self.stage if game.separable else 1
        for j in range(start, self.stage + 1):
            try:
                alpha = best_responses(game, t, x, alpha, self.z(j, t, x))
            except (OptimizationError, ConvergenceError) as exc:
                raise type(exc)(f"policy recursion failed at stage {j}: {exc}") from exc
        return alpha

    def __call__(self, t, x):
        x = np.asarray(x, dtype=np.float64)
        t = np.broadcast_to(np.asarray(t, dtype=np.float64), x.shape[:-1])
        key = _digest(t, x)
        with self._lock:
            hit = self._cache.get(key)
            if hit is not None:
                self._cache.move_to_end(key)
                return hit.copy()
        alpha = self._evaluate(t, x)
        with self._lock:
            self._cache[key] = alpha
            while len(self._cache) > self._cache_size:
                self._cache.popitem(last=False)
        return alpha.copy()


class StageDriver:
    """Driver ``F(t, x, z)`` of player ``i``'s decoupled problem.

    Policy update evaluates the Hamiltonian at the frozen joint policy;
    fictitious play replaces player ``i``'s control by its best response to
    ``z``. In both cases the gradient in ``z`` is ``phi`` at the control used
    (for fictitious play by the envelope theorem).
    """

    def __init__(self, game, prev, i, mode):
        if mode not in MODES:
            raise ValueError(f"unknown decoupling mode {mode!r}")
        self.game, self.prev, self.i, self.mode = game, prev, int(i), mode

    def _control(self, t, x, z):
        alpha = np.asarray(self.prev(t, x), dtype=np.float64)
        if self.mode == POLICY_UPDATE:
            return alpha
        try:
            beta = best_response(self.game, self.i, t, x, alpha, z)
        except (OptimizationError, ConvergenceError) as exc:
            t = np.asarray(t)
            raise type(exc)(f"best response of player {self.i} failed for t in "
                            f"[{t.min():.4g}, {t.max():.4g}]: {exc}") from exc
        return _with_own(alpha, self.i, beta)

    def value_and_grad(self, t, x, z):
        game = self.game
        t = np.broadcast_to(np.asarray(t, dtype=np.float64), np.shape(x)[:-1])
        alpha = self._control(t, x, z)
        phi = eval_phi(game, t, x, alpha)
        f = game.running_cost(t, x, alpha)[..., self.i]
        return np.sum(phi * z, axis=-1) + f, phi

    def __call__(self, t, x, z):
        return self.value_and_grad(t, x, z)[0]


def stage_driver(game, prev, i, mode):
    return StageDriver(game, prev, i, mode)


def player_problem(game, prev, i, mode, partition):
    def terminal(x):
        return game.terminal_cost(x)[..., i]

    return BsdeProblem(driver=StageDriver(game, prev, i, mode), terminal=terminal,
                       n=game.n, k=game.k, partition=partition)


def path_source(game, partition, delta0, batch, seed, tag):
    """Fresh driftless batches, one per training step, keyed by ``(seed, tag, step)``."""
    def source(step):
        stream = rng.derive_stream(*tag, step)
        x0 = sample_initial(delta0, game.n, batch, seed, stream=stream)
        return simulate_driftless(game, partition, x0, seed, stream=stream)

    return source


def evaluation_paths(game, partition, delta0, batch, seed):
    stream = rng.derive_stream(_TAG_EVAL)
    x0 = sample_initial(delta0, game.n, batch, seed, stream=stream)
    return simulate_driftless(game, partition, x0, seed, stream=stream)


# -- configuration ------------------------------------------------------------


@dataclass(frozen=True)
class NetSpec:
    hidden: tuple = (40, 40, 40)
    activation: str = "tanh"
    batchnorm: bool = True
    representation: str = TIME
    head: str = GRADIENT
    momentum: float = 0.99

    def __post_init__(self):
        object.__setattr__(self, "hidden", tuple(int(w) for w in self.hidden))


@dataclass(frozen=True)
class DfpConfig:
    """Outer-loop settings.

    ``alpha0`` is ``None`` (zero control) or a callable policy. A positive
    ``clip_bound`` clamps every weight of the freshly trained nets.
    ``early_stop_tol`` stops once two consecutive stages are closer than
    the tolerance.
    """

    stages: int = 10
    mode: str = POLICY_UPDATE
    train: TrainConfig = TrainConfig(steps=3000)
    nets: NetSpec = NetSpec()
    delta0: float = 1.0
    alpha0: Optional[Callable] = None
    clip_bound: Optional[float] = None
    warm_start: bool = True
    early_stop_tol: Optional[float] = None
    share_players: bool = False
    eval_batch: int = 1024
    rse_paths: int = 256
    seed: int = 0

    def __post_init__(self):
        if self.stages < 1:
            raise ConfigError("at least one stage is required")
        if self.mode not in MODES:
            raise ConfigError(f"unknown decoupling mode {self.mode!r}")
        if self.clip_bound is not None and not self.clip_bound > 0:
            raise ConfigError("clip_bound must be positive")
        if self.delta0 < 0:
            raise ConfigError("delta0 must be non-negative")

    def to_dict(self):
        d = asdict(self)
        d["alpha0"] = None if self.alpha0 is None else getattr(self.alpha0, "__name__", "custom")
        d["nets"]["hidden"] = list(self.nets.hidden)
        return d


def fresh_nets(game, partition, spec, seed):
    head = spec.head if game.constant_sigma is not None else DIRECT
    return make_stage_nets(game.n, game.k, partition, hidden=spec.hidden,
                           activation=spec.activation, batchnorm=spec.batchnorm,
                           representation=spec.representation, head=head,
                           sigma=game.constant_sigma, seed=seed, momentum=spec.momentum)


def clip_weights(nets, bound):
    """Clamp the multiplicative parameters of every net of ``nets`` to ``[-bound, bound]``.

    Weight matrices and batch-norm scales are clamped; biases and batch-norm
    shifts are left alone. Works in place and returns ``nets``.
    """
    if not bound > 0:
        raise DomainError("the clipping bound must be positive")
    for net in nets.named_nets().values():
        for name in net.weight_names():
            view = net.view(name)
            np.clip(view, -bound, bound, out=view)
    return nets


# -- diagnostics -----------------------------------------------------------------


def policy_distance(game, policy_a, policy_b, paths):
    """``int_0^T E|alpha_a - alpha_b|^2 dt`` along ``paths`` with its standard error."""
    B = paths.batch_size
    if B == 0:
        raise DomainError("cannot estimate a distance from an empty batch")
    part = paths.partition
    K = part.n_steps
    t = np.broadcast_to(part.left_points, (B, K))
    x = paths.states[:, :K]
    gap = np.asarray(policy_a(t, x)) - np.asarray(policy_b(t, x))
    per_path = np.einsum("bk,k->b", np.sum(gap**2, axis=(-2, -1)), part.dt)
    stderr = float(per_path.std(ddof=1) / np.sqrt(B)) if B > 1 else float("inf")
    return float(per_path.mean()), stderr


def interpolate_policy(policy, holder_const, grid, time_conditioned=False):
    """Hoelder envelope ``inf_{t' in grid} [alpha(t', x) + L' |t' - t|^(1/2)]``.

    ``grid`` is the finite set of times on which ``policy`` is defined.
    Time-conditioned policies are already defined for every ``t`` and are
    returned unchanged.
    """
    if not holder_const > 0:
        raise DomainError("the Hoelder constant must be positive")
    if time_conditioned:
        return policy
    grid = np.asarray(grid, dtype=np.float64)

    def extended(t, x):
        x = np.asarray(x, dtype=np.float64)
        batch = x.shape[:-1]
        t = np.broadcast_to(np.asarray(t, dtype=np.float64), batch)
        best = None
        for tp in grid:
            vals = np.asarray(policy(np.full(batch, tp), x), dtype=np.float64)
            pen = holder_const * np.sqrt(np.abs(tp - t))
            cand = vals + pen.reshape(batch + (1,) * (vals.ndim - len(batch)))
            best = cand if best is None else np.minimum(best, cand)
        return best

    return extended


def _replace_player(policy, i, control):
    def joint(t, x):
        alpha = np.array(policy(t, x), dtype=np.float64)
        alpha[..., i, :] = control(t, x, alpha)
        return alpha

    return joint


def best_response_policy(game, policy, nets, i):
    """Joint policy where player ``i`` best-responds through ``nets``."""
    def control(t, x, alpha):
        t = np.broadcast_to(np.asarray(t, dtype=np.float64), np.shape(x)[:-1])
        return best_response(game, i, t, x, alpha, nets.z_at(t, x))

    return _replace_player(policy, i, control)


@dataclass(frozen=True)
class GapConfig:
    train: TrainConfig = TrainConfig(steps=3000)
    nets: NetSpec = NetSpec()
    delta0: float = 1.0
    eval_batch: int = 4096
    seed: int = 0


@dataclass(frozen=True)
class GapResult:
    gap: float
    stderr: float
    cost_policy: float
    cost_best_response: float
    final_loss: float

    def to_dict(self):
        return asdict(self)


def eps_nash_gap(game, policy, i, partition, config=GapConfig()):
    """Exploitability of ``policy`` for player ``i``.

    A fresh deep BSDE best response is trained against the frozen opponents
    (fictitious-play driver). Both joint policies are then costed on the same
    Monte Carlo paths; the gap is ``J^i(policy) - J^i(best response)`` with
    the standard error of the paired difference.
    """
    problem = player_problem(game, policy, i, FICTITIOUS_PLAY, partition)
    nets = fresh_nets(game, partition, config.nets, rng.derive_stream(_TAG_BEST_RESPONSE, i))
    source = path_source(game, partition, config.delta0, config.train.batch, config.seed,
                         (_TAG_BEST_RESPONSE, i))
    nets, history = train(problem, nets, config.train, source)
    br = best_response_policy(game, policy, nets, i)
    stream = rng.derive_stream(_TAG_COST, i)
    x0 = sample_initial(config.delta0, game.n, config.eval_batch, config.seed, stream=stream)
    base = simulate_controlled(game, policy, partition, x0, config.seed, stream=stream)
    dev = simulate_controlled(game, br, partition, x0, config.seed, stream=stream,
                              increments=base.increments)
    c_base = path_costs(game, policy, base)[:, i]
    c_dev = path_costs(game, br, dev)[:, i]
    diff = c_base - c_dev
    B = diff.size
    final = history.losses[-1] if history.rows else float("nan")
    return GapResult(gap=float(diff.mean()), stderr=float(diff.std(ddof=1) / np.sqrt(B)),
                     cost_policy=float(c_base.mean()), cost_best_response=float(c_dev.mean()),
                     final_loss=float(final))


# -- the outer loop -------------------------------------------------------------


@dataclass
class StageRecord:
    stage: int
    history: List[dict]
    final_loss: float
    policy_distance_prev: List[float]
    policy_distance_oracle: Optional[List[float]] = None
    rse: Optional[float] = None
    wall_time: float = 0.0

    def to_dict(self, timings=True):
        d = asdict(self)
        if not timings:
            d.pop("wall_time")
        return d


@dataclass
class DfpReport:
    config: dict
    stages: List[StageRecord] = field(default_factory=list)
    completed: bool = False
    error: Optional[str] = None

    @staticmethod
    def _ratios(values):
        vals = [v for v in values if v is not None]
        return [b / a for a, b in zip(vals[:-1], vals[1:]) if a > 0]

    @property
    def rate_prev(self):
        r = self._ratios([s.policy_distance_prev[0] for s in self.stages[1:]])
        return float(np.mean(r)) if r else None

    @property
    def rate_oracle(self):
        r = self._ratios([s.policy_distance_oracle[0] if s.policy_distance_oracle else None
                          for s in self.stages])
        return float(np.mean(r)) if r else None

    @property
    def rate(self):
        """Estimated contraction ratio: oracle-based when available."""
        return self.rate_oracle if self.rate_oracle is not None else self.rate_prev

    def to_dict(self, timings=True):
        return {
            "config": self.config,
            "completed": self.completed,
            "error": self.error,
            "rate": self.rate,
            "rate_oracle": self.rate_oracle,
            "rate_prev": self.rate_prev,
            "stages": [s.to_dict(timings) for s in self.stages],
        }

    def to_json(self, timings=True):
        return json.dumps(self.to_dict(timings), indent=2, sort_keys=True, allow_nan=True) + "\n"

    def timings(self):
        return {"stages": [{"stage": s.stage, "wall_time": s.wall_time} for s in self.stages]}


def _oracle_evaluator(game, problem, nets, oracle, eval_paths, gt):
    """Metrics of the nets being trained against the closed-form solution."""
    part = eval_paths.partition
    B = eval_paths.batch_size
    values, _ = oracle.value_and_gradient(np.broadcast_to(part.times, (B, part.n_steps + 1)),
                                          eval_paths.states)

    def evaluate(current):
        Y, mismatch = rollout(problem, current, eval_paths)
        # at T the Y error is the mismatch itself, so the sup runs over t_0..t_{N-1}
        per_time = np.mean((Y[:, :-1] - values[:, :-1, 0]) ** 2, axis=0)
        out = {"eval_loss": float(np.mean(mismatch**2)),
               "y_error": float(np.max(per_time)),
               "y0_error": float(per_time[0])}
        if gt is not None:
            gt_paths, truth = gt
            out["rse"] = rse(truth, predicted_gradients(current, gt_paths))
        return out

    return evaluate


def run_stage(game, prev, config, stage, partition, init=None, oracle=None, eval_paths=None, gt=None):
    """Train every (or the shared) player's stage problem against ``prev``.

    Returns ``(next_policy, trained_nets, histories)``.
    """
    players = [0] if prev.shared else list(range(game.N))
    trained, histories = [], []
    for i in players:
        nets = init[i].copy() if init is not None else fresh_nets(
            game, partition, config.nets, rng.derive_stream(_TAG_INIT, config.seed, stage, i))
        problem = player_problem(game, prev, i, config.mode, partition)
        source = path_source(game, partition, config.delta0, config.train.batch, config.seed,
                             (_TAG_TRAIN, stage))
        evaluator = None
        if oracle is not None and eval_paths is not None and i == 0:
            evaluator = _oracle_evaluator(game, problem, nets, oracle, eval_paths, gt)
        try:
            nets, history = train(problem, nets, config.train, source, evaluator=evaluator)
        except TrainingError as exc:
            raise TrainingError(f"stage {stage}, player {i}: {exc}", step=exc.step,
                                last_good=exc.last_good, player=i, stage=stage) from exc
        if config.clip_bound is not None:
            clip_weights(nets, config.clip_bound)
        trained.append(nets)
        histories.append(history)
    return prev.extend(trained), trained, histories


def save_policy(path, policy, meta=None):
    """Store the whole chain of a :class:`StagePolicy` in one checkpoint."""
    header = {"stage": policy.stage, "shared": policy.shared, "game": policy.game.name,
              "stages": [], "meta": meta or {}}
    arrays = {}
    for j, stage in enumerate(policy.chain):
        entry = []
        for p, nets in enumerate(stage):
            prefix = f"s{j}p{p}."
            m, a = checkpoint.pack_nets(nets.named_nets(), prefix)
            entry.append({"describe": nets.describe(), "nets": m, "prefix": prefix})
            arrays.update(a)
        header["stages"].append(entry)
    return checkpoint.save(path, header, arrays)


def load_policy(path, game, alpha0=None):
    header, arrays = checkpoint.load(path)
    from .exceptions import CheckpointError

    if header.get("game") != game.name:
        raise CheckpointError(f"checkpoint was written for game {header.get('game')!r}, not {game.name!r}")
    chain = []
    for entry in header["stages"]:
        stage = []
        for e in entry:
            nets = checkpoint.unpack_nets(e["nets"], arrays, e["prefix"])
            sn = StageNets.from_named(e["describe"], nets)
            if sn.y0_net.config.input_dim != game.n:
                raise CheckpointError("checkpoint networks do not match the game's state dimension")
            stage.append(sn)
        chain.append(stage)
    return StagePolicy(game, chain, alpha0=alpha0, shared=header["shared"]), header.get("meta", {})


def run_dfp(game, config, partition, oracle=None, checkpoint_dir=None, log=None):
    """Run up to ``config.stages`` stages and report per-stage diagnostics.

    ``oracle`` (optional) exposes ``policy(t, x)`` and
    ``value_and_gradient(t, x)``; with it the report carries distances to
    the true equilibrium and the RSE of player 0's value gradient. A failing
    stage ends the run with a partial report. Returns ``(report, policy)``.
    """
    report = DfpReport(config=config.to_dict())
    policy = StagePolicy(game, alpha0=config.alpha0, shared=config.share_players)
    eval_paths = evaluation_paths(game, partition, config.delta0, config.eval_batch, config.seed)
    gt = None
    if oracle is not None and getattr(oracle, "riccati", None) is not None:
        gt = ground_truth_paths(game, oracle.riccati, partition, config.delta0, J=config.rse_paths,
                                seed=config.seed)
    init = None
    for m in range(1, config.stages + 1):
        start = time.perf_counter()
        try:
            new, trained, histories = run_stage(game, policy, config, m, partition, init=init,
                                                oracle=oracle, eval_paths=eval_paths, gt=gt)
        except DeepFPError as exc:
            report.error = f"{type(exc).__name__}: {exc}"
            return report, policy
        d_prev = policy_distance(game, policy, new, eval_paths)
        d_oracle = policy_distance(game, new, oracle.policy, eval_paths) if oracle is not None else None
        stage_rse = None
        if gt is not None:
            stage_rse = rse(gt[1], predicted_gradients(new.player_nets(m, 0), gt[0]))
        final = float(np.mean([h.rows[-1]["loss"] for h in histories if h.rows])) if any(
            h.rows for h in histories) else float("nan")
        record = StageRecord(stage=m, history=histories[0].rows, final_loss=final,
                             policy_distance_prev=list(d_prev),
                             policy_distance_oracle=None if d_oracle is None else list(d_oracle),
                             rse=stage_rse, wall_time=time.perf_counter() - start)
        report.stages.append(record)
        policy = new
        if checkpoint_dir is not None:
            save_policy(f"{checkpoint_dir}/stage_{m:02d}.ckpt", policy)
        if log is not None:
            log(record)
        if config.warm_start:
            init = trained
        if config.early_stop_tol is not None and d_prev[0] < config.early_stop_tol:
            break
    report.completed = True
    return report, policy
