"""scikit-learn style wrappers around the deep BSDE solver and the DFP loop.

``fit`` trains on freshly simulated paths; there is no training data in the
supervised sense, so ``X`` is ignored by ``fit`` and only used by
``predict``, which evaluates the fitted maps at given states.
"""
import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_array, check_is_fitted

from .bsde import GRADIENT, BsdeProblem, TrainConfig, make_stage_nets, train
from .exceptions import ShapeError
from .sde import Partition, sample_initial


class _ConstantSigma:
    def __init__(self, sigma):
        self.constant_sigma = sigma
        self.n, self.k = sigma.shape


class DeepBSDESolver(BaseEstimator):
    """Solve ``Y_t = g(X_T) + int F ds - int Z dW`` with ``dX = sigma dW``.

    Parameters
    ----------
    driver, terminal : callable
        ``F(t, x, z)`` and ``g(x)``, vectorized over leading dimensions.
    sigma : array of shape (n, k)
        Constant diffusion matrix of the forward process.
    delta0 : float
        Initial states are uniform on ``[-delta0, delta0]^n``.
    """

    def __init__(self, driver=None, terminal=None, sigma=None, T=1.0, n_steps=20, delta0=1.0,
                 hidden=(40, 40, 40), batchnorm=True, head="direct", steps=2000, batch=256,
                 lr=5e-4, seed=0):
        self.driver = driver
        self.terminal = terminal
        self.sigma = sigma
        self.T = T
        self.n_steps = n_steps
        self.delta0 = delta0
        self.hidden = hidden
        self.batchnorm = batchnorm
        self.head = head
        self.steps = steps
        self.batch = batch
        self.lr = lr
        self.seed = seed

    def fit(self, X=None, y=None):
        from .sde import simulate_driftless

        sigma = check_array(self.sigma, ensure_2d=True, dtype=np.float64)
        n, k = sigma.shape
        part = Partition.uniform(self.T, self.n_steps)
        problem = BsdeProblem(driver=self.driver, terminal=self.terminal, n=n, k=k, partition=part)
        nets = make_stage_nets(n, k, part, hidden=self.hidden, batchnorm=self.batchnorm,
                               head=self.head, sigma=sigma if self.head == GRADIENT else None,
                               seed=self.seed)
        game = _ConstantSigma(sigma)

        def source(step):
            x0 = sample_initial(self.delta0, n, self.batch, self.seed, stream=step)
            return simulate_driftless(game, part, x0, self.seed, stream=step)

        cfg = TrainConfig(steps=self.steps, batch=self.batch, lr=self.lr, seed=self.seed,
                          eval_every=max(1, self.steps // 10))
        self.nets_, self.history_ = train(problem, nets, cfg, source)
        self.n_features_in_ = n
        return self

    def _states(self, X):
        X = check_array(X, dtype=np.float64)
        if X.shape[1] != self.n_features_in_:
            raise ShapeError(f"expected {self.n_features_in_} state coordinates, got {X.shape[1]}")
        return X

    def predict(self, X):
        """``Y_0`` at the initial states ``X``."""
        check_is_fitted(self, "nets_")
        return self.nets_.y0_net(self._states(X))[:, 0]

    def predict_z(self, X, t=0.0):
        check_is_fitted(self, "nets_")
        return self.nets_.z_at(t, self._states(X))


class DeepFictitiousPlay(BaseEstimator):
    """Deep fictitious play on the inter-bank game, scored against its closed form."""

    def __init__(self, N=5, a=0.1, q=0.1, c=0.5, eps=0.5, rho=0.2, sigma=1.0, T=1.0, n_steps=20,
                 stages=3, mode="policy_update", hidden=(32, 32), steps=2000, batch=256, lr=5e-4,
                 delta0=None, warm_start=True, share_players=True, seed=0):
        self.N = N
        self.a = a
        self.q = q
        self.c = c
        self.eps = eps
        self.rho = rho
        self.sigma = sigma
        self.T = T
        self.n_steps = n_steps
        self.stages = stages
        self.mode = mode
        self.hidden = hidden
        self.steps = steps
        self.batch = batch
        self.lr = lr
        self.delta0 = delta0
        self.warm_start = warm_start
        self.share_players = share_players
        self.seed = seed

    def fit(self, X=None, y=None):
        from functools import partial

        from .dfp import DfpConfig, NetSpec, run_dfp
        from .evaluation import RiccatiOracle
        from .sde import delta0_fixed_point
        from .systemic_risk import InterBankParams, build_game, optimal_policy, riccati_solve

        params = InterBankParams(a=self.a, q=self.q, c=self.c, eps=self.eps, rho=self.rho,
                                 sigma=self.sigma, N=self.N, T=self.T)
        game = build_game(params)
        part = Partition.uniform(self.T, self.n_steps)
        riccati = riccati_solve(params)
        delta0 = self.delta0
        if delta0 is None:
            delta0, _ = delta0_fixed_point(game, partial(optimal_policy, riccati), part, seed=self.seed)
        cfg = DfpConfig(stages=self.stages, mode=self.mode,
                        train=TrainConfig(steps=self.steps, batch=self.batch, lr=self.lr,
                                          seed=self.seed, eval_every=max(1, self.steps // 10)),
                        nets=NetSpec(hidden=tuple(self.hidden)), delta0=float(delta0),
                        warm_start=self.warm_start, share_players=self.share_players,
                        seed=self.seed)
        self.report_, self.policy_ = run_dfp(game, cfg, part, oracle=RiccatiOracle(riccati))
        self.game_, self.riccati_, self.delta0_ = game, riccati, float(delta0)
        self.n_features_in_ = self.N
        return self

    def predict(self, X, t=0.0):
        """Joint controls of shape ``(B, N)`` at states ``X`` and time ``t``."""
        check_is_fitted(self, "policy_")
        X = check_array(X, dtype=np.float64)
        if X.shape[1] != self.N:
            raise ShapeError(f"expected {self.N} state coordinates, got {X.shape[1]}")
        return self.policy_(np.full(X.shape[0], float(t)), X)[..., 0]

    def score(self, X, y=None, t=0.0):
        """Negative mean squared control gap to the closed-form equilibrium at ``X``."""
        from .systemic_risk import optimal_policy

        pred = self.predict(X, t)
        truth = optimal_policy(self.riccati_, np.full(pred.shape[0], float(t)), X)[..., 0]
        return -float(np.mean((pred - truth) ** 2))
