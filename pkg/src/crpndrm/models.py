"""Estimator-style wrappers around the optimizers.

``fit`` takes an environment id instead of a data matrix, ``predict_proba``
and ``predict`` map states to action probabilities and greedy actions, and
``score`` is the mean undiscounted default-reward return of fresh episodes.
"""
from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from .distortion import drm_value, EmpiricalDistribution, parse_distortion
from .solver import RunConfig, evaluate_policy, optimize

__all__ = ["CRPNDRM", "ReinforceDRM"]


class CRPNDRM(BaseEstimator):
    """Cubic-regularized policy Newton ascent on a distortion riskmetric.

    :param distortion: distortion string, e.g. ``"gini_deviation"`` or ``"dual_power:2"``
    :param policy: ``"tabular_boltzmann"`` or ``"linear_boltzmann"``
    :param n_iter: number of outer iterations N
    :param batch_m: trajectories per iteration
    :param batch_b: separate Hessian batch size, or None to share the gradient batch
    :param alpha: cubic penalty
    :param estimator: ``"vr"`` or ``"full"``
    :param upper: ``"batch_max"`` or ``"theoretical"`` upper integration limit
    :param inner_iters: gradient-ascent budget of the cubic subproblem
    :param random_state: seed for rollouts
    :param env_kwargs: extra keyword arguments for the environment factory
    """

    _algorithm = "crpn"

    def __init__(self, distortion="identity", policy="tabular_boltzmann", n_iter=1000, batch_m=200,
                 batch_b=None, alpha=2500.0, estimator="vr", upper="batch_max", inner_iters=25,
                 random_state=0, env_kwargs=None):
        self.distortion = distortion
        self.policy = policy
        self.n_iter = n_iter
        self.batch_m = batch_m
        self.batch_b = batch_b
        self.alpha = alpha
        self.estimator = estimator
        self.upper = upper
        self.inner_iters = inner_iters
        self.random_state = random_state
        self.env_kwargs = env_kwargs

    def _config(self, env: str) -> RunConfig:
        return RunConfig(
            env=env, policy=self.policy, distortion=self.distortion, algorithm=self._algorithm,
            n_iter=int(self.n_iter), batch_m=int(self.batch_m),
            batch_b=None if self.batch_b is None else int(self.batch_b), alpha=float(self.alpha),
            seed=int(self.random_state), estimator=self.estimator, upper=self.upper,
            inner_iters=int(self.inner_iters), env_kwargs=dict(self.env_kwargs or {}),
        )

    def fit(self, env, y=None, theta0=None):
        """Optimize the policy on environment ``env`` (an id such as ``"cliff_walk"``)."""
        if not isinstance(env, str):
            raise TypeError("env must be an environment id string")
        res = optimize(self._config(env), theta0=theta0)
        self.theta_ = res.theta
        self.logs_ = res.logs
        self.policy_ = res.policy
        self.env_ = res.env
        self.n_features_in_ = res.policy.dim
        return self

    def predict_proba(self, states):
        check_is_fitted(self, "theta_")
        return self.policy_.probs(self.theta_, np.asarray(states))

    def predict(self, states):
        return np.argmax(self.predict_proba(states), axis=-1)

    def evaluate(self, episodes=1000, random_state=None):
        check_is_fitted(self, "theta_")
        seed = self.random_state + 1_000_003 if random_state is None else random_state
        return evaluate_policy(self.env_, self.policy_, self.theta_, episodes, seed)

    def score(self, X=None, y=None, episodes=1000):
        """Mean undiscounted default-reward return over fresh evaluation episodes."""
        return float(np.mean(self.evaluate(episodes)))

    def risk_score(self, episodes=1000):
        """DRM of the evaluation returns under the fitted distortion."""
        ret = self.evaluate(episodes)
        return drm_value(EmpiricalDistribution(ret), parse_distortion(self.distortion))


class ReinforceDRM(CRPNDRM):
    """First-order DRM policy gradient with step length sqrt(2 ||g|| / alpha)."""

    _algorithm = "reinforce"
