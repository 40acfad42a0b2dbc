"""Boltzmann (softmax) policy families with closed-form score derivatives.

For a softmax policy over features phi(s, a),

    grad log pi(a|s)   = phi(s, a) - E_pi[phi(s, .)]
    hess log pi(a|s)   = -Cov_pi[phi(s, .)]

The Hessian does not depend on the action taken, so the per-trajectory
score Hessian is a visit-weighted sum of per-state covariances.  The
tabular family keeps that sum as visit counts; the linear family stores
dense d x d matrices.
"""
from __future__ import annotations

import json
from dataclasses import dataclass
from typing import Callable

import numpy as np
from scipy.linalg import block_diag
from scipy.special import log_softmax, softmax

from .envs import Trajectory, TrajectoryBatch

__all__ = [
    "ScoreBundle",
    "BatchScores",
    "TabularScoreHessians",
    "DenseScoreHessians",
    "TabularBoltzmann",
    "LinearBoltzmann",
    "stage_policy",
    "make_policy",
    "assumption_bounds",
    "save_policy",
    "load_policy",
]


@dataclass(frozen=True)
class ScoreBundle:
    """log p, grad and Hessian of sum_t log pi(A_t|S_t) for one trajectory."""

    logp: float
    grad: np.ndarray
    hess: np.ndarray


class TabularScoreHessians:
    """Per-trajectory score Hessians of a tabular softmax, stored as visit counts."""

    def __init__(self, visits: np.ndarray, probs: np.ndarray):
        self.visits = np.asarray(visits, dtype=float)
        self.probs = np.asarray(probs, dtype=float)

    def __len__(self):
        return self.visits.shape[0]

    @property
    def dim(self) -> int:
        return self.probs.size

    def take(self, idx) -> "TabularScoreHessians":
        return TabularScoreHessians(self.visits[idx], self.probs)

    def weighted_matvec(self, weights, v) -> np.ndarray:
        c = np.asarray(weights) @ self.visits
        P = self.probs
        V = np.asarray(v, dtype=float).reshape(P.shape)
        PV = P * V
        return (-(c[:, None]) * (PV - P * PV.sum(axis=1, keepdims=True))).ravel()

    def weighted_dense(self, weights) -> np.ndarray:
        c = np.asarray(weights) @ self.visits
        blocks = [-ci * (np.diag(p) - np.outer(p, p)) for ci, p in zip(c, self.probs)]
        return block_diag(*blocks)

    def dense(self, i: int) -> np.ndarray:
        w = np.zeros(len(self))
        w[i] = 1.0
        return self.weighted_dense(w)


class DenseScoreHessians:
    def __init__(self, mats: np.ndarray):
        self.mats = np.asarray(mats, dtype=float)

    def __len__(self):
        return self.mats.shape[0]

    @property
    def dim(self) -> int:
        return self.mats.shape[1]

    def take(self, idx) -> "DenseScoreHessians":
        return DenseScoreHessians(self.mats[idx])

    def weighted_dense(self, weights) -> np.ndarray:
        return np.tensordot(np.asarray(weights, dtype=float), self.mats, axes=1)

    def weighted_matvec(self, weights, v) -> np.ndarray:
        return self.weighted_dense(weights) @ np.asarray(v, dtype=float)

    def dense(self, i: int) -> np.ndarray:
        return self.mats[i].copy()


@dataclass
class BatchScores:
    """Score quantities for every trajectory of a batch (row i = trajectory i)."""

    logp: np.ndarray
    grads: np.ndarray
    hess: TabularScoreHessians | DenseScoreHessians

    def __len__(self):
        return len(self.logp)

    def bundle(self, i: int) -> ScoreBundle:
        return ScoreBundle(float(self.logp[i]), self.grads[i].copy(), self.hess.dense(i))


def _sample_from(probs: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    u = rng.random(probs.shape[0])
    a = (u[:, None] >= np.cumsum(probs, axis=1)).sum(axis=1)
    return np.minimum(a, probs.shape[1] - 1)


class TabularBoltzmann:
    """pi(a|s) = softmax(theta[s, :])_a with theta stored row-major, d = nS * nA."""

    family = "tabular_boltzmann"

    def __init__(self, n_states: int, n_actions: int):
        self.n_states = int(n_states)
        self.n_actions = int(n_actions)

    @property
    def dim(self) -> int:
        return self.n_states * self.n_actions

    def meta(self) -> dict:
        return {"family": self.family, "n_states": self.n_states, "n_actions": self.n_actions}

    def table(self, theta) -> np.ndarray:
        theta = np.asarray(theta, dtype=float)
        if theta.size != self.dim:
            raise ValueError(f"theta has {theta.size} entries, expected {self.dim}")
        return theta.reshape(self.n_states, self.n_actions)

    def probs(self, theta, states) -> np.ndarray:
        return softmax(self.table(theta)[np.asarray(states)], axis=-1)

    def action_distribution(self, theta, s) -> np.ndarray:
        return self.probs(theta, np.array([s]))[0]

    def sample(self, theta, states, rng) -> np.ndarray:
        return _sample_from(self.probs(theta, states), rng)

    def batch_scores(self, theta, batch: TrajectoryBatch) -> BatchScores:
        n = len(batch)
        nS, nA = self.n_states, self.n_actions
        table = self.table(theta)
        P = softmax(table, axis=1)
        logP = log_softmax(table, axis=1)
        mask = batch.step_mask
        rows = np.broadcast_to(np.arange(n)[:, None], mask.shape)[mask]
        s = batch.states[:, :-1][mask]
        a = batch.actions[mask]
        counts = np.bincount(rows * self.dim + s * nA + a, minlength=n * self.dim).reshape(n, nS, nA)
        visits = counts.sum(axis=2).astype(float)
        grads = (counts - visits[:, :, None] * P).reshape(n, self.dim)
        logp = counts.reshape(n, -1) @ logP.ravel()
        return BatchScores(logp, grads, TabularScoreHessians(visits, P))

    def score_bundle(self, theta, traj: Trajectory) -> ScoreBundle:
        return self.batch_scores(theta, TrajectoryBatch.from_trajectories([traj])).bundle(0)

    def log_prob(self, theta, traj: Trajectory) -> float:
        return float(self.batch_scores(theta, TrajectoryBatch.from_trajectories([traj])).logp[0])

    def feature_bound(self) -> float:
        return 1.0


class LinearBoltzmann:
    """pi(a|s) = softmax_a(phi(s, a) . theta) for a user feature map.

    ``feature_fn(states)`` must return an array of shape (N, n_actions, dim).
    """

    family = "linear_boltzmann"

    def __init__(self, feature_fn: Callable[[np.ndarray], np.ndarray], n_actions: int, dim: int,
                 name: str = "custom", bound: float | None = None):
        self.feature_fn = feature_fn
        self.n_actions = int(n_actions)
        self._dim = int(dim)
        self.name = name
        self._bound = bound

    @classmethod
    def action_blocks(cls, state_features: Callable[[np.ndarray], np.ndarray], n_features: int,
                      n_actions: int, name: str = "action_blocks", bound: float | None = None):
        """phi(s, a) = e_a (x) x(s): one copy of the state features per action."""
        k, nA = int(n_features), int(n_actions)

        def features(states):
            x = np.asarray(state_features(np.asarray(states)), dtype=float).reshape(-1, k)
            F = np.zeros((x.shape[0], nA, nA * k))
            for a in range(nA):
                F[:, a, a * k:(a + 1) * k] = x
            return F

        return cls(features, nA, nA * k, name=name, bound=bound)

    @property
    def dim(self) -> int:
        return self._dim

    def meta(self) -> dict:
        return {"family": self.family, "features": self.name, "n_actions": self.n_actions, "dim": self.dim}

    def _check(self, theta) -> np.ndarray:
        theta = np.asarray(theta, dtype=float).ravel()
        if theta.size != self.dim:
            raise ValueError(f"theta has {theta.size} entries, expected {self.dim}")
        return theta

    def probs(self, theta, states) -> np.ndarray:
        F = self.feature_fn(np.asarray(states))
        return softmax(F @ self._check(theta), axis=-1)

    def action_distribution(self, theta, s) -> np.ndarray:
        return self.probs(theta, np.asarray(s)[None])[0]

    def sample(self, theta, states, rng) -> np.ndarray:
        return _sample_from(self.probs(theta, states), rng)

    def batch_scores(self, theta, batch: TrajectoryBatch) -> BatchScores:
        theta = self._check(theta)
        n = len(batch)
        mask = batch.step_mask
        s = batch.states[:, :-1][mask]
        a = batch.actions[mask]
        F = self.feature_fn(s)
        z = F @ theta
        P = softmax(z, axis=1)
        logP = log_softmax(z, axis=1)
        K = len(a)
        mu = np.einsum("kad,ka->kd", F, P)
        step_grad = F[np.arange(K), a] - mu
        second = np.einsum("ka,kad,kae->kde", P, F, F)
        step_cov = second - mu[:, :, None] * mu[:, None, :]
        # steps are laid out trajectory by trajectory, and every trajectory has >= 1 step
        starts = np.concatenate([[0], np.cumsum(batch.lengths)[:-1]])
        grads = np.add.reduceat(step_grad, starts, axis=0)
        hess = -np.add.reduceat(step_cov, starts, axis=0)
        logp = np.add.reduceat(logP[np.arange(K), a], starts)
        hess = 0.5 * (hess + np.transpose(hess, (0, 2, 1)))
        return BatchScores(logp, grads, DenseScoreHessians(hess))

    def score_bundle(self, theta, traj: Trajectory) -> ScoreBundle:
        return self.batch_scores(theta, TrajectoryBatch.from_trajectories([traj])).bundle(0)

    def log_prob(self, theta, traj: Trajectory) -> float:
        return float(self.batch_scores(theta, TrajectoryBatch.from_trajectories([traj])).logp[0])

    def feature_bound(self) -> float:
        if self._bound is None:
            raise ValueError("feature bound unknown for this feature map; pass one explicitly")
        return self._bound


def stage_policy() -> LinearBoltzmann:
    """Policy for the saddle MDP: state 0 has its own logits, states 1 and 2 share one set."""

    def stage(states):
        s = np.asarray(states).ravel()
        return np.stack([s == 0, s != 0], axis=1).astype(float)

    return LinearBoltzmann.action_blocks(stage, 2, 2, name="stage_onehot", bound=1.0)


def cart_pole_policy() -> LinearBoltzmann:
    return LinearBoltzmann.action_blocks(lambda s: s, 4, 2, name="raw_observation")


def make_policy(family: str, env):
    spec = env.spec
    if family == "tabular_boltzmann":
        if not spec.discrete:
            raise ValueError("tabular policies need a discrete state space")
        return TabularBoltzmann(spec.n_states, spec.n_actions)
    if family == "linear_boltzmann":
        if spec.name == "cart_pole":
            return cart_pole_policy()
        if spec.name == "chain":
            return stage_policy()
        raise ValueError(f"no default feature map for environment {spec.name!r}")
    raise ValueError(f"unknown policy family {family!r}")


def assumption_bounds(policy, feature_bound: float | None = None) -> tuple[float, float, float]:
    """Analytic (M_d, M_h, L_2) for a softmax policy with ||phi(s, a)|| <= B.

    ||phi_a - E phi||          <= 2B                      -> M_d = 2B
    ||Cov phi||  <= E||phi||^2 <= B^2                     -> M_h = B^2
    d Cov / d theta is the third central moment, with norm
    <= E||phi - E phi||^3 <= 2B * B^2                     -> L_2 = 2B^3
    """
    B = float(feature_bound) if feature_bound is not None else policy.feature_bound()
    if B <= 0:
        raise ValueError("feature bound must be positive")
    return 2.0 * B, B * B, 2.0 * B ** 3


def save_policy(path, policy, theta, **extra) -> None:
    payload = dict(policy.meta())
    payload.update(extra)
    payload["theta"] = np.asarray(theta, dtype=float).tolist()
    with open(path, "w") as fh:
        json.dump(payload, fh, indent=1, sort_keys=True)


def load_policy(path) -> tuple[np.ndarray, dict]:
    with open(path) as fh:
        payload = json.load(fh)
    theta = np.asarray(payload.pop("theta"), dtype=float)
    return theta, payload
