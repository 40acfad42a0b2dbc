"""Exact reference computations on enumerable MDPs.

Every length-T path of a :class:`~crpndrm.envs.ChainMDP` is enumerated
with its probability under the policy.  Grouping paths by return gives the
exact return CDF F together with

    grad F(x)   = sum_{w: R(w) <= x} P(w) Phi(w)
    hess F(x)   = sum_{w: R(w) <= x} P(w) (hess l(w) + Phi(w) Phi(w)^T)

and hence the exact DRM value, gradient and Hessian as finite sums over
the constant segments of F.
"""
from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from .distortion import DistortionFunction, drm_value_exact
from .envs import ChainMDP, TrajectoryBatch
from .estimators import SortedBatch, drm_gradient_full, drm_gradient_vr, drm_hessian_full, drm_hessian_vr
from .policies import BatchScores

__all__ = [
    "ExactDistribution",
    "enumerate_distribution",
    "exact_drm",
    "exact_drm_grad_hess",
    "direct_drm",
    "finite_difference_gradient",
    "finite_difference_jacobian",
    "relative_error",
    "batch_expectation",
    "estimator_bias_check",
    "ESTIMATORS",
]

ESTIMATORS = {
    "gradient_full": drm_gradient_full,
    "gradient_vr": drm_gradient_vr,
    "hessian_full": drm_hessian_full,
    "hessian_vr": drm_hessian_vr,
}


@dataclass
class ExactDistribution:
    """Exact return distribution with atom-level score aggregates.

    ``path_*`` arrays hold one entry per enumerated path (in enumeration
    order); ``values``/``probs``/``grad_mass``/``hess_mass`` one per
    distinct return level, ascending.
    """

    values: np.ndarray
    probs: np.ndarray
    grad_mass: np.ndarray
    hess_mass: np.ndarray
    path_returns: np.ndarray
    path_probs: np.ndarray
    path_scores: BatchScores
    bound: float

    @property
    def cdf(self) -> np.ndarray:
        F = np.minimum(np.cumsum(self.probs), 1.0)
        F[-1] = 1.0
        return F

    @property
    def grad_cdf(self) -> np.ndarray:
        dF = np.cumsum(self.grad_mass, axis=0)
        dF[-1] = 0.0
        return dF

    @property
    def hess_cdf(self) -> np.ndarray:
        d2F = np.cumsum(self.hess_mass, axis=0)
        d2F[-1] = 0.0
        return d2F

    @property
    def atoms(self) -> list[tuple[float, float]]:
        return list(zip(self.values.tolist(), self.probs.tolist()))

    def sample_batch(self, n: int, rng: np.random.Generator, upper: float | None = None) -> SortedBatch:
        """Draw ``n`` paths i.i.d. from the exact path distribution."""
        idx = rng.choice(self.path_probs.size, size=n, p=self.path_probs)
        return self.batch_of(idx, upper)

    def batch_of(self, idx, upper: float | None = None) -> SortedBatch:
        idx = np.asarray(idx)
        R = self.path_returns[idx]
        order = np.argsort(R, kind="stable")
        sel = idx[order]
        return SortedBatch(R[order], self.path_scores.grads[sel], self.path_scores.hess.take(sel), upper=upper)

    def to_json(self) -> dict:
        return {
            "values": self.values.tolist(),
            "probs": self.probs.tolist(),
            "grad_cdf": self.grad_cdf.tolist(),
            "bound": self.bound,
        }


def _path_batch(env: ChainMDP):
    paths = list(env.enumerate_paths())
    trajs = [env.trajectory(s, a) for s, a, _ in paths]
    env_probs = np.array([p for _, _, p in paths])
    return TrajectoryBatch.from_trajectories(trajs), env_probs


def enumerate_distribution(env: ChainMDP, policy, theta, bound: float | None = None) -> ExactDistribution:
    if not isinstance(env, ChainMDP):
        raise TypeError("exact enumeration needs an enumerable ChainMDP")
    batch, env_probs = _path_batch(env)
    scores = policy.batch_scores(theta, batch)
    P = env_probs * np.exp(scores.logp)
    R = batch.returns
    # exact float ties only; returns are sums of the same reward table entries
    values, inverse = np.unique(R, return_inverse=True)
    K, d = values.size, scores.grads.shape[1]
    probs = np.bincount(inverse, weights=P, minlength=K)
    grad_mass = np.zeros((K, d))
    np.add.at(grad_mass, inverse, P[:, None] * scores.grads)
    hess_mass = np.zeros((K, d, d))
    for k in range(K):
        w = np.where(inverse == k, P, 0.0)
        G = scores.grads
        hess_mass[k] = scores.hess.weighted_dense(w) + (G.T * w) @ G
    M = env.spec.return_bound if bound is None else float(bound)
    return ExactDistribution(values, probs, grad_mass, hess_mass, R, P, scores, M)


def exact_drm(dist: ExactDistribution, g: DistortionFunction, M_r: float | None = None) -> float:
    return drm_value_exact(dist.atoms, g, dist.bound if M_r is None else M_r)


def exact_drm_grad_hess(dist: ExactDistribution, g: DistortionFunction, M_r: float | None = None):
    """(rho, grad rho, hess rho) integrated exactly over the atom segments."""
    if not g.smooth_enough_for_newton:
        raise ValueError(f"distortion {g.name!r} is not smooth enough for exact Hessians")
    M = dist.bound if M_r is None else float(M_r)
    rho = drm_value_exact(dist.atoms, g, M)
    edges = np.append(dist.values, M)
    lengths = np.diff(edges)
    F = dist.cdf
    # on the last segment F = 1 and both derivatives of F vanish
    inner = slice(0, len(lengths) - 1)
    t = 1.0 - F[inner]
    L = lengths[inner]
    dF = dist.grad_cdf[inner]
    d2F = dist.hess_cdf[inner]
    grad = -((g.h1(t) * L) @ dF)
    a = g.h2(t) * L
    b = g.h1(t) * L
    hess = (dF.T * a) @ dF - np.tensordot(b, d2F, axes=1)
    return rho, grad, 0.5 * (hess + hess.T)


def direct_drm(env: ChainMDP, policy, theta, g: DistortionFunction, M_r: float | None = None) -> float:
    """DRM of the path-weighted return distribution, with no derivative bookkeeping."""
    batch, env_probs = _path_batch(env)
    logp = policy.batch_scores(theta, batch).logp
    P = env_probs * np.exp(logp)
    P = P / P.sum()
    M = env.spec.return_bound if M_r is None else M_r
    return drm_value_exact(list(zip(batch.returns, P)), g, M)


def finite_difference_gradient(f, theta, step: float = 1e-5) -> np.ndarray:
    theta = np.asarray(theta, dtype=float)
    out = np.zeros(theta.size)
    for i in range(theta.size):
        e = np.zeros(theta.size)
        e[i] = step
        out[i] = (f(theta + e) - f(theta - e)) / (2 * step)
    return out


def finite_difference_jacobian(f, theta, step: float = 1e-5) -> np.ndarray:
    """Central-difference Jacobian of a vector-valued ``f``; column i = d f / d theta_i."""
    theta = np.asarray(theta, dtype=float)
    cols = []
    for i in range(theta.size):
        e = np.zeros(theta.size)
        e[i] = step
        cols.append((np.asarray(f(theta + e)) - np.asarray(f(theta - e))) / (2 * step))
    return np.stack(cols, axis=-1)


def relative_error(a, b, floor: float = 1e-8) -> float:
    """||a - b|| / max(||b||, floor)."""
    a, b = np.asarray(a, dtype=float), np.asarray(b, dtype=float)
    return float(np.linalg.norm(a - b) / max(np.linalg.norm(b), floor))


def batch_expectation(dist: ExactDistribution, estimator, g: DistortionFunction, n: int = 2,
                      upper: float | None = None) -> np.ndarray:
    """Exact expectation of ``estimator`` over all ordered i.i.d. batches of size n."""
    K = dist.path_probs.size
    if K ** n > 2_000_000:
        raise ValueError(f"{K}^{n} batch outcomes is too many to enumerate")
    total = None
    grids = np.meshgrid(*[np.arange(K)] * n, indexing="ij")
    combos = np.stack([gr.ravel() for gr in grids], axis=1)
    for idx in combos:
        p = np.prod(dist.path_probs[idx])
        if p == 0.0:
            continue
        val = p * estimator(dist.batch_of(idx, upper), g)
        total = val if total is None else total + val
    return total


def estimator_bias_check(dist: ExactDistribution, g: DistortionFunction, estimator: str, m: int,
                         replications: int, rng, upper: float | None = None):
    """Monte Carlo mean and MSE of an estimator against the exact derivative.

    ``estimator`` names an entry of :data:`ESTIMATORS`.  ``upper`` is the
    integration limit used by the estimator (``None``: batch maximum).
    Returns (mean, mse, exact).
    """
    fn = ESTIMATORS[estimator]
    rng = np.random.default_rng(rng)
    _, grad, hess = exact_drm_grad_hess(dist, g)
    exact = grad if estimator.startswith("gradient") else hess
    est = np.stack([fn(dist.sample_batch(m, rng, upper), g) for _ in range(replications)])
    err = (est - exact).reshape(replications, -1)
    return est.mean(axis=0), float(np.mean(np.sum(err ** 2, axis=1))), exact


def write_report(path, payload: dict) -> None:
    with open(path, "w") as fh:
        json.dump(payload, fh, indent=1, sort_keys=True, default=lambda o: np.asarray(o).tolist())
