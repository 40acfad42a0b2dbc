"""CRPN-DRM, the REINFORCE-DRM baseline and stationarity diagnostics.

Each iteration rolls out a batch under the current parameters, estimates
the DRM gradient and a Hessian operator, and takes an ascent step.  CRPN
steps (approximately) maximize the cubic model

    m(D) = <g, D> + 1/2 <H D, D> - alpha/6 ||D||^3

while REINFORCE steps move along g with length sqrt(2 ||g|| / alpha),
which is the maximizer of the same model with H = 0.
"""
from __future__ import annotations

import csv
import dataclasses
import math
import time
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
from scipy.optimize import brentq
from scipy.sparse.linalg import ArpackNoConvergence, LinearOperator, eigsh

from .distortion import DistortionFunction, parse_distortion
from .envs import make_env, rollout_batch
from .estimators import (
    DENSE_LIMIT,
    TheoryConstants,
    build_coefficients,
    drm_gradient_full,
    drm_gradient_vr,
    drm_value_batch,
    estimate_derivatives,
    sort_batch,
)
from .policies import make_policy

__all__ = [
    "RunConfig",
    "IterationLog",
    "RunResult",
    "NonFiniteError",
    "SubproblemResult",
    "Schedule",
    "cubic_model",
    "cubic_subproblem",
    "top_eigenpair",
    "crpn_drm",
    "reinforce_drm",
    "optimize",
    "evaluate_policy",
    "theoretical_schedule",
    "stationarity_report",
    "write_learning_curve",
]

ALGORITHMS = ("crpn", "reinforce")


@dataclass(frozen=True)
class RunConfig:
    """Everything needed to reproduce one optimization run.

    ``upper`` picks the estimators' upper integration limit: ``"batch_max"``
    (largest sampled return) or ``"theoretical"`` (the environment's M_r).
    ``batch_b`` of ``None`` shares the gradient batch for the Hessian.
    """

    env: str = "cliff_walk"
    policy: str = "tabular_boltzmann"
    distortion: str = "identity"
    algorithm: str = "crpn"
    n_iter: int = 1000
    batch_m: int = 200
    batch_b: int | None = None
    alpha: float = 2500.0
    seed: int = 0
    schedule: str = "fixed"
    eps: float | None = None
    estimator: str = "vr"
    upper: str = "batch_max"
    inner_iters: int = 25
    inner_tol: float = 1e-10
    subproblem: str = "global"
    env_kwargs: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.algorithm not in ALGORITHMS:
            raise ValueError(f"algorithm must be one of {ALGORITHMS}")
        if self.n_iter < 1:
            raise ValueError("n_iter must be >= 1")
        if self.batch_m < 2 or (self.batch_b is not None and self.batch_b < 2):
            raise ValueError("batch sizes must be >= 2")
        if not self.alpha > 0:
            raise ValueError("alpha must be positive")
        if self.schedule not in ("fixed", "theoretical"):
            raise ValueError("schedule must be 'fixed' or 'theoretical'")
        if self.schedule == "theoretical" and (self.eps is None or self.eps <= 0):
            raise ValueError("the theoretical schedule needs eps > 0")
        if self.estimator not in ("vr", "full"):
            raise ValueError("estimator must be 'vr' or 'full'")
        if self.upper not in ("batch_max", "theoretical"):
            raise ValueError("upper must be 'batch_max' or 'theoretical'")
        if self.subproblem not in ("cauchy", "global"):
            raise ValueError("subproblem must be 'cauchy' or 'global'")
        if self.inner_iters < 0:
            raise ValueError("inner_iters must be >= 0")
        parse_distortion(self.distortion)

    def replace(self, **changes) -> "RunConfig":
        return dataclasses.replace(self, **changes)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


@dataclass(frozen=True)
class IterationLog:
    k: int
    drm_estimate: float
    grad_norm: float
    step_norm: float
    lambda_max: float
    return_mean: float
    return_std: float
    return_min: float
    return_max: float
    wall_time: float = field(default=0.0, compare=False)

    CSV_FIELDS = ("k", "drm_estimate", "grad_norm", "step_norm", "lambda_max",
                  "return_mean", "return_std", "return_min", "return_max")

    def row(self) -> list:
        return [getattr(self, f) for f in self.CSV_FIELDS]


@dataclass
class RunResult:
    theta: np.ndarray
    logs: list[IterationLog]
    config: RunConfig
    policy: object
    env: object


class NonFiniteError(FloatingPointError):
    """Raised when an iterate stops being finite; carries the last good parameters."""

    def __init__(self, message: str, theta: np.ndarray, k: int):
        super().__init__(message)
        self.theta = theta
        self.k = k


# --------------------------------------------------------------------------- subproblem


def cubic_model(g, hvp: Callable, alpha: float, delta) -> float:
    delta = np.asarray(delta, dtype=float)
    return float(g @ delta + 0.5 * delta @ hvp(delta) - alpha / 6.0 * np.linalg.norm(delta) ** 3)


@dataclass(frozen=True)
class SubproblemResult:
    step: np.ndarray
    model_value: float
    cauchy_value: float
    iterations: int
    lambda_max: float


def top_eigenpair(hvp: Callable, dim: int, hess: np.ndarray | None = None, seed: int = 0):
    """Largest eigenvalue/vector of a symmetric operator and its spectral norm.

    Dense ``eigh`` when a matrix is available or cheap to assemble from
    ``hvp``, Lanczos (ARPACK) otherwise.
    """
    if hess is not None:
        w, V = np.linalg.eigh(hess)
        return float(w[-1]), V[:, -1], float(max(abs(w[0]), abs(w[-1])))
    if dim <= DENSE_LIMIT:
        # d operator applications are cheap at this size and avoid Lanczos corner cases
        cols = np.column_stack([hvp(e) for e in np.eye(dim)])
        return top_eigenpair(hvp, dim, 0.5 * (cols + cols.T))
    op = LinearOperator((dim, dim), matvec=lambda v: hvp(np.ravel(v)), dtype=float)
    v0 = np.random.default_rng(seed).standard_normal(dim)
    try:
        w, V = eigsh(op, k=1, which="LA", v0=v0, tol=1e-8, maxiter=20 * dim)
        lm = eigsh(op, k=1, which="LM", v0=v0, tol=1e-6, maxiter=20 * dim, return_eigenvectors=False)
    except ArpackNoConvergence as exc:
        # fall back to whatever converged; a missing norm estimate only slows the inner solver
        if len(exc.eigenvalues) == 0:
            raise
        w, V = exc.eigenvalues, exc.eigenvectors
        lm = np.abs(w)
    return float(w[-1]), V[:, -1], float(np.max(np.abs(lm)))


def _secular_step(g, evals, evecs, alpha):
    """Global maximizer of the cubic model from a full eigendecomposition.

    Solves (lam I - H) D = g with lam = alpha/2 ||D|| and lam >= max(lambda_max, 0).
    """
    gi = evecs.T @ g
    lo = max(evals[-1], 0.0)

    def phi(lam):
        return np.linalg.norm(gi / (lam - evals)) - 2.0 * lam / alpha

    span = np.ptp(evals) + np.linalg.norm(g) + 1.0
    eps = 1e-12 * span
    if phi(lo + eps) <= 0:
        # hard case: the multiplier sits on the top eigenvalue
        lam = lo
        mask = evals < lam - eps
        base = np.zeros_like(gi)
        base[mask] = gi[mask] / (lam - evals[mask])
        rest = (2.0 * lam / alpha) ** 2 - base @ base
        if rest > 0:
            base[-1] += math.sqrt(rest) * (1.0 if gi[-1] >= 0 else -1.0)
        return evecs @ base
    hi = lo + 1.0
    while phi(hi) > 0:
        hi = lo + 2.0 * (hi - lo)
    lam = brentq(phi, lo + eps, hi, xtol=1e-14 * hi, rtol=4 * np.finfo(float).eps, maxiter=500)
    return evecs @ (gi / (lam - evals))


def cubic_subproblem(g, hvp: Callable, alpha: float, max_iter: int = 25, tol: float = 1e-10,
                     hess: np.ndarray | None = None, eig=None, method: str = "cauchy") -> SubproblemResult:
    """Approximately maximize the cubic model; never worse than the Cauchy point.

    ``method="cauchy"`` starts from the Hessian-free Cauchy point
    sqrt(2||g||/alpha) g/||g|| and runs gradient ascent on the model with
    ``hvp`` only (falling back to the top eigenvector when g = 0).
    ``method="global"`` also tries the curvature-aware point along g, the
    top-eigenvector step and, when the dense Hessian is given, the exact
    secular-equation solution, then polishes the best of them.
    """
    if method not in ("cauchy", "global"):
        raise ValueError("method must be 'cauchy' or 'global'")
    if not alpha > 0:
        raise ValueError("alpha must be positive")
    g = np.asarray(g, dtype=float)
    if not np.all(np.isfinite(g)):
        raise ValueError("gradient is not finite")
    d = g.size
    gnorm = float(np.linalg.norm(g))
    dense_eig = None
    if hess is not None:
        dense_eig = np.linalg.eigh(hess)
        lam_max = float(dense_eig[0][-1])
        v_top = dense_eig[1][:, -1]
        spec_norm = float(max(abs(dense_eig[0][0]), abs(lam_max)))
    elif eig is not None:
        lam_max, v_top, spec_norm = eig
    else:
        lam_max, v_top, spec_norm = top_eigenpair(hvp, d)

    def model(x):
        return cubic_model(g, hvp, alpha, x)

    zero = np.zeros(d)
    candidates = []
    cauchy_value = 0.0
    if gnorm > 0:
        u = g / gnorm
        cauchy = math.sqrt(2.0 * gnorm / alpha) * u
        cauchy_value = model(cauchy)
        candidates.append((cauchy_value, cauchy))
    if gnorm > 0 and method == "global":
        kappa = float(u @ hvp(u))
        r = (kappa + math.sqrt(kappa * kappa + 2.0 * alpha * gnorm)) / alpha
        candidates.append((model(r * u), r * u))
    if lam_max > 0 and (method == "global" or gnorm == 0):
        v = v_top if g @ v_top >= 0 else -v_top
        gv = abs(float(g @ v))
        r = (lam_max + math.sqrt(lam_max ** 2 + 2.0 * alpha * gv)) / alpha
        candidates.append((model(r * v), r * v))
    if method == "global" and dense_eig is not None and (gnorm > 0 or lam_max > 0):
        exact = _secular_step(g, dense_eig[0], dense_eig[1], alpha)
        candidates.append((model(exact), exact))
    if not candidates:
        return SubproblemResult(zero, 0.0, 0.0, 0, lam_max)

    best_val, best = max(candidates, key=lambda c: c[0])
    x = best.copy()
    iters = 0
    radius = max(np.linalg.norm(c[1]) for c in candidates)
    for iters in range(1, max_iter + 1):
        grad_m = g + hvp(x) - 0.5 * alpha * np.linalg.norm(x) * x
        if np.linalg.norm(grad_m) <= tol * (1.0 + gnorm):
            break
        radius = max(radius, float(np.linalg.norm(x)))
        eta = 1.0 / (alpha * radius + spec_norm)
        x = x + eta * grad_m
        val = model(x)
        if val > best_val:
            best_val, best = val, x.copy()
    return SubproblemResult(best, best_val, cauchy_value, iters, lam_max)


# --------------------------------------------------------------------------- drivers


def _upper_limit(config: RunConfig, env) -> float | None:
    return env.spec.return_bound if config.upper == "theoretical" else None


def _build(config: RunConfig):
    env = make_env(config.env, **config.env_kwargs)
    policy = make_policy(config.policy, env)
    g = parse_distortion(config.distortion)
    return env, policy, g


def optimize(config: RunConfig, theta0=None, callback: Callable | None = None) -> RunResult:
    """Run CRPN-DRM or REINFORCE-DRM as selected by ``config.algorithm``."""
    env, policy, g = _build(config)
    if config.algorithm == "crpn" and not g.smooth_enough_for_newton:
        raise ValueError(f"distortion {g.name!r} has unbounded derivatives; CRPN-DRM needs h', h'', h''' bounded")
    if config.algorithm == "reinforce" and not math.isfinite(g.bounds[0]):
        raise ValueError(f"distortion {g.name!r} has an unbounded first derivative")

    alpha, n_iter, m, b = config.alpha, config.n_iter, config.batch_m, config.batch_b
    if config.schedule == "theoretical":
        raise ValueError("the theoretical schedule is a calculator; use `theoretical_schedule` to size a run")

    rng = np.random.default_rng(config.seed)
    theta = np.zeros(policy.dim) if theta0 is None else np.array(theta0, dtype=float)
    upper = _upper_limit(config, env)
    logs: list[IterationLog] = []
    for k in range(n_iter):
        t0 = time.perf_counter()
        batch = rollout_batch(env, policy, theta, m, rng)
        scores = policy.batch_scores(theta, batch)
        sb = sort_batch(batch.returns, scores, upper=upper)
        if config.algorithm == "crpn":
            hb = None
            if b is not None:
                hbatch = rollout_batch(env, policy, theta, b, rng)
                hb = sort_batch(hbatch.returns, policy.batch_scores(theta, hbatch), upper=upper)
            der = estimate_derivatives(sb, g, config.estimator, hess_batch=hb)
            res = cubic_subproblem(der.grad, der.hvp, alpha, config.inner_iters, config.inner_tol,
                                   hess=der.hess, method=config.subproblem)
            step, lam, value, grad = res.step, res.lambda_max, der.value, der.grad
        else:
            coef = build_coefficients(sb, g)
            grad = drm_gradient_vr(sb, g, coef) if config.estimator == "vr" else drm_gradient_full(sb, g, coef)
            value = drm_value_batch(sb, g)
            gn = np.linalg.norm(grad)
            step = math.sqrt(2.0 / (alpha * gn)) * grad if gn > 0 else np.zeros_like(grad)
            lam = float("nan")
        new_theta = theta + step
        if not np.all(np.isfinite(new_theta)):
            raise NonFiniteError(f"non-finite parameters at iteration {k}", theta.copy(), k)
        theta = new_theta
        ep = batch.episode_returns
        log = IterationLog(k, float(value), float(np.linalg.norm(grad)), float(np.linalg.norm(step)), float(lam),
                           float(ep.mean()), float(ep.std()), float(ep.min()), float(ep.max()),
                           wall_time=time.perf_counter() - t0)
        logs.append(log)
        if callback is not None:
            callback(log, theta)
    return RunResult(theta, logs, config, policy, env)


def crpn_drm(config: RunConfig, theta0=None):
    """Cubic-regularized policy Newton for DRM; returns (theta, logs)."""
    res = optimize(config.replace(algorithm="crpn"), theta0)
    return res.theta, res.logs


def reinforce_drm(config: RunConfig, theta0=None):
    """First-order baseline with step length sqrt(2 ||g|| / alpha); returns (theta, logs)."""
    res = optimize(config.replace(algorithm="reinforce"), theta0)
    return res.theta, res.logs


def evaluate_policy(env, policy, theta, episodes: int = 1000, rng=0) -> np.ndarray:
    """Undiscounted default-reward returns of ``episodes`` fresh rollouts."""
    return rollout_batch(env, policy, theta, episodes, rng).episode_returns


def write_learning_curve(path, logs) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(IterationLog.CSV_FIELDS)
        for log in logs:
            w.writerow([repr(float(x)) if isinstance(x, float) else x for x in log.row()])


# --------------------------------------------------------------------------- theory


@dataclass(frozen=True)
class Schedule:
    alpha: float
    N: int
    m: int
    b: int
    raw: dict
    admissible_eps: float

    @property
    def total_gradient_samples(self) -> float:
        return self.raw["N"] * self.raw["m"]


def theoretical_schedule(eps: float, constants: TheoryConstants, gap: float, strict: bool = True) -> Schedule:
    """Hyperparameters that guarantee an eps-second-order stationary point.

    alpha = 3 L_H, N = 12 sqrt(L_H) gap / eps^1.5, m = 25 kappa_1 / (4 eps^2),
    b = 9 cbrt(2 (kappa_3 + t_2)(kappa_2 + t_1)) / (L_H eps).

    ``gap`` is rho(theta_0) - rho* (user supplied; rho* is unknown in
    practice).  ``raw`` keeps the unrounded values; the integer fields are
    ceilings.  With ``strict`` an eps above the admissible bound raises.
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    c = constants
    root = (2.0 * (c.kappa3 + c.t2) * (c.kappa2 + c.t1)) ** (1.0 / 3.0)
    if c.L_H <= 0 or root <= 0:
        raise ValueError("L_H and the Hessian-error constants must be positive")
    limit = 25.0 * c.L_H * c.kappa1 / (36.0 * root)
    if strict and eps > limit:
        raise ValueError(f"eps={eps} exceeds the admissible bound {limit:.6g}")
    raw = {
        "alpha": 3.0 * c.L_H,
        "N": 12.0 * math.sqrt(c.L_H) * gap / eps ** 1.5,
        "m": 25.0 * c.kappa1 / (4.0 * eps ** 2),
        "b": 9.0 * root / (c.L_H * eps),
    }
    # guard against float noise such as 12.000000000000002 before taking the ceiling
    def ceil(x):
        return int(math.ceil(x - 1e-9 * max(1.0, abs(x))))

    return Schedule(raw["alpha"], ceil(raw["N"]), ceil(raw["m"]), ceil(raw["b"]), raw, limit)


def stationarity_report(theta, env, policy, g: DistortionFunction, probe_batch: int = 1000, rng=0,
                        estimator: str = "vr", upper: float | None = None) -> tuple[float, float]:
    """(||grad||, lambda_max) of the estimated DRM derivatives at ``theta``."""
    rng = np.random.default_rng(rng)
    batch = rollout_batch(env, policy, theta, probe_batch, rng)
    sb = sort_batch(batch.returns, policy.batch_scores(theta, batch), upper=upper)
    der = estimate_derivatives(sb, g, estimator, dense=policy.dim <= DENSE_LIMIT)
    lam, _, _ = top_eigenpair(der.hvp, policy.dim, der.hess)
    return float(np.linalg.norm(der.grad)), lam
