"""Self-checks of the library against exact oracles and closed forms.

Every check returns a :class:`CheckResult`; the CLI ``validate`` command
and the acceptance tests both run these.
"""
from __future__ import annotations

import math
import time
from dataclasses import dataclass, field

import numpy as np

from .distortion import catalog_lookup
from .envs import random_chain_mdp, rollout_batch, saddle_mdp_env
from .estimators import (
    SortedBatch,
    TheoryConstants,
    build_coefficients,
    drm_gradient_full,
    drm_gradient_vr,
    drm_hessian_full,
    drm_hessian_vr,
    drm_hvp,
    gradient_by_segments,
    hessian_by_segments,
    sort_batch,
)
from .oracle import (
    batch_expectation,
    direct_drm,
    enumerate_distribution,
    estimator_bias_check,
    exact_drm,
    exact_drm_grad_hess,
    finite_difference_gradient,
    finite_difference_jacobian,
    relative_error,
)
from .policies import BatchScores, DenseScoreHessians, TabularBoltzmann, stage_policy
from .solver import RunConfig, optimize, theoretical_schedule

__all__ = [
    "CheckResult",
    "ORACLE_DISTORTIONS",
    "check_oracle_gradients",
    "check_atom_consistency",
    "check_estimator_forms",
    "check_vr_expectation",
    "check_hvp",
    "check_mse_rates",
    "check_saddle_escape",
    "check_schedule",
    "run_validation",
]

ORACLE_DISTORTIONS = (("identity", ()), ("gini_deviation", ()), ("dual_power", (2.0,)), ("exponential", (1.0,)))


@dataclass
class CheckResult:
    name: str
    passed: bool
    value: float
    tolerance: float
    detail: dict = field(default_factory=dict)
    seconds: float = 0.0

    def line(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        return f"[{status}] {self.name}: value={self.value:.6g} tolerance={self.tolerance:.6g} ({self.seconds:.1f}s)"


def _timed(fn):
    def wrapper(*args, **kwargs):
        t0 = time.perf_counter()
        res = fn(*args, **kwargs)
        res.seconds = time.perf_counter() - t0
        return res

    wrapper.__name__ = fn.__name__
    wrapper.__doc__ = fn.__doc__
    return wrapper


def _mdp_cases(n_mdps: int, n_theta: int, seed: int):
    rng = np.random.default_rng(seed)
    for _ in range(n_mdps):
        nS, nA, T = 3, 2, 3
        env = random_chain_mdp(rng, nS, nA, T)
        policy = TabularBoltzmann(nS, nA)
        for _ in range(n_theta):
            yield env, policy, rng.normal(size=policy.dim)


@_timed
def check_oracle_gradients(n_mdps: int = 3, n_theta: int = 3, seed: int = 0,
                           grad_tol: float = 1e-5, hess_tol: float = 1e-4) -> CheckResult:
    """Exact gradient vs differences of exact DRM; exact Hessian vs differences of the gradient."""
    worst_g = worst_h = 0.0
    for env, policy, theta in _mdp_cases(n_mdps, n_theta, seed):
        for name, params in ORACLE_DISTORTIONS:
            g = catalog_lookup(name, params)

            def value(t):
                return exact_drm(enumerate_distribution(env, policy, t), g)

            def grad(t):
                return exact_drm_grad_hess(enumerate_distribution(env, policy, t), g)[1]

            _, gr, H = exact_drm_grad_hess(enumerate_distribution(env, policy, theta), g)
            worst_g = max(worst_g, relative_error(gr, finite_difference_gradient(value, theta)))
            worst_h = max(worst_h, relative_error(H, finite_difference_jacobian(grad, theta)))
    passed = worst_g <= grad_tol and worst_h <= hess_tol
    return CheckResult("oracle gradient/Hessian vs finite differences", passed, max(worst_g, worst_h / 10),
                       grad_tol, {"grad_rel_err": worst_g, "hess_rel_err": worst_h, "hess_tol": hess_tol})


def _second_differences(f, theta, step):
    """Central second differences with one Richardson step (O(step^4) truncation)."""

    def raw(h):
        d = theta.size
        H = np.zeros((d, d))
        E = np.eye(d) * h
        f0 = f(theta)
        for i in range(d):
            H[i, i] = (f(theta + E[i]) - 2 * f0 + f(theta - E[i])) / h ** 2
            for j in range(i):
                H[i, j] = H[j, i] = (f(theta + E[i] + E[j]) - f(theta + E[i] - E[j])
                                     - f(theta - E[i] + E[j]) + f(theta - E[i] - E[j])) / (4 * h ** 2)
        return H

    return (4.0 * raw(step / 2) - raw(step)) / 3.0


@_timed
def check_atom_consistency(n_mdps: int = 2, n_theta: int = 2, seed: int = 1, tol: float = 1e-5) -> CheckResult:
    """Atom-level CDF derivatives vs direct differentiation of the path-weighted DRM."""
    worst_g = worst_h = 0.0
    for env, policy, theta in _mdp_cases(n_mdps, n_theta, seed):
        for name, params in ORACLE_DISTORTIONS:
            g = catalog_lookup(name, params)

            def f(t):
                return direct_drm(env, policy, t, g)

            _, gr, H = exact_drm_grad_hess(enumerate_distribution(env, policy, theta), g)
            worst_g = max(worst_g, relative_error(gr, finite_difference_gradient(f, theta, 1e-5)))
            worst_h = max(worst_h, relative_error(H, _second_differences(f, theta, 1e-3)))
    worst = max(worst_g, worst_h)
    return CheckResult("atom-level derivatives vs direct differentiation", worst <= tol, worst, tol,
                       {"grad_rel_err": worst_g, "hess_rel_err": worst_h})


def _random_sorted_batch(rng, n: int, d: int):
    if rng.random() < 0.5:
        R = rng.integers(-4, 5, size=n).astype(float)
    else:
        R = rng.normal(scale=3.0, size=n)
    A = rng.normal(size=(n, d, d))
    scores = BatchScores(np.zeros(n), rng.normal(size=(n, d)), DenseScoreHessians(0.5 * (A + A.transpose(0, 2, 1))))
    upper = None if rng.random() < 0.5 else float(np.max(R) + rng.uniform(0.0, 3.0))
    return sort_batch(R, scores, upper=upper)


def _explicit_double_sums(batch: SortedBatch, g):
    """Gradient and Hessian written as explicit double sums over (segment, trajectory)."""
    coef = build_coefficients(batch, g)
    n, d = batch.n, batch.dim
    grad = np.zeros(d)
    hess = np.zeros((d, d))
    for i in range(n):
        s_i = batch.grads[: i + 1].sum(axis=0)
        grad -= coef.c1[i] * s_i / n
        hess += coef.c2[i] * np.outer(s_i, s_i) / n ** 2
        for j in range(i + 1):
            hess -= coef.c1[i] * (batch.hess.dense(j) + np.outer(batch.grads[j], batch.grads[j])) / n
    return grad, 0.5 * (hess + hess.T)


@_timed
def check_estimator_forms(n_batches: int = 100, seed: int = 2, tol: float = 1e-10, exact_tol: float = 1e-12) -> CheckResult:
    """Order-statistics estimators vs direct segment integration, and suffix sums vs double sums."""
    rng = np.random.default_rng(seed)
    smooth = [catalog_lookup(n, p) for n, p in ORACLE_DISTORTIONS]
    worst_seg = worst_sum = 0.0
    for _ in range(n_batches):
        n = int(rng.integers(2, 51))
        batch = _random_sorted_batch(rng, n, 5)
        g = smooth[rng.integers(len(smooth))]
        gf, hf = drm_gradient_full(batch, g), drm_hessian_full(batch, g)
        scale = 1.0 + np.abs(batch.returns).max() + abs(batch.m_eff)
        worst_seg = max(worst_seg,
                        np.abs(gf - gradient_by_segments(batch, g)).max() / scale,
                        np.abs(hf - hessian_by_segments(batch, g)).max() / scale)
        g_sum, h_sum = _explicit_double_sums(batch, g)
        worst_sum = max(worst_sum, np.abs(gf - g_sum).max() / scale, np.abs(hf - h_sum).max() / scale)
    passed = worst_seg <= tol and worst_sum <= exact_tol
    return CheckResult("estimator forms vs segment integration and double sums", passed, worst_seg, tol,
                       {"segment_err": worst_seg, "suffix_vs_double_sum_err": worst_sum, "exact_tol": exact_tol})


@_timed
def check_vr_expectation(distortion: str = "identity", seed: int = 3, n: int = 2, upper: str = "theoretical",
                         tol: float = 1e-10) -> CheckResult:
    """Exact batch-level expectations of the variance-reduced and full estimators agree.

    Batches of size ``n`` are enumerated exactly, so the standard error is
    zero and the comparison is against floating-point tolerance.
    """
    rng = np.random.default_rng(seed)
    env = random_chain_mdp(rng, 2, 2, 2)
    policy = TabularBoltzmann(2, 2)
    theta = rng.normal(size=policy.dim)
    dist = enumerate_distribution(env, policy, theta)
    g = catalog_lookup(distortion)
    M = dist.bound if upper == "theoretical" else None
    diffs = {}
    for label, vr, full in (("gradient", drm_gradient_vr, drm_gradient_full), ("hessian", drm_hessian_vr, drm_hessian_full)):
        a = batch_expectation(dist, vr, g, n, M)
        b = batch_expectation(dist, full, g, n, M)
        diffs[label] = float(np.abs(a - b).max() / max(1.0, np.abs(b).max()))
    worst = max(diffs.values())
    return CheckResult(f"variance-reduced vs full expectation ({distortion})", worst <= tol, worst, tol, diffs)


@_timed
def check_hvp(n_pairs: int = 50, seed: int = 4, tol: float = 1e-9) -> CheckResult:
    """Hessian-vector products vs the dense variance-reduced Hessian."""
    rng = np.random.default_rng(seed)
    worst = 0.0
    smooth = [catalog_lookup(n, p) for n, p in ORACLE_DISTORTIONS]
    for k in range(n_pairs):
        g = smooth[k % len(smooth)]
        if k % 2 == 0:
            env = random_chain_mdp(rng, 3, 2, 3)
            policy = TabularBoltzmann(3, 2)
            theta = rng.normal(size=policy.dim)
            tb = rollout_batch(env, policy, theta, int(rng.integers(2, 60)), rng)
            batch = sort_batch(tb.returns, policy.batch_scores(theta, tb))
        else:
            batch = _random_sorted_batch(rng, int(rng.integers(2, 60)), int(rng.integers(1, 65)))
        v = rng.normal(size=batch.dim)
        dense = drm_hessian_vr(batch, g) @ v
        worst = max(worst, relative_error(drm_hvp(batch, g, v), dense, floor=1e-300))
    return CheckResult("Hessian-vector product vs dense Hessian", worst <= tol, worst, tol)


def mse_mdp(seed: int = 11):
    rng = np.random.default_rng(seed)
    env = random_chain_mdp(rng, 2, 2, 2)
    policy = TabularBoltzmann(2, 2)
    return env, policy, rng.normal(size=policy.dim)


@_timed
def check_mse_rates(replications: int = 400, seed: int = 5, sizes=(100, 400), band=(2.5, 6.0),
                    distortion: str = "gini_deviation") -> CheckResult:
    """Empirical MSE of the plug-in gradient and Hessian shrinks like 1/m."""
    env, policy, theta = mse_mdp()
    dist = enumerate_distribution(env, policy, theta)
    g = catalog_lookup(distortion)
    ratios = {}
    mses = {}
    for kind in ("gradient_full", "hessian_full"):
        vals = [estimator_bias_check(dist, g, kind, m, replications, [seed, m], upper=dist.bound)[1] for m in sizes]
        mses[kind] = vals
        ratios[kind] = vals[0] / vals[1]
    ok = all(band[0] <= r <= band[1] for r in ratios.values())
    return CheckResult(f"MSE ratio m={sizes[0]} vs m={sizes[1]} ({distortion})", ok,
                       min(ratios.values()), band[0], {"ratios": ratios, "mse": mses, "band": band})


SADDLE_ALPHA = 2.0
SADDLE_BATCH = 1000


@_timed
def check_saddle_escape(seeds: int = 10, iterations: int = 5, radius: float = 0.1, probe_batches: int = 1000,
                        step_tol: float = 0.01, alpha: float = SADDLE_ALPHA, batch: int = SADDLE_BATCH) -> CheckResult:
    """CRPN leaves the symmetric saddle; the first-order step there averages to ~0."""
    escapes = 0
    for s in range(seeds):
        cfg = RunConfig(env="saddle", policy="linear_boltzmann", distortion="identity", algorithm="crpn",
                        n_iter=iterations, batch_m=batch, alpha=alpha, seed=s)
        res = optimize(cfg)
        escapes += np.linalg.norm(res.theta) > radius
    env = saddle_mdp_env()
    policy = stage_policy()
    g = catalog_lookup("identity")
    rng = np.random.default_rng(12345)
    theta = np.zeros(policy.dim)
    steps = np.zeros((probe_batches, policy.dim))
    for k in range(probe_batches):
        tb = rollout_batch(env, policy, theta, batch, rng)
        grad = drm_gradient_vr(sort_batch(tb.returns, policy.batch_scores(theta, tb)), g)
        gn = np.linalg.norm(grad)
        steps[k] = math.sqrt(2.0 / (alpha * gn)) * grad if gn > 0 else 0.0
    mean_step = float(np.linalg.norm(steps.mean(axis=0)))
    ok = escapes >= math.ceil(0.9 * seeds) and mean_step < step_tol
    return CheckResult("saddle escape", ok, escapes / seeds, 0.9,
                       {"escapes": int(escapes), "seeds": seeds, "mean_first_order_step": mean_step,
                        "mean_step_norm_per_batch": float(np.linalg.norm(steps, axis=1).mean())})


def unit_constants() -> TheoryConstants:
    return TheoryConstants(G_H=1.0, L_H=1.0, kappa1=1.0, kappa2=1.0, kappa3=1.0, t1=1.0, t2=1.0, C_d=1.0, nu=1.0)


@_timed
def check_schedule(tol: float = 0.01) -> CheckResult:
    """Printed schedule at unit inputs and the eps^-3.5 total-sample scaling."""
    c = unit_constants()
    unit = theoretical_schedule(1.0, c, gap=1.0, strict=False)
    expected = {"alpha": 3.0, "N": 12.0, "m": 25.0 / 4.0, "b": 9.0 * 8.0 ** (1.0 / 3.0)}
    formula_err = max(abs(unit.raw[k] - v) for k, v in expected.items())
    s1 = theoretical_schedule(0.1, c, gap=1.0)
    s2 = theoretical_schedule(0.05, c, gap=1.0)
    ratio_raw = s2.total_gradient_samples / s1.total_gradient_samples
    ratio_int = (s2.N * s2.m) / (s1.N * s1.m)
    target = 2 ** 3.5
    dev = max(abs(ratio_raw / target - 1), abs(ratio_int / target - 1))
    ok = unit.N == 12 and formula_err < 1e-12 and dev <= tol
    return CheckResult("schedule calculator", ok, dev, tol,
                       {"N_unit": unit.N, "formula_err": formula_err, "ratio_raw": ratio_raw,
                        "ratio_int": ratio_int, "target": target, "admissible_eps_unit": unit.admissible_eps})


def run_validation(quick: bool = False) -> list[CheckResult]:
    """Run the oracle/property checks; ``quick`` shrinks replication counts."""
    results = [
        check_oracle_gradients(n_mdps=1 if quick else 3, n_theta=1 if quick else 3),
        check_atom_consistency(n_mdps=1, n_theta=1 if quick else 2),
        check_estimator_forms(n_batches=20 if quick else 100),
        check_vr_expectation("identity"),
        check_hvp(n_pairs=10 if quick else 50),
        check_schedule(),
    ]
    if not quick:
        results.append(check_mse_rates())
        results.append(check_saddle_escape())
    return results
