"""Experiment suites: cliff-walk table, cart-pole comparison and the validation suites.

Each suite writes CSV/JSON artifacts into its output directory and returns
a :class:`SuiteReport`.  Reruns with the same base seed produce
byte-identical files (wall-clock times are never written).
"""
from __future__ import annotations

import csv
import json
import os
from dataclasses import dataclass, field

import numpy as np
from scipy.special import softmax

from .envs import CliffWalk, make_env
from .policies import make_policy, save_policy
from .solver import IterationLog, NonFiniteError, RunConfig, evaluate_policy, optimize
from .validation import (
    CheckResult,
    check_mse_rates,
    check_saddle_escape,
    run_validation,
)

__all__ = [
    "SUITES",
    "SuiteReport",
    "ALGORITHM_VARIANTS",
    "run_suite",
    "emit_policy_map",
    "summarize_returns",
]

SUITES = ("cliffwalk_table3", "cartpole_compare", "oracle_validation", "mse_rates", "saddle_escape")

# (label, algorithm, distortion)
ALGORITHM_VARIANTS = {
    "cliffwalk_table3": (
        ("REINFORCE", "reinforce", "identity"),
        ("ACRPN", "crpn", "identity"),
        ("REINFORCE-DRM", "reinforce", "gini_deviation"),
        ("DRMACRPN", "crpn", "gini_deviation"),
    ),
    "cartpole_compare": (
        ("ACRPN", "crpn", "identity"),
        ("DRMACRPN-gini", "crpn", "gini_deviation"),
        ("DRMACRPN-dual_power", "crpn", "dual_power:2"),
    ),
}

BASE_CONFIGS = {
    "cliffwalk_table3": RunConfig(env="cliff_walk", policy="tabular_boltzmann", n_iter=1000, batch_m=200, alpha=2500.0),
    "cartpole_compare": RunConfig(env="cart_pole", policy="linear_boltzmann", n_iter=100, batch_m=200, alpha=5000.0),
}

EVAL_EPISODES = {"cliffwalk_table3": 1000, "cartpole_compare": 100}
EVAL_SEED_OFFSET = 1_000_003


@dataclass
class SuiteReport:
    suite: str
    passed: bool
    summary: dict = field(default_factory=dict)
    checks: list[CheckResult] = field(default_factory=list)

    @property
    def exit_code(self) -> int:
        return 0 if self.passed else 1


def _dump_json(path, payload) -> None:
    with open(path, "w") as fh:
        json.dump(payload, fh, indent=1, sort_keys=True, default=_to_builtin)
        fh.write("\n")


def _to_builtin(o):
    if isinstance(o, np.generic):
        return o.item()
    if isinstance(o, np.ndarray):
        return o.tolist()
    raise TypeError(f"cannot serialize {type(o)}")


def _fmt(x) -> str:
    return repr(float(x)) if isinstance(x, (float, np.floating)) else str(x)


def summarize_returns(returns) -> dict:
    r = np.asarray(returns, dtype=float)
    return {"mean": float(r.mean()), "std": float(r.std()), "min": float(r.min()), "max": float(r.max()), "n": int(r.size)}


def emit_policy_map(thetas, env, path=None) -> dict:
    """Per-cell action probabilities of the mean-of-softmax aggregated tabular policy."""
    if not isinstance(env, CliffWalk):
        raise ValueError("policy maps are defined for the cliff-walk grid")
    nS, nA = env.spec.n_states, env.spec.n_actions
    probs = []
    for theta in thetas:
        theta = np.asarray(theta, dtype=float)
        if theta.size != nS * nA:
            raise ValueError(f"expected a tabular parameter vector of size {nS * nA}")
        probs.append(softmax(theta.reshape(nS, nA), axis=1))
    agg = np.mean(probs, axis=0)
    payload = {
        "rows": env.rows,
        "cols": env.cols,
        "actions": ["up", "right", "down", "left"],
        "order": "row-major",
        "n_policies": len(probs),
        "cells": agg.tolist(),
    }
    if path is not None:
        _dump_json(path, payload)
    return payload


def _rep_seed(base: int, rep: int) -> int:
    return base * 1000 + rep


def _run_training_suite(suite: str, reps: int, seed: int, out: str, overrides: dict) -> SuiteReport:
    base = BASE_CONFIGS[suite].replace(**overrides.get("run", {}))
    variants = ALGORITHM_VARIANTS[suite]
    if "variants" in overrides:
        keep = set(overrides["variants"])
        variants = tuple(v for v in variants if v[0] in keep)
    episodes = int(overrides.get("eval_episodes", EVAL_EPISODES[suite]))
    final_window = int(overrides.get("final_window", 20))

    curves, finals, evals = [], {}, []
    per_rep = {}
    for label, algorithm, distortion in variants:
        finals[label] = []
        per_rep[label] = []
        for rep in range(reps):
            cfg = base.replace(algorithm=algorithm, distortion=distortion, seed=_rep_seed(seed, rep))
            try:
                res = optimize(cfg)
            except NonFiniteError as exc:
                env = make_env(cfg.env, **cfg.env_kwargs)
                path = os.path.join(out, f"checkpoint_{label}_rep{rep}.json")
                save_policy(path, make_policy(cfg.policy, env), exc.theta, iteration=exc.k, seed=cfg.seed)
                raise
            for log in res.logs:
                curves.append([label, rep] + log.row())
            ret = evaluate_policy(res.env, res.policy, res.theta, episodes, cfg.seed + EVAL_SEED_OFFSET)
            evals.extend([label, rep, i, float(r)] for i, r in enumerate(ret))
            finals[label].append({"rep": rep, "seed": cfg.seed, "theta": res.theta.tolist(), **res.policy.meta()})
            tail = [log.return_mean for log in res.logs[-final_window:]]
            per_rep[label].append({"rep": rep, "final_window_mean": float(np.mean(tail)), **summarize_returns(ret)})

    with open(os.path.join(out, "learning_curve.csv"), "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(("algorithm", "rep") + IterationLog.CSV_FIELDS)
        w.writerows([_fmt(x) for x in row] for row in curves)
    with open(os.path.join(out, "eval_returns.csv"), "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(("algorithm", "rep", "episode", "return"))
        w.writerows([_fmt(x) for x in row] for row in evals)
    _dump_json(os.path.join(out, "policy_final.json"), finals)

    summary = {"suite": suite, "config": base.to_dict(), "reps": reps, "seed": seed, "eval_episodes": episodes,
               "algorithms": {}}
    for label, algorithm, distortion in variants:
        pooled = [r for row in evals if row[0] == label for r in [row[3]]]
        summary["algorithms"][label] = {"algorithm": algorithm, "distortion": distortion,
                                        **summarize_returns(pooled), "per_rep": per_rep[label]}

    checks = [_crosscheck_summary(out, summary)]
    env = make_env(base.env, **base.env_kwargs)
    if isinstance(env, CliffWalk):
        for label, _, _ in variants:
            emit_policy_map([f["theta"] for f in finals[label]], env,
                            os.path.join(out, f"policy_map_{label}.json"))
    if suite == "cartpole_compare" and "ACRPN" in per_rep:
        ref = [r["final_window_mean"] for r in per_rep["ACRPN"]]
        summary["paired_wins_vs_ACRPN"] = {
            label: int(sum(a >= b for a, b in zip((r["final_window_mean"] for r in per_rep[label]), ref)))
            for label, _, _ in variants if label != "ACRPN"
        }
    _write_summary(out, summary)
    return SuiteReport(suite, all(c.passed for c in checks), summary, checks)


def _write_summary(out: str, summary: dict) -> None:
    _dump_json(os.path.join(out, "summary.json"), summary)
    with open(os.path.join(out, "summary.csv"), "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(("algorithm", "distortion", "mean", "std", "min", "max", "n"))
        for label, s in summary["algorithms"].items():
            w.writerow([label, s["distortion"]] + [_fmt(s[k]) for k in ("mean", "std", "min", "max")] + [s["n"]])


def _crosscheck_summary(out: str, summary: dict) -> CheckResult:
    """Recompute summary statistics from eval_returns.csv as written on disk."""
    by_alg: dict[str, list[float]] = {}
    with open(os.path.join(out, "eval_returns.csv")) as fh:
        for row in csv.DictReader(fh):
            by_alg.setdefault(row["algorithm"], []).append(float(row["return"]))
    worst = 0.0
    for label, s in summary["algorithms"].items():
        re = summarize_returns(by_alg.get(label, [np.nan]))
        worst = max(worst, max(abs(re[k] - s[k]) for k in ("mean", "std", "min", "max")))
    ok = bool(np.isfinite(worst) and worst <= 1e-9)
    return CheckResult("summary recomputed from eval_returns.csv", ok, worst, 1e-9)


def _run_check_suite(suite: str, seed: int, out: str, overrides: dict) -> SuiteReport:
    if suite == "oracle_validation":
        checks = run_validation(quick=bool(overrides.get("quick", False)))
        name = "oracle_report.json"
    elif suite == "mse_rates":
        checks = [check_mse_rates(replications=int(overrides.get("replications", 1000)), seed=seed)]
        name = "mse_report.json"
    else:
        checks = [check_saddle_escape(seeds=int(overrides.get("seeds", 10)))]
        name = "saddle_report.json"
    payload = {c.name: {"passed": c.passed, "value": c.value, "tolerance": c.tolerance, "detail": c.detail}
               for c in checks}
    _dump_json(os.path.join(out, name), payload)
    return SuiteReport(suite, all(c.passed for c in checks), payload, checks)


def run_suite(suite: str, reps: int = 10, seed: int = 0, out: str = "results", overrides: dict | None = None) -> SuiteReport:
    """Run one suite and write its artifacts under ``out``."""
    if suite not in SUITES:
        raise ValueError(f"unknown suite {suite!r}; choose from {SUITES}")
    if reps < 1:
        raise ValueError("reps must be >= 1")
    os.makedirs(out, exist_ok=True)
    overrides = dict(overrides or {})
    if suite in BASE_CONFIGS:
        return _run_training_suite(suite, reps, seed, out, overrides)
    return _run_check_suite(suite, seed, out, overrides)
