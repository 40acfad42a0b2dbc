"""Command-line entry point.

    crpndrm run --suite cliffwalk_table3 --reps 10 --seed 0 --out results/ [--config run.toml]
    crpndrm validate [--quick] [--out dir]
    crpndrm constants --eps 0.1 --env cliff_walk [--distortion gini_deviation] [--gap 1]

Exit codes: 0 success, 1 a check failed, 2 bad configuration.
"""
from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

from .distortion import parse_distortion
from .envs import make_env
from .estimators import mse_constants
from .experiments import SUITES, run_suite
from .policies import assumption_bounds, make_policy
from .solver import NonFiniteError, RunConfig, theoretical_schedule
from .validation import run_validation

log = logging.getLogger("crpndrm")

EXIT_OK, EXIT_CHECK_FAILED, EXIT_CONFIG = 0, 1, 2
SUITE_KEYS = {"eval_episodes", "variants", "final_window", "replications", "seeds", "quick"}
DEFAULT_POLICY = {"cliff_walk": "tabular_boltzmann", "saddle": "linear_boltzmann", "cart_pole": "linear_boltzmann"}


class ConfigError(ValueError):
    pass


def load_config(path: str | None) -> dict:
    """Read a TOML (key = value) file into suite overrides.

    Keys naming :class:`RunConfig` fields go to the run configuration; the
    suite-level keys are eval_episodes, variants, final_window,
    replications, seeds and quick.
    """
    if path is None:
        return {}
    try:
        with open(path, "rb") as fh:
            raw = tomllib.load(fh)
    except (OSError, tomllib.TOMLDecodeError) as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    run_fields = {f.name for f in dataclasses.fields(RunConfig)}
    overrides: dict = {"run": {}}
    for key, value in raw.items():
        if key in run_fields:
            overrides["run"][key] = value
        elif key in SUITE_KEYS:
            overrides[key] = value
        else:
            raise ConfigError(f"unknown config key {key!r}")
    try:
        RunConfig(**overrides["run"])
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from exc
    return overrides


def _cmd_run(args) -> int:
    overrides = load_config(args.config)
    report = run_suite(args.suite, reps=args.reps, seed=args.seed, out=args.out, overrides=overrides)
    for check in report.checks:
        print(check.line())
    algs = report.summary.get("algorithms", {})
    for label, s in algs.items():
        print(f"{label:22s} mean={s['mean']:.2f} std={s['std']:.2f} min={s['min']:.0f} max={s['max']:.0f}")
    if "paired_wins_vs_ACRPN" in report.summary:
        print("paired wins vs ACRPN:", report.summary["paired_wins_vs_ACRPN"])
    return report.exit_code


def _cmd_validate(args) -> int:
    results = run_validation(quick=args.quick)
    for r in results:
        print(r.line())
    if args.out:
        payload = {r.name: {"passed": r.passed, "value": r.value, "tolerance": r.tolerance} for r in results}
        with open(args.out, "w") as fh:
            json.dump(payload, fh, indent=1, sort_keys=True)
    return EXIT_OK if all(r.passed for r in results) else EXIT_CHECK_FAILED


def _cmd_constants(args) -> int:
    env = make_env(args.env)
    policy = make_policy(args.policy or DEFAULT_POLICY.get(env.spec.name, "tabular_boltzmann"), env)
    g = parse_distortion(args.distortion)
    if not g.smooth_enough_for_newton:
        raise ConfigError(f"distortion {g.name!r} has unbounded derivatives; constants are infinite")
    try:
        bounds = assumption_bounds(policy, args.feature_bound)
    except ValueError as exc:
        raise ConfigError(f"{exc} (use --feature-bound)") from exc
    consts = mse_constants(bounds, g.bounds, env.spec.return_bound, env.spec.horizon, policy.dim)
    try:
        sched = theoretical_schedule(args.eps, consts, gap=args.gap, strict=not args.allow_inadmissible)
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    out = {
        "env": env.spec.name, "distortion": g.spec_string, "d": policy.dim, "M_r": env.spec.return_bound,
        "T": env.spec.horizon, "policy_bounds": dict(zip(("M_d", "M_h", "L_2"), bounds)),
        "constants": consts.as_dict(),
        "schedule": {"alpha": sched.alpha, "N": sched.N, "m": sched.m, "b": sched.b, "raw": sched.raw,
                     "admissible_eps": sched.admissible_eps},
    }
    print(json.dumps(out, indent=1, sort_keys=True))
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="crpndrm", description=__doc__.split("\n\n")[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    r = sub.add_parser("run", help="run an experiment suite")
    r.add_argument("--suite", required=True, choices=SUITES)
    r.add_argument("--reps", type=int, default=10)
    r.add_argument("--seed", type=int, default=0)
    r.add_argument("--out", default="results")
    r.add_argument("--config", default=None, help="TOML file of key = value overrides")
    r.set_defaults(func=_cmd_run)

    v = sub.add_parser("validate", help="run oracle and property checks")
    v.add_argument("--quick", action="store_true", help="smaller replication counts")
    v.add_argument("--out", default=None, help="write a JSON report here")
    v.set_defaults(func=_cmd_validate)

    c = sub.add_parser("constants", help="theory constants and the stationarity schedule")
    c.add_argument("--eps", type=float, required=True)
    c.add_argument("--env", required=True)
    c.add_argument("--distortion", default="gini_deviation")
    c.add_argument("--policy", default=None)
    c.add_argument("--gap", type=float, default=1.0, help="rho(theta_0) - rho*")
    c.add_argument("--feature-bound", type=float, default=None)
    c.add_argument("--allow-inadmissible", action="store_true", help="report even if eps exceeds the admissible bound")
    c.set_defaults(func=_cmd_constants)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_CONFIG if exc.code else EXIT_OK
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    if getattr(args, "reps", 1) < 1:
        print("error: --reps must be >= 1", file=sys.stderr)
        return EXIT_CONFIG
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except NonFiniteError as exc:
        print(f"run aborted: {exc}; last finite parameters written to the output directory", file=sys.stderr)
        return EXIT_CHECK_FAILED


if __name__ == "__main__":
    sys.exit(main())
