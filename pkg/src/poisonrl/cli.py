"""Command-line entry point.

Exit codes: 0 success, 1 configuration error, 2 runtime error.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from .confidence import load_snapshot
from .harness import ConfigError, ExperimentConfig, compare_attacks, format_table, run_experiment
from .mdp import MdpError, check_policy, load_mdp
from .prior import attack_from_prior
from .whitebox import AttackConfig, PositivityError, delta_star

log = logging.getLogger("poisonrl")


def _target(text: str) -> tuple[int, ...]:
    try:
        return tuple(int(x) for x in text.split(","))
    except ValueError:
        raise argparse.ArgumentTypeError(f"target must be comma-separated integers, got {text!r}") from None


def _load_config(args) -> ExperimentConfig:
    cfg = ExperimentConfig.load(args.config)
    if args.seed is not None:
        cfg = cfg.replace(seeds=[args.seed])
    return cfg


def cmd_run(args) -> int:
    cfg = _load_config(args)
    summary = run_experiment(cfg, jobs=args.jobs, out=args.out)
    summary.pop("_results")
    print(json.dumps({k: summary[k] for k in ("attacker", "cost_mean", "cost_std", "k1_mean", "attack_phase_match_min")}, indent=1))
    return 0


def cmd_compare(args) -> int:
    cfg = _load_config(args)
    rows = compare_attacks(cfg, jobs=args.jobs)
    print(format_table(rows))
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        (out / "compare.json").write_text(json.dumps(rows, indent=1, default=float) + "\n")
    return 0


def _mdp_arg(path: str):
    try:
        return load_mdp(path)
    except FileNotFoundError:
        raise ConfigError("--mdp", f"file not found: {path}") from None
    except MdpError as exc:
        raise ConfigError("--mdp", str(exc)) from None


def cmd_delta_star(args) -> int:
    mdp = _mdp_arg(args.mdp)
    try:
        target = check_policy(mdp, args.target)
    except ValueError as exc:
        raise ConfigError("--target", str(exc)) from None
    delta = delta_star(mdp, AttackConfig(target, args.eps, args.lam))
    print(delta.format_table())
    print(f"sup norm: {delta.sup_norm:.6g}")
    return 0


def cmd_prior_attack(args) -> int:
    mdp = _mdp_arg(args.mdp) if args.mdp else None
    try:
        counts, params = load_snapshot(args.counts)
    except FileNotFoundError:
        raise ConfigError("--counts", f"file not found: {args.counts}") from None
    except (KeyError, ValueError) as exc:
        raise ConfigError("--counts", f"malformed snapshot: {exc}") from None
    gamma = params.get("gamma", mdp.gamma if mdp else None)
    d0 = params.get("initial_dist", mdp.initial_dist.tolist() if mdp else None)
    if gamma is None or d0 is None:
        raise ConfigError("--counts", "snapshot lacks gamma/initial_dist and no --mdp was given")
    sigma = args.sigma if args.sigma is not None else params.get("sigma", 0.0)
    cfg = AttackConfig(args.target, args.eps, args.lam)
    report = attack_from_prior(
        counts,
        cfg,
        sigma,
        gamma,
        np.asarray(d0),
        int(params.get("num_learners", args.learners)),
        float(params.get("failure_p", args.p)),
        mdp_true=mdp,
        subopt=args.subopt,
        T=args.T,
    )
    print(report.delta.format_table())
    print(json.dumps({k: v for k, v in report.to_dict().items() if k != "delta"}, indent=1))
    return 0


def cmd_validate(args) -> int:
    mdp = _mdp_arg(args.mdp)
    print(f"ok: {mdp.num_states} states, {mdp.num_actions} actions, gamma={mdp.gamma}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="poisonrl", description="Reward poisoning against tabular RL learners.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def experiment(name, func, help_):
        p = sub.add_parser(name, help=help_)
        p.add_argument("--config", required=True)
        p.add_argument("--seed", type=int)
        p.add_argument("--out")
        p.add_argument("--jobs", type=int, default=1)
        p.set_defaults(func=func)

    experiment("run", cmd_run, "run an experiment config")
    experiment("compare", cmd_compare, "compare all attackers on one config")

    p = sub.add_parser("delta-star", help="print the white-box perturbation")
    p.add_argument("--mdp", required=True)
    p.add_argument("--target", type=_target, required=True)
    p.add_argument("--eps", type=float, default=0.1)
    p.add_argument("--lambda", dest="lam", type=float, default=1.0)
    p.set_defaults(func=cmd_delta_star)

    p = sub.add_parser("prior-attack", help="attack from a prior observation snapshot")
    p.add_argument("--counts", required=True)
    p.add_argument("--mdp")
    p.add_argument("--target", type=_target, required=True)
    p.add_argument("--eps", type=float, default=0.1)
    p.add_argument("--lambda", dest="lam", type=float, default=1.0)
    p.add_argument("--sigma", type=float)
    p.add_argument("--p", type=float, default=0.1)
    p.add_argument("--learners", type=int, default=1)
    p.add_argument("--subopt", type=float, help="suboptimal-step count for the cost bound")
    p.add_argument("--T", type=int)
    p.set_defaults(func=cmd_prior_attack)

    p = sub.add_parser("validate", help="check an MDP file")
    p.add_argument("--mdp", required=True)
    p.set_defaults(func=cmd_validate)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 1
    except (PositivityError, ValueError, RuntimeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
