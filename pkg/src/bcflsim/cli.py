"""Command-line entry point.

Errors are reported on stderr as one JSON object; usage errors exit with 2,
runtime failures with 1.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from dataclasses import replace

import numpy as np

from . import chain, config, convergence, experiments, learning, optimizer, protocol
from .timecost import ParameterError


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _global_flags(suppress):
    p = argparse.ArgumentParser(add_help=False)
    default = argparse.SUPPRESS if suppress else None
    p.add_argument("--config", metavar="PATH", default=default)
    p.add_argument("--seed", type=int, metavar="U64", default=default)
    p.add_argument("--out", metavar="DIR", default=default)
    p.add_argument("--mode", choices=("analytic", "stochastic"), default=default)
    p.add_argument("--set", action="append", metavar="KEY=VALUE", default=default,
                   help="override one config key (repeatable)")
    return p


def build_parser():
    parser = _Parser(prog="bcflsim", parents=[_global_flags(False)],
                     description="Blockchain federated learning with Top-k compression.")
    parser.add_argument("--print-default-config", action="store_true",
                        help="print the default configuration and exit")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)
    common = [_global_flags(True)]

    p = sub.add_parser("simulate", parents=common, help="run one experiment")
    p.add_argument("--k-frac", type=float, help="fixed k / d (implies strategy=fixed)")
    p.add_argument("--lam", type=float, help="fixed block rate")
    p.add_argument("--stream", type=int, default=0, help="round-level RNG stream")

    p = sub.add_parser("optimize", parents=common, help="solve for k* and lam*")
    p.add_argument("--params", metavar="JSON", help="convergence constants (default: estimate)")
    p.add_argument("--grid", action="store_true", help="also write grid.csv under --out")
    p.add_argument("--grid-size", type=int, default=200)

    p = sub.add_parser("estimate", parents=common, help="estimate convergence constants")
    p.add_argument("--probe-frac", type=float)

    p = sub.add_parser("sweep", parents=common, help="sweep k fractions or client counts")
    g = p.add_mutually_exclusive_group(required=True)
    g.add_argument("--k-list", help="comma-separated k / d values")
    g.add_argument("--n-list", help="comma-separated client counts (M = N)")

    sub.add_parser("compare", parents=common, help="optimal arm against fixed-k baselines")

    p = sub.add_parser("verify-chain", parents=common, help="audit a ledger file")
    p.add_argument("--ledger", required=True, metavar="PATH")
    return parser


def _float_list(text, kind=float):
    try:
        return [kind(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise UsageError(f"bad list: {text!r}") from None


def load_config(args):
    cfg = config.load(args.config) if getattr(args, "config", None) else config.ExperimentConfig()
    if getattr(args, "set", None):
        cfg = config.parse_pairs(enumerate(args.set, start=1), cfg)
    over = {}
    if getattr(args, "seed", None) is not None:
        over["seed"] = args.seed
    if getattr(args, "mode", None):
        over["mode"] = args.mode
    return replace(cfg, **over) if over else cfg


def _emit(obj):
    json.dump(obj, sys.stdout, indent=2, sort_keys=True)
    sys.stdout.write("\n")


def _out_dir(args, default="."):
    return getattr(args, "out", None) or default


def cmd_simulate(args, cfg):
    if args.k_frac is not None:
        cfg = replace(cfg, strategy="fixed", k_frac=args.k_frac)
    if args.lam is not None:
        cfg = replace(cfg, lam=args.lam)
    arm = experiments.run_arm(cfg, stream=args.stream)
    out = _out_dir(args)
    experiments.write_outputs(arm, out)
    s = arm.summary()
    _emit({k: s[k] for k in ("arm", "k", "lam", "R", "final_accuracy", "final_loss",
                             "total_bytes", "final_model_digest")})
    return 0


def _task_env(cfg):
    arch, data = experiments.build_task(cfg)
    env = experiments.build_env(cfg, arch.num_params)
    return arch, data, env


def cmd_estimate(args, cfg):
    if args.probe_frac is not None:
        cfg = replace(cfg, probe_frac=args.probe_frac)
    arch, data, env = _task_env(cfg)
    params = experiments.probe_params(cfg, arch, data, env, learning.init_model(arch, cfg.seed))
    out = params.to_dict()
    out["d"] = arch.num_params
    _emit(out)
    return 0


def cmd_optimize(args, cfg):
    arch, data, env = _task_env(cfg)
    if args.params:
        try:
            with open(args.params) as fh:
                params = convergence.ConvergenceParams.from_dict(json.load(fh))
        except (OSError, ValueError, TypeError) as exc:
            raise UsageError(f"cannot read params {args.params}: {exc}") from None
    else:
        params = experiments.probe_params(cfg, arch, data, env, learning.init_model(arch, cfg.seed))
    coeffs = convergence.bound_coefficients(params)
    obj = optimizer.Objective.from_env(env, coeffs, cfg.Y, (cfg.lam_min, cfg.lam_max))
    sol = optimizer.acs_solve(obj)
    result = {
        "d": arch.num_params, "k_star": sol.k_star_int, "k_star_real": sol.k_star_real,
        "lambda_star": sol.lambda_star, "objective_sq": sol.objective_int,
        "sweeps": sol.iterations, "converged": sol.converged,
        "Lambda_A": coeffs.A, "Lambda_B": coeffs.B,
    }
    if args.grid:
        ks, lams = optimizer.log_grid(obj, args.grid_size, args.grid_size)
        out = _out_dir(args)
        os.makedirs(out, exist_ok=True)
        K, Lm = np.meshgrid(ks, lams, indexing="ij")
        logs = obj.log_value(K, Lm)
        rows = [{"k": float(k), "lam": float(l), "log_objective_sq": float(v)}
                for k, l, v in zip(K.ravel(), Lm.ravel(), logs.ravel())]
        experiments.write_rows(rows, os.path.join(out, "grid.csv"))
    _emit(result)
    return 0


def cmd_sweep(args, cfg):
    if args.k_list:
        arms = experiments.sweep_k(cfg, _float_list(args.k_list))
    else:
        arms = experiments.sweep_clients(cfg, _float_list(args.n_list, int))
    out = _out_dir(args)
    os.makedirs(out, exist_ok=True)
    rows = []
    for i, arm in enumerate(arms):
        experiments.write_outputs(arm, os.path.join(out, f"arm{i}"))
        rows.append({"stream": i, **experiments.sweep_row(arm)})
    experiments.write_rows(rows, os.path.join(out, "sweep.csv"))
    _emit(rows)
    return 0


def cmd_compare(args, cfg):
    rows, arms = experiments.run_comparison(cfg)
    out = _out_dir(args)
    os.makedirs(out, exist_ok=True)
    for i, arm in enumerate(arms):
        experiments.write_outputs(arm, os.path.join(out, f"arm{i}"))
    experiments.write_rows(rows, os.path.join(out, "comparison.csv"))
    _emit(rows)
    return 0


def cmd_verify_chain(args, cfg):
    ledger = chain.read_ledger(args.ledger)
    w = chain.verify_chain(ledger, protocol.replay_aggregate)
    _emit({"ok": True, "height": ledger[-1].height, "d": int(ledger[0].d),
           "final_model_digest": chain.model_digest(w).hex()})
    return 0


COMMANDS = {
    "simulate": cmd_simulate,
    "optimize": cmd_optimize,
    "estimate": cmd_estimate,
    "sweep": cmd_sweep,
    "compare": cmd_compare,
    "verify-chain": cmd_verify_chain,
}


def _fail(code, kind, message, **extra):
    sys.stderr.write(json.dumps({"error": kind, "message": message, **extra}, sort_keys=True) + "\n")
    return code


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if args.print_default_config:
            sys.stdout.write(config.dumps(config.ExperimentConfig()))
            return 0
        if not args.command:
            raise UsageError("a subcommand is required")
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(levelname)s %(name)s: %(message)s")
        cfg = load_config(args)
        return COMMANDS[args.command](args, cfg)
    except UsageError as exc:
        return _fail(2, "usage", str(exc))
    except learning.ConfigError as exc:
        return _fail(2, "config", str(exc))
    except chain.LedgerError as exc:
        return _fail(1, "ledger", str(exc), height=exc.height, field=exc.field)
    except protocol.DivergenceError as exc:
        return _fail(1, "divergence", str(exc), round=exc.round, client=exc.client_id)
    except (ParameterError, convergence.ConvergenceError, optimizer.ObjectiveError,
            learning.DataError, learning.ArchitectureError, ValueError, OSError) as exc:
        return _fail(1, type(exc).__name__, str(exc))


if __name__ == "__main__":
    sys.exit(main())
