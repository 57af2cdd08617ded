"""Experiment orchestration: single runs, k sweeps, client-count sweeps and
strategy comparisons, plus the files each run leaves behind.

Every run derives its randomness from ``(seed, stream)``. Data and the
initial model depend on the seed alone, so arms of a comparison share both
and differ only in their round-level stream.
"""
from __future__ import annotations

import csv
import json
import math
import os
from dataclasses import dataclass, field, replace

import numpy as np

from . import chain, convergence, learning, optimizer, protocol, timecost
from .config import ExperimentConfig, to_dict

ENV_STREAM = 1 << 20
PROBE_STREAM = (1 << 20) + 1


def stream_rng(seed, stream):
    return np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(stream,)))


def build_task(cfg):
    """Architecture and federated data for ``cfg``."""
    if cfg.data_csv:
        data = learning.federated_from_csv(
            cfg.data_csv, cfg.N, cfg.per_client, cfg.labels_per_client, cfg.seed)
    else:
        data = learning.generate_federated(
            cfg.N, cfg.per_client, cfg.labels_per_client, cfg.label_count, cfg.feature_dim,
            cfg.seed, test_size=cfg.test_size, separation=cfg.separation)
    arch = learning.Architecture(data.feature_dim, cfg.hidden, max(data.label_count, 2),
                                 cfg.activation)
    return arch, data


def build_env(cfg, d):
    env = timecost.NetworkEnv.from_link(
        cfg.N, cfg.M, d, bw_hz=cfg.bw_hz, gain=cfg.gain, p_t=cfg.p_t, p_n=cfg.p_n,
        s=cfg.s, tau_local=cfg.tau_local, tau_aggre=cfg.tau_aggre, jitter=cfg.jitter)
    if cfg.rate_spread > 0:
        rng = stream_rng(cfg.seed, ENV_STREAM)
        lo, hi = 1.0 - cfg.rate_spread, 1.0 + cfg.rate_spread
        env = replace(
            env,
            up_rates=env.up_rates * rng.uniform(lo, hi, cfg.N),
            down_rates=env.down_rates * rng.uniform(lo, hi, cfg.N),
            miner_rates=env.miner_rates * rng.uniform(lo, hi, cfg.M),
        )
    return env


def k_from_fraction(frac, d):
    return int(min(d, max(1, round(frac * d))))


def fastest_lambda(env, k, bounds=optimizer.LAMBDA_BOUNDS):
    """Block rate minimizing the expected round time for a fixed ``k``."""
    obj = optimizer.Objective.from_env(env, convergence.BoundCoefficients(1.0, 0.0), 1.0, bounds)
    lo, hi = bounds
    y = optimizer.minimize_1d_convex(lambda b: float(obj.log_h(k, math.exp(b))),
                                     math.log(lo), math.log(hi), 1e-10)
    return min(max(math.exp(y), lo), hi)


def system_config(cfg, k, lam):
    return protocol.SystemConfig(
        N=cfg.N, M=cfg.M, E=cfg.E, eta=cfg.eta,
        batch_size=cfg.batch_size or None, k=k, lam=lam, Y=cfg.Y, s=cfg.s,
        seed=cfg.seed, mode=cfg.mode, dropout=cfg.dropout, real_pow=cfg.real_pow,
        hash_rate=cfg.hash_rate,
    )


def probe_params(cfg, arch, data, env, w0):
    """Run one uncharged round at the probe k and estimate bound constants."""
    d = arch.num_params
    k = k_from_fraction(cfg.probe_frac, d)
    sc = replace(system_config(cfg, k, 1.0), mode="analytic", dropout=0.0, Y=math.inf)
    sim = protocol.Simulation(sc, arch, data, env, w0=w0, rng=stream_rng(cfg.seed, PROBE_STREAM))
    sim.run_round()
    b = cfg.batch_size or 1.0
    return convergence.estimate_params(arch, data.clients, w0, sim.w, C=cfg.C, E=cfg.E, b=b)


def solve(cfg, env, params, init=None):
    coeffs = convergence.bound_coefficients(params)
    obj = optimizer.Objective.from_env(env, coeffs, cfg.Y, (cfg.lam_min, cfg.lam_max))
    if init is None:
        return optimizer.acs_solve(obj)
    return optimizer.reoptimize_on_env_change(init, obj)


@dataclass
class ArmResult:
    name: str
    k: int
    lam: float
    log: protocol.ExperimentLog
    params: convergence.ConvergenceParams | None = None
    solution: optimizer.AcsSolution | None = None
    trace: list = field(default_factory=list)

    def summary(self):
        out = self.log.summary()
        out.update({
            "arm": self.name, "k": self.k, "lam": self.lam, "d": int(self.log.ledger[0].d),
            "params": self.params.to_dict() if self.params else None,
        })
        return out


class _Reoptimizer:
    """Round hook: EMA of measured link rates, re-solve every few rounds."""

    def __init__(self, cfg, env, params, solution, trace):
        self.cfg, self.env, self.params = cfg, env, params
        self.solution = solution
        self.trace = trace
        self.est = {"up": env.up_rates.copy(), "miner": env.miner_rates.copy(),
                    "down": env.down_rates.copy()}

    def __call__(self, sim, rec, log):
        rates = sim.last_rates
        if rates is None:
            return
        a = self.cfg.ema_alpha
        for key in self.est:
            self.est[key] = (1 - a) * self.est[key] + a * rates[key]
        if rec.round % self.cfg.reopt_every:
            return
        env = replace(self.env, up_rates=self.est["up"], down_rates=self.est["down"],
                      miner_rates=self.est["miner"])
        self.solution = solve(self.cfg, env, self.params, init=self.solution)
        sim.k, sim.lam = self.solution.k_star_int, self.solution.lambda_star
        self.trace.append({"round": rec.round, "k": sim.k, "lam": sim.lam,
                           "objective": self.solution.objective_int})


def run_arm(cfg, stream=0, k_frac=None, name=None):
    """One simulation. ``k_frac`` forces a fixed-k arm; otherwise ``cfg.strategy`` decides."""
    arch, data = build_task(cfg)
    d = arch.num_params
    env = build_env(cfg, d)
    w0 = learning.init_model(arch, cfg.seed)
    trace, params, solution, hook = [], None, None, None
    if k_frac is None and cfg.strategy == "optimal":
        params = probe_params(cfg, arch, data, env, w0)
        solution = solve(cfg, env, params)
        k, lam = solution.k_star_int, solution.lambda_star
        trace.append({"round": 0, "k": k, "lam": lam, "objective": solution.objective_int})
        if cfg.mode == "stochastic" and cfg.reopt_every > 0:
            hook = _Reoptimizer(cfg, env, params, solution, trace)
        name = name or "optimal"
    else:
        frac = cfg.k_frac if k_frac is None else k_frac
        k = k_from_fraction(frac, d)
        lam = cfg.lam or fastest_lambda(env, k, (cfg.lam_min, cfg.lam_max))
        name = name or f"k={frac:g}d"
    log = protocol.run_experiment(system_config(cfg, k, lam), arch, data, env, w0=w0,
                                  rng=stream_rng(cfg.seed, stream), on_round=hook)
    log.config = {**to_dict(cfg), "stream": stream}
    log.solution_trace = trace
    return ArmResult(name, k, lam, log, params, solution, trace)


def _fmt(v):
    if isinstance(v, float):
        return repr(v)
    return str(v)


def write_metrics(log, path):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(protocol.CSV_COLUMNS)
        for r in log.records:
            w.writerow([_fmt(v) for v in protocol.record_row(r)])


def dump_json(obj, path):
    with open(path, "w") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True, allow_nan=True)
        fh.write("\n")


def write_outputs(arm, out_dir):
    os.makedirs(out_dir, exist_ok=True)
    write_metrics(arm.log, os.path.join(out_dir, "metrics.csv"))
    dump_json(arm.summary(), os.path.join(out_dir, "summary.json"))
    chain.write_ledger(arm.log.ledger, os.path.join(out_dir, "ledger.chain"))
    dump_json(arm.trace, os.path.join(out_dir, "solution_trace.json"))


def sweep_k(cfg, fracs):
    """One fixed-k arm per fraction; arm ``i`` uses stream ``i``."""
    return [run_arm(cfg, stream=i, k_frac=f) for i, f in enumerate(fracs)]


def sweep_clients(cfg, counts):
    """Vary N (and M = N) with the total number of training samples held fixed."""
    total = cfg.N * cfg.per_client
    arms = []
    for i, n in enumerate(counts):
        sub = replace(cfg, N=n, M=n, per_client=total // n)
        arms.append(run_arm(sub, stream=i, name=f"N={n}"))
    return arms


def sweep_row(arm):
    log = arm.log
    return {
        "arm": arm.name, "k": arm.k, "lam": arm.lam, "rounds": log.rounds,
        "final_acc": log.final_accuracy, "final_loss": log.final_loss,
        "total_bytes": log.total_bytes,
    }


def _first_time(log, target):
    t, spent = log.time_to_accuracy(target)
    return t, spent


def run_comparison(cfg):
    """Optimal arm against fixed-k baselines, timed to a common accuracy target."""
    fracs = list(cfg.baselines)
    if 1.0 not in fracs:
        fracs.append(1.0)
    arms = [run_arm(replace(cfg, strategy="optimal"), stream=0)]
    for i, f in enumerate(fracs, start=1):
        arms.append(run_arm(cfg, stream=i, k_frac=f,
                            name="uncompressed" if f == 1.0 else f"k={f:g}d"))
    unc = next(a for a in arms if a.name == "uncompressed")
    target = cfg.target_acc or max((r.test_acc for r in unc.log.records),
                                   default=unc.log.initial_accuracy)
    t_unc, _ = _first_time(unc.log, target)
    d = unc.k
    rows = []
    for a in arms:
        t, spent = _first_time(a.log, target)
        rows.append({
            "arm": a.name, "k": a.k, "comm_rate": d / a.k, "lam": a.lam,
            "rounds": a.log.rounds, "final_acc": a.log.final_accuracy,
            "final_loss": a.log.final_loss, "total_bytes": a.log.total_bytes,
            "bytes_per_round": a.log.total_bytes / a.log.rounds if a.log.rounds else 0.0,
            "target_acc": target, "reached": t is not None,
            "time_to_target": t, "bytes_to_target": spent if t is not None else None,
            "reduced_to": (t / t_unc) if (t is not None and t_unc) else None,
        })
    return rows, arms


def write_rows(rows, path):
    if not rows:
        return
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(list(rows[0]))
        for r in rows:
            w.writerow(["" if v is None else _fmt(v) for v in r.values()])


def default_config():
    return ExperimentConfig()
