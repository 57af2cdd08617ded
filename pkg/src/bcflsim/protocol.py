"""Federated training rounds over the simulated chain.

One round: every client runs ``E`` local gradient steps from the global
model, adds its compensation residual, sends the Top-k of that to its miner,
and keeps what was dropped. Miners exchange updates, race to mine a block,
and every client rebuilds the next global model from the block.

Updates are stored as ``new - old`` deltas, so aggregation is plain addition.
All timing is virtual.
"""
from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from . import chain, compression, kernels, learning, timecost
from .compression import SparseUpdate

log = logging.getLogger(__name__)

MODES = ("analytic", "stochastic")


class DivergenceError(FloatingPointError):
    def __init__(self, round, client_id):
        super().__init__(f"non-finite loss or gradient in round {round} on client {client_id}")
        self.round = round
        self.client_id = client_id


class BlockIntegrityError(ValueError):
    pass


@dataclass
class SystemConfig:
    N: int = 50
    M: int = 50
    E: int = 5
    eta: float = 0.05
    batch_size: int | None = None  # None: full batch
    k: int = 1
    lam: float = 1.0
    Y: float = 100.0
    s: int = 4
    seed: int = 0
    mode: str = "analytic"
    dropout: float = 0.0
    real_pow: bool = False
    hash_rate: float = 64.0

    def validate(self, d):
        if self.N < 1 or self.M < 1 or self.E < 1:
            raise ValueError("N, M and E must be at least 1")
        if self.eta <= 0 or self.lam <= 0 or self.Y <= 0:
            raise ValueError("eta, lam and Y must be positive")
        if not 0 < self.k <= d:
            raise ValueError(f"k={self.k} outside (0, {d}]")
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}")
        if not 0 <= self.dropout < 1:
            raise ValueError("dropout must lie in [0, 1)")
        if self.s not in compression.VALUE_DTYPES:
            raise ValueError("s must be 2, 4 or 8 bytes for simulation")


@dataclass
class ClientState:
    id: int
    w: np.ndarray
    m: np.ndarray
    data: learning.ClientData
    miner: int = 0


@dataclass
class RoundRecord:
    round: int
    tau_local: float
    tau_up: float
    tau_cross: float
    tau_mine: float
    tau_down: float
    tau_aggre: float
    fork_attempts: float
    bytes_uploaded: float
    bytes_crossed: float
    bytes_propagated: float
    bytes_downloaded: float
    test_loss: float
    test_acc: float
    cum_time: float
    n_updates: int = 0
    k: int = 0
    lam: float = 0.0
    max_residual_norm2: float = 0.0

    @property
    def duration(self):
        return (self.tau_local + self.tau_up + self.tau_cross + self.tau_mine
                + self.tau_down + self.tau_aggre)

    @property
    def bytes_total(self):
        return (self.bytes_uploaded + self.bytes_crossed + self.bytes_propagated
                + self.bytes_downloaded)


CSV_COLUMNS = [
    "round", "tau_local", "tau_up", "tau_cross", "tau_mine", "tau_down", "tau_aggre",
    "fork_attempts", "bytes_total", "cum_time_s", "test_loss", "test_acc",
]


def record_row(r):
    return [r.round, r.tau_local, r.tau_up, r.tau_cross, r.tau_mine, r.tau_down,
            r.tau_aggre, r.fork_attempts, r.bytes_total, r.cum_time, r.test_loss, r.test_acc]


@dataclass
class ExperimentLog:
    records: list = field(default_factory=list)
    final_accuracy: float = float("nan")
    final_loss: float = float("nan")
    initial_accuracy: float = float("nan")
    initial_loss: float = float("nan")
    total_bytes: float = 0.0
    seed: int = 0
    config: dict = field(default_factory=dict)
    solution_trace: list = field(default_factory=list)
    warnings: list = field(default_factory=list)
    final_model_digest: str = ""
    ledger: list = field(default_factory=list)

    @property
    def rounds(self):
        return len(self.records)

    def summary(self):
        return {
            "config": self.config,
            "R": self.rounds,
            "final_accuracy": self.final_accuracy,
            "final_loss": self.final_loss,
            "total_bytes": self.total_bytes,
            "seed": self.seed,
            "final_model_digest": self.final_model_digest,
            "warnings": self.warnings,
        }

    def time_to_accuracy(self, target):
        """Simulated time and bytes when test accuracy first reaches ``target``."""
        spent = 0.0
        for r in self.records:
            spent += r.bytes_total
            if r.test_acc >= target:
                return r.cum_time, spent
        return None, spent


def global_loss_and_gradient(arch, w, clients):
    """Uniform average over clients of their local loss and gradient."""
    total_loss = 0.0
    total_grad = np.zeros_like(w)
    for c in clients:
        l, g = learning.loss_and_gradient(arch, w, c.X, c.y)
        total_loss += l
        total_grad += g
    n = len(clients)
    return total_loss / n, total_grad / n


def local_train(arch, w, data, E, eta, batch_size=None, rng=None, round=0, client_id=0,
                on_step=None):
    """``E`` gradient steps from ``w``; full batch unless ``batch_size`` is set."""
    w = np.array(w, dtype=np.float64)
    for _ in range(E):
        if batch_size is None or batch_size >= len(data):
            X, y = data.X, data.y
        else:
            idx = rng.choice(len(data), size=batch_size, replace=False)
            X, y = data.X[idx], data.y[idx]
        if on_step is not None:
            on_step(w)
        value, grad = learning.loss_and_gradient(arch, w, X, y)
        if not (math.isfinite(value) and np.all(np.isfinite(grad))):
            raise DivergenceError(round, client_id)
        w -= eta * grad
    if not np.all(np.isfinite(w)):
        raise DivergenceError(round, client_id)
    return w


def compress_with_feedback(delta, m_prev, k, s=8, round=0, client_id=0):
    """Top-k of ``delta + m_prev``; returns ``(sent, m_new, g_raw)``.

    Sent values are rounded to the ``s``-byte wire format, and ``m_new``
    holds everything that did not reach the wire, so
    ``sent.densify() + m_new == g_raw`` exactly.
    """
    g_raw = delta + m_prev
    sent = compression.top_k(g_raw, k, round=round, client_id=client_id)
    sent.values = compression.quantize(sent.values, s)
    m_new = g_raw.copy()
    m_new[sent.indices] -= sent.values
    return sent, m_new, g_raw


def client_round(arch, state, w_global, E, eta, k, s=8, round=0, batch_size=None, rng=None,
                 on_step=None):
    """Local training plus compression for one client.

    Returns ``(sent, new_state, g_raw)``; the input state is not modified.
    """
    if state.m.shape != w_global.shape:
        raise ValueError("compensation and model dimensions differ")
    w_after = local_train(arch, w_global, state.data, E, eta, batch_size, rng,
                          round=round, client_id=state.id, on_step=on_step)
    try:
        sent, m_new, g_raw = compress_with_feedback(
            w_after - w_global, state.m, k, s, round=round, client_id=state.id)
    except compression.CompressionError:
        raise DivergenceError(round, state.id) from None
    new_state = ClientState(state.id, w_after, m_new, state.data, state.miner)
    return sent, new_state, g_raw


def aggregate(updates, w_prev, N, allow_missing=False):
    """``w_prev + (1/N) * sum(updates)``, summed in client-id order."""
    ids = [u.client_id for u in updates]
    if len(set(ids)) != len(ids):
        raise BlockIntegrityError("duplicate client update in block")
    if not allow_missing and sorted(ids) != list(range(N)):
        raise BlockIntegrityError(f"block must hold exactly one update per client, got {sorted(ids)}")
    if any(i < 0 or i >= N for i in ids):
        raise BlockIntegrityError("client id out of range")
    rounds = {u.round for u in updates}
    if len(rounds) > 1:
        raise BlockIntegrityError("updates from different rounds in one block")
    acc = np.zeros_like(w_prev, dtype=np.float64)
    for u in sorted(updates, key=lambda u: u.client_id):
        kernels.scatter_accumulate(acc, u.indices, u.values)
    return w_prev + acc / N


def replay_aggregate(updates, w_prev, N):
    """Aggregation rule used when replaying a ledger (dropouts allowed)."""
    return aggregate(updates, w_prev, N, allow_missing=True)


class Simulation:
    """State of a running experiment: clients, global model, ledger and clock."""

    def __init__(self, config, arch, dataset, env, w0=None, rng=None, grad_history=None,
                 track_raw=False):
        d = arch.num_params
        config.validate(d)
        if env.N != config.N or env.M != config.M or env.d != d:
            raise ValueError("network environment does not match N, M or d")
        if dataset.num_clients != config.N:
            raise ValueError("dataset has the wrong number of clients")
        self.config = config
        self.arch = arch
        self.dataset = dataset
        self.env = env
        self.k = int(config.k)
        self.lam = float(config.lam)
        self.w = learning.init_model(arch, config.seed) if w0 is None else np.array(w0, dtype=np.float64)
        self.rng = rng if rng is not None else np.random.default_rng(config.seed)
        self.clients = [
            ClientState(i, self.w.copy(), np.zeros(d), dataset.clients[i], int(env.assignment[i]))
            for i in range(config.N)
        ]
        self.ledger = [chain.genesis_block(self.w, config.s)]
        self.clock = 0.0
        self.round = 0
        self.grad_history = grad_history
        self.track_raw = track_raw
        self.last_raw = []
        self.last_sent = []
        self.last_rates = None

    @property
    def d(self):
        return self.arch.num_params

    def evaluate(self):
        t = self.dataset.test
        _, logits = learning._forward(self.arch, self.w, t.X)
        logp = learning._log_softmax(logits)
        loss = float(-logp[np.arange(t.y.shape[0]), t.y].mean())
        acc = float(np.mean(np.argmax(logits, axis=1) == t.y))
        return loss, acc

    def _plan_timing(self, active):
        """Durations of the network steps, drawn before any training happens."""
        cfg, env, k = self.config, self.env, self.k
        n_active = int(active.sum())
        if cfg.mode == "analytic" or n_active == 0:
            t = timecost.step_durations(k, self.lam, env, active) if n_active else {
                "local": env.tau_local, "up": 0.0, "cross": 0.0, "mine": 1.0 / self.lam,
                "down": 0.0, "aggre": env.tau_aggre}
            omega = n_active * k * env.omega
            rivals = env.miner_rates[env.competitors()]
            attempts = 1.0 / (1.0 - timecost.fork_probability(self.lam, omega, rivals))
            return t, attempts, None
        rng = self.rng
        per = k * env.omega
        omega = n_active * per
        up = timecost.sample_link_rate(1.0, env.jitter, rng, size=env.N) * env.up_rates
        cross_rates = timecost.sample_link_rate(1.0, env.jitter, rng, size=env.M) * env.miner_rates
        on_miner = np.bincount(env.assignment[active], minlength=env.M)

        def fresh_delays():
            return omega / (timecost.sample_link_rate(1.0, env.jitter, rng, size=env.M)
                            * env.miner_rates)

        nonce = 0
        if cfg.real_pow:
            header = self.ledger[-1].block_hash + int(self.round + 1).to_bytes(8, "little")
            attempts, mine = 0, 0.0
            while True:
                delays = fresh_delays()
                winner, forked, elapsed, nonce = chain.pow_race(
                    header + attempts.to_bytes(4, "little"), self.lam, delays, cfg.hash_rate)
                attempts += 1
                mine += elapsed
                if not forked:
                    break
        else:
            outcome = chain.run_mining_race(self.lam, fresh_delays(), rng, sample_delays=fresh_delays)
            attempts, mine, winner = outcome.attempts, outcome.elapsed, outcome.winner
        down = timecost.sample_link_rate(1.0, env.jitter, rng, size=env.N) * env.down_rates
        self.last_rates = {"up": up, "miner": cross_rates, "down": down}
        t = {
            "local": env.tau_local,
            "up": float(np.max(np.where(active, per / up, 0.0))),
            "cross": float(np.max((n_active - on_miner) * per / cross_rates)),
            "mine": float(mine),
            "down": float(np.max(omega / down)),
            "aggre": env.tau_aggre,
        }
        return t, attempts, (winner, nonce)

    def run_round(self, budget=None):
        """Execute one global round; returns its record, or None if it would overrun ``budget``."""
        cfg, env = self.config, self.env
        r = self.round + 1
        if cfg.dropout > 0:
            active = self.rng.random(cfg.N) >= cfg.dropout
        else:
            active = np.ones(cfg.N, dtype=bool)
        t, attempts, won = self._plan_timing(active)
        duration = t["local"] + t["up"] + t["cross"] + t["mine"] + t["down"] + t["aggre"]
        if budget is not None and self.clock + duration > budget:
            return None

        batch_rng = self.rng if cfg.batch_size is not None else None
        on_step = None
        if self.grad_history is not None:
            def on_step(w, _h=self.grad_history):
                _, g = global_loss_and_gradient(self.arch, w, self.dataset.clients)
                _h.record(float(g @ g))

        updates, raws = [], []
        new_clients = list(self.clients)
        for i, c in enumerate(self.clients):
            if not active[i]:
                continue
            sent, new_state, g_raw = client_round(
                self.arch, c, self.w, cfg.E, cfg.eta, self.k, cfg.s, round=r,
                batch_size=cfg.batch_size, rng=batch_rng, on_step=on_step)
            updates.append(sent)
            new_clients[i] = new_state
            if self.track_raw:
                raws.append((i, g_raw))
        if self.track_raw:
            self.last_raw = raws
            self.last_sent = updates

        w_new = aggregate(updates, self.w, cfg.N, allow_missing=cfg.dropout > 0)
        self.clock += duration
        winner, nonce = won if won is not None else (env.winner, 0)
        chain.build_block(self.ledger, updates, r, winner, nonce, self.clock, cfg.N, w_new)
        self.w = w_new
        for c in new_clients:
            c.w = self.w.copy()
        self.clients = new_clients
        self.round = r

        n_active = len(updates)
        per_traffic = compression.traffic_bytes(self.k, self.d, cfg.s)
        on_miner = np.bincount(env.assignment[active], minlength=env.M)
        block_bytes = n_active * per_traffic
        loss, acc = self.evaluate()
        rec = RoundRecord(
            round=r,
            tau_local=t["local"], tau_up=t["up"], tau_cross=t["cross"], tau_mine=t["mine"],
            tau_down=t["down"], tau_aggre=t["aggre"],
            fork_attempts=float(attempts),
            bytes_uploaded=block_bytes,
            bytes_crossed=float(np.sum(n_active - on_miner)) * per_traffic,
            bytes_propagated=float(attempts) * (env.M - 1) * block_bytes,
            bytes_downloaded=cfg.N * block_bytes,
            test_loss=loss, test_acc=acc, cum_time=self.clock,
            n_updates=n_active, k=self.k, lam=self.lam,
            max_residual_norm2=max(float(c.m @ c.m) for c in self.clients),
        )
        return rec


def run_experiment(config, arch, dataset, env, w0=None, rng=None, on_round=None,
                   grad_history=None):
    """Run rounds until the next one would push the clock past ``config.Y``."""
    sim = Simulation(config, arch, dataset, env, w0=w0, rng=rng, grad_history=grad_history)
    out = ExperimentLog(seed=config.seed, config=asdict(config))
    out.initial_loss, out.initial_accuracy = sim.evaluate()
    while True:
        rec = sim.run_round(budget=config.Y)
        if rec is None:
            break
        out.records.append(rec)
        out.total_bytes += rec.bytes_total
        if on_round is not None:
            on_round(sim, rec, out)
    if not out.records:
        msg = f"budget Y={config.Y}s is shorter than one round; no rounds completed"
        log.warning(msg)
        out.warnings.append(msg)
        out.final_loss, out.final_accuracy = out.initial_loss, out.initial_accuracy
    else:
        out.final_loss = out.records[-1].test_loss
        out.final_accuracy = out.records[-1].test_acc
    out.final_model_digest = chain.model_digest(sim.w).hex()
    out.ledger = sim.ledger
    out.sim = sim
    return out
