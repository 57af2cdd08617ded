"""Wireless link model and the expected duration of one global round.

All rates are bytes/s internally. A round consists of local training,
upload, cross-miner transaction exchange, mining with fork retries,
block download and aggregation; ``h`` is the sum of their expected times.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np

from .compression import bytes_per_update


class ParameterError(ValueError):
    pass


def shannon_rate(bw_hz, gain, p_t, p_n):
    """Link capacity in bits/s: ``BW * log2(1 + g * P_t / P_n)``."""
    if min(bw_hz, gain, p_t, p_n) <= 0:
        raise ParameterError("bandwidth, gain and powers must be positive")
    return bw_hz * math.log2(1.0 + gain * p_t / p_n)


def sample_link_rate(mu, jitter, rng, size=None):
    """Gaussian(mu, jitter * mu) truncated below at 0.01 * mu."""
    if mu <= 0:
        raise ParameterError("mean rate must be positive")
    if jitter == 0:
        return mu if size is None else np.full(size, float(mu))
    x = rng.normal(mu, jitter * mu, size=size)
    return np.maximum(x, 0.01 * mu) if size is not None else max(float(x), 0.01 * mu)


@dataclass
class NetworkEnv:
    up_rates: np.ndarray
    down_rates: np.ndarray
    miner_rates: np.ndarray
    assignment: np.ndarray  # client -> miner
    d: int
    s: float = 4.0
    tau_local: float = 0.2
    tau_aggre: float = 0.0
    jitter: float = 0.1

    def __post_init__(self):
        self.up_rates = np.asarray(self.up_rates, dtype=np.float64)
        self.down_rates = np.asarray(self.down_rates, dtype=np.float64)
        self.miner_rates = np.asarray(self.miner_rates, dtype=np.float64)
        self.assignment = np.asarray(self.assignment, dtype=np.int64)
        if self.up_rates.shape != self.down_rates.shape or self.up_rates.shape != self.assignment.shape:
            raise ParameterError("per-client arrays must have length N")
        if min(self.up_rates.min(), self.down_rates.min(), self.miner_rates.min()) <= 0:
            raise ParameterError("all rates must be positive")
        if self.assignment.min() < 0 or self.assignment.max() >= self.M:
            raise ParameterError("client assigned to a nonexistent miner")
        if self.jitter < 0 or self.tau_local < 0 or self.tau_aggre < 0:
            raise ParameterError("jitter and compute times must be nonnegative")

    @property
    def N(self):
        return self.up_rates.shape[0]

    @property
    def M(self):
        return self.miner_rates.shape[0]

    @property
    def clients_per_miner(self):
        return np.bincount(self.assignment, minlength=self.M)

    @property
    def omega(self):
        return bytes_per_update(self.d, self.s)

    @property
    def winner(self):
        """Winner assumed by the analytic model.

        Excluding the fastest miner maximizes both the slowest propagation
        and the summed delays, so this is the worst case (exact when all
        miner rates are equal).
        """
        return int(np.argmax(self.miner_rates))

    def competitors(self):
        return np.delete(np.arange(self.M), self.winner)

    def scaled(self, factor):
        """Copy with every link rate multiplied by ``factor``."""
        return replace(
            self,
            up_rates=self.up_rates * factor,
            down_rates=self.down_rates * factor,
            miner_rates=self.miner_rates * factor,
        )

    @classmethod
    def homogeneous(cls, rate, N, M, d, s=4.0, tau_local=0.2, tau_aggre=0.0, jitter=0.1):
        return cls(
            up_rates=np.full(N, float(rate)),
            down_rates=np.full(N, float(rate)),
            miner_rates=np.full(M, float(rate)),
            assignment=default_assignment(N, M),
            d=d, s=s, tau_local=tau_local, tau_aggre=tau_aggre, jitter=jitter,
        )

    @classmethod
    def from_link(cls, N, M, d, bw_hz=20e6, gain=1e-8, p_t=0.5, p_n=1e-10, **kw):
        rate = shannon_rate(bw_hz, gain, p_t, p_n) / 8.0
        return cls.homogeneous(rate, N, M, d, **kw)


def default_assignment(N, M):
    """One miner per client when M == N, round-robin otherwise."""
    return np.arange(N) % M


def fork_probability(lam, omega_block, competitor_rates):
    """``1 - exp(-lam * sum(Omega / u_j))`` over the non-winning miners."""
    if lam <= 0 or omega_block < 0:
        raise ParameterError("need lam > 0 and Omega >= 0")
    rates = np.asarray(competitor_rates, dtype=np.float64)
    if rates.size == 0:
        return 0.0
    return -math.expm1(-lam * float(np.sum(omega_block / rates)))


def expected_step4_time(lam, omega_block, competitor_rates):
    """Mining plus propagation, inflated by fork retries."""
    if lam <= 0 or omega_block < 0:
        raise ParameterError("need lam > 0 and Omega >= 0")
    rates = np.asarray(competitor_rates, dtype=np.float64)
    if rates.size == 0:
        return 1.0 / lam
    delays = omega_block / rates
    return (1.0 / lam + float(delays.max())) * math.exp(lam * float(delays.sum()))


def _check_k_lam(k, lam, d):
    if not 0 < k <= d:
        raise ParameterError(f"k={k} outside (0, {d}]")
    if lam <= 0:
        raise ParameterError("lam must be positive")


def step_durations(k, lam, env, active=None):
    """Expected duration of each step of one round.

    ``active`` is an optional boolean mask of clients whose update reaches
    the block (dropout); by default every client contributes.
    """
    _check_k_lam(k, lam, env.d)
    if active is None:
        active = np.ones(env.N, dtype=bool)
    per_client = k * env.omega
    n_active = int(active.sum())
    omega_block = n_active * per_client
    on_miner = np.bincount(env.assignment[active], minlength=env.M)
    return {
        "local": env.tau_local,
        "up": float(np.max(np.where(active, per_client / env.up_rates, 0.0))),
        "cross": float(np.max((n_active - on_miner) * per_client / env.miner_rates)),
        "mine": expected_step4_time(lam, omega_block, env.miner_rates[env.competitors()]),
        "down": float(np.max(omega_block / env.down_rates)),
        "aggre": env.tau_aggre,
    }


def h(k, lam, env):
    """Expected wall time of one global round."""
    t = step_durations(k, lam, env)
    return t["local"] + t["aggre"] + t["up"] + t["cross"] + t["mine"] + t["down"]


@dataclass(frozen=True)
class HCoefficients:
    lambda_T: float
    lambda_P: float
    fork_per_lambda: float  # Lambda_F / lambda
    omega: float
    tau_fixed: float

    def lambda_F(self, lam):
        return lam * self.fork_per_lambda

    def h(self, k, lam):
        grow = math.exp(self.lambda_F(lam) * k)
        return self.tau_fixed + self.lambda_T * k + grow / lam + self.lambda_P * k * grow


def h_coefficients(env):
    """Collapse ``env`` into the linear/exponential coefficients of h(k, lam)."""
    w = env.omega
    N = env.N
    rivals = env.miner_rates[env.competitors()]
    lambda_T = (
        float(np.max(w / env.up_rates))
        + float(np.max((N - env.clients_per_miner) * w / env.miner_rates))
        + float(np.max(N * w / env.down_rates))
    )
    lambda_P = float(np.max(N * w / rivals)) if rivals.size else 0.0
    fork = float(np.sum(N * w / rivals)) if rivals.size else 0.0
    return HCoefficients(lambda_T, lambda_P, fork, w, env.tau_local + env.tau_aggre)
