"""Flat ``key = value`` experiment configuration.

Blank lines and ``#`` comments are ignored. Every key must be known; values
are parsed to the type of the default. Lists are comma separated.
"""
from __future__ import annotations

from dataclasses import dataclass, fields, replace

from .learning import ConfigError

SCHEMA_DOC = {
    "N": "number of clients",
    "M": "number of miners",
    "E": "local gradient steps per round",
    "eta": "local learning rate",
    "batch_size": "mini-batch size, 0 for full batch",
    "k_frac": "fraction of d kept by Top-k when strategy = fixed",
    "lam": "block rate in blocks/s when strategy = fixed, 0 picks the fastest-round rate",
    "Y": "simulated time budget in seconds",
    "s": "bytes per value on the wire (2, 4 or 8)",
    "seed": "master seed",
    "mode": "analytic or stochastic",
    "dropout": "probability a client's update misses a round",
    "real_pow": "hash-based mining instead of sampled exponentials (stochastic mode)",
    "hash_rate": "hashes per second per miner for real_pow",
    "strategy": "fixed (k_frac, lam) or optimal (solve for k and lam)",
    "C": "step-size constant of the convergence bound",
    "probe_frac": "k / d used for the parameter-estimation round",
    "lam_min": "lower end of the block-rate search range",
    "lam_max": "upper end of the block-rate search range",
    "reopt_every": "rounds between re-optimizations in stochastic mode, 0 disables",
    "ema_alpha": "smoothing of re-measured link rates",
    "baselines": "k / d of the fixed-k arms in compare; 1 is uncompressed",
    "target_acc": "compare: accuracy target, 0 uses the uncompressed arm's best",
    "bw_hz": "channel bandwidth in Hz",
    "gain": "channel gain",
    "p_t": "transmit power in W",
    "p_n": "noise power in W",
    "rate_spread": "relative spread of per-node mean link rates, 0 for identical links",
    "jitter": "relative std of per-transfer link-rate samples (stochastic mode)",
    "tau_local": "local computation time per round in seconds",
    "tau_aggre": "aggregation time per round in seconds",
    "per_client": "training samples per client",
    "labels_per_client": "distinct labels per client, label_count for IID",
    "label_count": "number of classes",
    "feature_dim": "input features of the synthetic task",
    "separation": "std of synthetic class means",
    "test_size": "synthetic test-set size",
    "data_csv": "CSV file with features then an integer label; empty for synthetic data",
    "hidden": "hidden layer widths, empty for softmax regression",
    "activation": "relu or tanh",
}


# environment-file spellings accepted as synonyms
ALIASES = {
    "n_clients": "N", "n_miners": "M", "p_t_w": "p_t", "p_n_w": "p_n",
    "tau_local_s": "tau_local", "tau_aggre_s": "tau_aggre", "s_bytes": "s",
}


@dataclass(frozen=True)
class ExperimentConfig:
    N: int = 50
    M: int = 50
    E: int = 5
    eta: float = 0.05
    batch_size: int = 0
    k_frac: float = 0.01
    lam: float = 0.0
    Y: float = 100.0
    s: int = 4
    seed: int = 0
    mode: str = "analytic"
    dropout: float = 0.0
    real_pow: bool = False
    hash_rate: float = 64.0
    strategy: str = "optimal"
    C: float = 0.15
    probe_frac: float = 0.01
    lam_min: float = 1e-4
    lam_max: float = 100.0
    reopt_every: int = 10
    ema_alpha: float = 0.3
    baselines: tuple = (0.01, 0.02, 0.03, 1.0)
    target_acc: float = 0.0
    bw_hz: float = 20e6
    gain: float = 1e-8
    p_t: float = 0.5
    p_n: float = 1e-10
    rate_spread: float = 0.0
    jitter: float = 0.1
    tau_local: float = 0.2
    tau_aggre: float = 0.0
    per_client: int = 100
    labels_per_client: int = 10
    label_count: int = 10
    feature_dim: int = 32
    separation: float = 0.6
    test_size: int = 1000
    data_csv: str = ""
    hidden: tuple = (256,)
    activation: str = "relu"

    def __post_init__(self):
        if self.N < 1 or self.M < 1 or self.E < 1:
            raise ConfigError("N, M and E must be at least 1")
        if self.eta <= 0 or self.Y <= 0 or self.C <= 0:
            raise ConfigError("eta, Y and C must be positive")
        for name in ("k_frac", "probe_frac"):
            if not 0 < getattr(self, name) <= 1:
                raise ConfigError(f"{name} must lie in (0, 1]")
        if any(not 0 < f <= 1 for f in self.baselines):
            raise ConfigError("baseline fractions must lie in (0, 1]")
        if not 0 <= self.dropout < 1:
            raise ConfigError("dropout must lie in [0, 1)")
        if self.mode not in ("analytic", "stochastic"):
            raise ConfigError("mode must be analytic or stochastic")
        if self.strategy not in ("fixed", "optimal"):
            raise ConfigError("strategy must be fixed or optimal")
        if self.s not in (2, 4, 8):
            raise ConfigError("s must be 2, 4 or 8")
        if self.lam < 0 or not 0 < self.lam_min < self.lam_max:
            raise ConfigError("need lam >= 0 and 0 < lam_min < lam_max")
        if not 0 < self.ema_alpha <= 1 or self.reopt_every < 0:
            raise ConfigError("need 0 < ema_alpha <= 1 and reopt_every >= 0")
        if self.batch_size < 0 or self.rate_spread < 0 or self.rate_spread >= 1:
            raise ConfigError("need batch_size >= 0 and 0 <= rate_spread < 1")

    def with_overrides(self, **kw):
        return replace(self, **kw)


def _parse_value(name, default, text):
    text = text.strip()
    try:
        if isinstance(default, bool):
            low = text.lower()
            if low not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError(text)
            return low in ("true", "1", "yes")
        if isinstance(default, int):
            return int(text)
        if isinstance(default, float):
            return float(text)
        if isinstance(default, tuple):
            parts = [p.strip() for p in text.split(",") if p.strip()]
            kind = float if name == "baselines" else int
            return tuple(kind(p) for p in parts)
        return text
    except ValueError:
        raise ConfigError(f"bad value for {name}: {text!r}") from None


def parse_pairs(pairs, base=None):
    """Apply ``key=value`` strings on top of ``base`` (the defaults if None)."""
    base = base or ExperimentConfig()
    defaults = {f.name: getattr(base, f.name) for f in fields(ExperimentConfig)}
    updates = {}
    for lineno, raw in pairs:
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected key = value")
        key, value = (p.strip() for p in line.split("=", 1))
        key = ALIASES.get(key, key)
        if key not in defaults:
            raise ConfigError(f"line {lineno}: unknown key {key!r}")
        updates[key] = _parse_value(key, defaults[key], value)
    return replace(base, **updates)


def loads(text, base=None):
    return parse_pairs(enumerate(text.splitlines(), start=1), base)


def load(path, base=None):
    try:
        with open(path) as fh:
            text = fh.read()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc.strerror}") from None
    return loads(text, base)


def _format(value):
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, tuple):
        return ",".join(repr(v) for v in value)
    return repr(value) if isinstance(value, float) else str(value)


def dumps(cfg):
    lines = []
    for f in fields(ExperimentConfig):
        lines.append(f"# {SCHEMA_DOC[f.name]}")
        lines.append(f"{f.name} = {_format(getattr(cfg, f.name))}")
    return "\n".join(lines) + "\n"


def to_dict(cfg):
    return {f.name: (list(v) if isinstance(v := getattr(cfg, f.name), tuple) else v)
            for f in fields(ExperimentConfig)}
