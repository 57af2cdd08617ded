"""Proof-of-work mining race, fork model and a hash-linked ledger of rounds.

Ledger file layout (all integers little-endian)::

    repeat: u32 record_length | record
    record: header (HEADER_FMT) | block_hash[32] | body
    body:   genesis -> u32 d | d * f64 initial model
            others  -> u32 n_updates | n * (u32 len | encoded SparseUpdate)

``block_hash`` is SHA-256 over the header, and the header carries the
SHA-256 of the body, so every byte of a record is covered by a digest.
"""
from __future__ import annotations

import hashlib
import struct
from dataclasses import dataclass, field

import numpy as np

from . import compression, kernels
from .timecost import ParameterError

HEADER_FMT = struct.Struct("<QQIIIdII32s32s32s")
# height, nonce, round, n_clients, winner, timestamp, s_bytes, d,
# prev_hash, body_hash, model_digest
ZERO_HASH = b"\x00" * 32


class LedgerError(Exception):
    def __init__(self, height, field_name, message):
        super().__init__(f"height {height}: {field_name}: {message}")
        self.height = height
        self.field = field_name


def model_digest(w):
    return hashlib.sha256(np.ascontiguousarray(w, dtype="<f8").tobytes()).digest()


def sample_mining_time(lam, rng, size=None):
    """Exponential block time with mean ``1 / lam``."""
    if lam <= 0:
        raise ParameterError("lam must be positive")
    return rng.exponential(1.0 / lam, size=size)


@dataclass
class MiningOutcome:
    winner: int
    attempts: int
    elapsed: float
    attempt_times: list = field(default_factory=list)


def run_mining_race(lam, delays, rng, sample_delays=None):
    """Race ``M`` miners until an attempt finishes without a fork.

    Each attempt draws an exponential block time per miner; the earliest
    wins (lowest id on exact ties). The attempt forks when any other miner
    finishes before the winner's block reaches it. Every attempt, failed or
    not, costs the winner's mining time plus the slowest propagation.

    ``delays`` are per-miner propagation delays; ``sample_delays`` may be a
    callable returning fresh delays per attempt (link jitter).
    """
    if lam <= 0:
        raise ParameterError("lam must be positive")
    delays = np.asarray(delays, dtype=np.float64)
    M = delays.shape[0]
    if M < 1:
        raise ParameterError("need at least one miner")
    total = 0.0
    times = []
    attempts = 0
    while True:
        attempts += 1
        d_now = delays if sample_delays is None else sample_delays()
        draws = sample_mining_time(lam, rng, size=(1, M))
        winner, forked, elapsed = kernels.race_scan(draws, d_now[None, :])
        total += float(elapsed[0])
        times.append(float(draws[0, winner[0]]))
        if not forked[0]:
            return MiningOutcome(int(winner[0]), attempts, total, times)


def simulate_races(lam, delays, rng, n_races, chunk=65536):
    """Monte-Carlo many independent races; returns (attempts, elapsed, winners).

    Draws come in blocks of attempts and are consumed in order, so the
    result is a deterministic function of the generator state.
    """
    delays = np.ascontiguousarray(delays, dtype=np.float64)
    M = delays.shape[0]
    attempts = np.zeros(n_races, dtype=np.int64)
    elapsed = np.zeros(n_races)
    winners = np.zeros(n_races, dtype=np.int64)
    race = 0
    while race < n_races:
        draws = sample_mining_time(lam, rng, size=(chunk, M))
        w, forked, el = kernels.race_scan(draws, delays[None, :])
        # split the attempt stream into races at each fork-free attempt
        ends = np.flatnonzero(~forked)
        start = 0
        for e in ends:
            if race >= n_races:
                break
            attempts[race] += e - start + 1
            elapsed[race] += el[start:e + 1].sum()
            winners[race] = w[e]
            race += 1
            start = e + 1
        if race < n_races and start < chunk:
            # unfinished race carries its failed attempts into the next block
            attempts[race] += chunk - start
            elapsed[race] += el[start:].sum()
    return attempts, elapsed, winners


def pow_race(header, lam, delays, hash_rate=64.0, max_ticks=10_000_000):
    """Hash-based variant of :func:`run_mining_race` for a single attempt.

    Every miner hashes ``header || miner || nonce`` once per tick of
    ``1 / hash_rate`` seconds; a digest below the target succeeds with
    probability ``lam / hash_rate`` per hash, so the expected block time per
    miner is ``1 / lam``. Returns ``(winner, forked, elapsed, nonce)``.
    """
    if lam <= 0 or hash_rate <= lam:
        raise ParameterError("need 0 < lam < hash_rate")
    delays = np.asarray(delays, dtype=np.float64)
    M = delays.shape[0]
    target = int((lam / hash_rate) * (1 << 256))
    found = [None] * M
    dt = 1.0 / hash_rate
    winner = None
    win_tick = 0
    for tick in range(max_ticks):
        for j in range(M):
            if found[j] is not None:
                continue
            digest = hashlib.sha256(header + struct.pack("<IQ", j, tick)).digest()
            if int.from_bytes(digest, "big") < target:
                found[j] = (tick + 1) * dt
                if winner is None:
                    winner, win_tick = j, tick
        if winner is not None:
            horizon = found[winner] + float(np.max(delays))
            if (tick + 1) * dt > horizon or all(f is not None for f in found):
                break
    else:
        raise RuntimeError("no block found within max_ticks")
    xw = found[winner]
    forked = any(
        found[j] is not None and found[j] - xw <= delays[j] for j in range(M) if j != winner
    )
    prop = max((delays[j] for j in range(M) if j != winner), default=0.0)
    return winner, forked, xw + prop, win_tick


@dataclass
class Block:
    height: int
    round: int
    prev_hash: bytes
    updates: list
    winner: int
    nonce: int
    timestamp: float
    n_clients: int
    d: int
    s: int
    model_digest: bytes
    initial_model: np.ndarray | None = None
    block_hash: bytes = b""

    def body_bytes(self):
        if self.height == 0:
            w = np.ascontiguousarray(self.initial_model, dtype="<f8")
            return struct.pack("<I", w.shape[0]) + w.tobytes()
        parts = [struct.pack("<I", len(self.updates))]
        for u in self.updates:
            enc = compression.encode(u, self.s)
            parts.append(struct.pack("<I", len(enc)))
            parts.append(enc)
        return b"".join(parts)

    def header_bytes(self, body=None):
        body = self.body_bytes() if body is None else body
        return HEADER_FMT.pack(
            self.height, self.nonce, self.round, self.n_clients, self.winner,
            self.timestamp, self.s, self.d, self.prev_hash,
            hashlib.sha256(body).digest(), self.model_digest,
        )

    def seal(self):
        self.block_hash = hashlib.sha256(self.header_bytes()).digest()
        return self

    def record_bytes(self):
        body = self.body_bytes()
        header = self.header_bytes(body)
        return header + hashlib.sha256(header).digest() + body


def genesis_block(w0, s):
    w0 = np.asarray(w0, dtype=np.float64)
    return Block(
        height=0, round=0, prev_hash=ZERO_HASH, updates=[], winner=0, nonce=0,
        timestamp=0.0, n_clients=0, d=w0.shape[0], s=s,
        model_digest=model_digest(w0), initial_model=w0.copy(),
    ).seal()


def build_block(ledger, updates, round, winner, nonce, timestamp, n_clients, w_after):
    """Append a sealed block holding ``updates`` (sorted by client id)."""
    prev = ledger[-1]
    ids = [u.client_id for u in updates]
    if ids != sorted(ids) or len(set(ids)) != len(ids):
        updates = sorted(updates, key=lambda u: u.client_id)
        if len({u.client_id for u in updates}) != len(updates):
            raise LedgerError(prev.height + 1, "updates", "duplicate client update")
    block = Block(
        height=prev.height + 1, round=round, prev_hash=prev.block_hash,
        updates=list(updates), winner=winner, nonce=nonce, timestamp=timestamp,
        n_clients=n_clients, d=prev.d, s=prev.s, model_digest=model_digest(w_after),
    ).seal()
    ledger.append(block)
    return block


def write_ledger(ledger, path):
    with open(path, "wb") as fh:
        for block in ledger:
            rec = block.record_bytes()
            fh.write(struct.pack("<I", len(rec)))
            fh.write(rec)


def _parse_record(rec, height):
    hsz = HEADER_FMT.size
    if len(rec) < hsz + 32:
        raise LedgerError(height, "record", "truncated header")
    header = rec[:hsz]
    stored_hash = rec[hsz:hsz + 32]
    body = rec[hsz + 32:]
    (h, nonce, rnd, n_clients, winner, ts, s, d,
     prev_hash, body_hash, digest) = HEADER_FMT.unpack(header)
    if hashlib.sha256(header).digest() != stored_hash:
        raise LedgerError(height, "block_hash", "header does not match its hash")
    if h != height:
        raise LedgerError(height, "height", f"recorded height {h}")
    if hashlib.sha256(body).digest() != body_hash:
        raise LedgerError(height, "body", "body does not match body_hash")
    if s not in compression.VALUE_DTYPES:
        raise LedgerError(height, "s", f"unsupported value width {s}")
    block = Block(
        height=h, round=rnd, prev_hash=prev_hash, updates=[], winner=winner,
        nonce=nonce, timestamp=ts, n_clients=n_clients, d=d, s=s,
        model_digest=digest, block_hash=stored_hash,
    )
    if h == 0:
        if len(body) < 4:
            raise LedgerError(height, "body", "truncated genesis")
        (n,) = struct.unpack_from("<I", body, 0)
        if n != d or len(body) != 4 + 8 * n:
            raise LedgerError(height, "body", "genesis model length mismatch")
        block.initial_model = np.frombuffer(body, dtype="<f8", offset=4).astype(np.float64)
        return block
    (count,) = struct.unpack_from("<I", body, 0) if len(body) >= 4 else (None,)
    if count is None:
        raise LedgerError(height, "body", "truncated body")
    pos = 4
    for _ in range(count):
        if pos + 4 > len(body):
            raise LedgerError(height, "updates", "truncated update list")
        (n,) = struct.unpack_from("<I", body, pos)
        pos += 4
        try:
            block.updates.append(compression.decode(body[pos:pos + n], s))
        except compression.CompressionError as exc:
            raise LedgerError(height, "updates", str(exc)) from None
        pos += n
    if pos != len(body):
        raise LedgerError(height, "updates", "trailing bytes in body")
    return block


def read_ledger(path):
    """Parse a ledger file; raises :class:`LedgerError` naming the bad height."""
    with open(path, "rb") as fh:
        data = fh.read()
    return parse_ledger(data)


def parse_ledger(data):
    blocks = []
    pos = 0
    while pos < len(data):
        height = len(blocks)
        if pos + 4 > len(data):
            raise LedgerError(height, "length", "truncated length prefix")
        (n,) = struct.unpack_from("<I", data, pos)
        pos += 4
        if pos + n > len(data):
            raise LedgerError(height, "length", "record runs past end of file")
        blocks.append(_parse_record(data[pos:pos + n], height))
        pos += n
    if not blocks:
        raise LedgerError(0, "ledger", "empty ledger")
    return blocks


def verify_chain(ledger, aggregate):
    """Check links and replay aggregation from genesis.

    ``aggregate(updates, w_prev, n_clients)`` must be the same function the
    simulator used. Returns the replayed final model; raises
    :class:`LedgerError` at the first bad height.
    """
    if not ledger:
        raise LedgerError(0, "ledger", "empty ledger")
    g = ledger[0]
    if g.height != 0 or g.prev_hash != ZERO_HASH or g.initial_model is None:
        raise LedgerError(0, "genesis", "malformed genesis block")
    w = np.array(g.initial_model, dtype=np.float64)
    if model_digest(w) != g.model_digest:
        raise LedgerError(0, "model_digest", "initial model digest mismatch")
    prev = g
    for block in ledger[1:]:
        if hashlib.sha256(block.header_bytes()).digest() != block.block_hash:
            raise LedgerError(block.height, "block_hash", "contents do not match block hash")
        if block.prev_hash != prev.block_hash:
            raise LedgerError(block.height, "prev_hash", "broken link")
        if block.d != g.d or block.s != g.s:
            raise LedgerError(block.height, "header", "dimension or value width changed")
        ids = [u.client_id for u in block.updates]
        if ids != sorted(set(ids)) or any(i >= block.n_clients for i in ids):
            raise LedgerError(block.height, "updates", "client ids not sorted, unique and < N")
        if any(u.round != block.round or u.d != block.d for u in block.updates):
            raise LedgerError(block.height, "updates", "update round or dimension mismatch")
        w = aggregate(block.updates, w, block.n_clients)
        if model_digest(w) != block.model_digest:
            raise LedgerError(block.height, "model_digest", "replayed model differs")
        prev = block
    return w
