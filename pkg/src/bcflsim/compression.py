"""Top-k sparsification of model updates and their wire encoding.

Two byte counts coexist on purpose: the analytic payload keeps the index
cost fractional, ``k * (s + ceil(log2 d) / 8)``, while the wire encoder rounds
each index up to whole bytes so the ledger has a concrete format.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from . import kernels

_HEADER = struct.Struct("<IIII")
VALUE_DTYPES = {2: np.dtype("<f2"), 4: np.dtype("<f4"), 8: np.dtype("<f8")}


class CompressionError(ValueError):
    pass


def index_bits(d):
    """ceil(log2 d), computed exactly."""
    if d < 1:
        raise CompressionError("dimension must be positive")
    return (d - 1).bit_length()


def index_width(d):
    """Whole bytes used per index on the wire."""
    return (index_bits(d) + 7) // 8


def bytes_per_update(d, s):
    """omega = s + ceil(log2 d) / 8, bytes for one (index, value) pair."""
    return s + index_bits(d) / 8.0


@dataclass
class SparseUpdate:
    indices: np.ndarray
    values: np.ndarray
    d: int
    round: int = 0
    client_id: int = 0

    def __post_init__(self):
        self.indices = np.asarray(self.indices, dtype=np.int64)
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.indices.shape != self.values.shape or self.indices.ndim != 1:
            raise CompressionError("indices and values must be 1-D and the same length")

    @property
    def k(self):
        return self.indices.shape[0]

    def densify(self):
        out = np.zeros(self.d)
        out[self.indices] = self.values
        return out

    def to_dict(self):
        return {int(i): float(v) for i, v in zip(self.indices, self.values)}

    def validate(self):
        idx = self.indices
        if idx.size and (idx[0] < 0 or idx[-1] >= self.d or np.any(np.diff(idx) <= 0)):
            raise CompressionError("indices must be strictly increasing and within [0, d)")


@dataclass(frozen=True)
class CompressionSpec:
    """A compression operator with its declared energy constant gamma.

    Only ``top_k`` is implemented; other operators would register their own
    ``gamma`` here without touching the protocol.
    """

    kind: str
    k: int
    d: int

    def __post_init__(self):
        if self.kind != "top_k":
            raise CompressionError(f"unsupported operator {self.kind!r}")
        if not 1 <= self.k <= self.d:
            raise CompressionError(f"k={self.k} outside [1, {self.d}]")

    @property
    def gamma(self):
        return self.k / self.d

    def __call__(self, g, round=0, client_id=0):
        return top_k(g, self.k, round=round, client_id=client_id)


def top_k(g, k, round=0, client_id=0):
    """Keep the ``k`` largest-magnitude entries of ``g``.

    Exactly ``k`` entries survive; on ties at the threshold lower indices win.
    """
    g = np.asarray(g, dtype=np.float64)
    d = g.shape[0]
    if not 1 <= k <= d:
        raise CompressionError(f"k={k} outside [1, {d}]")
    if not np.all(np.isfinite(g)):
        raise CompressionError("update contains non-finite values")
    idx = kernels.topk_indices(np.abs(g), k)
    return SparseUpdate(idx, g[idx], d, round=round, client_id=client_id)


def compression_energy_check(g, u):
    """Return ``(||g - u||^2, (1 - k/d) ||g||^2)``; the first never exceeds the second."""
    g = np.asarray(g, dtype=np.float64)
    if g.shape[0] != u.d:
        raise CompressionError(f"dimension mismatch: {g.shape[0]} vs {u.d}")
    resid = g - u.densify()
    return float(resid @ resid), (1.0 - u.k / u.d) * float(g @ g)


def payload_bytes(k, d, s, n_clients=1):
    """Analytic sizes ``(per_client, per_block)`` in (fractional) bytes."""
    if not 0 < k <= d or s <= 0:
        raise CompressionError("need 0 < k <= d and s > 0")
    per_client = k * bytes_per_update(d, s)
    return per_client, n_clients * per_client


def dense_bytes(d, s):
    """Size of an uncompressed update sent without indices."""
    return d * s


def traffic_bytes(k, d, s):
    """Bytes actually moved for one client's update: dense when nothing is dropped."""
    if k >= d:
        return float(dense_bytes(d, s))
    return payload_bytes(k, d, s)[0]


def quantize(values, s):
    """Round values to the IEEE format used on the wire for ``s`` bytes."""
    try:
        dt = VALUE_DTYPES[s]
    except KeyError:
        raise CompressionError(f"no wire format for s={s} bytes") from None
    with np.errstate(over="ignore"):
        out = np.asarray(values, dtype=np.float64).astype(dt).astype(np.float64)
    if not np.all(np.isfinite(out)):
        raise CompressionError(f"value out of range for the {s}-byte wire format")
    return out


def encode(u, s=8):
    """Little-endian: round, client_id, d, k as u32; then k indices; then k values."""
    u.validate()
    try:
        dt = VALUE_DTYPES[s]
    except KeyError:
        raise CompressionError(f"no wire format for s={s} bytes") from None
    w = index_width(u.d)
    idx_bytes = u.indices.astype("<u8").view(np.uint8).reshape(-1, 8)[:, :w].tobytes()
    return _HEADER.pack(u.round, u.client_id, u.d, u.k) + idx_bytes + u.values.astype(dt).tobytes()


def decode(buf, s=8):
    if len(buf) < _HEADER.size:
        raise CompressionError("truncated update header")
    rnd, cid, d, k = _HEADER.unpack_from(buf, 0)
    w = index_width(d)
    dt = VALUE_DTYPES[s]
    expected = _HEADER.size + k * (w + s)
    if len(buf) != expected:
        raise CompressionError(f"update length {len(buf)} != expected {expected}")
    raw = np.frombuffer(buf, dtype=np.uint8, count=k * w, offset=_HEADER.size).reshape(k, w)
    padded = np.zeros((k, 8), dtype=np.uint8)
    padded[:, :w] = raw
    indices = padded.view("<u8").ravel().astype(np.int64)
    values = np.frombuffer(buf, dtype=dt, count=k, offset=_HEADER.size + k * w).astype(np.float64)
    u = SparseUpdate(indices, values, d, round=rnd, client_id=cid)
    u.validate()
    return u


def encoded_size(k, d, s):
    return _HEADER.size + k * (index_width(d) + s)


__all__ = [
    "SparseUpdate", "CompressionSpec", "CompressionError", "top_k",
    "compression_energy_check", "payload_bytes", "dense_bytes", "traffic_bytes",
    "bytes_per_update", "index_bits", "index_width", "encode", "decode",
    "encoded_size", "quantize",
]
