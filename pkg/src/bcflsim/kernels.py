"""Backend selection for the hot kernels.

The compiled extension is used when it imports; otherwise, or when
``BCFLSIM_PURE_PYTHON=1`` is set, the numpy fallback is used. Both produce
identical results, so the choice only affects speed.
"""
import os

import numpy as np

from . import _kernels_py

_compiled = None
if os.environ.get("BCFLSIM_PURE_PYTHON", "") not in ("1", "true", "yes"):
    try:
        from . import _kernels as _compiled
    except ImportError:  # extension not built
        _compiled = None

BACKENDS = {"python": _kernels_py}
if _compiled is not None:
    BACKENDS["compiled"] = _compiled

BACKEND = "compiled" if _compiled is not None else "python"
_impl = BACKENDS[BACKEND]


def get_backend(name):
    """Return the kernel module for ``name`` ("compiled" or "python")."""
    try:
        return BACKENDS[name]
    except KeyError:
        raise ValueError(f"kernel backend {name!r} is not available") from None


def topk_indices(absval, k):
    return _impl.topk_indices(np.ascontiguousarray(absval, dtype=np.float64), int(k))


def race_scan(draws, delays):
    draws = np.ascontiguousarray(draws, dtype=np.float64)
    delays = np.ascontiguousarray(np.broadcast_to(delays, draws.shape), dtype=np.float64)
    return _impl.race_scan(draws, delays)


def scatter_accumulate(acc, indices, values):
    _impl.scatter_accumulate(
        acc,
        np.ascontiguousarray(indices, dtype=np.int64),
        np.ascontiguousarray(values, dtype=np.float64),
    )
