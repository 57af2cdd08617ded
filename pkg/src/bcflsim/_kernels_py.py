"""Pure numpy implementations of the hot kernels.

Each function here has a compiled twin in ``_kernels.pyx`` with the same
signature and bit-identical output. ``bcflsim.kernels`` picks one at import.
"""
import numpy as np


def topk_indices(absval, k):
    """Indices of the ``k`` largest entries of ``absval``, ascending.

    Ties at the threshold are resolved in favour of lower indices, so the
    result always has exactly ``k`` entries.
    """
    d = absval.shape[0]
    if k >= d:
        return np.arange(d, dtype=np.int64)
    phi = np.partition(absval, d - k)[d - k]
    above = np.flatnonzero(absval > phi)
    ties = np.flatnonzero(absval == phi)[: k - above.shape[0]]
    idx = np.concatenate([above, ties])
    idx.sort()
    return idx.astype(np.int64, copy=False)


def race_scan(draws, delays):
    """Evaluate independent mining attempts row by row.

    ``draws[r, j]`` is miner ``j``'s block time in attempt ``r`` and
    ``delays[r, j]`` the propagation delay from the winner to miner ``j``.
    Returns ``(winner, forked, elapsed)`` per row, where ``elapsed`` is the
    winner's mining time plus the slowest propagation to the other miners.
    """
    n, m = draws.shape
    rows = np.arange(n)
    winner = np.argmin(draws, axis=1).astype(np.int64)
    xw = draws[rows, winner]
    others = np.ones((n, m), dtype=bool)
    others[rows, winner] = False
    forked = np.any(((draws - xw[:, None]) <= delays) & others, axis=1)
    if m > 1:
        prop = np.max(np.where(others, delays, -np.inf), axis=1)
    else:
        prop = np.zeros(n)
    return winner, forked, xw + prop


def scatter_accumulate(acc, indices, values):
    """``acc[indices] += values`` in place; ``indices`` must be unique."""
    acc[indices] += values
