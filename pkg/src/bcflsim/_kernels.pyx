# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
# distutils: language = c++
"""Compiled twins of the kernels in ``_kernels_py``; outputs are bit-identical."""
import numpy as np
cimport numpy as cnp

cnp.import_array()


def topk_indices(const double[::1] absval, Py_ssize_t k):
    cdef Py_ssize_t d = absval.shape[0]
    cdef Py_ssize_t i, pos = 0, n_above = 0, need
    cdef double phi
    if k >= d:
        return np.arange(d, dtype=np.int64)
    # numpy's introselect beats std::nth_element here; the gather is the compiled part
    phi = np.partition(np.asarray(absval), d - k)[d - k]
    for i in range(d):
        if absval[i] > phi:
            n_above += 1
    need = k - n_above
    out = np.empty(k, dtype=np.int64)
    cdef long long[::1] o = out
    for i in range(d):
        if absval[i] > phi:
            o[pos] = i
            pos += 1
        elif absval[i] == phi and need > 0:
            o[pos] = i
            pos += 1
            need -= 1
    return out


def race_scan(const double[:, ::1] draws, const double[:, ::1] delays):
    cdef Py_ssize_t n = draws.shape[0], m = draws.shape[1]
    cdef Py_ssize_t r, j, w
    cdef double xw, prop
    cdef bint fk
    winner = np.empty(n, dtype=np.int64)
    forked = np.empty(n, dtype=bool)
    elapsed = np.empty(n, dtype=np.float64)
    cdef long long[::1] wv = winner
    cdef cnp.npy_bool[::1] fv = forked
    cdef double[::1] ev = elapsed
    for r in range(n):
        w = 0
        for j in range(1, m):
            if draws[r, j] < draws[r, w]:
                w = j
        xw = draws[r, w]
        fk = False
        prop = 0.0 if m == 1 else -np.inf
        for j in range(m):
            if j == w:
                continue
            if draws[r, j] - xw <= delays[r, j]:
                fk = True
            if delays[r, j] > prop:
                prop = delays[r, j]
        wv[r] = w
        fv[r] = fk
        ev[r] = xw + prop
    return winner, forked, elapsed


def scatter_accumulate(double[::1] acc, const long long[::1] indices,
                       const double[::1] values):
    cdef Py_ssize_t i
    for i in range(indices.shape[0]):
        acc[indices[i]] += values[i]
