# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled kernels: Levenshtein distance and weighted split counting."""

import numpy as np
cimport numpy as cnp
from libc.stdlib cimport malloc, free

cnp.import_array()


cdef Py_ssize_t _lev(Py_UCS4[:] a, Py_ssize_t n, Py_UCS4[:] b, Py_ssize_t m, Py_ssize_t *row) nogil:
    cdef Py_ssize_t i, j, prev, cur, cost, best
    for j in range(m + 1):
        row[j] = j
    for i in range(1, n + 1):
        prev = row[0]
        row[0] = i
        for j in range(1, m + 1):
            cur = row[j]
            cost = 0 if a[i - 1] == b[j - 1] else 1
            best = prev + cost
            if row[j] + 1 < best:
                best = row[j] + 1
            if row[j - 1] + 1 < best:
                best = row[j - 1] + 1
            row[j] = best
            prev = cur
    return row[m]


cdef Py_UCS4[:] _codepoints(str s):
    cdef Py_ssize_t i, n = len(s)
    arr = np.empty(max(n, 1), dtype=np.uint32)
    cdef Py_UCS4[:] view = arr
    for i in range(n):
        view[i] = s[i]
    return view


def levenshtein(str a, str b):
    """Edit distance with unit insert, delete and substitute costs."""
    cdef Py_ssize_t n = len(a), m = len(b)
    cdef Py_ssize_t *row = <Py_ssize_t *> malloc((m + 1) * sizeof(Py_ssize_t))
    if row == NULL:
        raise MemoryError()
    try:
        return _lev(_codepoints(a), n, _codepoints(b), m, row)
    finally:
        free(row)


def levenshtein_many(str anchor, list candidates):
    """Distances from ``anchor`` to every string in ``candidates`` (int64 array)."""
    cdef Py_ssize_t k, n = len(anchor), m, maxm = 0
    cdef Py_UCS4[:] av = _codepoints(anchor)
    out = np.empty(len(candidates), dtype=np.int64)
    cdef cnp.int64_t[:] ov = out
    for c in candidates:
        if len(c) > maxm:
            maxm = len(c)
    cdef Py_ssize_t *row = <Py_ssize_t *> malloc((maxm + 1) * sizeof(Py_ssize_t))
    if row == NULL:
        raise MemoryError()
    try:
        for k in range(len(candidates)):
            c = candidates[k]
            m = len(c)
            ov[k] = _lev(av, n, _codepoints(c), m, row)
    finally:
        free(row)
    return out


def split_counts(const cnp.uint8_t[:, ::1] X, const double[::1] weights,
                 const cnp.uint8_t[::1] y, const cnp.intp_t[::1] rows):
    """Weighted positive and negative mass with bit 1, per feature, over ``rows``."""
    cdef Py_ssize_t f, r, i, nf = X.shape[1]
    pos = np.zeros(nf, dtype=np.float64)
    neg = np.zeros(nf, dtype=np.float64)
    cdef double[::1] pv = pos
    cdef double[::1] nv = neg
    cdef double w
    with nogil:
        for r in range(rows.shape[0]):
            i = rows[r]
            w = weights[i]
            if y[i]:
                for f in range(nf):
                    pv[f] += w * X[i, f]
            else:
                for f in range(nf):
                    nv[f] += w * X[i, f]
    return pos, neg
