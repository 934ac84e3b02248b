# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled per-token routing kernel. Same contract as ``_routing_py``."""

import numpy as np
cimport numpy as cnp
from libc.math cimport fabs, isfinite

cnp.import_array()

DEF FIRST_TASK = 0
DEF NEW = 1
DEF OLD = 2
DEF AMBIGUOUS = 3
DEF BOTH = 0
DEF OLD_ONLY = 1
DEF NEW_ONLY = 2


cdef inline void _select(const double[:] row, Py_ssize_t lo, Py_ssize_t hi,
                         Py_ssize_t k, cnp.uint8_t[:] out) noexcept nogil:
    # k passes of "pick the largest unpicked"; strict > keeps the lowest index on ties
    cdef Py_ssize_t j, best, it
    cdef double bv
    for it in range(k):
        best = -1
        bv = 0.0
        for j in range(lo, hi):
            if out[j]:
                continue
            if best < 0 or row[j] > bv:
                best = j
                bv = row[j]
        if best < 0:
            break
        out[best] = 1


def route_kernel(logits, Py_ssize_t n_old, Py_ssize_t k, double tau, double eps, policy):
    cdef double[:, ::1] s = np.ascontiguousarray(logits, dtype=np.float64)
    cdef Py_ssize_t n = s.shape[0], e = s.shape[1]
    cdef Py_ssize_t i, j, kk, n_allowed, lo, hi
    cdef cnp.int8_t[::1] pol = np.ascontiguousarray(policy, dtype=np.int8)

    c_old_a = np.zeros(n)
    c_new_a = np.zeros(n)
    d_rel_a = np.zeros(n)
    types_a = np.zeros(n, dtype=np.int8)
    sel_a = np.zeros((n, e), dtype=np.uint8)
    raw_a = np.zeros((n, e), dtype=np.uint8)
    cdef double[::1] c_old = c_old_a, c_new = c_new_a, d_rel = d_rel_a
    cdef cnp.int8_t[::1] types = types_a
    cdef cnp.uint8_t[:, ::1] sel = sel_a, raw = raw_a
    cdef double co, cn, den, v
    cdef int t, p
    cdef bint two_groups = 0 < n_old < e
    cdef bint bad = False

    with nogil:
        for i in range(n):
            for j in range(e):
                if not isfinite(s[i, j]):
                    bad = True
            if bad:
                break
            _select(s[i], 0, e, k, raw[i])
            if not two_groups:
                for j in range(e):
                    sel[i, j] = raw[i, j]
                continue
            co = s[i, 0]
            for j in range(1, n_old):
                if s[i, j] > co:
                    co = s[i, j]
            cn = s[i, n_old]
            for j in range(n_old + 1, e):
                if s[i, j] > cn:
                    cn = s[i, j]
            den = fabs(cn) if fabs(cn) > fabs(co) else fabs(co)
            v = fabs(cn - co) / (den + eps)
            c_old[i] = co
            c_new[i] = cn
            d_rel[i] = v
            if v <= tau:
                t = AMBIGUOUS
            elif cn > co:
                t = NEW
            else:
                t = OLD
            types[i] = t
            p = pol[t]
            if p == BOTH:
                lo = 0
                hi = e
            elif p == OLD_ONLY:
                lo = 0
                hi = n_old
            else:
                lo = n_old
                hi = e
            kk = k if k < hi - lo else hi - lo
            _select(s[i], lo, hi, kk, sel[i])
    if bad:
        raise FloatingPointError("non-finite router logits")
    return c_old_a, c_new_a, d_rel_a, types_a, sel_a.view(bool), raw_a.view(bool)
