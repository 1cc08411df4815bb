# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled hot kernels: batched integer MLP inference and non-dominated sorting."""

import numpy as np
cimport numpy as cnp
from libc.stdint cimport int64_t, uint8_t

cnp.import_array()


cdef inline int64_t _shift(int64_t v, long s) nogil:
    if s >= 0:
        return v << s
    return v >> (-s)


def forward_batch(const int64_t[:, ::1] x, w0_in, bias0_in, long shift0, widths0_in,
                  long qshift, long rbits, w1_in, bias1_in, long shift1, widths1_in):
    cdef const int64_t[:, ::1] w0 = np.ascontiguousarray(w0_in, dtype=np.int64)
    cdef const int64_t[:, ::1] w1 = np.ascontiguousarray(w1_in, dtype=np.int64)
    cdef const int64_t[::1] b0 = np.ascontiguousarray(bias0_in, dtype=np.int64)
    cdef const int64_t[::1] b1 = np.ascontiguousarray(bias1_in, dtype=np.int64)
    cdef const int64_t[::1] wd0 = np.ascontiguousarray(widths0_in, dtype=np.int64)
    cdef const int64_t[::1] wd1 = np.ascontiguousarray(widths1_in, dtype=np.int64)
    cdef Py_ssize_t n = x.shape[0], d = x.shape[1]
    cdef Py_ssize_t hdim = w0.shape[0], odim = w1.shape[0]
    acc0_a = np.zeros((n, hdim), dtype=np.int64)
    acc1_a = np.zeros((n, odim), dtype=np.int64)
    cls_a = np.zeros(n, dtype=np.int64)
    ovf_a = np.zeros(n, dtype=np.uint8)
    hbuf_a = np.zeros(hdim, dtype=np.int64)
    cdef int64_t[:, ::1] acc0 = acc0_a
    cdef int64_t[:, ::1] acc1 = acc1_a
    cdef int64_t[::1] cls = cls_a
    cdef uint8_t[::1] ovf = ovf_a
    cdef int64_t[::1] hb = hbuf_a
    cdef Py_ssize_t r, k, j, best
    cdef int64_t pos, neg, wc, a, lim, v
    cdef int64_t top = (<int64_t>1 << rbits) - 1
    with nogil:
        for r in range(n):
            for k in range(hdim):
                pos = 0
                neg = 0
                for j in range(d):
                    wc = w0[k, j]
                    if wc > 0:
                        pos += x[r, j] * wc
                    elif wc < 0:
                        neg -= x[r, j] * wc
                a = ((pos - neg) << shift0) + b0[k]
                acc0[r, k] = a
                lim = (<int64_t>1) << (wd0[k] - 1)
                if a < -lim or a >= lim:
                    ovf[r] = 1
                if a <= 0:
                    hb[k] = 0
                else:
                    v = _shift(a, -qshift)
                    hb[k] = top if v > top else v
            best = 0
            for k in range(odim):
                pos = 0
                neg = 0
                for j in range(hdim):
                    wc = w1[k, j]
                    if wc > 0:
                        pos += hb[j] * wc
                    elif wc < 0:
                        neg -= hb[j] * wc
                a = ((pos - neg) << shift1) + b1[k]
                acc1[r, k] = a
                lim = (<int64_t>1) << (wd1[k] - 1)
                if a < -lim or a >= lim:
                    ovf[r] = 1
                if k > 0 and a > acc1[r, best]:
                    best = k
            cls[r] = best
    return cls_a, acc0_a, acc1_a, ovf_a


def nondominated_ranks(f_in):
    cdef const double[:, ::1] f = np.ascontiguousarray(f_in, dtype=np.float64)
    cdef Py_ssize_t n = f.shape[0], m = f.shape[1]
    ranks_a = np.full(n, -1, dtype=np.int64)
    if n == 0:
        return ranks_a
    count_a = np.zeros(n, dtype=np.int64)
    dom_a = np.zeros((n, n), dtype=np.uint8)
    cdef int64_t[::1] ranks = ranks_a
    cdef int64_t[::1] count = count_a
    cdef uint8_t[:, ::1] dom = dom_a
    cdef Py_ssize_t i, j, k, done = 0
    cdef bint le, lt
    cdef int64_t r = 0
    with nogil:
        for i in range(n):
            for j in range(n):
                if i == j:
                    continue
                le = True
                lt = False
                for k in range(m):
                    if f[i, k] > f[j, k]:
                        le = False
                        break
                    if f[i, k] < f[j, k]:
                        lt = True
                if le and lt:
                    dom[i, j] = 1
                    count[j] += 1
        while done < n:
            for i in range(n):
                if ranks[i] < 0 and count[i] == 0:
                    ranks[i] = r
            for i in range(n):
                if ranks[i] == r:
                    done += 1
                    for j in range(n):
                        if dom[i, j]:
                            count[j] -= 1
            r += 1
    return ranks_a
