# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled sampled-attention kernels.

Each query row attends, in ``G`` independent groups, to ``S`` key rows given
by ``idx``; softmax is taken per group over its slots and the group outputs
are averaged. Slots with ``valid == 0`` receive zero weight.
"""

import numpy as np
from libc.math cimport exp
from libc.stdint cimport int64_t


def sampled_attention_forward(const double[:, ::1] q, const double[:, ::1] k,
                              const double[:, ::1] v, const int64_t[:, :, ::1] idx,
                              const unsigned char[:, :, ::1] valid, double scale):
    cdef Py_ssize_t nq = idx.shape[0], G = idx.shape[1], S = idx.shape[2]
    cdef Py_ssize_t d = q.shape[1], dv = v.shape[1]
    cdef Py_ssize_t i, g, s, c
    cdef int64_t j
    cdef double acc, mx, tot, wgt, inv_g = 1.0 / G
    cdef bint masked = valid is not None
    out_arr = np.zeros((nq, dv), dtype=np.float64)
    w_arr = np.zeros((nq, G, S), dtype=np.float64)
    cdef double[:, ::1] out = out_arr
    cdef double[:, :, ::1] w = w_arr
    with nogil:
        for i in range(nq):
            for g in range(G):
                mx = -1e308
                for s in range(S):
                    if masked and valid[i, g, s] == 0:
                        continue
                    j = idx[i, g, s]
                    acc = 0.0
                    for c in range(d):
                        acc = acc + q[i, c] * k[j, c]
                    acc = acc * scale
                    w[i, g, s] = acc
                    if acc > mx:
                        mx = acc
                tot = 0.0
                for s in range(S):
                    if masked and valid[i, g, s] == 0:
                        w[i, g, s] = 0.0
                        continue
                    w[i, g, s] = exp(w[i, g, s] - mx)
                    tot = tot + w[i, g, s]
                for s in range(S):
                    w[i, g, s] = w[i, g, s] / tot
                    wgt = w[i, g, s] * inv_g
                    if wgt == 0.0:
                        continue
                    j = idx[i, g, s]
                    for c in range(dv):
                        out[i, c] = out[i, c] + wgt * v[j, c]
    return out_arr, w_arr


def sampled_attention_backward(const double[:, ::1] gout, const double[:, ::1] q,
                               const double[:, ::1] k, const double[:, ::1] v,
                               const int64_t[:, :, ::1] idx, const double[:, :, ::1] w,
                               double scale):
    cdef Py_ssize_t nq = idx.shape[0], G = idx.shape[1], S = idx.shape[2]
    cdef Py_ssize_t d = q.shape[1], dv = v.shape[1]
    cdef Py_ssize_t i, g, s, c
    cdef int64_t j
    cdef double acc, tot, dl, inv_g = 1.0 / G
    gq_arr = np.zeros((nq, d), dtype=np.float64)
    gk_arr = np.zeros((k.shape[0], d), dtype=np.float64)
    gv_arr = np.zeros((v.shape[0], dv), dtype=np.float64)
    dw_arr = np.zeros(S, dtype=np.float64)
    cdef double[:, ::1] gq = gq_arr
    cdef double[:, ::1] gk = gk_arr
    cdef double[:, ::1] gv = gv_arr
    cdef double[::1] dw = dw_arr
    with nogil:
        for i in range(nq):
            for g in range(G):
                tot = 0.0
                for s in range(S):
                    j = idx[i, g, s]
                    acc = 0.0
                    for c in range(dv):
                        acc = acc + gout[i, c] * v[j, c]
                    dw[s] = acc * inv_g
                    tot = tot + w[i, g, s] * dw[s]
                for s in range(S):
                    if w[i, g, s] == 0.0:
                        continue
                    j = idx[i, g, s]
                    dl = w[i, g, s] * (dw[s] - tot) * scale
                    for c in range(d):
                        gq[i, c] = gq[i, c] + dl * k[j, c]
                        gk[j, c] = gk[j, c] + dl * q[i, c]
                    acc = w[i, g, s] * inv_g
                    for c in range(dv):
                        gv[j, c] = gv[j, c] + acc * gout[i, c]
    return gq_arr, gk_arr, gv_arr
