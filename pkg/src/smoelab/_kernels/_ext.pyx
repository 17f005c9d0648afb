# cython: boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled versions of the hot numeric kernels. Semantics match `_py`."""

import numpy as np

cimport numpy as cnp
from libc.math cimport exp, log, sqrt

cnp.import_array()


def softmax(double[:, ::1] x):
    cdef Py_ssize_t n_rows = x.shape[0], n_cols = x.shape[1], i, j
    out_arr = np.empty((n_rows, n_cols), dtype=np.float64)
    cdef double[:, ::1] out = out_arr
    cdef double m, s, v
    for i in range(n_rows):
        m = x[i, 0]
        for j in range(1, n_cols):
            if x[i, j] > m:
                m = x[i, j]
        s = 0.0
        for j in range(n_cols):
            v = exp(x[i, j] - m)
            out[i, j] = v
            s += v
        for j in range(n_cols):
            out[i, j] /= s
    return out_arr


def softmax_grad(double[:, ::1] out, double[:, ::1] gout):
    cdef Py_ssize_t n_rows = out.shape[0], n_cols = out.shape[1], i, j
    gin_arr = np.empty((n_rows, n_cols), dtype=np.float64)
    cdef double[:, ::1] gin = gin_arr
    cdef double dot
    for i in range(n_rows):
        dot = 0.0
        for j in range(n_cols):
            dot += gout[i, j] * out[i, j]
        for j in range(n_cols):
            gin[i, j] = out[i, j] * (gout[i, j] - dot)
    return gin_arr


def causal_softmax(double[:, :, ::1] scores):
    cdef Py_ssize_t n_blocks = scores.shape[0], t = scores.shape[1], r, i, j, limit
    out_arr = np.zeros((n_blocks, t, t), dtype=np.float64)
    cdef double[:, :, ::1] out = out_arr
    cdef double m, s, v
    for r in range(n_blocks):
        for i in range(t):
            limit = i + 1
            m = scores[r, i, 0]
            for j in range(1, limit):
                if scores[r, i, j] > m:
                    m = scores[r, i, j]
            s = 0.0
            for j in range(limit):
                v = exp(scores[r, i, j] - m)
                out[r, i, j] = v
                s += v
            for j in range(limit):
                out[r, i, j] /= s
    return out_arr


def layernorm(double[:, ::1] x, double[::1] gain, double[::1] offset, double eps):
    cdef Py_ssize_t n_rows = x.shape[0], d = x.shape[1], i, j
    out_arr = np.empty((n_rows, d), dtype=np.float64)
    xhat_arr = np.empty((n_rows, d), dtype=np.float64)
    inv_arr = np.empty(n_rows, dtype=np.float64)
    cdef double[:, ::1] out = out_arr
    cdef double[:, ::1] xhat = xhat_arr
    cdef double[::1] inv = inv_arr
    cdef double mean, var, diff, istd
    for i in range(n_rows):
        mean = 0.0
        for j in range(d):
            mean += x[i, j]
        mean /= d
        var = 0.0
        for j in range(d):
            diff = x[i, j] - mean
            var += diff * diff
        var /= d
        istd = 1.0 / sqrt(var + eps)
        inv[i] = istd
        for j in range(d):
            diff = (x[i, j] - mean) * istd
            xhat[i, j] = diff
            out[i, j] = diff * gain[j] + offset[j]
    return out_arr, xhat_arr, inv_arr


def layernorm_grad(double[:, ::1] xhat, double[::1] inv_std, double[::1] gain,
                   double[:, ::1] gout):
    cdef Py_ssize_t n_rows = xhat.shape[0], d = xhat.shape[1], i, j
    gx_arr = np.empty((n_rows, d), dtype=np.float64)
    ggain_arr = np.zeros(d, dtype=np.float64)
    goffset_arr = np.zeros(d, dtype=np.float64)
    cdef double[:, ::1] gx = gx_arr
    cdef double[::1] ggain = ggain_arr
    cdef double[::1] goffset = goffset_arr
    cdef double s1, s2, gg, istd
    for i in range(n_rows):
        s1 = 0.0
        s2 = 0.0
        for j in range(d):
            gg = gout[i, j] * gain[j]
            s1 += gg
            s2 += gg * xhat[i, j]
        s1 /= d
        s2 /= d
        istd = inv_std[i]
        for j in range(d):
            gg = gout[i, j] * gain[j]
            gx[i, j] = (gg - s1 - xhat[i, j] * s2) * istd
            ggain[j] += gout[i, j] * xhat[i, j]
            goffset[j] += gout[i, j]
    return gx_arr, ggain_arr, goffset_arr


def cross_entropy(double[:, ::1] logits, long long[::1] targets):
    cdef Py_ssize_t n_rows = logits.shape[0], v = logits.shape[1], i, j
    probs_arr = np.empty((n_rows, v), dtype=np.float64)
    cdef double[:, ::1] probs = probs_arr
    cdef double m, s, e, loss = 0.0
    for i in range(n_rows):
        m = logits[i, 0]
        for j in range(1, v):
            if logits[i, j] > m:
                m = logits[i, j]
        s = 0.0
        for j in range(v):
            e = exp(logits[i, j] - m)
            probs[i, j] = e
            s += e
        for j in range(v):
            probs[i, j] /= s
        loss += m + log(s) - logits[i, targets[i]]
    return loss / n_rows, probs_arr


def cross_entropy_grad(double[:, ::1] probs, long long[::1] targets, double gscale):
    cdef Py_ssize_t n_rows = probs.shape[0], v = probs.shape[1], i, j
    g_arr = np.empty((n_rows, v), dtype=np.float64)
    cdef double[:, ::1] g = g_arr
    cdef double scale = gscale / n_rows
    for i in range(n_rows):
        for j in range(v):
            g[i, j] = probs[i, j] * scale
        g[i, targets[i]] -= scale
    return g_arr


def topk_mask(double[:, ::1] dense, Py_ssize_t k):
    cdef Py_ssize_t n_rows = dense.shape[0], n = dense.shape[1], i, j, t, best, key, pos
    mask_arr = np.zeros((n_rows, n), dtype=np.float64)
    sel_arr = np.empty((n_rows, k), dtype=np.int64)
    taken_arr = np.zeros(n, dtype=np.uint8)
    cdef double[:, ::1] mask = mask_arr
    cdef long long[:, ::1] sel = sel_arr
    cdef unsigned char[::1] taken = taken_arr
    cdef double bestv
    for i in range(n_rows):
        for j in range(n):
            taken[j] = 0
        for t in range(k):
            best = -1
            bestv = 0.0
            for j in range(n):
                # strict > keeps the lowest index among equal values
                if not taken[j] and (best < 0 or dense[i, j] > bestv):
                    bestv = dense[i, j]
                    best = j
            taken[best] = 1
            sel[i, t] = best
            mask[i, best] = 1.0
        # insertion sort the k selected indices ascending
        for t in range(1, k):
            key = sel[i, t]
            pos = t - 1
            while pos >= 0 and sel[i, pos] > key:
                sel[i, pos + 1] = sel[i, pos]
                pos -= 1
            sel[i, pos + 1] = key
    return mask_arr, sel_arr


def adam_update(double[::1] p, double[::1] g, double[::1] m, double[::1] v,
                double lr, double beta1, double beta2, double eps,
                double c1, double c2):
    cdef Py_ssize_t n = p.shape[0], i
    cdef double mi, vi
    for i in range(n):
        mi = beta1 * m[i] + (1.0 - beta1) * g[i]
        vi = beta2 * v[i] + (1.0 - beta2) * (g[i] * g[i])
        m[i] = mi
        v[i] = vi
        p[i] -= lr * (mi / c1) / (sqrt(vi / c2) + eps)
