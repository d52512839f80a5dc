# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled kernels: im2col/col2im, max pooling and peak prominence.

Each function mirrors the one of the same name in ``_pykernels``.
"""
import numpy as np
cimport numpy as cnp

cnp.import_array()

ctypedef cnp.float64_t f64
ctypedef cnp.intp_t idx_t


def conv_out_size(Py_ssize_t n, Py_ssize_t k, Py_ssize_t stride, Py_ssize_t pad):
    return (n + 2 * pad - k) // stride + 1


def im2col(x, Py_ssize_t k, Py_ssize_t stride, Py_ssize_t pad):
    cdef const f64[:, :, :, ::1] xv = np.ascontiguousarray(x, dtype=np.float64)
    cdef Py_ssize_t b = xv.shape[0], c = xv.shape[1], h = xv.shape[2], w = xv.shape[3]
    cdef Py_ssize_t ho = (h + 2 * pad - k) // stride + 1
    cdef Py_ssize_t wo = (w + 2 * pad - k) // stride + 1
    out = np.zeros((b, c * k * k, ho * wo), dtype=np.float64)
    cdef f64[:, :, ::1] ov = out
    cdef Py_ssize_t n, ch, ki, kj, oi, oj, ii, jj, row
    with nogil:
        for n in range(b):
            for ch in range(c):
                for ki in range(k):
                    for kj in range(k):
                        row = (ch * k + ki) * k + kj
                        for oi in range(ho):
                            ii = oi * stride + ki - pad
                            if ii < 0 or ii >= h:
                                continue
                            for oj in range(wo):
                                jj = oj * stride + kj - pad
                                if jj < 0 or jj >= w:
                                    continue
                                ov[n, row, oi * wo + oj] = xv[n, ch, ii, jj]
    return out


def col2im(cols, x_shape, Py_ssize_t k, Py_ssize_t stride, Py_ssize_t pad):
    cdef Py_ssize_t b = x_shape[0], c = x_shape[1], h = x_shape[2], w = x_shape[3]
    cdef Py_ssize_t ho = (h + 2 * pad - k) // stride + 1
    cdef Py_ssize_t wo = (w + 2 * pad - k) // stride + 1
    cdef const f64[:, :, ::1] cv = np.ascontiguousarray(cols, dtype=np.float64).reshape(b, c * k * k, ho * wo)
    out = np.zeros((b, c, h, w), dtype=np.float64)
    cdef f64[:, :, :, ::1] dv = out
    cdef Py_ssize_t n, ch, ki, kj, oi, oj, ii, jj, row
    with nogil:
        for n in range(b):
            for ch in range(c):
                for ki in range(k):
                    for kj in range(k):
                        row = (ch * k + ki) * k + kj
                        for oi in range(ho):
                            ii = oi * stride + ki - pad
                            if ii < 0 or ii >= h:
                                continue
                            for oj in range(wo):
                                jj = oj * stride + kj - pad
                                if jj < 0 or jj >= w:
                                    continue
                                dv[n, ch, ii, jj] += cv[n, row, oi * wo + oj]
    return out


def maxpool_forward(x, Py_ssize_t k, Py_ssize_t stride):
    cdef const f64[:, :, :, ::1] xv = np.ascontiguousarray(x, dtype=np.float64)
    cdef Py_ssize_t b = xv.shape[0], c = xv.shape[1], h = xv.shape[2], w = xv.shape[3]
    cdef Py_ssize_t ho = (h - k) // stride + 1, wo = (w - k) // stride + 1
    out = np.empty((b, c, ho, wo), dtype=np.float64)
    arg = np.empty((b, c, ho, wo), dtype=np.intp)
    cdef f64[:, :, :, ::1] ov = out
    cdef idx_t[:, :, :, ::1] av = arg
    cdef Py_ssize_t n, ch, oi, oj, ki, kj, ii, jj, best
    cdef f64 v, m
    with nogil:
        for n in range(b):
            for ch in range(c):
                for oi in range(ho):
                    for oj in range(wo):
                        ii = oi * stride
                        jj = oj * stride
                        m = xv[n, ch, ii, jj]
                        best = ii * w + jj
                        for ki in range(k):
                            for kj in range(k):
                                v = xv[n, ch, ii + ki, jj + kj]
                                if v > m:
                                    m = v
                                    best = (ii + ki) * w + jj + kj
                        ov[n, ch, oi, oj] = m
                        av[n, ch, oi, oj] = best
    return out, arg


def maxpool_backward(dout, argmax, x_shape):
    cdef Py_ssize_t b = x_shape[0], c = x_shape[1], h = x_shape[2], w = x_shape[3]
    cdef const f64[:, :, :, ::1] gv = np.ascontiguousarray(dout, dtype=np.float64)
    cdef const idx_t[:, :, :, ::1] av = np.ascontiguousarray(argmax, dtype=np.intp)
    out = np.zeros((b, c, h * w), dtype=np.float64)
    cdef f64[:, :, ::1] dv = out
    cdef Py_ssize_t n, ch, oi, oj
    with nogil:
        for n in range(b):
            for ch in range(c):
                for oi in range(gv.shape[2]):
                    for oj in range(gv.shape[3]):
                        dv[n, ch, av[n, ch, oi, oj]] += gv[n, ch, oi, oj]
    return out.reshape(b, c, h, w)


cdef inline Py_ssize_t _find(idx_t[::1] parent, Py_ssize_t a) noexcept nogil:
    cdef Py_ssize_t root = a, nxt
    while parent[root] != root:
        root = parent[root]
    while parent[a] != root:
        nxt = parent[a]
        parent[a] = root
        a = nxt
    return root


def peak_prominences(x):
    cdef const f64[:, ::1] xv = np.ascontiguousarray(x, dtype=np.float64)
    cdef Py_ssize_t h = xv.shape[0], w = xv.shape[1], n = h * w
    cdef const f64[::1] flat = np.ascontiguousarray(x, dtype=np.float64).ravel()
    cdef idx_t[::1] order = np.argsort(-np.asarray(flat), kind="stable").astype(np.intp)
    cdef idx_t[::1] rank = np.empty(n, dtype=np.intp)
    cdef idx_t[::1] parent = np.full(n, -1, dtype=np.intp)
    cdef idx_t[::1] peak = np.zeros(n, dtype=np.intp)
    prom = np.empty(n + 1, dtype=np.float64)
    cdef f64[::1] pv = prom
    cdef Py_ssize_t roots[8]
    cdef Py_ssize_t nroots, r, s, t, idx, i, j, ii, jj, di, dj, nb, best, count = 0
    cdef f64 level
    if n == 0:
        return prom[:0]
    with nogil:
        for r in range(n):
            rank[order[r]] = r
        for t in range(n):
            idx = order[t]
            level = flat[idx]
            i = idx // w
            j = idx - i * w
            nroots = 0
            for di in range(-1, 2):
                ii = i + di
                if ii < 0 or ii >= h:
                    continue
                for dj in range(-1, 2):
                    jj = j + dj
                    if (di == 0 and dj == 0) or jj < 0 or jj >= w:
                        continue
                    nb = ii * w + jj
                    if parent[nb] == -1:
                        continue
                    r = _find(parent, nb)
                    for s in range(nroots):
                        if roots[s] == r:
                            break
                    else:
                        roots[nroots] = r
                        nroots += 1
            if nroots == 0:
                parent[idx] = idx
                peak[idx] = idx
                continue
            best = roots[0]
            for s in range(1, nroots):
                if rank[peak[roots[s]]] < rank[peak[best]]:
                    best = roots[s]
            for s in range(nroots):
                if roots[s] != best:
                    pv[count] = flat[peak[roots[s]]] - level
                    count += 1
                    parent[roots[s]] = best
            parent[idx] = best
        pv[count] = flat[peak[_find(parent, order[0])]] - flat[order[n - 1]]
        count += 1
    return prom[:count].copy()


def count_peaks(x, double prominence_min):
    return int((peak_prominences(x) > prominence_min).sum())
