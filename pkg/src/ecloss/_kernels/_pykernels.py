"""Pure numpy/Python versions of the compiled kernels.

Semantics, including summation order in ``col2im`` and tie-breaking in the
pooling and peak kernels, follow ``_ckernels.pyx`` exactly.
"""
import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


def conv_out_size(n, k, stride, pad):
    return (n + 2 * pad - k) // stride + 1


def im2col(x, k, stride, pad):
    """``(b, c, H, W)`` -> ``(b, c*k*k, Ho*Wo)``."""
    b, c, h, w = x.shape
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else x
    ho, wo = conv_out_size(h, k, stride, pad), conv_out_size(w, k, stride, pad)
    win = sliding_window_view(xp, (k, k), axis=(2, 3))[:, :, ::stride, ::stride][:, :, :ho, :wo]
    return np.ascontiguousarray(win.transpose(0, 1, 4, 5, 2, 3)).reshape(b, c * k * k, ho * wo)


def col2im(cols, x_shape, k, stride, pad):
    b, c, h, w = x_shape
    ho, wo = conv_out_size(h, k, stride, pad), conv_out_size(w, k, stride, pad)
    cols = cols.reshape(b, c, k, k, ho, wo)
    dxp = np.zeros((b, c, h + 2 * pad, w + 2 * pad))
    for ki in range(k):
        for kj in range(k):
            dxp[:, :, ki:ki + stride * ho:stride, kj:kj + stride * wo:stride] += cols[:, :, ki, kj]
    return dxp[:, :, pad:pad + h, pad:pad + w].copy()


def maxpool_forward(x, k, stride):
    """Returns pooled values and the flat ``H*W`` index of each window's first maximum."""
    b, c, h, w = x.shape
    ho, wo = (h - k) // stride + 1, (w - k) // stride + 1
    win = sliding_window_view(x, (k, k), axis=(2, 3))[:, :, ::stride, ::stride][:, :, :ho, :wo]
    win = win.reshape(b, c, ho, wo, k * k)
    local = win.argmax(axis=-1)
    out = np.take_along_axis(win, local[..., None], axis=-1)[..., 0]
    ki, kj = np.divmod(local, k)
    rows = np.arange(ho)[:, None] * stride + ki
    cols = np.arange(wo)[None, :] * stride + kj
    return np.ascontiguousarray(out), (rows * w + cols).astype(np.intp)


def maxpool_backward(dout, argmax, x_shape):
    b, c, h, w = x_shape
    plane = h * w
    idx = argmax.reshape(b * c, -1) + (np.arange(b * c) * plane)[:, None]
    dx = np.bincount(idx.ravel(), weights=dout.ravel(), minlength=b * c * plane)
    return dx.reshape(x_shape)


def peak_prominences(x):
    """Prominence of every local maximum of a 2-D map, 8-connected.

    Pixels are visited from highest to lowest (ties by flat index).  A pixel
    with no visited neighbour starts a new component whose peak is that
    pixel.  When a pixel joins several components, every component except the
    one with the highest peak ends there and its prominence is its peak height
    minus the current level.  The surviving global maximum gets its height
    above the map minimum.  Output order is the order components end.
    """
    x = np.asarray(x, dtype=np.float64)
    h, w = x.shape
    flat = x.ravel().tolist()
    n = len(flat)
    order = np.argsort(-x.ravel(), kind="stable").tolist()
    rank = [0] * n
    for r, idx in enumerate(order):
        rank[idx] = r
    parent = [-1] * n
    peak = [0] * n

    def find(a):
        root = a
        while parent[root] != root:
            root = parent[root]
        while parent[a] != root:
            parent[a], a = root, parent[a]
        return root

    out = []
    for idx in order:
        level = flat[idx]
        i, j = divmod(idx, w)
        roots = []
        for di in (-1, 0, 1):
            ii = i + di
            if ii < 0 or ii >= h:
                continue
            for dj in (-1, 0, 1):
                jj = j + dj
                if (di == 0 and dj == 0) or jj < 0 or jj >= w:
                    continue
                nb = ii * w + jj
                if parent[nb] == -1:
                    continue
                r = find(nb)
                if r not in roots:
                    roots.append(r)
        if not roots:
            parent[idx] = idx
            peak[idx] = idx
            continue
        best = min(roots, key=lambda r: rank[peak[r]])
        for r in roots:
            if r != best:
                out.append(flat[peak[r]] - level)
                parent[r] = best
        parent[idx] = best
    if n:
        out.append(flat[peak[find(order[0])]] - flat[order[-1]])
    return np.asarray(out, dtype=np.float64)


def count_peaks(x, prominence_min):
    return int((peak_prominences(x) > prominence_min).sum())
