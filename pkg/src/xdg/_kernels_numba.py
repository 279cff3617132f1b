"""Numba-compiled twins of the kernels in ``_kernels_numpy``.

Row-wise inner loops with independent accumulators so LLVM vectorizes them;
the 3-tap and 1-tap kernel widths (the only ones the package builds) get
unrolled fast paths, everything else takes a generic loop. fastmath allows
reassociation and FMA: results are deterministic run to run but can differ
from the numpy backend in the last bits. Compiled lazily, cached on disk.
"""

import numpy as np
from numba import njit


@njit(cache=True, fastmath=True)
def conv2d_forward(x, w, b, stride):
    B, C, H, W = x.shape
    K, _, kh, kw = w.shape
    ho = (H - kh) // stride + 1
    wo = (W - kw) // stride + 1
    out = np.empty((B, K, ho, wo))
    acc = np.empty(wo)
    for n in range(B):
        for k in range(K):
            for i in range(ho):
                acc[:] = b[k]
                for c in range(C):
                    for di in range(kh):
                        xrow = x[n, c, i * stride + di]
                        if kw == 3 and stride == 1:
                            w0 = w[k, c, di, 0]
                            w1 = w[k, c, di, 1]
                            w2 = w[k, c, di, 2]
                            for j in range(wo):
                                acc[j] += xrow[j] * w0 + xrow[j + 1] * w1 + xrow[j + 2] * w2
                        elif kw == 1 and stride == 1:
                            w0 = w[k, c, di, 0]
                            for j in range(wo):
                                acc[j] += xrow[j] * w0
                        else:
                            for dj in range(kw):
                                wv = w[k, c, di, dj]
                                for j in range(wo):
                                    acc[j] += xrow[j * stride + dj] * wv
                out[n, k, i] = acc
    return out


@njit(cache=True, fastmath=True)
def conv2d_backward_input(g, w, H, W, stride):
    B, K, ho, wo = g.shape
    _, C, kh, kw = w.shape
    dx = np.zeros((B, C, H, W))
    for n in range(B):
        for k in range(K):
            for i in range(ho):
                grow = g[n, k, i]
                for c in range(C):
                    for di in range(kh):
                        xrow = dx[n, c, i * stride + di]
                        if kw == 3 and stride == 1:
                            w0 = w[k, c, di, 0]
                            w1 = w[k, c, di, 1]
                            w2 = w[k, c, di, 2]
                            for j in range(wo):
                                xrow[j] += grow[j] * w0
                            for j in range(wo):
                                xrow[j + 1] += grow[j] * w1
                            for j in range(wo):
                                xrow[j + 2] += grow[j] * w2
                        elif kw == 1 and stride == 1:
                            w0 = w[k, c, di, 0]
                            for j in range(wo):
                                xrow[j] += grow[j] * w0
                        else:
                            for dj in range(kw):
                                wv = w[k, c, di, dj]
                                for j in range(wo):
                                    xrow[j * stride + dj] += grow[j] * wv
    return dx


@njit(cache=True, fastmath=True)
def conv2d_backward_kernel(g, x, kh, kw, stride):
    B, K, ho, wo = g.shape
    C = x.shape[1]
    dw = np.zeros((K, C, kh, kw))
    for n in range(B):
        for k in range(K):
            for i in range(ho):
                grow = g[n, k, i]
                for c in range(C):
                    for di in range(kh):
                        xrow = x[n, c, i * stride + di]
                        if kw == 3 and stride == 1:
                            a0 = a1 = a2 = 0.0
                            for j in range(wo):
                                gv = grow[j]
                                a0 += gv * xrow[j]
                                a1 += gv * xrow[j + 1]
                                a2 += gv * xrow[j + 2]
                            dw[k, c, di, 0] += a0
                            dw[k, c, di, 1] += a1
                            dw[k, c, di, 2] += a2
                        elif kw == 1 and stride == 1:
                            a0 = 0.0
                            for j in range(wo):
                                a0 += grow[j] * xrow[j]
                            dw[k, c, di, 0] += a0
                        else:
                            for dj in range(kw):
                                acc = 0.0
                                for j in range(wo):
                                    acc += grow[j] * xrow[j * stride + dj]
                                dw[k, c, di, dj] += acc
    return dw


@njit(cache=True)
def maxpool2_forward(x):
    B, C, H, W = x.shape
    ho, wo = H // 2, W // 2
    out = np.empty((B, C, ho, wo))
    arg = np.empty((B, C, ho, wo), dtype=np.int64)
    for n in range(B):
        for c in range(C):
            for i in range(ho):
                for j in range(wo):
                    best = x[n, c, 2 * i, 2 * j]
                    bidx = 0
                    for di in range(2):
                        for dj in range(2):
                            v = x[n, c, 2 * i + di, 2 * j + dj]
                            if v > best:
                                best = v
                                bidx = 2 * di + dj
                    out[n, c, i, j] = best
                    arg[n, c, i, j] = bidx
    return out, arg


@njit(cache=True)
def maxpool2_backward(g, arg, H, W):
    B, C, ho, wo = g.shape
    dx = np.zeros((B, C, H, W))
    for n in range(B):
        for c in range(C):
            for i in range(ho):
                for j in range(wo):
                    a = arg[n, c, i, j]
                    dx[n, c, 2 * i + a // 2, 2 * j + a % 2] += g[n, c, i, j]
    return dx
