"""Pure-numpy fallback kernels.

Same call signatures as the numba twins in ``_kernels_numba``; selection
happens in ``backend``. Inputs arrive already padded and as float64.
"""

import numpy as np


def conv2d_forward(x, w, b, stride):
    """Cross-correlate x[B,C,H,W] with w[K,C,kh,kw] plus bias b[K]."""
    B, C, H, W = x.shape
    K, _, kh, kw = w.shape
    ho = (H - kh) // stride + 1
    wo = (W - kw) // stride + 1
    out = np.tile(b.reshape(1, K, 1, 1), (B, 1, ho, wo))
    for di in range(kh):
        for dj in range(kw):
            patch = x[:, :, di : di + ho * stride : stride, dj : dj + wo * stride : stride]
            out += np.einsum("bchw,kc->bkhw", patch, w[:, :, di, dj], optimize=True)
    return out


def conv2d_backward_input(g, w, H, W, stride):
    """Gradient w.r.t. the (padded) input; g is [B,K,ho,wo]."""
    B, K, ho, wo = g.shape
    _, C, kh, kw = w.shape
    dx = np.zeros((B, C, H, W))
    for di in range(kh):
        for dj in range(kw):
            contrib = np.einsum("bkhw,kc->bchw", g, w[:, :, di, dj], optimize=True)
            dx[:, :, di : di + ho * stride : stride, dj : dj + wo * stride : stride] += contrib
    return dx


def conv2d_backward_kernel(g, x, kh, kw, stride):
    """Gradient w.r.t. the kernels; returns [K,C,kh,kw]."""
    B, K, ho, wo = g.shape
    _, C, _, _ = x.shape
    dw = np.zeros((K, C, kh, kw))
    for di in range(kh):
        for dj in range(kw):
            patch = x[:, :, di : di + ho * stride : stride, dj : dj + wo * stride : stride]
            dw[:, :, di, dj] = np.einsum("bkhw,bchw->kc", g, patch, optimize=True)
    return dw


def maxpool2_forward(x):
    """2x2/stride-2 max pooling; trailing odd row/col dropped.

    Returns (pooled, argmax) where argmax holds the flat 0..3 index of the
    winning cell inside each window (row-major, ties to the first).
    """
    B, C, H, W = x.shape
    ho, wo = H // 2, W // 2
    win = x[:, :, : 2 * ho, : 2 * wo].reshape(B, C, ho, 2, wo, 2)
    win = win.transpose(0, 1, 2, 4, 3, 5).reshape(B, C, ho, wo, 4)
    arg = np.argmax(win, axis=4)
    out = np.take_along_axis(win, arg[..., None], axis=4)[..., 0]
    return out, arg.astype(np.int64)


def maxpool2_backward(g, arg, H, W):
    """Scatter pooled gradients back to the winning input cells."""
    B, C, ho, wo = g.shape
    dx = np.zeros((B, C, H, W))
    di, dj = arg // 2, arg % 2
    bi, ci, ii, ji = np.ix_(range(B), range(C), range(ho), range(wo))
    np.add.at(dx, (bi, ci, 2 * ii + di, 2 * ji + dj), g)
    return dx
