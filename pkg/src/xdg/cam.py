"""Class activation maps over the last feature grid, plus heatmap export.

Two flavors: the classic linear combination of channels by classifier
weights (signed), and the gradient-weighted variant that pools the gradient
of the pre-softmax class score and rectifies the combined map. Ramp/blend
rules for the exported pixmaps are documented at ``export_heatmap``.
"""

from dataclasses import dataclass

import numpy as np

from . import tensor as T


@dataclass
class ActivationMap:
    values: np.ndarray  # [B, H, W]
    class_id: int


def classic_cam(z, fc_weights, c):
    """M_c = sum_k z_k * w[c,k]; no rectification, the map may be signed."""
    z = np.asarray(z.value if isinstance(z, T.Node) else z, dtype=np.float64)
    w = np.asarray(fc_weights.value if isinstance(fc_weights, T.Node) else fc_weights)
    if not (0 <= c < w.shape[0]):
        raise ValueError(f"class {c} outside [0,{w.shape[0]})")
    values = np.einsum("bkhw,k->bhw", z, w[c])
    return ActivationMap(values, class_id=c)


def grad_cam_importance(model, x, c):
    """Spatial mean of d(logit_c)/d(z) per channel; returns (scores[B,K], z)."""
    logits, z, _ = model.forward(x)
    if not (0 <= c < logits.value.shape[1]):
        raise ValueError(f"class {c} outside [0,{logits.value.shape[1]})")
    score = T.sum_(T.slice_cols(logits, c))
    (gz,) = T.grad_of(score, [z])
    if not np.all(np.isfinite(gz)):
        raise FloatingPointError(f"non-finite feature gradient for class {c}: max |g| = {np.abs(gz).max()}")
    return gz.mean(axis=(2, 3)), z


def grad_cam(model, x, c):
    """Rectified gradient-weighted map for the pre-softmax score of class c."""
    importance, z = grad_cam_importance(model, x, c)
    combined = np.einsum("bk,bkhw->bhw", importance, z.value)
    return ActivationMap(np.maximum(combined, 0.0), class_id=c)


def upsample_bilinear(m, H, W):
    """Corner-aligned bilinear resize of [B,h,w] (or [h,w]) maps to H x W.

    Output corners coincide with input corners; a target extent of 1 pins
    the coordinate to the top/left corner.
    """
    values = m.values if isinstance(m, ActivationMap) else np.asarray(m, dtype=np.float64)
    single = values.ndim == 2
    if single:
        values = values[None]
    B, h, w = values.shape
    if H < 1 or W < 1:
        raise ValueError(f"target size must be >= 1, got {H}x{W}")
    sr = (h - 1) / (H - 1) if H > 1 else 0.0
    sc = (w - 1) / (W - 1) if W > 1 else 0.0
    rows = np.arange(H) * sr
    cols = np.arange(W) * sc
    r0 = np.minimum(np.floor(rows).astype(int), h - 1)
    c0 = np.minimum(np.floor(cols).astype(int), w - 1)
    r1 = np.minimum(r0 + 1, h - 1)
    c1 = np.minimum(c0 + 1, w - 1)
    fr = (rows - r0)[None, :, None]
    fc = (cols - c0)[None, None, :]
    out = (
        values[:, r0][:, :, c0] * (1 - fr) * (1 - fc)
        + values[:, r0][:, :, c1] * (1 - fr) * fc
        + values[:, r1][:, :, c0] * fr * (1 - fc)
        + values[:, r1][:, :, c1] * fr * fc
    )
    return out[0] if single else out


def _ramp(t):
    """Documented color ramp: linear blue (0,0,255) -> red (255,0,0)."""
    return np.stack([255.0 * t, np.zeros_like(t), 255.0 * (1.0 - t)], axis=-1)


def write_ppm(path, rgb):
    rgb = np.clip(np.rint(rgb), 0, 255).astype(np.uint8)
    h, w, _ = rgb.shape
    with open(path, "wb") as f:
        f.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        f.write(rgb.tobytes())


def write_pgm(path, gray):
    gray = np.clip(np.rint(gray), 0, 255).astype(np.uint8)
    h, w = gray.shape
    with open(path, "wb") as f:
        f.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        f.write(gray.tobytes())


def export_heatmap(map_values, base_image, path):
    """Blend a map over a grayscale base image and write a binary pixmap.

    The map is upsampled to the image size, clipped at zero, and scaled by
    its maximum into t in [0,1]. Output pixel = (1-t)*gray + t*ramp(t), so a
    zero map reproduces the base image and the peak cell shows the ramp's
    terminal color exactly.
    """
    base = np.asarray(base_image, dtype=np.float64)
    m = np.asarray(map_values, dtype=np.float64)
    if m.shape != base.shape:
        m = upsample_bilinear(m, *base.shape)
    m = np.maximum(m, 0.0)
    peak = m.max()
    t = m / peak if peak > 0 else np.zeros_like(m)
    gray = np.repeat((255.0 * np.clip(base, 0.0, 1.0))[:, :, None], 3, axis=2)
    rgb = (1.0 - t)[:, :, None] * gray + t[:, :, None] * _ramp(t)
    write_ppm(path, rgb)


def export_map_pgm(map_values, path):
    """Raw map as P5, min-max normalized (flat maps render black)."""
    m = np.asarray(map_values, dtype=np.float64)
    lo, hi = m.min(), m.max()
    scaled = (m - lo) / (hi - lo) * 255.0 if hi > lo else np.zeros_like(m)
    write_pgm(path, scaled)
