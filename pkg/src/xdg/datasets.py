"""Multi-domain dataset construction and splitting.

Environments are (domain_id, images[n,C,H,W], labels[n]) triples sharing one
label space. Sources: color/rotation variants of a digit corpus (IDX files
when present, procedural glyphs otherwise) plus a pure-glyph fallback with
per-domain style shifts.
"""

import os
import struct
from dataclasses import dataclass

import numpy as np

from . import tensor as T

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801


def round_half_up(x):
    """round() with halves going up; the cardinality rule for splits/masks."""
    return int(np.floor(x + 0.5))


@dataclass
class Environment:
    domain_id: int
    images: np.ndarray
    labels: np.ndarray


@dataclass
class MultiDomainDataset:
    environments: list
    class_count: int

    def __post_init__(self):
        ids = [e.domain_id for e in self.environments]
        if len(set(ids)) != len(ids):
            raise ValueError(f"duplicate domain ids: {ids}")
        shapes = {e.images.shape[1:] for e in self.environments}
        if len(shapes) > 1:
            raise ValueError(f"environments disagree on image shape: {shapes}")
        for e in self.environments:
            if e.labels.min(initial=0) < 0 or e.labels.max(initial=0) >= self.class_count:
                raise ValueError(f"labels outside [0,{self.class_count}) in domain {e.domain_id}")

    @property
    def image_shape(self):
        return self.environments[0].images.shape[1:]


@dataclass
class SplitSpec:
    val_fraction: float = 0.2
    seed: int = 0


def split_domains(ds, spec):
    """Per-domain disjoint train/val partition; val count = round(frac * n)."""
    if not (0.0 <= spec.val_fraction < 1.0):
        raise ValueError(f"val_fraction must be in [0,1), got {spec.val_fraction}")
    train_envs, val_envs = [], []
    for idx, env in enumerate(ds.environments):
        n = env.images.shape[0]
        k = round_half_up(spec.val_fraction * n)
        rng = np.random.default_rng(np.random.SeedSequence([spec.seed, idx]))
        perm = rng.permutation(n)
        val_idx = np.sort(perm[:k])
        train_idx = np.sort(perm[k:])
        train_envs.append(Environment(env.domain_id, env.images[train_idx], env.labels[train_idx]))
        val_envs.append(Environment(env.domain_id, env.images[val_idx], env.labels[val_idx]))
    return (
        MultiDomainDataset(train_envs, ds.class_count),
        MultiDomainDataset(val_envs, ds.class_count),
    )


# ---------------------------------------------------------------------------
# IDX ingestion


def parse_idx(buf):
    """Parse an IDX buffer: images -> float64 in [0,1], labels -> int64."""
    if len(buf) < 4:
        raise ValueError(f"truncated header: need 4 magic bytes, have {len(buf)} (offset 0)")
    (magic,) = struct.unpack(">I", buf[:4])
    if magic == IDX_LABELS_MAGIC:
        ndim = 1
    elif magic == IDX_IMAGES_MAGIC:
        ndim = 3
    else:
        raise ValueError(f"bad IDX magic 0x{magic:08x} at offset 0")
    header = 4 + 4 * ndim
    if len(buf) < header:
        raise ValueError(f"truncated header: need {header} bytes, have {len(buf)} (offset 4)")
    dims = struct.unpack(f">{ndim}I", buf[4:header])
    n = int(np.prod(dims))
    if len(buf) < header + n:
        raise ValueError(
            f"truncated payload: need {n} bytes after offset {header}, have {len(buf) - header}"
        )
    raw = np.frombuffer(buf, dtype=np.uint8, count=n, offset=header).reshape(dims)
    if magic == IDX_LABELS_MAGIC:
        return raw.astype(np.int64)
    return raw.astype(np.float64) / 255.0


def _find_idx_files(root):
    names = [
        ("train-images-idx3-ubyte", "train-labels-idx1-ubyte"),
        ("train-images.idx3-ubyte", "train-labels.idx1-ubyte"),
    ]
    for img_name, lab_name in names:
        img, lab = os.path.join(root, img_name), os.path.join(root, lab_name)
        if os.path.exists(img) and os.path.exists(lab):
            return img, lab
    return None


def load_digit_source(root=None, fallback_per_class=200, seed=0):
    """Digit corpus: IDX files under ``root`` (or $XDG_DATA_DIR) if present,
    otherwise 28x28 procedural glyphs with 10 classes."""
    root = root or os.environ.get("XDG_DATA_DIR", "data")
    found = _find_idx_files(root) if os.path.isdir(root) else None
    if found:
        with open(found[0], "rb") as f:
            images = parse_idx(f.read())
        with open(found[1], "rb") as f:
            labels = parse_idx(f.read())
        return images[:, None, :, :], labels
    ds = gen_synth_glyphs(10, fallback_per_class, domains=1, seed=seed, size=28)
    env = ds.environments[0]
    return env.images, env.labels


# ---------------------------------------------------------------------------
# colored digits


def _as_source(source):
    if isinstance(source, MultiDomainDataset):
        if len(source.environments) != 1:
            raise ValueError("digit source must be a single environment")
        env = source.environments[0]
        return env.images, env.labels
    images, labels = source
    images = np.asarray(images, dtype=np.float64)
    if images.ndim == 3:
        images = images[:, None, :, :]
    return images, np.asarray(labels, dtype=np.int64)


def gen_colored_mnist(source, domain_probs=(0.1, 0.2, 0.9), label_noise=0.25, seed=0):
    """Two-channel colored digits with a per-domain color/label correlation.

    Binary label: 0 for digits 0-4, 1 for 5-9, then flipped with probability
    ``label_noise``. The color bit flips the label with the domain's
    probability and selects the channel the digit is drawn into (channel 0
    when the bit is 1, channel 1 otherwise).
    """
    images, digits = _as_source(source)
    if images.shape[0] == 0:
        raise ValueError("digit source is empty")
    for p in list(domain_probs) + [label_noise]:
        if not (0.0 <= p <= 1.0):
            raise ValueError(f"probability {p} outside [0,1]")
    gray = images[:, 0]
    rng = np.random.default_rng(seed)
    order = rng.permutation(images.shape[0])
    chunks = np.array_split(order, len(domain_probs))
    envs = []
    for d, (p_d, idx) in enumerate(zip(domain_probs, chunks)):
        base = (digits[idx] >= 5).astype(np.int64)
        y = np.where(rng.random(idx.size) < label_noise, 1 - base, base)
        color = np.where(rng.random(idx.size) < p_d, 1 - y, y)
        out = np.zeros((idx.size, 2) + gray.shape[1:])
        red = color == 1
        out[red, 0] = gray[idx][red]
        out[~red, 1] = gray[idx][~red]
        envs.append(Environment(d, out, y))
    return MultiDomainDataset(envs, class_count=2)


# ---------------------------------------------------------------------------
# rotated digits


def _rotate_batch(images, deg):
    """Rotate [n,C,H,W] content by ``deg`` counterclockwise in (row,col)
    space about the image center, bilinear sampling with zero fill."""
    n, C, H, W = images.shape
    theta = np.deg2rad(deg)
    cy, cx = (H - 1) / 2.0, (W - 1) / 2.0
    ii, jj = np.meshgrid(np.arange(H), np.arange(W), indexing="ij")
    dy, dx = ii - cy, jj - cx
    src_r = cy + np.cos(theta) * dy + np.sin(theta) * dx
    src_c = cx - np.sin(theta) * dy + np.cos(theta) * dx
    r0 = np.floor(src_r).astype(np.int64)
    c0 = np.floor(src_c).astype(np.int64)
    fr, fc = src_r - r0, src_c - c0
    out = np.zeros_like(images)
    for dr, dc in ((0, 0), (0, 1), (1, 0), (1, 1)):
        rr, cc = r0 + dr, c0 + dc
        wgt = (fr if dr else 1.0 - fr) * (fc if dc else 1.0 - fc)
        valid = (rr >= 0) & (rr < H) & (cc >= 0) & (cc < W)
        rs, cs = np.clip(rr, 0, H - 1), np.clip(cc, 0, W - 1)
        out += images[:, :, rs, cs] * (wgt * valid)
    return out


def gen_rotated_mnist(source, angles_deg=(0, 15, 30, 45, 60, 75)):
    """One environment per rotation angle; digit classes are the labels."""
    images, labels = _as_source(source)
    angles = [float(a) for a in angles_deg]
    if not all(np.isfinite(angles)):
        raise ValueError(f"angles must be finite, got {angles}")
    envs = [
        Environment(d, _rotate_batch(images, a), labels.copy())
        for d, a in enumerate(angles)
    ]
    return MultiDomainDataset(envs, class_count=int(labels.max()) + 1)


# ---------------------------------------------------------------------------
# procedural glyphs


def _class_skeleton(class_index, segments=4):
    """Fixed per-class polyline control points in the unit square; the
    geometry never depends on the dataset seed so classes match across
    domains."""
    rng = np.random.default_rng(97 + class_index)
    pts = [rng.uniform(0.2, 0.8, size=2)]
    for _ in range(segments):
        step = rng.uniform(-0.45, 0.45, size=2)
        pts.append(np.clip(pts[-1] + step, 0.12, 0.88))
    return np.array(pts)


def _raster_polyline(points, size, half_width, gain, background):
    ys, xs = np.meshgrid(np.arange(size) + 0.5, np.arange(size) + 0.5, indexing="ij")
    grid = np.stack([ys, xs], axis=-1)
    dist = np.full((size, size), np.inf)
    for a, b in zip(points[:-1], points[1:]):
        ab = b - a
        denom = max(float(ab @ ab), 1e-12)
        t = np.clip(((grid - a) @ ab) / denom, 0.0, 1.0)
        proj = a + t[..., None] * ab
        dist = np.minimum(dist, np.linalg.norm(grid - proj, axis=-1))
    stroke = np.clip(1.0 - (dist - half_width), 0.0, 1.0)
    return np.clip(background + gain * stroke, 0.0, 1.0)


def gen_synth_glyphs(classes, per_class, domains, seed=0, size=32, channels=1):
    """Procedural glyph dataset: class fixes the stroke skeleton, domain
    fixes the rendering style (stroke width, contrast, background)."""
    if classes < 2:
        raise ValueError(f"need at least 2 classes, got {classes}")
    rng = np.random.default_rng(seed)
    skeletons = [_class_skeleton(c) for c in range(classes)]
    envs = []
    for d in range(domains):
        half_width = 0.6 + 0.45 * d
        gain = 1.0 - 0.12 * (d % 4)
        background = 0.05 + 0.11 * (d % 4)
        images = np.zeros((classes * per_class, channels, size, size))
        labels = np.zeros(classes * per_class, dtype=np.int64)
        i = 0
        for c in range(classes):
            for _ in range(per_class):
                jitter = rng.uniform(-0.06, 0.06, size=2)
                scale = rng.uniform(0.85, 1.1)
                pts = (skeletons[c] - 0.5) * scale + 0.5 + jitter
                img = _raster_polyline(pts * size, size, half_width, gain, background)
                images[i] = img[None, :, :] if channels == 1 else np.stack([img] * channels)
                labels[i] = c
                i += 1
        envs.append(Environment(d, images, labels))
    return MultiDomainDataset(envs, class_count=classes)


# ---------------------------------------------------------------------------
# container I/O (XDG1 format from the tensor module)


def save_dataset(path, ds):
    arrays = {"meta/class_count": np.array(float(ds.class_count))}
    arrays["meta/env_count"] = np.array(float(len(ds.environments)))
    for env in ds.environments:
        arrays[f"env{env.domain_id}/images"] = env.images
        arrays[f"env{env.domain_id}/labels"] = env.labels.astype(np.float64)
    T.save_arrays(path, arrays)


def load_dataset(path):
    arrays = T.load_arrays(path)
    count = int(arrays["meta/env_count"].item())
    envs = []
    for d in range(count):
        envs.append(
            Environment(d, arrays[f"env{d}/images"], arrays[f"env{d}/labels"].astype(np.int64))
        )
    return MultiDomainDataset(envs, class_count=int(arrays["meta/class_count"].item()))
