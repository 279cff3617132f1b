"""Auxiliary losses layered on top of activation-map self-challenging.

Threshold average pooling, the smoothed negative-map penalty, kernel
two-sample alignment of features across domains, and a domain-adversarial
discriminator over activation maps. Everything returns graph nodes so the
addends backpropagate into the featurizer.
"""

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .challenge import softmax_values


def tap_pool(z, lam_tap):
    """Threshold average pooling: per channel, mean over cells strictly
    above lam_tap * channel max; 0 when no cell qualifies.

    With lam_tap = 0 and strictly positive channels this equals global
    average pooling; raising lam_tap interpolates toward max pooling.
    """
    if not (0.0 <= lam_tap < 1.0):
        raise ValueError(f"lam_tap must be in [0,1), got {lam_tap}")
    z = T.as_node(z)
    v = z.value
    tau = lam_tap * v.max(axis=(2, 3), keepdims=True)
    indicator = (v > tau).astype(np.float64)
    count = indicator.sum(axis=(2, 3))
    alive = count > 0
    denom = np.where(alive, count, 1.0)
    pooled = T.sum_(T.mul(z, T.Node(indicator)), axis=(2, 3))
    return T.mul(pooled, T.Node(alive / denom))


# ---------------------------------------------------------------------------
# homogeneous negative maps


def hnc_map_loss(maps):
    """Uniformity pressure on normalized maps: -(1/(H*W)) sum log M,
    batch-averaged. Equals ln(H*W) iff the map is uniform; larger otherwise.
    """
    maps = T.as_node(maps)
    B, H, W = maps.value.shape
    sums = maps.value.sum(axis=(1, 2))
    if not np.allclose(sums, 1.0, atol=1e-6):
        raise ValueError(f"maps must be softmax-normalized; sums are {sums}")
    per_sample = T.sum_(T.log(maps), axis=(1, 2))
    return T.mul(T.mean(per_sample), -1.0 / (H * W))


def top_negative_classes(logits_values, onehot, top_m):
    """0/1 selection of the top_m most-confident negative classes per
    sample; confidence ties resolve toward the lower class index."""
    oh = T.check_onehot(onehot)
    B, C = oh.shape
    if top_m > C - 1:
        raise ValueError(f"top_m={top_m} exceeds negative class count {C - 1}")
    conf = softmax_values(logits_values)
    sel = np.zeros((B, C))
    for n in range(B):
        order = sorted((c for c in range(C) if oh[n, c] == 0.0), key=lambda c: (-conf[n, c], c))
        sel[n, order[:top_m]] = 1.0
    return sel


def hnc_negative_map(z, classifier, onehot, top_m):
    """Aggregate negative activation map, spatially softmax-normalized.

    One gradient probe of the summed top-m negative logits stands in for
    the per-class maps; the rectified combination stays differentiable in
    the features.
    """
    if not z.requires_grad:
        z = T.Node(z.value, requires_grad=True)
    B, K, H, W = z.value.shape
    logits = classifier.logits_from_features(z)
    sel = top_negative_classes(logits.value, onehot, top_m)
    score = T.sum_(T.mul(logits, T.Node(sel)))
    (g,) = T.grad_of(score, [z])
    importance = g.mean(axis=(2, 3))  # constants: probe output
    combined = T.sum_(T.mul(z, T.Node(importance[:, :, None, None])), axis=1)
    rect = T.relu(combined)
    flat = T.softmax(T.reshape(rect, (B, H * W)), axis=1)
    return T.reshape(flat, (B, H, W))


def hnc_approx_loss_from_features(z, classifier, onehot, top_m, lam1):
    if lam1 == 0.0:
        return T.Node(np.zeros(()))
    return T.mul(hnc_map_loss(hnc_negative_map(z, classifier, onehot, top_m)), lam1)


def hnc_approx_loss(model, x, onehot, top_m, lam1):
    """Standalone form running its own forward pass."""
    _, z, _ = model.forward(x)
    return hnc_approx_loss_from_features(z, model.classifier, onehot, top_m, lam1)


# ---------------------------------------------------------------------------
# kernel two-sample alignment


@dataclass
class KernelConfig:
    """Gaussian mixture bandwidths as gamma = 1/(2 sigma^2) multipliers."""

    gammas: tuple = (1e-3, 1e-2, 1e-1, 1.0, 10.0, 100.0, 1000.0)

    def __post_init__(self):
        if len(self.gammas) == 0 or any(g <= 0 for g in self.gammas):
            raise ValueError(f"gammas must be non-empty and positive, got {self.gammas}")


def _sq_dists(a, b):
    sa = T.reshape(T.sum_(T.mul(a, a), axis=1), (a.value.shape[0], 1))
    sb = T.reshape(T.sum_(T.mul(b, b), axis=1), (1, b.value.shape[0]))
    return T.add(T.sub(T.add(sa, sb), T.mul(T.matmul(a, T.transpose(b)), 2.0)), 0.0)


def mmd_mixture(a, b, kc=KernelConfig()):
    """Biased squared-MMD estimate averaged over the bandwidth mixture.

    Operands are canonically ordered internally so mmd(a, b) and
    mmd(b, a) execute the same float program and agree bitwise.
    """
    a, b = T.as_node(a), T.as_node(b)
    if a.value.ndim != 2 or b.value.ndim != 2 or a.value.shape[1] != b.value.shape[1]:
        raise ValueError(f"need [n,d] and [m,d] inputs, got {a.value.shape} and {b.value.shape}")
    if a.value.tobytes() > b.value.tobytes():
        a, b = b, a
    daa, dbb, dab = _sq_dists(a, a), _sq_dists(b, b), _sq_dists(a, b)
    total = T.Node(np.zeros(()))
    for g in kc.gammas:
        kaa = T.mean(T.exp(T.mul(daa, -g)))
        kbb = T.mean(T.exp(T.mul(dbb, -g)))
        kab = T.mean(T.exp(T.mul(dab, -g)))
        total = T.add(total, T.sub(T.add(kaa, kbb), T.mul(kab, 2.0)))
    return T.mul(total, 1.0 / len(kc.gammas))


# ---------------------------------------------------------------------------
# conditional domain-adversarial head


class DomainDiscriminator:
    """MLP over flattened activation maps that predicts the source domain."""

    def __init__(self, in_dim, domains, width=512, depth=3, dropout=0.5, seed=0):
        rng = np.random.default_rng(seed)
        self.dropout = dropout
        self.domains = domains
        dims = [in_dim] + [width] * depth
        self.hidden = [
            (T.parameter(rng.normal(0.0, np.sqrt(2.0 / dims[i]), size=(dims[i + 1], dims[i]))),
             T.parameter(np.zeros(dims[i + 1])))
            for i in range(depth)
        ]
        self.out = (
            T.parameter(rng.normal(0.0, np.sqrt(2.0 / width), size=(domains, width))),
            T.parameter(np.zeros(domains)),
        )

    def parameters(self):
        out = {}
        for i, (w, b) in enumerate(self.hidden):
            out[f"disc.h{i}.w"] = w
            out[f"disc.h{i}.b"] = b
        out["disc.out.w"], out["disc.out.b"] = self.out
        return out

    def draw_dropout_masks(self, batch, rng):
        """Inverted-dropout masks, one per hidden layer, drawn once per step
        so the discriminator and generator passes see the same network."""
        masks = []
        for w, _ in self.hidden:
            width = w.value.shape[0]
            if self.dropout > 0.0 and rng is not None:
                keep = (rng.random((batch, width)) >= self.dropout) / (1.0 - self.dropout)
            else:
                keep = np.ones((batch, width))
            masks.append(keep)
        return masks


def class_weights(class_labels, class_count=None):
    """Inverse class-frequency weights: 1 / (C * freq(class)); they average
    to 1 over the batch."""
    labels = np.asarray(class_labels, dtype=np.int64)
    C = class_count if class_count is not None else int(labels.max()) + 1
    counts = np.bincount(labels, minlength=C)
    freq = counts[labels] / labels.shape[0]
    return 1.0 / (C * freq)


def _disc_forward_with_adjoint(maps, disc, domain_onehot, weights, drop_masks):
    """Weighted CE of the discriminator plus a symbolic input gradient.

    The adjoint is built from forward ops (relu/dropout indicators held
    constant), so the squared gradient norm stays differentiable w.r.t. the
    discriminator parameters -- the manual analog of double backprop.
    """
    B = maps.value.shape[0]
    h = maps
    pre_acts = []
    for (w, b), mask in zip(disc.hidden, drop_masks):
        a = T.linear(h, w, b)
        pre_acts.append(a)
        h = T.mul(T.relu(a), T.Node(mask))
    logits = T.linear(h, disc.out[0], disc.out[1])
    wce_rows = T.sum_(T.mul(T.log_softmax(logits), T.Node(domain_onehot)), axis=1)
    wce = T.mul(T.mean(T.mul(wce_rows, T.Node(weights))), -1.0)

    g = T.mul(T.sub(T.softmax(logits), T.Node(domain_onehot)), T.Node(weights[:, None] / B))
    g = T.matmul(g, disc.out[0])
    for (w, _), a, mask in zip(reversed(disc.hidden), reversed(pre_acts), reversed(drop_masks)):
        g = T.mul(g, T.Node(mask))
        g = T.mul(g, T.Node((a.value > 0).astype(np.float64)))
        g = T.matmul(g, w)
    penalty = T.mean(T.sum_(T.mul(g, g), axis=1))
    return wce, penalty, g


def cdann_losses(maps, domain_labels, class_labels, disc, lam2, eta, rng=None, class_count=None):
    """Adversarial pair of losses over activation maps.

    Returns (generator addend, discriminator loss). The discriminator
    minimizes class-weighted CE on detached maps plus eta times the squared
    norm of its input gradient; the generator addend is -lam2 times the CE
    computed through the live maps so minimizing it maximizes domain
    confusion. The caller alternates which side steps.
    """
    maps = T.as_node(maps)
    d = np.asarray(domain_labels, dtype=np.int64)
    if d.min() < 0 or d.max() >= disc.domains:
        raise ValueError(f"domain labels outside [0,{disc.domains})")
    donehot = T.onehot_encode(d, disc.domains)
    weights = class_weights(class_labels, class_count)
    drop = disc.draw_dropout_masks(maps.value.shape[0], rng)

    wce_d, penalty, _ = _disc_forward_with_adjoint(T.detach(maps), disc, donehot, weights, drop)
    disc_loss = T.add(wce_d, T.mul(penalty, eta))

    live = maps if maps.requires_grad else T.Node(maps.value, requires_grad=True)
    wce_g, _, _ = _disc_forward_with_adjoint(live, disc, donehot, weights, drop)
    gen_addend = T.mul(wce_g, -lam2)
    return gen_addend, disc_loss
