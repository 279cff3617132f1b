"""Self-challenging feature masking.

Masks the most influential features during training so the network must
find alternative evidence. Two selection flavors share the machinery:
gradient-pooled masking (spatial or channel scope) and activation-map
masking over the ground-truth class map, plus batch-level mask reversion
with B/C/T scoring, optional per-domain thresholds, and a linear schedule.

Percentile semantics are exact order statistics: ``round(p*N)`` candidates
(half up) with the highest scores are masked, ties resolved toward the
lowest flat index. Gradient probes run through ``tensor.grad_of`` and never
touch training ``.grad`` buffers.
"""

import json
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .datasets import round_half_up


@dataclass
class ChallengeConfig:
    feature_drop: float = 1.0 / 3.0  # p
    batch_drop: float = 1.0 / 3.0  # b
    score_rule: str = "B"  # B: gt confidence, C: confidence drop, T: random-if-correct
    per_domain: bool = False
    schedule: bool = False
    rsc_mode: str = "alternate"  # spatial | channel | alternate

    def __post_init__(self):
        if not (0.0 <= self.feature_drop < 1.0):
            raise ValueError(f"feature_drop must be in [0,1), got {self.feature_drop}")
        if not (0.0 <= self.batch_drop <= 1.0):
            raise ValueError(f"batch_drop must be in [0,1], got {self.batch_drop}")
        if self.score_rule not in ("B", "C", "T"):
            raise ValueError(f"score_rule must be B|C|T, got {self.score_rule!r}")
        if self.rsc_mode not in ("spatial", "channel", "alternate"):
            raise ValueError(f"rsc_mode must be spatial|channel|alternate, got {self.rsc_mode!r}")


@dataclass
class StepResult:
    features: T.Node  # masked features, ready for the classifier
    mask: np.ndarray  # final 0/1 mask at feature shape
    kept: np.ndarray  # sample indices whose masks survived reversion
    mode: str


def softmax_values(logits):
    e = np.exp(logits - logits.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def target_gradient(z, classifier, onehot, wrt=None):
    """Gradient of the summed ground-truth logits w.r.t. features.

    ``wrt`` defaults to ``z``; pass an upstream node to probe an earlier
    layer. Runs as a separate accumulation pass, so parameter gradients are
    untouched. A constant feature leaf is promoted to a grad-enabled alias
    for the probe.
    """
    oh = T.check_onehot(onehot)
    if wrt is None:
        if not z.requires_grad:
            z = T.Node(z.value, requires_grad=True)
        wrt = z
    elif not wrt.requires_grad:
        raise ValueError("probe target must be a grad-enabled ancestor of the features")
    logits = classifier.logits_from_features(z)
    score = T.sum_(T.mul(logits, T.Node(oh)))
    (g,) = T.grad_of(score, [wrt])
    return g


def pool_gradient(g_z, mode):
    """Channel-mean per location (spatial) or spatial-mean per channel."""
    if mode == "spatial":
        return g_z.mean(axis=1)  # [B, H, W]
    if mode == "channel":
        return g_z.mean(axis=(2, 3))  # [B, K]
    raise ValueError(f"mode must be spatial|channel, got {mode!r}")


def percentile_mask(scores, p):
    """Per-sample 0/1 mask zeroing the round(p*N) highest-scoring entries.

    ``scores`` is [B, N]; equal scores are masked lowest-flat-index first,
    so an all-equal row deterministically masks its leading entries.
    """
    if not (0.0 <= p < 1.0):
        raise ValueError(f"p must be in [0,1), got {p}")
    scores = np.asarray(scores, dtype=np.float64)
    B, N = scores.shape
    k = round_half_up(p * N)
    mask = np.ones((B, N))
    if k:
        order = np.argsort(-scores, axis=1, kind="stable")
        np.put_along_axis(mask, order[:, :k], 0.0, axis=1)
    return mask


def change_vector(z, mask, classifier, onehot):
    """Ground-truth softmax confidence drop caused by the mask, per sample."""
    zv = z.value if isinstance(z, T.Node) else np.asarray(z, dtype=np.float64)
    oh = T.check_onehot(onehot)
    before = softmax_values(classifier.logits_values(zv))
    after = softmax_values(classifier.logits_values(zv * mask))
    return ((before - after) * oh).sum(axis=1)


def _keep_indices(scores, b):
    """Top round(b*B) sample indices by score, ties to the lowest index.

    Entries scored -inf are never kept (used to bar misclassified samples).
    """
    B = scores.shape[0]
    k = round_half_up(b * B)
    order = np.argsort(-scores, kind="stable")
    order = order[np.isfinite(scores[order])]
    return np.sort(order[:k])


def revert_mask(mask, c, b, groups=None):
    """Reset masks to all-ones except for the top-b scoring samples.

    With ``groups`` (per-domain ids), the top round(b*B_g) samples are kept
    within each group independently.
    """
    if not (0.0 <= b <= 1.0):
        raise ValueError(f"b must be in [0,1], got {b}")
    c = np.asarray(c, dtype=np.float64)
    out = np.array(mask, dtype=np.float64)
    if groups is None:
        kept = _keep_indices(c, b)
    else:
        groups = np.asarray(groups)
        kept = []
        for g in np.unique(groups):
            members = np.flatnonzero(groups == g)
            kept.extend(members[_keep_indices(c[members], b)])
        kept = np.sort(np.asarray(kept, dtype=np.int64))
    reverted = np.setdiff1d(np.arange(out.shape[0]), kept)
    out[reverted] = 1.0
    return out, kept


def select_batch_scores(variant, logits, masked_logits, onehot, rng=None):
    """Batch scores that decide which samples keep their masks.

    B: ground-truth confidence. C: confidence drop under the mask.
    T: uniform random for correctly classified samples, -inf otherwise.
    """
    oh = T.check_onehot(onehot)
    probs = softmax_values(logits)
    if variant == "B":
        return (probs * oh).sum(axis=1)
    if variant == "C":
        return (probs * oh).sum(axis=1) - (softmax_values(masked_logits) * oh).sum(axis=1)
    if variant == "T":
        if rng is None:
            raise ValueError("variant T needs an rng")
        correct = logits.argmax(axis=1) == oh.argmax(axis=1)
        return np.where(correct, rng.random(logits.shape[0]), -np.inf)
    raise ValueError(f"variant must be B|C|T, got {variant!r}")


def linear_schedule(step, total, b_final):
    """Increasing ramp: b(step) = b_final * step / total."""
    if total <= 0 or not (0 <= step <= total):
        raise ValueError(f"need 0 <= step <= total with total > 0, got {step}/{total}")
    return b_final * step / total


def _avgpool2(x):
    B, H, W = x.shape
    return x[:, : H // 2 * 2, : W // 2 * 2].reshape(B, H // 2, 2, W // 2, 2).mean(axis=(2, 4))


def _trace(trace, step, variant, zero_count, kept):
    if trace is not None:
        rec = {"step": int(step), "variant": variant, "zero_count": int(zero_count),
               "kept_samples": [int(i) for i in kept]}
        trace.write(json.dumps(rec) + "\n")


def rsc_step(z, classifier, onehot, cfg, z_prev=None, rng=None, trace=None, step=0):
    """Gradient-pooled self-challenging over one batch.

    Spatial scope scores locations by the channel-mean target gradient;
    channel scope scores channels by the spatial mean. With a pooling
    classifier the spatial gradient is location-independent, so when
    ``z_prev`` is given the spatial probe runs at that earlier layer and the
    pooled map is average-pool downsampled by 2 to the feature grid.
    ``alternate`` flips a fair coin per batch.
    """
    mode = cfg.rsc_mode
    if mode == "alternate":
        if rng is None:
            raise ValueError("alternate mode needs an rng")
        mode = "spatial" if rng.random() < 0.5 else "channel"
    B, K, H, W = z.value.shape
    if mode == "spatial" and z_prev is not None:
        g = target_gradient(z, classifier, onehot, wrt=z_prev)
        pooled = _avgpool2(pool_gradient(g, "spatial"))
    else:
        g = target_gradient(z, classifier, onehot)
        pooled = pool_gradient(g, mode)
    flat = pooled.reshape(B, -1)
    mask = percentile_mask(flat, cfg.feature_drop)
    if mode == "spatial":
        full = np.broadcast_to(mask.reshape(B, 1, H, W), z.value.shape)
    else:
        full = np.broadcast_to(mask.reshape(B, K, 1, 1), z.value.shape)
    c = change_vector(z, full, classifier, onehot)
    final, kept = revert_mask(full, c, cfg.batch_drop)
    _trace(trace, step, f"rsc-{mode}", round_half_up(cfg.feature_drop * flat.shape[1]), kept)
    return StepResult(T.mul(z, T.Node(final)), final, kept, mode)


def divcam_step(z, classifier, onehot, cfg, step=0, total=1, domains=None, rng=None, trace=None):
    """Activation-map self-challenging over one batch.

    Builds the rectified ground-truth class map from spatially pooled target
    gradients, masks its top-p cells (an all-zero map therefore masks the
    lowest flat indices by the tie rule), duplicates the mask along
    channels, then applies batch reversion: scores per ``cfg.score_rule``,
    per-domain thresholds when configured, batch drop ramped linearly when
    the schedule is on.
    """
    B, K, H, W = z.value.shape
    g = target_gradient(z, classifier, onehot)
    importance = pool_gradient(g, "channel")  # [B, K]
    gt_map = np.maximum(np.einsum("bk,bkhw->bhw", importance, z.value), 0.0)
    mask = percentile_mask(gt_map.reshape(B, -1), cfg.feature_drop)
    full = np.broadcast_to(mask.reshape(B, 1, H, W), z.value.shape)
    logits = classifier.logits_values(z.value)
    masked_logits = classifier.logits_values(z.value * full)
    scores = select_batch_scores(cfg.score_rule, logits, masked_logits, onehot, rng=rng)
    b_eff = linear_schedule(step, total, cfg.batch_drop) if cfg.schedule else cfg.batch_drop
    final, kept = revert_mask(full, scores, b_eff, groups=domains if cfg.per_domain else None)
    _trace(trace, step, f"divcam-{cfg.score_rule}", round_half_up(cfg.feature_drop * H * W), kept)
    return StepResult(T.mul(z, T.Node(final)), final, kept, cfg.score_rule)
