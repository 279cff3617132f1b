"""Cross-attention prototypes built from per-domain support sets.

Key/value/query heads are 1x1 projections of the feature grid (the value
head is shared between support and query). Attention normalizes over all
(support image, location) pairs per query location; prototypes are the
attention-weighted value sums, and class scores are dot similarities summed
over the training environments.
"""

from dataclasses import dataclass

import numpy as np

from . import tensor as T


@dataclass
class SupportSet:
    """Per-(environment, class) support indices into a training dataset."""

    indices: dict  # (env_position, class) -> np.ndarray of sample indices
    env_count: int
    class_count: int

    def query_pool(self, env_position, n_env):
        """Indices of the environment that are not support this step."""
        taken = np.concatenate(
            [self.indices[(env_position, c)] for c in range(self.class_count)]
        )
        return np.setdiff1d(np.arange(n_env), taken)


def sample_support(train, n_support, seed):
    """Deterministic support draw: up to n_support indices per (env, class),
    all available when fewer exist; rejects classes absent from an env."""
    rng = np.random.default_rng(seed)
    indices = {}
    for e, env in enumerate(train.environments):
        for c in range(train.class_count):
            pool = np.flatnonzero(env.labels == c)
            if pool.size == 0:
                raise ValueError(f"class {c} missing from environment {env.domain_id}")
            take = min(n_support, pool.size)
            indices[(e, c)] = np.sort(rng.choice(pool, size=take, replace=False))
    return SupportSet(indices, len(train.environments), train.class_count)


def attention_weights(keys, query, d_k=None):
    """Attention of one query grid against a support stack.

    keys: [n, HW, d_k]; query: [HW, d_k]. Scores are scaled by sqrt(d_k)
    and softmax-normalized over all (image, location) pairs independently
    per query location; returns [n*HW, HW].
    """
    keys, query = T.as_node(keys), T.as_node(query)
    n, hw, dk = keys.value.shape
    if query.value.shape != (query.value.shape[0], dk):
        raise ValueError(f"query width {query.value.shape} does not match d_k={dk}")
    flat = T.reshape(keys, (n * hw, dk))
    scores = T.mul(T.matmul(flat, T.transpose(query)), 1.0 / np.sqrt(d_k or dk))
    return T.softmax(scores, axis=0)


def spatial_prototypes(attn, values):
    """Attention-weighted value sums per query location: [HW, d_v]."""
    values = T.as_node(values)
    n, hw, dv = values.value.shape
    return T.matmul(T.transpose(attn), T.reshape(values, (n * hw, dv)))


def env_class_distance(prototypes, query_values, env_count, class_count):
    """Class scores for one query: sum over environments of the spatially
    averaged dot similarity between prototype and query values.

    ``prototypes`` maps (env_position, class) to a [HW, d_v] node; a missing
    pair is an error because every training environment contributes.
    """
    query_values = T.as_node(query_values)
    hw = query_values.value.shape[0]
    cols = []
    for c in range(class_count):
        acc = None
        for e in range(env_count):
            if (e, c) not in prototypes:
                raise ValueError(f"missing support prototypes for environment {e}, class {c}")
            term = T.mul(T.sum_(T.mul(prototypes[(e, c)], query_values)), 1.0 / hw)
            acc = term if acc is None else T.add(acc, term)
        cols.append(acc)
    out = T.stack_cols([T.reshape(c, (1,)) for c in cols])
    return T.reshape(out, (class_count,))


def classic_proto_baseline(support_pooled, query_pooled, class_count):
    """One mean prototype per class from pooled support features; logits are
    dot similarities. ``support_pooled`` maps (env, class) to [n_ec, K]."""
    query_pooled = T.as_node(query_pooled)
    protos = []
    for c in range(class_count):
        rows = [T.as_node(v) for (e, cc), v in sorted(support_pooled.items()) if cc == c]
        if not rows:
            raise ValueError(f"no support for class {c}")
        total = None
        count = 0
        for r in rows:
            s = T.sum_(r, axis=0)
            total = s if total is None else T.add(total, s)
            count += r.value.shape[0]
        protos.append(T.mul(total, 1.0 / count))
    cols = [T.sum_(T.mul(query_pooled, T.reshape(p, (1, -1))), axis=1) for p in protos]
    return T.stack_cols(cols)


class DTransformer:
    """Featurizer plus attention heads; classifies queries by environment-
    summed prototype similarity."""

    def __init__(self, featurizer, class_count, d_k=64, d_v=64, seed=0):
        rng = np.random.default_rng(seed)
        K = featurizer.channels
        self.featurizer = featurizer
        self.class_count = class_count
        self.d_k, self.d_v = d_k, d_v
        scale = np.sqrt(2.0 / K)
        self.key_w = T.parameter(rng.normal(0.0, scale, (d_k, K, 1, 1)))
        self.query_w = T.parameter(rng.normal(0.0, scale, (d_k, K, 1, 1)))
        self.value_w = T.parameter(rng.normal(0.0, scale, (d_v, K, 1, 1)))

    def parameters(self):
        out = dict(self.featurizer.parameters())
        out.update({"attn.key.w": self.key_w, "attn.query.w": self.query_w, "attn.value.w": self.value_w})
        return out

    def _project(self, z, w):
        out = T.conv2d(z, w, T.Node(np.zeros(w.value.shape[0])))
        n, d, H, W = out.value.shape
        return T.reshape(T.transpose(out, (0, 2, 3, 1)), (n, H * W, d))

    def episode_logits(self, support_images, query_images):
        """Logits [Bq, C] for a query batch given per-(env, class) support.

        All images run through the featurizer in one concatenated pass; the
        same value head maps support and query features.
        """
        groups = sorted(support_images)
        sizes = [support_images[g].shape[0] for g in groups]
        stacked = np.concatenate([support_images[g] for g in groups] + [query_images])
        z, _ = self.featurizer.forward(T.Node(stacked))
        bq = query_images.shape[0]
        hw = z.value.shape[2] * z.value.shape[3]

        offsets = np.cumsum([0] + sizes)
        z_query = T.slice_rows(z, offsets[-1], offsets[-1] + bq)
        q_all = T.reshape(self._project(z_query, self.query_w), (bq * hw, self.d_k))
        w_all = self._project(z_query, self.value_w)  # [Bq, HW, d_v]

        env_count = 1 + max(g[0] for g in groups)
        per_class = [None] * self.class_count
        for g, start, stop in zip(groups, offsets[:-1], offsets[1:]):
            z_sup = T.slice_rows(z, start, stop)
            k = self._project(z_sup, self.key_w)  # [n, HW, d_k]
            v = self._project(z_sup, self.value_w)
            n = stop - start
            scores = T.mul(
                T.matmul(T.reshape(k, (n * hw, self.d_k)), T.transpose(q_all)),
                1.0 / np.sqrt(self.d_k),
            )
            attn = T.softmax(scores, axis=0)  # [n*HW, Bq*HW]
            protos = T.matmul(T.transpose(attn), T.reshape(v, (n * hw, self.d_v)))  # [Bq*HW, d_v]
            prod = T.sum_(T.mul(protos, T.reshape(w_all, (bq * hw, self.d_v))), axis=1)
            contrib = T.mean(T.reshape(prod, (bq, hw)), axis=1)  # [Bq]
            c = g[1]
            per_class[c] = contrib if per_class[c] is None else T.add(per_class[c], contrib)
        missing = [c for c, v in enumerate(per_class) if v is None]
        if missing:
            raise ValueError(f"no support provided for classes {missing}")
        return T.stack_cols(per_class)
