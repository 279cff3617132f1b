"""Learnable prototype layer with self-challenging and domain ensembles.

Prototypes are latent patches compared against every feature patch by
squared L2 distance, mapped to similarity by log((d2+1)/(d2+eps)). A small
1x1-conv adapter (relu between, sigmoid after) sits in front; during early
training only the adapter moves (the harness enforces the freeze window).
"""

import numpy as np

from . import tensor as T
from .challenge import revert_mask, softmax_values
from .datasets import round_half_up


class PrototypeLayer:
    """Adapter + prototype bank over feature patches."""

    def __init__(self, channels, class_of, proto_hw=1, eps=1e-4, domain_of=None, seed=0):
        rng = np.random.default_rng(seed)
        class_of = np.asarray(class_of, dtype=np.int64)
        classes = int(class_of.max()) + 1
        counts = np.bincount(class_of, minlength=classes)
        if np.any(counts == 0):
            raise ValueError(f"every class needs at least one prototype; counts {counts}")
        if eps <= 0:
            raise ValueError(f"eps must be positive, got {eps}")
        self.class_of = class_of
        self.domain_of = None if domain_of is None else np.asarray(domain_of, dtype=np.int64)
        self.eps = float(eps)
        self.m = class_of.shape[0]
        self.channels = channels
        self.proto_hw = proto_hw
        self.a1_w = T.parameter(rng.normal(0.0, np.sqrt(2.0 / channels), (channels, channels, 1, 1)))
        self.a1_b = T.parameter(np.zeros(channels))
        self.a2_w = T.parameter(rng.normal(0.0, np.sqrt(2.0 / channels), (channels, channels, 1, 1)))
        self.a2_b = T.parameter(np.zeros(channels))
        self.prototypes = T.parameter(rng.uniform(0.0, 1.0, (self.m, channels, proto_hw, proto_hw)))

    def adapter_parameters(self):
        return {"proto.a1.w": self.a1_w, "proto.a1.b": self.a1_b,
                "proto.a2.w": self.a2_w, "proto.a2.b": self.a2_b}

    def parameters(self):
        out = dict(self.adapter_parameters())
        out["proto.bank"] = self.prototypes
        return out

    def adapt(self, z):
        h = T.relu(T.conv2d(z, self.a1_w, self.a1_b))
        return T.sigmoid(T.conv2d(h, self.a2_w, self.a2_b))

    def patch_distances(self, z):
        """Squared L2 distance of every prototype to every adapter patch."""
        a = self.adapt(T.as_node(z))
        hw = self.proto_hw
        window = T.conv2d(
            T.mul(a, a), T.Node(np.ones((1, self.channels, hw, hw))), T.Node(np.zeros(1))
        )  # [B,1,H',W']
        cross = T.conv2d(a, self.prototypes, T.Node(np.zeros(self.m)))  # [B,m,H',W']
        psq = T.reshape(T.sum_(T.mul(self.prototypes, self.prototypes), axis=(1, 2, 3)), (1, self.m, 1, 1))
        return T.relu(T.add(T.sub(window, T.mul(cross, 2.0)), psq))

    def similarity(self, z):
        """Returns (scores[B,m], maps[B,m,H',W']): log((d2+1)/(d2+eps)) per
        patch and its max over patches."""
        d2 = self.patch_distances(z)
        maps = T.log(T.div(T.add(d2, 1.0), T.add(d2, self.eps)))
        B, m = maps.value.shape[:2]
        flat = T.reshape(maps, (B, m, -1))
        scores = T.max_(flat, axis=2)
        return scores, maps


def prototype_similarity(z, layer):
    return layer.similarity(z)


def _min_over_subset(d2min, column_mask):
    """Min over selected columns of [B,m], excluding the rest via a large
    additive constant."""
    big = 1e30
    exclude = T.Node((1.0 - column_mask) * big)
    return T.min_(T.add(d2min, exclude), axis=1)


def _patch_min(layer, z):
    d2 = layer.patch_distances(z)
    B, m = d2.value.shape[:2]
    return T.min_(T.reshape(d2, (B, m, -1)), axis=2)


def cluster_sep_losses(z, labels, layer):
    """Pull some own-class patch toward each sample's nearest own prototype;
    push other-class prototypes away (negated min distance)."""
    labels = np.asarray(labels, dtype=np.int64)
    d2min = _patch_min(layer, z)
    own = (layer.class_of[None, :] == labels[:, None]).astype(np.float64)
    l_clst = T.mean(_min_over_subset(d2min, own))
    l_sep = T.mul(T.mean(_min_over_subset(d2min, 1.0 - own)), -1.0)
    return l_clst, l_sep


def domain_cluster_sep(per_env, layer):
    """Per-environment cluster/separation restricted to that domain's
    prototypes, averaged over environments.

    ``per_env`` is a list of (domain_id, z, labels).
    """
    if layer.domain_of is None:
        raise ValueError("layer has no domain assignment")
    clst_terms, sep_terms = [], []
    for domain_id, z, labels in per_env:
        cols = layer.domain_of == domain_id
        if not np.any(cols):
            raise ValueError(f"no prototypes assigned to environment {domain_id}")
        labels = np.asarray(labels, dtype=np.int64)
        d2min = _patch_min(layer, z)
        own = ((layer.class_of[None, :] == labels[:, None]) & cols[None, :]).astype(np.float64)
        other = ((layer.class_of[None, :] != labels[:, None]) & cols[None, :]).astype(np.float64)
        clst_terms.append(T.mean(_min_over_subset(d2min, own)))
        sep_terms.append(T.mul(T.mean(_min_over_subset(d2min, other)), -1.0))
    s = float(len(per_env))
    l_clst = T.mul(sum(clst_terms[1:], clst_terms[0]), 1.0 / s)
    l_sep = T.mul(sum(sep_terms[1:], sep_terms[0]), 1.0 / s)
    return l_clst, l_sep


class PrototypeClassifier:
    """Affine-free readout from similarity scores to class logits."""

    def __init__(self, weight):
        self.weight = weight if isinstance(weight, T.Node) else T.parameter(weight)

    def logits_from_scores(self, scores):
        return T.matmul(scores, T.transpose(self.weight))

    def logits_values(self, scores):
        return np.asarray(scores) @ self.weight.value.T

    def parameters(self):
        return {"proto.clf.weight": self.weight}


def init_prototype_classifier(classes, class_of, w_neg=-0.5):
    """Own-class connections 1, cross-class connections w_neg."""
    class_of = np.asarray(class_of, dtype=np.int64)
    weight = np.full((classes, class_of.shape[0]), float(w_neg))
    for j, c in enumerate(class_of):
        weight[c, j] = 1.0
    return PrototypeClassifier(weight)


def prodrop_step(scores, labels, classifier, class_of, cfg, trace=None, step=0, rng=None):
    """Drop each sample's top-p own-class prototype activations.

    Cross-class scores are never touched. Batch reversion keeps the masks
    only on the top-b samples by ground-truth confidence (the plain
    confidence rule, unscheduled).
    """
    labels = np.asarray(labels, dtype=np.int64)
    class_of = np.asarray(class_of, dtype=np.int64)
    sv = scores.value
    B, m = sv.shape
    mask = np.ones((B, m))
    for n in range(B):
        own = np.flatnonzero(class_of == labels[n])
        k = round_half_up(cfg.feature_drop * own.size)
        if k:
            order = own[np.argsort(-sv[n, own], kind="stable")]
            mask[n, order[:k]] = 0.0
    conf = (softmax_values(classifier.logits_values(sv)) * T.onehot_encode(labels, classifier.weight.value.shape[0])).sum(axis=1)
    final, kept = revert_mask(mask, conf, cfg.batch_drop)
    if trace is not None:
        import json

        trace.write(json.dumps({"step": int(step), "variant": "prodrop",
                                "zero_count": int((final == 0).sum(axis=1).max(initial=0)),
                                "kept_samples": [int(i) for i in kept]}) + "\n")
    return T.mul(scores, T.Node(final)), final, kept


def intra_loss(layer, lam_l2=1.0, lam_rho=1.0):
    """Spread pressure over unordered same-class prototype pairs:
    lam_l2 * ||pi - pj|| + lam_rho * (1 - cos(pi, pj)).

    Meant to be maximized; the harness subtracts it with its own weight.
    Identical pairs contribute zero; a zero-norm prototype takes cosine
    distance 1 by the orthogonality convention.
    """
    if lam_l2 < 0 or lam_rho < 0:
        raise ValueError("weights must be nonnegative")
    m = layer.m
    flat = T.reshape(layer.prototypes, (m, -1))
    total = T.Node(np.zeros(()))
    for i in range(m):
        for j in range(i + 1, m):
            if layer.class_of[i] != layer.class_of[j]:
                continue
            pi, pj = T.slice_rows(flat, i, i + 1), T.slice_rows(flat, j, j + 1)
            diff = T.sub(pi, pj)
            d2 = T.sum_(T.mul(diff, diff))
            if lam_l2 > 0 and d2.value > 0:
                total = T.add(total, T.mul(T.sqrt(d2), lam_l2))
            if lam_rho > 0:
                ni2 = T.sum_(T.mul(pi, pi))
                nj2 = T.sum_(T.mul(pj, pj))
                if ni2.value == 0.0 or nj2.value == 0.0:
                    total = T.add(total, lam_rho)
                else:
                    cos = T.div(T.sum_(T.mul(pi, pj)), T.mul(T.sqrt(ni2), T.sqrt(nj2)))
                    total = T.add(total, T.mul(T.sub(1.0, cos), lam_rho))
    return total


def pairwise_distances(layer):
    """Diagnostic (L2, cosine-distance) matrices, symmetric with exact
    diagonals; values only."""
    flat = layer.prototypes.value.reshape(layer.m, -1)
    m = layer.m
    l2 = np.zeros((m, m))
    cos = np.zeros((m, m))
    norms = np.linalg.norm(flat, axis=1)
    for i in range(m):
        for j in range(i + 1, m):
            l2[i, j] = l2[j, i] = np.linalg.norm(flat[i] - flat[j])
            if norms[i] == 0.0 or norms[j] == 0.0:
                cd = 1.0
            else:
                cd = 1.0 - float(flat[i] @ flat[j]) / (norms[i] * norms[j])
            cos[i, j] = cos[j, i] = cd
    return l2, cos


def export_distance_csv(path, matrix):
    rows = [",".join(repr(float(v)) for v in row) for row in matrix]
    with open(path, "w") as f:
        f.write("\n".join(rows) + "\n")


# ---------------------------------------------------------------------------
# domain ensembles


class DomainEnsemble:
    """One prototype layer + readout per training domain.

    Training routes each sample through its own domain's branch (one-hot
    aggregation); at test time branches are combined uniformly or by a
    jointly trained domain predictor.
    """

    def __init__(self, layers, classifiers, predictor=None):
        if len(layers) != len(classifiers):
            raise ValueError("need one classifier per layer")
        self.layers = layers
        self.classifiers = classifiers
        self.predictor = predictor
        self.domain_ids = list(range(len(layers)))

    def branch_logits(self, z):
        outs = []
        for layer, clf in zip(self.layers, self.classifiers):
            scores, _ = layer.similarity(z)
            outs.append(clf.logits_from_scores(scores))
        return outs

    def parameters(self):
        out = {}
        for d, (layer, clf) in enumerate(zip(self.layers, self.classifiers)):
            for k, v in layer.parameters().items():
                out[f"env{d}.{k}"] = v
            for k, v in clf.parameters().items():
                out[f"env{d}.{k}"] = v
        if self.predictor is not None:
            out.update(self.predictor.parameters())
        return out


def ensemble_forward(mode, model, z, domain=None, train=True):
    """Ensemble aggregation contract.

    uniform/predictor take a DomainEnsemble; training requires ``domain``
    (one-hot routing to that branch), testing averages branches uniformly or
    by predictor weights. masked takes a single domain-assigned
    PrototypeLayer plus its classifier as ``model=(layer, clf)``; training
    zeroes scores of prototypes outside ``domain``, testing keeps all.
    """
    if mode in ("uniform", "predictor"):
        ens = model
        if train:
            if domain is None or domain not in ens.domain_ids:
                raise ValueError(f"unknown training domain {domain!r}")
            layer, clf = ens.layers[domain], ens.classifiers[domain]
            scores, _ = layer.similarity(z)
            return clf.logits_from_scores(scores)
        branches = ens.branch_logits(z)
        if mode == "uniform":
            acc = branches[0]
            for b in branches[1:]:
                acc = T.add(acc, b)
            return T.mul(acc, 1.0 / len(branches))
        weights = T.softmax(ens.predictor.logits_from_features(z), axis=1)  # [B,s]
        acc = None
        for d, b in enumerate(branches):
            w = T.reshape(T.slice_cols(weights, d), (z.value.shape[0], 1))
            term = T.mul(b, w)
            acc = term if acc is None else T.add(acc, term)
        return acc
    if mode == "masked":
        layer, clf = model
        if layer.domain_of is None:
            raise ValueError("masked mode needs a domain-assigned layer")
        scores, _ = layer.similarity(z)
        if train:
            if domain is None or domain not in set(layer.domain_of.tolist()):
                raise ValueError(f"unknown training domain {domain!r}")
            col = (layer.domain_of == domain).astype(np.float64)
            scores = T.mul(scores, T.Node(col[None, :]))
        return clf.logits_from_scores(scores)
    raise ValueError(f"mode must be uniform|predictor|masked, got {mode!r}")
