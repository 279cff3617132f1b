"""Masking engine vs an independently coded straight-line oracle.

The oracle computes target gradients analytically for a GAP+linear
classifier (no autodiff), picks order statistics with python ``sorted``
(no numpy argsort), and walks the algorithm line by line. Power-of-two
feature grids keep pooling arithmetic exact so comparisons can be bitwise.
"""

import io
import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import central_diff, max_rel_err
from xdg import challenge as ch
from xdg import tensor as T


def make_classifier(rng, K, C):
    clf = T.LinearClassifier(K, C, rng=rng)
    clf.weight.value = rng.normal(size=(C, K))
    clf.bias.value = rng.normal(size=C) * 0.1
    return clf


def softmax_rows(x):
    e = np.exp(x - x.max(axis=1, keepdims=True))
    return e / e.sum(axis=1, keepdims=True)


# ---------------------------------------------------------------------------
# straight-line oracle


def oracle_top_indices(scores, k):
    pairs = sorted(range(len(scores)), key=lambda i: (-scores[i], i))
    return set(pairs[:k])


def oracle_round(x):
    return int(np.floor(x + 0.5))


def oracle_gap_logits(z, W, bias):
    B, K, H, Wd = z.shape
    logits = np.zeros((B, W.shape[0]))
    for n in range(B):
        pooled = z[n].mean(axis=(1, 2))
        for c in range(W.shape[0]):
            logits[n, c] = pooled @ W[c] + bias[c]
    return logits


def oracle_target_gradient(z, W, onehot):
    """Analytic d(gt logit)/dz for pooling + affine: W[y,k] / (H*W)."""
    B, K, H, Wd = z.shape
    g = np.zeros_like(z)
    for n in range(B):
        y = int(onehot[n].argmax())
        for k in range(K):
            g[n, k, :, :] = W[y, k] / (H * Wd)
    return g


def oracle_change(z, mask, W, bias, onehot):
    before = softmax_rows(oracle_gap_logits(z, W, bias))
    after = softmax_rows(oracle_gap_logits(z * mask, W, bias))
    return ((before - after) * onehot).sum(axis=1)


def oracle_rsc(z, W, bias, onehot, p, b, mode):
    B, K, H, Wd = z.shape
    g = oracle_target_gradient(z, W, onehot)
    mask = np.ones_like(z)
    for n in range(B):
        if mode == "spatial":
            scores = g[n].mean(axis=0).ravel()
            zero = oracle_top_indices(scores, oracle_round(p * H * Wd))
            for flat in zero:
                mask[n, :, flat // Wd, flat % Wd] = 0.0
        else:
            scores = g[n].mean(axis=(1, 2))
            zero = oracle_top_indices(scores, oracle_round(p * K))
            for k in zero:
                mask[n, k] = 0.0
    c = oracle_change(z, mask, W, bias, onehot)
    kept = oracle_top_indices(c, oracle_round(b * B))
    for n in range(B):
        if n not in kept:
            mask[n] = 1.0
    return z * mask, mask


def oracle_divcam(z, W, bias, onehot, p, b):
    B, K, H, Wd = z.shape
    g = oracle_target_gradient(z, W, onehot)
    mask = np.ones_like(z)
    for n in range(B):
        importance = g[n].mean(axis=(1, 2))
        m = np.zeros((H, Wd))
        for k in range(K):
            m += importance[k] * z[n, k]
        m = np.maximum(m, 0.0)
        zero = oracle_top_indices(m.ravel(), oracle_round(p * H * Wd))
        for flat in zero:
            mask[n, :, flat // Wd, flat % Wd] = 0.0
    conf = (softmax_rows(oracle_gap_logits(z, W, bias)) * onehot).sum(axis=1)
    kept = oracle_top_indices(conf, oracle_round(b * B))
    for n in range(B):
        if n not in kept:
            mask[n] = 1.0
    return z * mask, mask


def random_batch(rng, B=5, K=4, H=4, C=3):
    z = rng.normal(size=(B, K, H, H))
    labels = rng.integers(0, C, size=B)
    return z, T.onehot_encode(labels, C)


# ---------------------------------------------------------------------------


class TestTargetGradient:
    def test_zero_weights_zero_gradient(self, rng):
        clf = make_classifier(rng, 3, 2)
        clf.weight.value[:] = 0.0
        z = T.Node(rng.normal(size=(2, 3, 2, 2)), requires_grad=True)
        g = ch.target_gradient(z, clf, T.onehot_encode([0, 1], 2))
        np.testing.assert_array_equal(g, np.zeros_like(z.value))

    def test_analytic_single_cell(self, rng):
        clf = make_classifier(rng, 2, 3)
        z = T.Node(rng.normal(size=(2, 2, 1, 1)), requires_grad=True)
        onehot = T.onehot_encode([2, 0], 3)
        g = ch.target_gradient(z, clf, onehot)
        np.testing.assert_allclose(g[0, :, 0, 0], clf.weight.value[2], atol=1e-12)
        np.testing.assert_allclose(g[1, :, 0, 0], clf.weight.value[0], atol=1e-12)

    def test_matches_finite_differences(self, rng):
        clf = make_classifier(rng, 4, 3)
        zv = rng.normal(size=(2, 4, 2, 2))
        onehot = T.onehot_encode([1, 2], 3)
        g = ch.target_gradient(T.Node(zv, requires_grad=True), clf, onehot)

        def score():
            return float((clf.logits_values(zv) * onehot).sum())

        (fd,) = central_diff(score, [zv])
        assert max_rel_err(g, fd) < 1e-3

    def test_probe_leaves_parameter_grads_clean(self, rng):
        clf = make_classifier(rng, 3, 2)
        z = T.Node(rng.normal(size=(2, 3, 2, 2)), requires_grad=True)
        ch.target_gradient(z, clf, T.onehot_encode([0, 1], 2))
        assert np.all(clf.weight.grad == 0.0) and np.all(clf.bias.grad == 0.0)


class TestPoolGradient:
    def test_constant(self):
        g = np.full((1, 3, 2, 2), 5.0)
        np.testing.assert_array_equal(ch.pool_gradient(g, "spatial"), np.full((1, 2, 2), 5.0))
        np.testing.assert_array_equal(ch.pool_gradient(g, "channel"), np.full((1, 3), 5.0))

    def test_channel_mean_at_location(self):
        g = np.zeros((1, 2, 1, 1))
        g[0, :, 0, 0] = [1.0, 3.0]
        assert ch.pool_gradient(g, "spatial")[0, 0, 0] == 2.0

    def test_spatial_mean_per_channel(self):
        g = np.array([0.0, 0.0, 4.0, 4.0]).reshape(1, 1, 2, 2)
        assert ch.pool_gradient(g, "channel")[0, 0] == 2.0


class TestPercentileMask:
    def test_p_zero_all_ones(self, rng):
        m = ch.percentile_mask(rng.normal(size=(3, 7)), 0.0)
        np.testing.assert_array_equal(m, np.ones((3, 7)))

    def test_top_three_of_ten(self):
        scores = np.arange(1.0, 11.0)[None, :]
        m = ch.percentile_mask(scores, 0.3)
        np.testing.assert_array_equal(np.flatnonzero(m[0] == 0), [7, 8, 9])

    def test_all_ties_mask_leading_indices(self):
        m = ch.percentile_mask(np.zeros((1, 4)), 0.5)
        np.testing.assert_array_equal(m[0], [0.0, 0.0, 1.0, 1.0])

    @settings(max_examples=60, deadline=None)
    @given(
        n=st.integers(1, 40),
        p=st.floats(0.0, 0.999),
        ties=st.booleans(),
        seed=st.integers(0, 10**6),
    )
    def test_cardinality_exact(self, n, p, ties, seed):
        r = np.random.default_rng(seed)
        scores = np.zeros((2, n)) if ties else r.normal(size=(2, n))
        m = ch.percentile_mask(scores, p)
        want = int(np.floor(p * n + 0.5))
        assert set(np.unique(m)) <= {0.0, 1.0}
        np.testing.assert_array_equal((m == 0).sum(axis=1), [want, want])


class TestChangeVector:
    def test_all_ones_mask(self, rng):
        clf = make_classifier(rng, 3, 2)
        z, onehot = rng.normal(size=(4, 3, 2, 2)), T.onehot_encode([0, 1, 1, 0], 2)
        c = ch.change_vector(z, np.ones_like(z), clf, onehot)
        np.testing.assert_array_equal(c, np.zeros(4))

    def test_masking_the_evidence_hurts(self, rng):
        clf = T.LinearClassifier(1, 2, rng=rng)
        clf.weight.value = np.array([[2.0], [-2.0]])
        clf.bias.value[:] = 0.0
        z = np.full((1, 1, 2, 2), 3.0)
        mask = np.zeros_like(z)
        c = ch.change_vector(z, mask, clf, T.onehot_encode([0], 2))
        assert c[0] > 0

    def test_matches_double_forward_oracle(self, rng):
        clf = make_classifier(rng, 4, 3)
        z, onehot = random_batch(rng)
        mask = (rng.random(z.shape) > 0.3).astype(float)
        got = ch.change_vector(z, mask, clf, onehot)
        want = oracle_change(z, mask, clf.weight.value, clf.bias.value, onehot)
        assert np.max(np.abs(got - want)) < 1e-9

    def test_bounded(self, rng):
        clf = make_classifier(rng, 4, 3)
        for _ in range(10):
            z, onehot = random_batch(rng)
            mask = (rng.random(z.shape) > 0.5).astype(float)
            c = ch.change_vector(z * 10, mask, clf, onehot)
            assert np.all(c >= -1.0) and np.all(c <= 1.0)


class TestRevertMask:
    def test_b_zero_reverts_all(self, rng):
        mask = (rng.random((4, 3)) > 0.5).astype(float)
        out, kept = ch.revert_mask(mask, rng.normal(size=4), 0.0)
        np.testing.assert_array_equal(out, np.ones((4, 3)))
        assert kept.size == 0

    def test_b_one_keeps_all(self, rng):
        mask = (rng.random((4, 3)) > 0.5).astype(float)
        out, kept = ch.revert_mask(mask, rng.normal(size=4), 1.0)
        np.testing.assert_array_equal(out, mask)
        np.testing.assert_array_equal(kept, np.arange(4))

    def test_keeps_top_half(self):
        mask = np.zeros((4, 2))
        out, kept = ch.revert_mask(mask, np.array([0.9, 0.1, 0.5, 0.7]), 0.5)
        np.testing.assert_array_equal(kept, [0, 3])
        np.testing.assert_array_equal(out[[1, 2]], np.ones((2, 2)))
        np.testing.assert_array_equal(out[[0, 3]], np.zeros((2, 2)))

    def test_keep_count_exact(self, rng):
        for trial in range(50):
            B = int(rng.integers(1, 20))
            b = float(rng.random())
            mask = np.zeros((B, 3))
            _, kept = ch.revert_mask(mask, rng.normal(size=B), b)
            assert kept.size == int(np.floor(b * B + 0.5))

    def test_monotone_nested_keep_sets(self, rng):
        c = rng.normal(size=12)
        mask = np.zeros((12, 2))
        prev = set()
        for b in np.linspace(0, 1, 13):
            _, kept = ch.revert_mask(mask, c, float(b))
            assert prev <= set(kept.tolist())
            prev = set(kept.tolist())


class TestSelectBatchScores:
    def test_variant_c_zero_when_unmasked(self, rng):
        logits = rng.normal(size=(5, 3))
        onehot = T.onehot_encode(rng.integers(0, 3, 5), 3)
        c = ch.select_batch_scores("C", logits, logits, onehot)
        np.testing.assert_allclose(c, 0.0, atol=1e-15)

    def test_variant_b_is_gt_confidence(self, rng):
        logits = rng.normal(size=(5, 3))
        onehot = T.onehot_encode(rng.integers(0, 3, 5), 3)
        c = ch.select_batch_scores("B", logits, None, onehot)
        want = (softmax_rows(logits) * onehot).sum(axis=1)
        assert np.max(np.abs(c - want)) < 1e-12

    def test_variant_t_never_keeps_misclassified(self, rng):
        logits = np.array([[3.0, 0.0], [0.0, 3.0], [3.0, 0.0], [0.0, 3.0]])
        onehot = T.onehot_encode([0, 0, 1, 1], 2)  # samples 1 and 2 are wrong
        mask = np.zeros((4, 2))
        for _ in range(1000):
            scores = ch.select_batch_scores("T", logits, None, onehot, rng=rng)
            _, kept = ch.revert_mask(mask, scores, 0.5)
            assert not ({1, 2} & set(kept.tolist()))


class TestLinearSchedule:
    def test_endpoints_and_midpoint(self):
        assert ch.linear_schedule(0, 10, 0.8) == 0.0
        assert ch.linear_schedule(10, 10, 0.8) == 0.8
        assert abs(ch.linear_schedule(5, 10, 0.8) - 0.4) < 1e-15

    def test_rejects_bad_range(self):
        with pytest.raises(ValueError):
            ch.linear_schedule(5, 0, 0.5)
        with pytest.raises(ValueError):
            ch.linear_schedule(-1, 10, 0.5)


class TestRscStep:
    def test_p_zero_is_identity(self, rng):
        clf = make_classifier(rng, 4, 3)
        z, onehot = random_batch(rng)
        cfg = ch.ChallengeConfig(feature_drop=0.0, batch_drop=0.5, rsc_mode="channel")
        res = ch.rsc_step(T.Node(z, requires_grad=True), clf, onehot, cfg)
        np.testing.assert_array_equal(res.features.value, z)

    def test_channel_mode_zeroes_one_of_four(self, rng):
        clf = make_classifier(rng, 4, 3)
        z, onehot = random_batch(rng, B=6, K=4)
        cfg = ch.ChallengeConfig(feature_drop=0.25, batch_drop=1.0, rsc_mode="channel")
        res = ch.rsc_step(T.Node(z), clf, onehot, cfg)
        per_sample = (res.mask[:, :, 0, 0] == 0).sum(axis=1)
        np.testing.assert_array_equal(per_sample, np.ones(6))

    def test_mask_constant_over_spatial_in_channel_mode(self, rng):
        clf = make_classifier(rng, 4, 3)
        z, onehot = random_batch(rng)
        cfg = ch.ChallengeConfig(feature_drop=0.5, batch_drop=1.0, rsc_mode="channel")
        res = ch.rsc_step(T.Node(z), clf, onehot, cfg)
        assert np.all(res.mask == res.mask[:, :, :1, :1])

    @pytest.mark.parametrize("mode", ["spatial", "channel"])
    def test_matches_straight_line_oracle(self, mode):
        rng = np.random.default_rng(42)
        for trial in range(20):
            B, K, H, C = (int(rng.integers(2, 7)), int(rng.integers(2, 6)), 4, 3)
            z = rng.normal(size=(B, K, H, H))
            onehot = T.onehot_encode(rng.integers(0, C, B), C)
            clf = make_classifier(rng, K, C)
            p, b = float(rng.uniform(0, 0.9)), float(rng.random())
            cfg = ch.ChallengeConfig(feature_drop=p, batch_drop=b, rsc_mode=mode)
            res = ch.rsc_step(T.Node(z), clf, onehot, cfg)
            want, want_mask = oracle_rsc(z, clf.weight.value, clf.bias.value, onehot, p, b, mode)
            np.testing.assert_array_equal(res.mask, want_mask)
            np.testing.assert_array_equal(res.features.value, want)

    def test_alternate_flips_coin(self, rng):
        clf = make_classifier(rng, 4, 2)
        z, onehot = random_batch(rng, C=2)
        cfg = ch.ChallengeConfig(feature_drop=0.25, batch_drop=1.0, rsc_mode="alternate")
        modes = {ch.rsc_step(T.Node(z), clf, onehot, cfg, rng=rng).mode for _ in range(40)}
        assert modes == {"spatial", "channel"}

    def test_previous_layer_probe_downsamples(self, rng):
        model = T.build_cnn(in_channels=1, classes=2, channels=4, blocks=2, seed=0)
        x = rng.normal(size=(3, 1, 16, 16))
        _, z, z_prev = model.forward(x)
        onehot = T.onehot_encode([0, 1, 0], 2)
        cfg = ch.ChallengeConfig(feature_drop=0.25, batch_drop=1.0, rsc_mode="spatial")
        res = ch.rsc_step(z, model.classifier, onehot, cfg, z_prev=z_prev)
        assert res.mask.shape == z.value.shape
        assert np.all((res.mask == 0).sum(axis=(2, 3))[:, 0] == round(0.25 * 4 * 4))


class TestDivcamStep:
    def test_p_zero_identity(self, rng):
        clf = make_classifier(rng, 4, 3)
        z, onehot = random_batch(rng)
        cfg = ch.ChallengeConfig(feature_drop=0.0, batch_drop=0.3)
        res = ch.divcam_step(T.Node(z), clf, onehot, cfg)
        np.testing.assert_array_equal(res.features.value, z)

    def test_masks_top_cam_cells(self, rng):
        clf = make_classifier(rng, 4, 3)
        z, onehot = random_batch(rng, B=1)
        cfg = ch.ChallengeConfig(feature_drop=0.25, batch_drop=1.0)
        res = ch.divcam_step(T.Node(z), clf, onehot, cfg)
        g = oracle_target_gradient(z, clf.weight.value, onehot)
        m = np.maximum(np.einsum("k,khw->hw", g[0].mean(axis=(1, 2)), z[0]), 0.0)
        want_zero = oracle_top_indices(m.ravel(), 4)
        got_zero = set(np.flatnonzero(res.mask[0, 0].ravel() == 0).tolist())
        assert got_zero == want_zero

    def test_mask_duplicated_across_channels(self, rng):
        clf = make_classifier(rng, 4, 3)
        z, onehot = random_batch(rng)
        cfg = ch.ChallengeConfig(feature_drop=0.5, batch_drop=1.0)
        res = ch.divcam_step(T.Node(z), clf, onehot, cfg)
        assert np.all(res.mask == res.mask[:, :1, :, :])

    def test_matches_straight_line_oracle(self):
        rng = np.random.default_rng(7)
        for trial in range(20):
            B, K, C = int(rng.integers(2, 8)), int(rng.integers(2, 6)), 3
            z = rng.normal(size=(B, K, 4, 4))
            onehot = T.onehot_encode(rng.integers(0, C, B), C)
            clf = make_classifier(rng, K, C)
            p, b = float(rng.uniform(0, 0.9)), float(rng.random())
            cfg = ch.ChallengeConfig(feature_drop=p, batch_drop=b, score_rule="B")
            res = ch.divcam_step(T.Node(z), clf, onehot, cfg)
            want, want_mask = oracle_divcam(z, clf.weight.value, clf.bias.value, onehot, p, b)
            np.testing.assert_array_equal(res.mask, want_mask)
            np.testing.assert_array_equal(res.features.value, want)

    def test_per_domain_keep_counts(self, rng):
        clf = make_classifier(rng, 4, 3)
        z, onehot = random_batch(rng, B=10)
        domains = np.array([0] * 6 + [1] * 4)
        cfg = ch.ChallengeConfig(feature_drop=0.25, batch_drop=0.5, per_domain=True)
        res = ch.divcam_step(T.Node(z), clf, onehot, cfg, domains=domains)
        kept = set(res.kept.tolist())
        assert len(kept & set(range(6))) == 3
        assert len(kept & set(range(6, 10))) == 2

    def test_all_zero_map_masks_leading_cells(self, rng):
        clf = make_classifier(rng, 4, 3)
        clf.weight.value[:] = 0.0  # CAM becomes all zeros
        z, onehot = random_batch(rng, B=2)
        cfg = ch.ChallengeConfig(feature_drop=0.25, batch_drop=1.0)
        res = ch.divcam_step(T.Node(z), clf, onehot, cfg)
        want = np.ones((4, 4))
        want.ravel()[:4] = 0
        np.testing.assert_array_equal(res.mask[0, 0], want)

    def test_schedule_ramps_keep_count(self, rng):
        clf = make_classifier(rng, 4, 3)
        z, onehot = random_batch(rng, B=8)
        cfg = ch.ChallengeConfig(feature_drop=0.25, batch_drop=1.0, schedule=True)
        res0 = ch.divcam_step(T.Node(z), clf, onehot, cfg, step=0, total=100)
        res1 = ch.divcam_step(T.Node(z), clf, onehot, cfg, step=100, total=100)
        assert res0.kept.size == 0 and res1.kept.size == 8

    def test_trace_records(self, rng):
        clf = make_classifier(rng, 4, 3)
        z, onehot = random_batch(rng, B=3)
        buf = io.StringIO()
        cfg = ch.ChallengeConfig(feature_drop=0.25, batch_drop=1.0)
        ch.divcam_step(T.Node(z), clf, onehot, cfg, step=17, trace=buf)
        rec = json.loads(buf.getvalue())
        assert rec["step"] == 17 and rec["zero_count"] == 4 and rec["kept_samples"] == [0, 1, 2]
