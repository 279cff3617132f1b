"""Alignment losses: pooling thresholds, map uniformity, kernel MMD, CDANN."""

import numpy as np
import pytest

from conftest import central_diff, max_rel_err
from xdg import align
from xdg import tensor as T


class TestTapPool:
    def test_zero_threshold_equals_gap_on_positive(self, rng):
        z = rng.uniform(0.1, 2.0, size=(3, 4, 5, 5))
        got = align.tap_pool(T.Node(z), 0.0).value
        want = T.global_avg_pool(T.Node(z)).value
        assert np.max(np.abs(got - want)) < 1e-9

    def test_only_peak_survives(self):
        z = np.zeros((1, 1, 2, 2))
        z[0, 0, 1, 1] = 8.0
        assert align.tap_pool(T.Node(z), 0.5).value[0, 0] == 8.0

    def test_all_zero_channel_gives_zero(self):
        z = np.zeros((2, 3, 4, 4))
        np.testing.assert_array_equal(align.tap_pool(T.Node(z), 0.3).value, np.zeros((2, 3)))

    def test_gradient_flows_to_selected_cells(self, rng):
        z = rng.uniform(0.5, 1.5, size=(1, 1, 2, 2))

        def scalar():
            node = T.Node(z, requires_grad=True)
            out = align.tap_pool(node, 0.0)
            return T.sum_(T.mul(out, out)), node

        root, node = scalar()
        T.backward(root)
        (want,) = central_diff(lambda: scalar()[0].value.item(), [z])
        assert max_rel_err(node.grad, want) < 1e-3

    def test_rejects_bad_lambda(self, rng):
        with pytest.raises(ValueError):
            align.tap_pool(T.Node(rng.random((1, 1, 2, 2))), 1.0)


def normalized_maps(rng, B, H, W):
    m = rng.random((B, H, W)) + 0.05
    return m / m.sum(axis=(1, 2), keepdims=True)


class TestHncMapLoss:
    def test_uniform_map_hits_log_hw(self):
        maps = np.full((3, 4, 4), 1.0 / 16.0)
        assert abs(align.hnc_map_loss(T.Node(maps)).value - np.log(16)) < 1e-9

    def test_nonuniform_strictly_larger(self, rng):
        for _ in range(20):
            maps = normalized_maps(rng, 1, 3, 3)
            if np.allclose(maps, 1 / 9):
                continue
            assert align.hnc_map_loss(T.Node(maps)).value > np.log(9)

    def test_hand_value(self):
        maps = np.array([[[0.7, 0.1], [0.1, 0.1]]])
        want = -(np.log(0.7) + 3 * np.log(0.1)) / 4.0
        assert abs(align.hnc_map_loss(T.Node(maps)).value - want) < 1e-9
        assert abs(want - 1.8160) < 5e-4

    def test_kl_identity(self, rng):
        for _ in range(100):
            maps = normalized_maps(rng, 1, 4, 4)
            u = 1.0 / 16.0
            kl = np.sum(u * np.log(u / maps[0]))
            loss = align.hnc_map_loss(T.Node(maps)).value
            assert abs(kl - (loss - np.log(16))) < 1e-9

    def test_rejects_unnormalized(self, rng):
        with pytest.raises(ValueError, match="normalized"):
            align.hnc_map_loss(T.Node(rng.random((1, 3, 3)) + 1.0))


class TestHncApprox:
    def _setup(self, rng, C=4, K=3):
        clf = T.LinearClassifier(K, C, rng=rng)
        clf.weight.value = rng.normal(size=(C, K))
        z = T.Node(rng.normal(size=(2, K, 4, 4)), requires_grad=True)
        onehot = T.onehot_encode(rng.integers(0, C, 2), C)
        return clf, z, onehot

    def test_zero_weight_contributes_zero(self, rng):
        clf, z, onehot = self._setup(rng)
        out = align.hnc_approx_loss_from_features(z, clf, onehot, top_m=3, lam1=0.0)
        assert out.value == 0.0

    def test_binary_forces_single_negative(self, rng):
        clf, z, onehot = self._setup(rng, C=2)
        logits = clf.logits_values(z.value)
        sel = align.top_negative_classes(logits, onehot, top_m=1)
        np.testing.assert_array_equal(sel, 1.0 - onehot)

    def test_selection_ranks_by_confidence_with_index_ties(self):
        logits = np.array([[1.0, 5.0, 5.0, 2.0]])
        onehot = T.onehot_encode([0], 4)
        sel = align.top_negative_classes(logits, onehot, top_m=2)
        np.testing.assert_array_equal(sel[0], [0.0, 1.0, 1.0, 0.0])

    def test_top_m_bounded(self, rng):
        clf, z, onehot = self._setup(rng)
        with pytest.raises(ValueError, match="top_m"):
            align.top_negative_classes(clf.logits_values(z.value), onehot, top_m=4)

    def test_normalized_map_output(self, rng):
        clf, z, onehot = self._setup(rng)
        maps = align.hnc_negative_map(z, clf, onehot, top_m=3)
        np.testing.assert_allclose(maps.value.sum(axis=(1, 2)), 1.0, atol=1e-9)

    def test_map_loss_chain_matches_finite_differences(self, rng):
        w = rng.normal(size=(1, 3, 1, 1))
        z0 = rng.normal(size=(1, 3, 3, 3))

        def scalar():
            node = T.Node(z0, requires_grad=True)
            combined = T.relu(T.sum_(T.mul(node, T.Node(w)), axis=1))
            flat = T.softmax(T.reshape(combined, (1, 9)), axis=1)
            return align.hnc_map_loss(T.reshape(flat, (1, 3, 3))), node

        root, node = scalar()
        T.backward(root)
        (want,) = central_diff(lambda: scalar()[0].value.item(), [z0])
        assert max_rel_err(node.grad, want) < 1e-3


def mmd_double_loop(a, b, gamma):
    """O(n^2) reference for one bandwidth."""

    def kmean(x, y):
        acc = 0.0
        for xi in x:
            for yj in y:
                acc += np.exp(-gamma * np.sum((xi - yj) ** 2))
        return acc / (len(x) * len(y))

    return kmean(a, a) + kmean(b, b) - 2 * kmean(a, b)


class TestMmd:
    def test_identical_inputs_zero(self, rng):
        a = rng.normal(size=(6, 3))
        assert align.mmd_mixture(T.Node(a), T.Node(a.copy())).value <= 1e-9

    def test_bitwise_symmetric(self, rng):
        a, b = rng.normal(size=(5, 4)), rng.normal(size=(7, 4))
        ab = align.mmd_mixture(T.Node(a), T.Node(b)).value
        ba = align.mmd_mixture(T.Node(b), T.Node(a)).value
        assert ab == ba

    def test_double_loop_oracle(self, rng):
        kc = align.KernelConfig(gammas=(0.5,))
        for _ in range(5):
            n, m = rng.integers(2, 16), rng.integers(2, 16)
            a, b = rng.normal(size=(n, 4)), rng.normal(size=(m, 4))
            got = align.mmd_mixture(T.Node(a), T.Node(b), kc).value
            assert abs(got - mmd_double_loop(a, b, 0.5)) < 1e-9

    def test_far_clouds_cross_term_vanishes(self, rng):
        kc = align.KernelConfig(gammas=(0.5,))  # sigma = 1
        a = rng.normal(size=(5, 3))
        b = rng.normal(size=(5, 3)) + 1000.0

        def kernel_mean(x, y):
            acc = 0.0
            for xi in x:
                for yj in y:
                    acc += np.exp(-0.5 * np.sum((xi - yj) ** 2))
            return acc / (len(x) * len(y))

        got = align.mmd_mixture(T.Node(a), T.Node(b), kc).value
        want = kernel_mean(a, a) + kernel_mean(b, b)  # cross terms underflow to 0
        assert abs(got - want) < 1e-9

    def test_nonnegative_biased_estimator(self, rng):
        for _ in range(10):
            a, b = rng.normal(size=(4, 2)), rng.normal(size=(6, 2))
            assert align.mmd_mixture(T.Node(a), T.Node(b)).value >= -1e-9

    def test_gradient_matches_finite_differences(self, rng):
        a0, b0 = rng.normal(size=(3, 2)), rng.normal(size=(4, 2))
        kc = align.KernelConfig(gammas=(0.3, 3.0))

        def scalar():
            na, nb = T.Node(a0, requires_grad=True), T.Node(b0, requires_grad=True)
            return align.mmd_mixture(na, nb, kc), (na, nb)

        root, (na, nb) = scalar()
        T.backward(root)
        want = central_diff(lambda: scalar()[0].value.item(), [a0, b0])
        assert max_rel_err(na.grad, want[0]) < 1e-3
        assert max_rel_err(nb.grad, want[1]) < 1e-3


class TestCdann:
    def _disc(self, in_dim=6, domains=3, width=8, dropout=0.0, seed=0):
        return align.DomainDiscriminator(in_dim, domains, width=width, depth=3, dropout=dropout, seed=seed)

    def test_class_weights_hand_count(self):
        w = align.class_weights([0, 0, 0, 1], class_count=2)
        np.testing.assert_allclose(w, [2 / 3, 2 / 3, 2 / 3, 2.0])

    def test_uniform_discriminator_gives_log_domains(self, rng):
        disc = self._disc()
        for p in disc.parameters().values():
            p.value[:] = 0.0
        maps = rng.normal(size=(6, 6))
        gen, dl = align.cdann_losses(maps, [0, 1, 2, 0, 1, 2], [0, 1, 0, 1, 0, 1], disc, lam2=1.0, eta=0.0)
        assert abs(dl.value - np.log(3)) < 1e-9
        assert abs(gen.value + np.log(3)) < 1e-9

    def test_constant_output_zero_penalty(self, rng):
        disc = self._disc()
        for p in disc.parameters().values():
            p.value[:] = 0.0
        maps = rng.normal(size=(4, 6))
        _, dl_eta0 = align.cdann_losses(maps, [0, 1, 2, 0], [0, 1, 0, 1], disc, lam2=1.0, eta=0.0)
        _, dl_eta9 = align.cdann_losses(maps, [0, 1, 2, 0], [0, 1, 0, 1], disc, lam2=1.0, eta=9.0)
        assert abs(dl_eta0.value - dl_eta9.value) < 1e-12

    def test_input_gradient_matches_finite_differences(self, rng):
        disc = self._disc(in_dim=4, width=6)
        maps0 = rng.normal(size=(3, 4))
        dlab, clab = [0, 1, 2], [0, 1, 1]
        donehot = T.onehot_encode(dlab, 3)
        weights = align.class_weights(clab, class_count=2)
        drop = disc.draw_dropout_masks(3, None)
        node = T.Node(maps0, requires_grad=True)
        wce, penalty, g = align._disc_forward_with_adjoint(node, disc, donehot, weights, drop)

        def scalar():
            w2, _, _ = align._disc_forward_with_adjoint(T.Node(maps0, requires_grad=True), disc, donehot, weights, drop)
            return w2.value.item()

        (fd,) = central_diff(scalar, [maps0])
        assert max_rel_err(g.value, fd) < 1e-3
        assert abs(penalty.value - np.mean(np.sum(g.value**2, axis=1))) < 1e-12

    def test_penalty_parameter_gradient_matches_fd(self, rng):
        disc = self._disc(in_dim=3, width=4, seed=3)
        maps = rng.normal(size=(2, 3)) + 0.5
        donehot = T.onehot_encode([0, 2], 3)
        weights = align.class_weights([0, 1], class_count=2)
        drop = disc.draw_dropout_masks(2, None)
        w0 = disc.hidden[0][0]

        def penalty_node():
            _, pen, _ = align._disc_forward_with_adjoint(T.Node(maps), disc, donehot, weights, drop)
            return pen

        root = penalty_node()
        T.backward(root)
        (fd,) = central_diff(lambda: penalty_node().value.item(), [w0.value])
        assert max_rel_err(w0.grad, fd) < 2e-3

    def test_gen_addend_scales_with_lam2(self, rng):
        disc = self._disc()
        maps = rng.normal(size=(3, 6))
        g1, _ = align.cdann_losses(maps, [0, 1, 2], [0, 1, 0], disc, lam2=1.0, eta=0.0)
        g5, _ = align.cdann_losses(maps, [0, 1, 2], [0, 1, 0], disc, lam2=5.0, eta=0.0)
        assert abs(g5.value - 5.0 * g1.value) < 1e-12

    def test_domain_label_range_checked(self, rng):
        disc = self._disc(domains=2)
        with pytest.raises(ValueError, match="domain labels"):
            align.cdann_losses(rng.normal(size=(2, 6)), [0, 5], [0, 1], disc, 1.0, 0.0)
