import math

import numpy as np
import pytest

from drnet.network import (
    ERROR_LOSS_WEIGHTS,
    MergeGate,
    PointClassifier,
    PointSegmenter,
    classify,
    merge,
    segment,
    softmax_cross_entropy,
    total_loss,
)
from drnet.numerics import ParamStore, RandomStream, rng_uniform

SMALL = dict(
    fr_widths=(8, 8, 12, 16),
    embed=16,
    k=3,
    d_max=2,
    k_mr=3,
    mr_widths=(12, 16, 16),
    dropout=0.0,
    dtype=np.float64,
)


def small_classifier(seed=5, n_classes=4):
    return PointClassifier(n_classes=n_classes, head_widths=(16, 12), seed=seed, **SMALL)


def small_segmenter(seed=5):
    return PointSegmenter(
        n_parts=5, n_categories=2, head_widths=(16, 12), seed=seed, **SMALL
    )


def random_cloud(seed, n):
    return rng_uniform(seed, -1.0, 1.0, (n, 3))


class TestFrBranch:
    def test_desk_shapes_and_losses(self):
        model = small_classifier()
        coords = random_cloud(1, 64)[None]
        f_fr, lers, dils, f1 = model.fr.forward(coords, True)
        assert f_fr.shape == (1, 64, 16)
        assert f1.shape == (1, 64, 8)
        assert len(lers) == 4 and all(l >= 0.0 for l in lers)

    def test_default_concat_width_is_512(self):
        # 4 modules at widths 64+64+128+256 feed the fuse layer
        model = PointClassifier(n_classes=2, k=3, d_max=2, dtype=np.float32, seed=1)
        assert model.fr.fuse.linear.weight.value.shape == (256, 512)

    def test_first_module_receives_gradient(self):
        model = small_classifier(seed=6)
        coords = random_cloud(2, 32)[None]
        model.store.zero_grad()
        model.loss_and_grad(coords, np.array([1]), True, None, ERROR_LOSS_WEIGHTS)
        g = model.store.get("fr.em1.edge0.weight").grad
        assert np.abs(g).max() > 0.0


class TestMrBranch:
    def test_output_shape_and_resolutions(self):
        model = small_classifier(seed=7)
        coords = random_cloud(3, 64)[None]
        f1 = rng_uniform(4, -1.0, 1.0, (1, 64, 8))
        out = model.mr.forward(f1, coords, True)
        assert out.shape == (1, 64, 16)

    def test_padding_policy_for_ragged_sizes(self):
        model = small_classifier(seed=8)
        coords = random_cloud(5, 24)[None]
        f1 = rng_uniform(6, -1.0, 1.0, (1, 24, 8))
        out = model.mr.forward(f1, coords, True)
        assert out.shape == (1, 24, 16)
        df1, dcoords = model.mr.backward(np.ones_like(out))
        assert df1.shape == f1.shape and dcoords.shape == coords.shape


class TestMerge:
    def test_zero_gate_halves(self):
        gate = MergeGate(ParamStore(), 6, 4, np.float64, 9)
        gate.linear.weight.value[...] = 0.0
        f_fr = rng_uniform(7, -1.0, 1.0, (5, 4))
        f_mr = rng_uniform(8, -1.0, 1.0, (5, 6))
        assert np.allclose(merge(f_fr, f_mr, gate), 0.5 * f_fr)

    def test_saturated_gate_passes_through(self):
        gate = MergeGate(ParamStore(), 6, 4, np.float64, 10)
        gate.linear.weight.value[...] = 0.0
        gate.linear.bias.value[...] = 60.0
        f_fr = rng_uniform(9, -1.0, 1.0, (5, 4))
        f_mr = rng_uniform(10, -1.0, 1.0, (5, 6))
        assert np.allclose(merge(f_fr, f_mr, gate), f_fr)

    def test_hand_computed_two_points(self):
        gate = MergeGate(ParamStore(), 3, 3, np.float64, 11)
        gate.linear.weight.value[...] = np.eye(3)
        gate.linear.bias.value[...] = 0.0
        f_fr = np.array([[1.0, 2.0, -1.0], [0.5, 0.0, 4.0]])
        f_mr = np.array([[0.0, 1.0, -2.0], [-1.0, 3.0, 0.5]])
        pooled = np.array([0.0, 3.0, 0.5])
        s = 1.0 / (1.0 + np.exp(-pooled))
        assert np.allclose(merge(f_fr, f_mr, gate), f_fr * s)

    def test_gate_strictly_shrinks_magnitudes(self):
        gate = MergeGate(ParamStore(), 6, 4, np.float64, 12)
        f_fr = rng_uniform(11, -1.0, 1.0, (8, 4))
        f_mr = rng_uniform(12, -1.0, 1.0, (8, 6))
        f_dr = merge(f_fr, f_mr, gate)
        nonzero = f_fr != 0.0
        assert np.all(np.abs(f_dr[nonzero]) < np.abs(f_fr[nonzero]))
        assert np.all(np.sign(f_dr[nonzero]) == np.sign(f_fr[nonzero]))


class TestLosses:
    def test_paper_weights(self):
        assert ERROR_LOSS_WEIGHTS == (0.1, 0.01, 0.01, 0.01)

    def test_zero_module_losses_reduce_to_ce(self):
        logits = rng_uniform(13, -1.0, 1.0, (6, 4))
        targets = np.array([0, 1, 2, 3, 0, 1])
        ce, _, _ = softmax_cross_entropy(logits, targets)
        assert total_loss(logits, targets, (0.0, 0.0, 0.0, 0.0)) == pytest.approx(ce)

    def test_uniform_logits_give_log_c(self):
        logits = np.zeros((5, 7))
        targets = np.array([0, 6, 3, 2, 1])
        assert total_loss(logits, targets, (0.0,) * 4) == pytest.approx(math.log(7))

    def test_composition_arithmetic(self):
        logits = rng_uniform(14, -1.0, 1.0, (4, 3))
        targets = np.array([0, 1, 2, 0])
        ce, _, _ = softmax_cross_entropy(logits, targets)
        got = total_loss(logits, targets, (1.0, 2.0, 3.0, 4.0))
        assert got == pytest.approx(ce + 0.1 * 1 + 0.01 * (2 + 3 + 4))

    def test_target_out_of_range_rejected(self):
        with pytest.raises(ValueError):
            total_loss(np.zeros((2, 3)), np.array([0, 3]), (0.0,) * 4)

    def test_wrong_loss_count_rejected(self):
        with pytest.raises(ValueError):
            total_loss(np.zeros((1, 2)), np.array([0]), (0.0, 0.0))

    def test_softmax_gradient_rows_sum_to_zero(self):
        logits = rng_uniform(15, -2.0, 2.0, (5, 4))
        _, dlogits, _ = softmax_cross_entropy(logits, np.array([0, 1, 2, 3, 0]))
        assert np.allclose(dlogits.sum(axis=1), 0.0, atol=1e-12)


class TestHeads:
    def test_classify_shape(self):
        model = small_classifier(seed=13)
        assert classify(random_cloud(16, 32), model).shape == (4,)

    def test_segment_shape(self):
        model = small_segmenter(seed=14)
        logits = segment(random_cloud(17, 32), np.array([0.0, 1.0]), model)
        assert logits.shape == (32, 5)

    def test_classification_permutation_invariant(self):
        model = small_classifier(seed=15)
        for trial in range(5):
            coords = random_cloud(100 + trial, 32)
            perm = RandomStream(200 + trial).permutation(32)
            a = classify(coords, model)
            b = classify(coords[perm], model)
            assert np.max(np.abs(a - b)) < 1e-5

    def test_segmentation_permutation_equivariant(self):
        model = small_segmenter(seed=16)
        onehot = np.array([1.0, 0.0])
        for trial in range(5):
            coords = random_cloud(300 + trial, 32)
            perm = RandomStream(400 + trial).permutation(32)
            a = segment(coords, onehot, model)
            b = segment(coords[perm], onehot, model)
            assert np.array_equal(a[perm], b)

    def test_training_with_dropout_needs_rng(self):
        model = PointClassifier(
            n_classes=2, head_widths=(8, 8), seed=17,
            **{**SMALL, "dropout": 0.5},
        )
        with pytest.raises(ValueError):
            model.logits(random_cloud(18, 16)[None], training=True, rng=None)

    def test_state_dict_round_trip(self):
        model = small_classifier(seed=18)
        state = model.state_dict()
        other = small_classifier(seed=99)
        other.load_state_dict(state)
        coords = random_cloud(19, 24)
        assert np.array_equal(classify(coords, model), classify(coords, other))
