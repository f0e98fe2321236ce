import numpy as np
import pytest

from drnet.layers import (
    BackProjection,
    BatchNorm,
    EmModule,
    em_forward,
    error_loss,
    graph_encode,
    max_pool_neighbors,
)
from drnet.numerics import ParamStore, rng_uniform


def random_cloud(seed, n, c=3):
    return rng_uniform(seed, -1.0, 1.0, (n, c))


class TestGraphEncode:
    def test_self_edge_is_centroid_and_zero(self):
        p = random_cloud(1, 6, 4)
        idx = np.tile(np.arange(6)[:, None], (1, 3))  # all neighbors = self
        g = graph_encode(p, idx)
        assert np.allclose(g[:, :, :4], p[:, None, :])
        assert np.allclose(g[:, :, 4:], 0.0)

    def test_translation_leaves_relative_half(self):
        p = random_cloud(2, 8, 3)
        idx = np.stack([(np.arange(3) + i) % 8 for i in range(8)])
        g = graph_encode(p, idx)
        g2 = graph_encode(p + np.array([10.0, -3.0, 0.5]), idx)
        assert np.allclose(g[:, :, 3:], g2[:, :, 3:], atol=1e-12)

    def test_hand_computed_toy(self):
        p = np.array([[0.0, 0.0], [1.0, 0.0], [0.0, 2.0]])
        idx = np.array([[0, 1], [1, 2], [2, 0]])
        g = graph_encode(p, idx)
        want = np.array(
            [
                [[0, 0, 0, 0], [0, 0, 1, 0]],
                [[1, 0, 0, 0], [1, 0, -1, 2]],
                [[0, 2, 0, 0], [0, 2, 0, -2]],
            ],
            dtype=float,
        )
        assert np.array_equal(g, want)

    def test_bad_index_rejected(self):
        with pytest.raises(ValueError):
            graph_encode(random_cloud(3, 4), np.array([[0, 4]]))


class TestMaxPoolNeighbors:
    def test_k1_identity(self):
        g = rng_uniform(5, -1.0, 1.0, (7, 1, 3))
        assert np.array_equal(max_pool_neighbors(g), g[:, 0, :])

    def test_neighbor_permutation_invariant(self):
        g = rng_uniform(6, -1.0, 1.0, (5, 4, 3))
        assert np.array_equal(max_pool_neighbors(g), max_pool_neighbors(g[:, ::-1, :]))


class TestBatchNorm:
    def test_train_normalizes_batch(self):
        store = ParamStore()
        bn = BatchNorm(store, {}, "bn", 3, np.float64)
        x = rng_uniform(7, -2.0, 5.0, (40, 3))
        y = bn.forward(x, True)
        assert np.allclose(y.mean(axis=0), 0.0, atol=1e-9)
        assert np.allclose(y.std(axis=0), 1.0, atol=1e-3)

    def test_eval_uses_running_stats(self):
        store = ParamStore()
        buffers = {}
        bn = BatchNorm(store, buffers, "bn", 2, np.float64)
        x = rng_uniform(8, 0.0, 4.0, (100, 2))
        for _ in range(200):
            bn.forward(x, True)
        y = bn.forward(x, False)
        want = (x - x.mean(axis=0)) / np.sqrt(x.var(axis=0) * (100 / 99) + bn.eps)
        assert np.allclose(y, want, atol=1e-3)
        assert "bn.running_mean" in buffers and "bn.running_var" in buffers


class TestBackProjection:
    def test_zero_weights_zero_output(self):
        store = ParamStore()
        bp = BackProjection(store, {}, "bp", 3, 5, 4, np.float64, 9)
        bp.linear.weight.value[...] = 0.0
        g = rng_uniform(10, -1.0, 1.0, (1, 6, 4, 5))
        assert np.allclose(bp.forward(g, True), 0.0)

    def test_output_width_is_module_input_width(self):
        store = ParamStore()
        bp = BackProjection(store, {}, "bp", 3, 8, 4, np.float64, 11)
        g = rng_uniform(12, -1.0, 1.0, (2, 6, 4, 8))
        assert bp.forward(g, True).shape == (2, 6, 3)


class TestErrorLoss:
    def test_zero_when_equal(self):
        p = random_cloud(13, 9, 4)
        assert error_loss(p.copy(), p) == 0.0

    def test_three_four_five(self):
        assert np.isclose(error_loss(np.array([[3.0, 4.0]]), np.array([[0.0, 0.0]])), 5.0)

    def test_direct_formula_oracle(self):
        fb = random_cloud(14, 8, 5)
        p = random_cloud(15, 8, 5)
        want = np.mean([np.sqrt(np.sum((fb[i] - p[i]) ** 2)) for i in range(8)])
        assert error_loss(fb, p) == pytest.approx(want, abs=1e-12)

    def test_shape_mismatch_rejected(self):
        with pytest.raises(ValueError):
            error_loss(np.zeros((2, 3)), np.zeros((3, 2)))

    def test_positive_unless_equal(self):
        fb = random_cloud(16, 5, 3)
        p = fb.copy()
        p[2, 1] += 1e-3
        assert error_loss(fb, p) > 0.0


class TestEmModule:
    def make(self, c_in=3, c_out=64, k=4, d_max=2, seed=17, dtype=np.float64):
        store = ParamStore()
        return EmModule(store, {}, "em", c_in, c_out, k, d_max, dtype, seed)

    def test_shapes_and_nonnegative_loss(self):
        mod = self.make()
        f, ler, dil = em_forward(random_cloud(18, 32), mod, training=True)
        assert f.shape == (32, 64)
        assert ler >= 0.0
        assert dil.factors.shape == (32,)

    def test_duplicated_batch_identical_in_eval(self):
        mod = self.make(seed=19)
        p = random_cloud(20, 24)
        batch = np.stack([p, p])
        out, ler, _ = mod.forward(batch, False)
        assert np.array_equal(out[0], out[1])

    def test_neighbor_order_does_not_change_pooled(self):
        # graph_encode + max pool is invariant to within-row neighbor order
        p = random_cloud(21, 10, 4)
        idx = np.stack([(np.arange(4) + i) % 10 for i in range(10)])
        g = graph_encode(p, idx)
        shuffled = graph_encode(p, idx[:, ::-1])
        assert np.array_equal(
            max_pool_neighbors(g[:, ::-1, :]), max_pool_neighbors(shuffled)
        )

    def test_surrogate_forward_is_identity(self):
        p = random_cloud(22, 20)
        store_a, store_b = ParamStore(), ParamStore()
        a = EmModule(store_a, {}, "em", 3, 8, 3, 2, np.float64, 23, surrogate_gate=True)
        b = EmModule(store_b, {}, "em", 3, 8, 3, 2, np.float64, 23, surrogate_gate=False)
        fa, la, _ = a.forward(p[None], True)
        fb, lb, _ = b.forward(p[None], True)
        assert np.array_equal(fa, fb)
        assert la == lb

    def test_eval_forward_deterministic(self):
        mod = self.make(seed=24)
        p = random_cloud(25, 16)[None]
        f1, l1, _ = mod.forward(p, False)
        f2, l2, _ = mod.forward(p, False)
        assert np.array_equal(f1, f2) and l1 == l2
