"""Tensor core: primitive semantics, gradients, tape determinism."""

import numpy as np
import pytest

from nasforge import tensor as T


def rand(rng, *shape):
    return T.Tensor(rng.standard_normal(shape), requires_grad=True)


class TestMatmul:
    def test_identity(self):
        out = T.matmul([[1.0, 0.0], [0.0, 1.0]], [[3.0, 4.0], [5.0, 6.0]])
        np.testing.assert_array_equal(out.data, [[3.0, 4.0], [5.0, 6.0]])

    def test_hand_product(self):
        out = T.matmul([[1.0, 2.0]], [[3.0], [4.0]])
        np.testing.assert_array_equal(out.data, [[11.0]])

    def test_mismatch_names_shapes(self):
        with pytest.raises(T.ShapeError) as exc:
            T.matmul(np.zeros((2, 3)), np.zeros((4, 5)))
        assert "(2, 3)" in str(exc.value) and "(4, 5)" in str(exc.value)

    def test_gradient_rule(self):
        rng = np.random.default_rng(0)
        a, b = rand(rng, 3, 4), rand(rng, 4, 2)
        with T.Tape() as tape:
            loss = T.sum_all(T.matmul(a, b))
        T.backward(loss, tape)
        g = np.ones((3, 2))
        np.testing.assert_allclose(a.grad, g @ b.data.T)
        np.testing.assert_allclose(b.grad, a.data.T @ g)


class TestBatchedMatmul:
    def test_degenerate_batch(self):
        rng = np.random.default_rng(1)
        a, b = rng.standard_normal((1, 2, 3)), rng.standard_normal((1, 3, 2))
        out = T.batched_matmul(a, b)
        np.testing.assert_allclose(out.data[0], a[0] @ b[0])

    def test_identity_batches(self):
        m = np.arange(4.0).reshape(2, 2)
        eye = np.stack([np.eye(2), np.eye(2)])
        out = T.batched_matmul(eye, np.stack([m, m]))
        np.testing.assert_array_equal(out.data, np.stack([m, m]))

    def test_loop_oracle(self):
        rng = np.random.default_rng(2)
        a, b = rng.standard_normal((2, 3, 4)), rng.standard_normal((2, 4, 2))
        out = T.batched_matmul(a, b)
        expect = np.stack([a[i] @ b[i] for i in range(2)])
        np.testing.assert_allclose(out.data, expect)

    def test_batch_mismatch(self):
        with pytest.raises(T.ShapeError):
            T.batched_matmul(np.zeros((2, 3, 4)), np.zeros((3, 4, 2)))


class TestElementwise:
    def test_relu(self):
        np.testing.assert_array_equal(T.elementwise("relu", [-1.0, 0.0, 2.0]).data, [0.0, 0.0, 2.0])

    def test_sigmoid(self):
        np.testing.assert_allclose(T.elementwise("sigmoid", [0.0]).data, [0.5])

    def test_mul(self):
        np.testing.assert_array_equal(T.elementwise("mul", [1.0, 2.0], [3.0, 4.0]).data, [3.0, 8.0])

    def test_shape_mismatch(self):
        with pytest.raises(T.ShapeError):
            T.add(np.zeros(3), np.zeros(4))

    def test_sigmoid_extreme_inputs(self):
        out = T.sigmoid(np.array([-800.0, 800.0])).data
        assert out[0] == 0.0 and out[1] == 1.0


class TestConcat:
    def test_empty_part(self):
        out = T.concat(1, [np.zeros((4, 3)), np.zeros((4, 0))])
        assert out.shape == (4, 3)

    def test_hand_concat(self):
        out = T.concat(1, [np.array([[1.0, 2.0]]), np.array([[9.0]])])
        np.testing.assert_array_equal(out.data, [[1.0, 2.0, 9.0]])

    def test_batch_mismatch(self):
        with pytest.raises(T.ShapeError):
            T.concat(1, [np.zeros((4, 2)), np.zeros((5, 2))])

    def test_concat_then_split_identity(self):
        rng = np.random.default_rng(3)
        parts = [rng.standard_normal((2, w)) for w in (3, 0, 5)]
        joined = T.concat(1, parts)
        back = T.split_axis(joined, 1, [3, 0, 5])
        for p, b in zip(parts, back):
            np.testing.assert_array_equal(p, b.data)


class TestLayerNorm:
    def affine(self, d):
        return T.Tensor(np.ones(d)), T.Tensor(np.zeros(d))

    def test_constant_row(self):
        g, b = self.affine(4)
        out = T.layer_norm(np.full((1, 4), 7.0), g, b)
        np.testing.assert_allclose(out.data, np.zeros((1, 4)), atol=1e-12)

    def test_two_point_row(self):
        g, b = self.affine(2)
        out = T.layer_norm(np.array([[1.0, 3.0]]), g, b, eps=1e-5)
        np.testing.assert_allclose(out.data, [[-1.0, 1.0]], atol=1e-5)

    def test_output_mean_is_beta(self):
        rng = np.random.default_rng(4)
        g = T.Tensor(np.ones(6))
        b = T.Tensor(np.full(6, 0.25))
        out = T.layer_norm(rng.standard_normal((5, 6)), g, b)
        np.testing.assert_allclose(out.data.mean(axis=-1), 0.25, atol=1e-7)

    def test_active_width_zeroes_tail(self):
        rng = np.random.default_rng(5)
        g, b = self.affine(8)
        out = T.layer_norm(rng.standard_normal((3, 8)), g, b, active=5)
        assert np.all(out.data[:, 5:] == 0.0)
        np.testing.assert_allclose(out.data[:, :5].mean(axis=-1), 0.0, atol=1e-9)


class TestEmbedding:
    def test_all_zero_ids(self):
        table = T.Tensor(np.arange(6.0).reshape(3, 2))
        out = T.embedding_lookup(table, np.zeros((4, 1), dtype=np.int64))
        np.testing.assert_array_equal(out.data, np.broadcast_to(table.data[0], (4, 1, 2)))

    def test_hand_gather(self):
        table = T.Tensor(np.eye(3))
        out = T.embedding_lookup(table, np.array([[2, 1]]))
        np.testing.assert_array_equal(out.data[0], [[0, 0, 1], [0, 1, 0]])

    def test_out_of_range(self):
        table = T.Tensor(np.eye(3))
        with pytest.raises(IndexError):
            T.embedding_lookup(table, np.array([[3]]))

    def test_scatter_gradient_accumulates(self):
        table = T.Tensor(np.eye(3), requires_grad=True)
        with T.Tape() as tape:
            loss = T.sum_all(T.embedding_lookup(table, np.array([[0, 0, 1]])))
        T.backward(loss, tape)
        np.testing.assert_array_equal(table.grad.sum(axis=1), [2 * 3, 3, 0])


class TestBackward:
    def test_sum_of_weights(self):
        w = T.Tensor(np.zeros((2, 2)), requires_grad=True)
        with T.Tape() as tape:
            loss = T.sum_all(w)
        T.backward(loss, tape)
        np.testing.assert_array_equal(w.grad, np.ones((2, 2)))

    def test_hand_chain_rule(self):
        # d/dw [sigmoid(w) * x] at w=0, x=2 is 0.25 * 2
        w = T.Tensor(np.array([0.0]), requires_grad=True)
        with T.Tape() as tape:
            loss = T.sum_all(T.mul(T.sigmoid(w), T.constant([2.0])))
        T.backward(loss, tape)
        np.testing.assert_allclose(w.grad, [0.5])

    def test_unused_leaf_zero(self):
        w = T.Tensor(np.ones((2, 2)), requires_grad=True)
        u = T.Tensor(np.ones(3), requires_grad=True)
        with T.Tape() as tape:
            tape.watch(u)
            loss = T.sum_all(w)
        T.backward(loss, tape)
        np.testing.assert_array_equal(u.grad, np.zeros(3))

    def test_non_scalar_loss_rejected(self):
        w = T.Tensor(np.ones(3), requires_grad=True)
        with T.Tape() as tape:
            out = T.relu(w)
        with pytest.raises(T.ShapeError):
            T.backward(out, tape)

    def test_backward_twice_bit_identical(self):
        rng = np.random.default_rng(6)
        w = rand(rng, 4, 3)
        with T.Tape() as tape:
            loss = T.sum_all(T.sigmoid(T.matmul(T.constant(rng.standard_normal((2, 4))), w)))
        T.backward(loss, tape)
        first = w.grad.copy()
        T.backward(loss, tape)
        assert np.array_equal(first, w.grad)


class TestGradCheck:
    def test_quadratic(self):
        rng = np.random.default_rng(7)
        x = T.Tensor(rng.standard_normal(5), requires_grad=True)
        err = T.grad_check(lambda t: T.sum_all(T.mul(t, t)), x)
        assert err < 1e-7

    def test_fc_sigmoid_composite(self):
        rng = np.random.default_rng(8)
        w = T.constant(rng.standard_normal((4, 3)))
        b = T.constant(rng.standard_normal(3))
        x = T.Tensor(rng.standard_normal((2, 4)), requires_grad=True)

        def f(t):
            return T.sum_all(T.sigmoid(T.add_vec(T.matmul(t, w), b, -1)))

        assert T.grad_check(f, x) < 1e-4

    def test_relu_away_from_kink(self):
        rng = np.random.default_rng(9)
        raw = rng.standard_normal((3, 4))
        raw = np.where(np.abs(raw) < 0.05, 0.5, raw)  # keep clear of the kink
        x = T.Tensor(raw, requires_grad=True)
        assert T.grad_check(lambda t: T.sum_all(T.relu(t)), x) < 1e-4


class TestPrimitiveGradients:
    """grad_check over every remaining primitive at non-degenerate points."""

    def setup_method(self):
        self.rng = np.random.default_rng(10)

    def check(self, f, shape, tol=1e-4):
        x = T.Tensor(self.rng.standard_normal(shape) + 0.1, requires_grad=True)
        assert T.grad_check(f, x) < tol

    def test_batched_matmul(self):
        other = T.constant(self.rng.standard_normal((2, 4, 3)))
        self.check(lambda t: T.sum_all(T.sigmoid(T.batched_matmul(t, other))), (2, 3, 4))

    def test_transpose_reshape(self):
        self.check(lambda t: T.sum_all(T.mul(T.reshape(T.transpose_last2(t), (6,)),
                                             T.reshape(T.transpose_last2(t), (6,)))), (2, 3))

    def test_concat_slice_fit(self):
        def f(t):
            both = T.concat(1, [t, T.fit_axis(t, 1, 5)])
            return T.sum_all(T.mul(both, both))
        self.check(f, (2, 3))

    def test_mask_axis(self):
        self.check(lambda t: T.sum_all(T.mul(T.mask_axis(t, -1, 2), T.mask_axis(t, -1, 2))), (3, 4))

    def test_layer_norm_masked(self):
        g = T.constant(self.rng.standard_normal(6) + 1.0)
        b = T.constant(self.rng.standard_normal(6))
        self.check(lambda t: T.sum_all(T.sigmoid(T.layer_norm(t, g, b, active=4))), (3, 6), tol=2e-4)

    def test_softmax_masked(self):
        mask = np.array([True, True, False, True])
        self.check(lambda t: T.sum_all(T.mul(T.softmax_last(t, mask), T.softmax_last(t, mask))), (2, 3, 4))

    def test_triu_flatten(self):
        self.check(lambda t: T.sum_all(T.sigmoid(T.triu_flatten(T.batched_matmul(t, T.transpose_last2(t))))),
                   (2, 4, 3))

    def test_gather_axis1(self):
        idx = np.array([2, 0])
        self.check(lambda t: T.sum_all(T.sigmoid(T.gather_axis1(t, idx))), (2, 4, 3))

    def test_sum_axis_scale_sub(self):
        self.check(lambda t: T.sum_all(T.scale(T.sub(T.sum_axis(t, 1), T.constant(np.ones((2, 3)))), 0.7)),
                   (2, 4, 3))

    def test_bce_with_logits(self):
        y = np.array([1.0, 0.0, 1.0])
        self.check(lambda t: T.bce_with_logits(t, y), (3,))

    def test_add_vec_middle_axis(self):
        v = T.Tensor(self.rng.standard_normal(4), requires_grad=True)
        x = T.constant(self.rng.standard_normal((2, 4, 3)))
        assert T.grad_check(lambda t: T.sum_all(T.sigmoid(T.add_vec(x, t, 1))), v) < 1e-4


def test_softmax_rows_sum_to_one():
    rng = np.random.default_rng(11)
    p = T.softmax_last(rng.standard_normal((3, 5, 4))).data
    np.testing.assert_allclose(p.sum(axis=-1), 1.0)


def test_mask_axis_out_of_range():
    with pytest.raises(T.ShapeError):
        T.mask_axis(np.zeros((2, 3)), -1, 4)


def test_tape_records_are_topological():
    rng = np.random.default_rng(12)
    w = T.Tensor(rng.standard_normal((3, 3)), requires_grad=True)
    with T.Tape() as tape:
        h = T.relu(T.matmul(T.constant(rng.standard_normal((2, 3))), w))
        loss = T.sum_all(T.mul(h, h))
    seen = set()
    for out, inputs, _ in tape._records:
        for t in inputs:
            assert id(t) not in (id(out),)
        assert id(out) not in seen
        seen.add(id(out))
