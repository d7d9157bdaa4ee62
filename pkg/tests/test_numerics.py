import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from tstgen import numerics as nx
from tstgen.errors import ContractError, ShapeError
from tstgen.numerics import GradTape, Tensor


def leaf(a):
    return Tensor(np.asarray(a, dtype=np.float64), requires_grad=True)


class TestMatmul:
    def test_identity(self):
        A = np.random.default_rng(0).normal(size=(3, 4)).astype(np.float32)
        out = nx.matmul(Tensor(np.eye(3, dtype=np.float32)), Tensor(A))
        np.testing.assert_array_equal(out.data, A)

    def test_annihilator(self):
        A = np.random.default_rng(0).normal(size=(3, 4))
        out = nx.matmul(Tensor(A), Tensor(np.zeros((4, 2))))
        np.testing.assert_array_equal(out.data, np.zeros((3, 2)))

    def test_gradient_of_sum_vs_central_differences(self):
        rng = np.random.default_rng(1)
        report = nx.grad_check(lambda a, b: nx.sum_all(nx.matmul(a, b)),
                               [rng.uniform(-2, 2, (4, 5)), rng.uniform(-2, 2, (5, 3))], 1e-4)
        assert report.passed, report

    def test_gradient_of_sum_closed_form(self):
        # d/dA sum(A B) = 1 B^T ; d/dB sum(A B) = A^T 1
        rng = np.random.default_rng(2)
        a, b = leaf(rng.normal(size=(4, 5))), leaf(rng.normal(size=(5, 3)))
        nx.backward(nx.sum_all(nx.matmul(a, b)))
        np.testing.assert_allclose(a.grad, np.ones((4, 3)) @ b.data.T)
        np.testing.assert_allclose(b.grad, a.data.T @ np.ones((4, 3)))

    def test_shape_mismatch_names_both_shapes(self):
        with pytest.raises(ShapeError, match=r"\(2, 3\).*\(4, 5\)"):
            nx.matmul(Tensor(np.zeros((2, 3))), Tensor(np.zeros((4, 5))))

    def test_batch_dims_must_agree(self):
        with pytest.raises(ShapeError):
            nx.matmul(Tensor(np.zeros((2, 3, 4))), Tensor(np.zeros((3, 4, 5))))

    def test_shared_weight_broadcast(self):
        rng = np.random.default_rng(3)
        x, w = rng.normal(size=(2, 3, 4)), rng.normal(size=(4, 5))
        np.testing.assert_allclose(nx.matmul(Tensor(x), Tensor(w)).data, x @ w)


class TestMaskedSoftmax:
    def test_symmetric_pair(self):
        np.testing.assert_allclose(nx.masked_softmax(Tensor([0.0, 0.0])).data, [0.5, 0.5])

    def test_survivors_share_mass(self):
        out = nx.masked_softmax(Tensor([1.0, 1.0, 1.0]), np.array([False, False, True])).data
        np.testing.assert_allclose(out[:2], [0.5, 0.5], atol=1e-7)
        assert out[2] < 1e-6

    def test_closed_form_two_logits(self):
        # 1 / (1 + e^-5) evaluated independently at 64-bit
        hi = 1.0 / (1.0 + math.exp(-5.0))
        out = nx.masked_softmax(Tensor(np.array([5.0, 0.0]))).data
        np.testing.assert_allclose(out, [hi, 1 - hi], rtol=1e-12)
        np.testing.assert_allclose(out, [0.99331, 0.00669], atol=5e-6)

    def test_fully_masked_row_is_uniform_and_finite(self):
        logits = Tensor(np.array([[3.0, -1.0, 2.0], [0.5, 0.1, 0.2]], dtype=np.float32))
        mask = np.array([[True, True, True], [False, True, False]])
        out = nx.masked_softmax(logits, mask).data
        np.testing.assert_allclose(out[0], [1 / 3] * 3, rtol=1e-6)
        assert np.isfinite(out).all()
        assert out[1, 1] < 1e-6

    @settings(max_examples=50, deadline=None)
    @given(hnp.arrays(np.float64, (3, 5), elements=st.floats(-30, 30)),
           hnp.arrays(bool, (3, 5)))
    def test_rows_sum_to_one_and_masked_weights_vanish(self, logits, mask):
        out = nx.masked_softmax(Tensor(logits), mask).data
        np.testing.assert_allclose(out.sum(axis=-1), 1.0, atol=1e-5)
        partial = ~mask.all(axis=-1)
        assert (out[partial][mask[partial]] < 1e-6).all()

    def test_gradcheck_unmasked(self):
        rng = np.random.default_rng(4)
        w = rng.normal(size=(2, 4))
        report = nx.grad_check(lambda z: nx.sum_all(nx.mul(nx.masked_softmax(z), Tensor(w))),
                               [rng.uniform(-2, 2, (2, 4))], 1e-4)
        assert report.passed, report


class TestLayerNorm:
    def test_constant_row_maps_to_zero(self):
        out = nx.layer_norm(Tensor([[4.0, 4.0, 4.0]]), Tensor(np.ones(3)), Tensor(np.zeros(3)), 1e-5)
        np.testing.assert_allclose(out.data, 0.0, atol=1e-6)

    def test_unit_variance_row_is_fixed(self):
        out = nx.layer_norm(Tensor(np.array([[1.0, -1.0]])), Tensor(np.ones(2)), Tensor(np.zeros(2)), 1e-12)
        np.testing.assert_allclose(out.data, [[1.0, -1.0]], rtol=1e-10)

    def test_gradcheck_random_2x8(self):
        rng = np.random.default_rng(5)
        w = rng.normal(size=(2, 8))
        report = nx.grad_check(
            lambda x, g, b: nx.sum_all(nx.mul(nx.layer_norm(x, g, b, 1e-5), Tensor(w))),
            [rng.uniform(-2, 2, (2, 8)), rng.uniform(0.5, 1.5, 8), rng.uniform(-1, 1, 8)], 1e-4)
        assert report.passed, report

    def test_eps_must_be_positive(self):
        with pytest.raises(ContractError):
            nx.layer_norm(Tensor(np.ones((1, 2))), Tensor(np.ones(2)), Tensor(np.zeros(2)), 0.0)


class TestPointwise:
    def test_fixed_points(self):
        assert nx.pointwise("sigmoid", Tensor([0.0])).data[0] == 0.5
        assert nx.pointwise("tanh", Tensor([0.0])).data[0] == 0.0

    def test_relu(self):
        np.testing.assert_array_equal(nx.pointwise("relu", Tensor([-1.0, 2.0])).data, [0.0, 2.0])

    def test_dropout_zero_rate_is_identity(self):
        x = Tensor(np.random.default_rng(0).normal(size=(4, 4)).astype(np.float32))
        out = nx.pointwise("dropout", x, p=0.0, rng=np.random.default_rng(1))
        np.testing.assert_array_equal(out.data, x.data)

    def test_dropout_inference_is_identity(self):
        x = Tensor(np.random.default_rng(0).normal(size=(4, 4)).astype(np.float32))
        out = nx.dropout(x, 0.5, np.random.default_rng(1), training=False)
        np.testing.assert_array_equal(out.data, x.data)

    def test_dropout_scales_survivors(self):
        x = Tensor(np.ones((200, 50), dtype=np.float32))
        out = nx.dropout(x, 0.25, np.random.default_rng(2)).data
        assert set(np.unique(out).tolist()) <= {0.0, np.float32(1 / 0.75)}
        assert abs((out == 0).mean() - 0.25) < 0.02

    def test_binary_shape_mismatch(self):
        with pytest.raises(ShapeError):
            nx.pointwise("add", Tensor(np.zeros((2, 3))), Tensor(np.zeros((3, 2))))
        with pytest.raises(ShapeError):
            nx.pointwise("mul", Tensor(np.zeros((2, 3))), Tensor(np.zeros((2, 2))))

    def test_dropout_rate_validated(self):
        with pytest.raises(ContractError):
            nx.dropout(Tensor([1.0]), 1.0, np.random.default_rng(0))

    def test_relu_gradcheck_away_from_kink(self):
        x = np.array([[-1.5, -0.3, 0.2], [0.9, -0.11, 1.7]])
        assert (np.abs(x) > 0.1).all()
        report = nx.grad_check(lambda t: nx.sum_all(nx.mul(nx.relu(t), Tensor(np.arange(6.0).reshape(2, 3)))),
                               [x], 1e-4)
        assert report.passed, report

    @pytest.mark.parametrize("fn", [nx.sigmoid, nx.tanh])
    def test_bounded_activations_stay_open(self, fn):
        out = fn(Tensor(np.array([-200.0, -30.0, 30.0, 200.0], dtype=np.float32))).data
        lo = 0.0 if fn is nx.sigmoid else -1.0
        assert (out > lo).all() and (out < 1.0).all()


class TestBackward:
    def test_sum_gives_ones(self):
        x = leaf(np.arange(6.0).reshape(2, 3))
        nx.backward(nx.sum_all(x))
        np.testing.assert_array_equal(x.grad, np.ones((2, 3)))

    def test_square_gives_two_x(self):
        x = leaf(np.array([1.5, -2.0, 0.25]))
        nx.backward(nx.sum_all(nx.mul(x, x)))
        np.testing.assert_allclose(x.grad, 2 * x.data)

    def test_non_scalar_loss_rejected(self):
        x = leaf(np.ones(3))
        with pytest.raises(ContractError):
            nx.backward(nx.mul(x, x))

    def test_accumulates_across_calls(self):
        rng = np.random.default_rng(6)
        x = leaf(rng.normal(size=(3, 3)))
        w = Tensor(rng.normal(size=(3, 3)))
        loss = nx.sum_all(nx.tanh(nx.matmul(x, w)))
        nx.backward(loss)
        once = x.grad.copy()
        nx.backward(loss)
        np.testing.assert_allclose(x.grad, 2 * once, rtol=1e-12)

    def test_tensor_used_twice_sums_contributions(self):
        x = leaf(np.array([2.0, 3.0]))
        loss = nx.sum_all(nx.add(nx.mul(x, x), nx.scale(x, 3.0)))
        nx.backward(loss)
        np.testing.assert_allclose(x.grad, 2 * x.data + 3.0)

    def test_tape_replay_matches_topological(self):
        rng = np.random.default_rng(7)
        xa = rng.normal(size=(2, 4))
        a, b = leaf(xa), leaf(xa)
        w = Tensor(rng.normal(size=(4, 4)))
        with GradTape() as tape:
            loss = nx.sum_all(nx.sigmoid(nx.matmul(a, w)))
        assert len(tape) == 3
        nx.backward(loss, tape)
        nx.backward(nx.sum_all(nx.sigmoid(nx.matmul(b, w))))
        np.testing.assert_array_equal(a.grad, b.grad)

    def test_loss_not_on_tape(self):
        x = leaf(np.ones(2))
        with GradTape() as tape:
            pass
        with pytest.raises(ContractError):
            nx.backward(nx.sum_all(x), tape)

    def test_returns_gradient_map(self):
        x, y = leaf(np.ones(2)), leaf(np.full(2, 3.0))
        grads = nx.backward(nx.sum_all(nx.mul(x, y)))
        assert set(grads) == {x, y}
        np.testing.assert_array_equal(grads[x], [3.0, 3.0])

    def test_no_grad_builds_no_graph(self):
        x = leaf(np.ones(2))
        with nx.no_grad():
            y = nx.mul(x, x)
        assert not y.requires_grad and y.is_leaf


def test_forward_ops_keep_finite_outputs():
    rng = np.random.default_rng(8)
    z = Tensor(rng.uniform(-2, 2, (2, 3, 3)).astype(np.float32))
    full_mask = np.ones((2, 3, 3), dtype=bool)
    for out in (nx.masked_softmax(z, full_mask), nx.sigmoid(z), nx.tanh(z), nx.log_softmax(z),
                nx.layer_norm(z, Tensor(np.ones(3, np.float32)), Tensor(np.zeros(3, np.float32)))):
        assert np.isfinite(out.data).all()


def test_float32_stays_float32():
    x = Tensor(np.ones((2, 2), dtype=np.float32))
    assert nx.masked_softmax(nx.matmul(x, x)).dtype == np.float32
