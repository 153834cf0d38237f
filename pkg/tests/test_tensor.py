import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from lsanet import tensor as T
from lsanet.gradcheck import check_gradients
from lsanet.tensor import Tensor

from oracles import conv2d_direct, gap_loops, matmul_loops, maxpool_loops


def t(x, grad=False):
    return Tensor(np.asarray(x, dtype=float), requires_grad=grad)


class TestConv2d:
    def test_identity_kernel(self):
        out = T.conv2d(t([[[[3.0]]]]), t([[[[1.0]]]]), t([0.0]))
        assert out.data.tolist() == [[[[3.0]]]]

    def test_sum_of_ones(self):
        out = T.conv2d(t(np.ones((1, 1, 3, 3))), t(np.ones((1, 1, 3, 3))), t([0.0]))
        assert out.data.tolist() == [[[[9.0]]]]

    def test_matches_direct_convolution(self):
        rng = np.random.default_rng(0)
        x, w, b = rng.standard_normal((2, 3, 8, 8)), rng.standard_normal((4, 3, 3, 3)), rng.standard_normal(4)
        out = T.conv2d(t(x), t(w), t(b), stride=2, padding=1)
        assert out.shape == (2, 4, 4, 4)
        np.testing.assert_allclose(out.data, conv2d_direct(x, w, b, 2, 1), rtol=0, atol=1e-12)

    @pytest.mark.parametrize("seed", range(10))
    def test_random_geometries(self, seed):
        rng = np.random.default_rng(seed)
        k = int(rng.choice([1, 3, 5]))
        h = int(rng.integers(k, 9))
        stride, pad = int(rng.integers(1, 4)), int(rng.integers(0, k // 2 + 1))
        x = rng.standard_normal((2, 2, h, h))
        w, b = rng.standard_normal((3, 2, k, k)), rng.standard_normal(3)
        np.testing.assert_allclose(T.conv2d(t(x), t(w), t(b), stride, pad).data,
                                   conv2d_direct(x, w, b, stride, pad), rtol=0, atol=1e-12)

    def test_channel_mismatch_names_dimensions(self):
        with pytest.raises(T.ShapeError, match="channels 2 != kernel channels 3"):
            T.conv2d(t(np.zeros((1, 2, 4, 4))), t(np.zeros((1, 3, 3, 3))), t([0.0]))

    def test_kernel_larger_than_padded_input(self):
        with pytest.raises(T.ShapeError, match="exceeds"):
            T.conv2d(t(np.zeros((1, 1, 2, 2))), t(np.zeros((1, 1, 5, 5))), t([0.0]))


class TestDense:
    def test_identity(self):
        assert T.dense(t([[1, 2]]), t(np.eye(2)), t([0, 0])).data.tolist() == [[1, 2]]

    def test_sum_plus_bias(self):
        assert T.dense(t([[1, 1]]), t([[1], [1]]), t([1])).data.tolist() == [[3]]

    def test_matches_loops(self):
        rng = np.random.default_rng(1)
        x, w, b = rng.standard_normal((3, 5)), rng.standard_normal((5, 4)), rng.standard_normal(4)
        np.testing.assert_allclose(T.dense(t(x), t(w), t(b)).data, matmul_loops(x, w, b), atol=1e-12)

    def test_mismatch(self):
        with pytest.raises(T.ShapeError):
            T.dense(t(np.zeros((2, 3))), t(np.zeros((4, 2))), t(np.zeros(2)))


class TestActivations:
    def test_sigmoid_zero(self):
        assert T.sigmoid(t([0.0])).data[0] == 0.5

    def test_softmax_equal_logits(self):
        assert T.softmax(t([0, 0, 0, 0]), axis=0).data.tolist() == [0.25] * 4

    def test_softmax_direct(self):
        x = np.array([1.0, 2.0, 3.0])
        expected = np.exp(x) / np.exp(x).sum()
        np.testing.assert_allclose(T.softmax(t(x), axis=0).data, expected, rtol=1e-15)

    def test_softmax_bad_axis(self):
        with pytest.raises(T.ShapeError, match="axis"):
            T.softmax(t([[1.0, 2.0]]), axis=2)

    def test_relu_subgradient_at_zero(self):
        x = t([-1.0, 0.0, 2.0], grad=True)
        T.backward(T.tsum(T.relu(x)))
        assert x.grad.tolist() == [0.0, 0.0, 1.0]

    def test_sigmoid_extremes_finite(self):
        assert np.all(np.isfinite(T.sigmoid(t([-800.0, 800.0])).data))

    @settings(max_examples=200, deadline=None)
    @given(arrays(np.float64, st.tuples(st.integers(1, 4), st.integers(1, 6)),
                  elements=st.floats(-1e6, 1e6, allow_nan=False)), st.integers(0, 1))
    def test_softmax_rows_sum_to_one(self, x, axis):
        out = T.softmax(t(x), axis=axis).data
        np.testing.assert_allclose(out.sum(axis=axis), 1.0, atol=1e-12)
        assert np.all(out >= 0) and np.all(out <= 1)


class TestPooling:
    def test_gap_constant(self):
        assert np.all(T.global_avg_pool(t(np.full((2, 3, 4, 5), 7.0))).data == 7.0)

    def test_gap_analytic(self):
        assert T.global_avg_pool(t([[[[1, 2], [3, 4]]]])).data.tolist() == [[2.5]]

    def test_gap_matches_loops(self):
        x = np.random.default_rng(2).standard_normal((2, 3, 5, 7))
        np.testing.assert_allclose(T.global_avg_pool(t(x)).data, gap_loops(x), atol=1e-12)

    def test_gap_empty_plane(self):
        with pytest.raises(T.ShapeError):
            T.global_avg_pool(t(np.zeros((1, 1, 0, 3))))

    def test_maxpool_basic(self):
        assert T.maxpool2d(t([[[[1, 2], [3, 4]]]]), 2, 2).data.tolist() == [[[[4.0]]]]

    def test_maxpool_constant(self):
        assert np.all(T.maxpool2d(t(np.full((1, 2, 6, 6), 1.5)), 2, 2).data == 1.5)

    @pytest.mark.parametrize("k,stride", [(2, 2), (3, 1), (3, 2), (2, 1)])
    def test_maxpool_matches_loops(self, k, stride):
        x = np.random.default_rng(k * 10 + stride).standard_normal((2, 3, 8, 7))
        np.testing.assert_allclose(T.maxpool2d(t(x), k, stride).data, maxpool_loops(x, k, stride), atol=0)

    def test_maxpool_tie_goes_to_lowest_index(self):
        x = t(np.ones((1, 1, 2, 2)), grad=True)
        T.backward(T.tsum(T.maxpool2d(x, 2, 2)))
        assert x.grad.reshape(-1).tolist() == [1.0, 0.0, 0.0, 0.0]

    def test_maxpool_window_too_large(self):
        with pytest.raises(T.ShapeError, match="exceeds"):
            T.maxpool2d(t(np.zeros((1, 1, 2, 2))), 3)


class TestBackward:
    def test_sum_gives_ones(self):
        w = t(np.random.default_rng(0).standard_normal((2, 3, 4)), grad=True)
        T.backward(T.tsum(w))
        assert np.all(w.grad == 1.0)

    def test_half_sum_of_squares(self):
        w = t([1.0, -2.0, 3.0], grad=True)
        T.backward(T.tsum(w * w) * 0.5)
        assert w.grad.tolist() == [1.0, -2.0, 3.0]

    def test_non_scalar_loss(self):
        with pytest.raises(T.GraphError):
            T.backward(t([1.0, 2.0], grad=True) * 2.0)

    def test_disconnected_parameter_gets_zero(self):
        a, b = t([1.0], grad=True), t([2.0], grad=True)
        ga, gb = T.grad_of(T.tsum(a * 3.0), [a, b])
        assert ga.tolist() == [3.0] and gb.tolist() == [0.0]

    def test_fan_in_accumulates(self):
        rng = np.random.default_rng(3)
        w = t(rng.standard_normal((3, 2)), grad=True)
        x1, x2 = rng.standard_normal((4, 3)), rng.standard_normal((4, 3))
        b = t(np.zeros(2))

        def branch(x):
            return T.tsum(T.sigmoid(T.dense(t(x), w, b)))

        (g1,) = T.grad_of(branch(x1), [w])
        (g2,) = T.grad_of(branch(x2), [w])
        (both,) = T.grad_of(branch(x1) + branch(x2), [w])
        np.testing.assert_allclose(both, g1 + g2, rtol=1e-14)

    def test_graph_released_after_backward(self):
        w = t([1.0], grad=True)
        y = T.tsum(w * 2.0)
        T.backward(y)
        assert y._parents == () and y._backward is None

    def test_no_grad_records_nothing(self):
        w = t([1.0], grad=True)
        with T.no_grad():
            y = w * 2.0
        assert not y.requires_grad

    def test_determinism(self):
        def run():
            rng = np.random.default_rng(5)
            x, w, b = (t(rng.standard_normal(s), grad=True) for s in [(2, 2, 6, 6), (3, 2, 3, 3), (3,)])
            y = T.tsum(T.maxpool2d(T.relu(T.conv2d(x, w, b, 1, 1)), 2))
            gs = T.grad_of(y, [x, w, b])
            return y.data.tobytes(), [g.tobytes() for g in gs]

        assert run() == run()

    def test_debug_mode_flags_non_finite(self):
        with T.debug_mode(), pytest.raises(FloatingPointError):
            T.log(t([0.0]))


@pytest.mark.parametrize("seed", range(20))
def test_finite_differences_every_op(seed):
    from lsanet.checks import tensor_cases

    rng = np.random.default_rng([seed, 0])
    for name, fn, params in tensor_cases(rng):
        res = check_gradients(name, fn, params)
        assert res.ok, f"{name}: {res.max_rel_error:.3e}"
