import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from ctom import tensor as T
from ctom.errors import ParameterError, ShapeError
from ctom.gradcheck import interior_flow

floats = st.floats(-5, 5, allow_nan=False, width=64)


def arr(shape):
    return hnp.arrays(np.float64, shape, elements=floats)


class TestConv:
    def test_identity_kernel(self, rng):
        x = rng.uniform(-1, 1, size=(3, 7, 5))
        k = np.zeros((3, 3, 1, 1))
        k[np.arange(3), np.arange(3)] = 1.0
        assert np.array_equal(T.conv2d(T.Tensor(x), T.Tensor(k)).data, x)

    def test_box_on_constant(self):
        out = T.conv2d(T.Tensor(np.full((1, 6, 6), 0.5)), T.Tensor(np.full((1, 1, 3, 3), 1 / 9)))
        np.testing.assert_allclose(out.data, 0.5, atol=1e-15)

    def test_stride2_hand_value(self):
        x = np.array([[[1.0, 2.0], [3.0, 4.0]]])
        out = T.conv2d(T.Tensor(x), T.Tensor(np.array([[[[2.0]]]])), stride=2)
        assert out.shape == (1, 1, 1)
        assert out.data[0, 0, 0] == 2.0

    def test_odd_size_stride2(self):
        out = T.conv2d(T.Tensor(np.ones((2, 5, 7))), T.Tensor(np.ones((4, 2, 3, 3))), stride=2)
        assert out.shape == (4, 3, 4)

    def test_batched_matches_single(self, rng):
        x = rng.normal(size=(2, 3, 6, 6))
        k = rng.normal(size=(4, 3, 3, 3))
        b = rng.normal(size=4)
        batch = T.conv2d(T.Tensor(x), T.Tensor(k), T.Tensor(b)).data
        for i in range(2):
            np.testing.assert_allclose(batch[i], T.conv2d(T.Tensor(x[i]), T.Tensor(k), T.Tensor(b)).data, atol=1e-12)

    def test_channel_mismatch(self):
        with pytest.raises(ShapeError):
            T.conv2d(T.Tensor(np.ones((2, 4, 4))), T.Tensor(np.ones((1, 3, 3, 3))))


class TestUpsampleSoftmaxActivation:
    def test_upsample(self):
        assert np.array_equal(T.upsample_nearest2x(T.Tensor(np.ones((1, 1, 1)))).data, np.ones((1, 2, 2)))

    def test_upsample_backward_fours(self):
        x = T.Tensor(np.arange(6.0).reshape(1, 2, 3), requires_grad=True)
        T.upsample_nearest2x(x).sum().backward()
        assert np.array_equal(x.grad, np.full((1, 2, 3), 4.0))

    def test_softmax_values(self):
        out = T.channel_softmax(T.Tensor(np.array([1.0, 3.0]).reshape(2, 1, 1))).data.ravel()
        # 1/(1+e^2) and e^2/(1+e^2)
        np.testing.assert_allclose(out, [0.11920292202211755, 0.8807970779778823], atol=1e-12)
        assert np.allclose(T.channel_softmax(T.Tensor(np.zeros((2, 1, 1)))).data, 0.5)

    @given(st.floats(-50, 50), st.floats(-10, 10))
    def test_softmax_shift_invariance(self, x, c):
        out = T.channel_softmax(T.Tensor(np.array([x, x + c]).reshape(2, 1, 1))).data
        assert out[1, 0, 0] == pytest.approx(1 / (1 + np.exp(-c)), abs=1e-12)

    @given(arr((3, 4, 2)))
    def test_softmax_sums_to_one(self, x):
        s = T.channel_softmax(T.Tensor(x)).data.sum(axis=0)
        np.testing.assert_allclose(s, 1.0, atol=1e-6)

    def test_softmax_needs_two_channels(self):
        with pytest.raises(ShapeError):
            T.channel_softmax(T.Tensor(np.zeros((1, 2, 2))))

    def test_activation_zero(self):
        z = T.Tensor(np.zeros(3))
        assert np.array_equal(T.activation(z, "tanh").data, np.zeros(3))
        assert np.array_equal(T.activation(z, "sigmoid").data, np.full(3, 0.5))
        with pytest.raises(ParameterError):
            T.activation(z, "gelu")

    def test_tanh_derivative_at_zero(self):
        x = T.Tensor(np.zeros(1), requires_grad=True)
        T.tanh(x).sum().backward()
        fd = (np.tanh(1e-4) - np.tanh(-1e-4)) / 2e-4
        assert abs(x.grad[0] - 1.0) < 1e-6
        assert abs(fd - 1.0) < 1e-6

    def test_sigmoid_gradient_survives_float32_saturation(self):
        x = T.Tensor(np.array([20.0, -20.0], dtype=np.float32), requires_grad=True)
        y = T.sigmoid(x)
        assert y.data[0] == 1.0
        y.sum().backward()
        assert np.all(x.grad > 0)


class TestWarp:
    def test_zero_flow_identity(self, rng):
        src = rng.uniform(size=(3, 5, 6)).astype(np.float32)
        out = T.bilinear_warp(T.Tensor(src), T.Tensor(np.zeros((2, 5, 6), np.float32)))
        assert np.array_equal(out.data, src)

    def test_half_pixel(self):
        src = np.array([[[0.0, 1.0]]])
        flow = np.zeros((2, 1, 2))
        flow[0, 0, 1] = -0.5
        assert T.bilinear_warp(T.Tensor(src), T.Tensor(flow)).data[0, 0, 1] == 0.5

    def test_saturating_flow_clamps(self, rng):
        h, w = 4, 5
        src = rng.uniform(size=(2, h, w))
        flow = np.stack([np.full((h, w), float(w)), np.full((h, w), float(h))])
        out = T.bilinear_warp(T.Tensor(src), T.Tensor(flow)).data
        assert np.array_equal(out, np.broadcast_to(src[:, -1:, -1:], out.shape))

    def test_x_is_column(self):
        src = np.arange(12.0).reshape(1, 3, 4)
        flow = np.zeros((2, 3, 4))
        flow[0] = 1.0
        out = T.bilinear_warp(T.Tensor(src), T.Tensor(flow)).data
        assert np.array_equal(out[0, :, :3], src[0, :, 1:])


class TestBackward:
    def test_sum_grad_ones(self):
        x = T.Tensor(np.zeros((2, 3)), requires_grad=True)
        x.sum().backward()
        assert np.array_equal(x.grad, np.ones((2, 3)))

    def test_square_sum(self):
        x = T.Tensor(np.array([1.0, 2.0]), requires_grad=True)
        (x * x).sum().backward()
        assert np.array_equal(x.grad, [2.0, 4.0])

    def test_shared_node_accumulates(self):
        x = T.Tensor(np.array([3.0]), requires_grad=True)
        y = x * x
        (y + y).sum().backward()
        assert x.grad[0] == 12.0

    def test_topological_order(self):
        a = T.Tensor(np.ones(2), requires_grad=True)
        b = T.tanh(a)
        c = b * a
        d = c.sum()
        order = T.topological_order(d)
        pos = {id(n): i for i, n in enumerate(order)}
        for n in order:
            for p in n._parents:
                assert pos[id(p)] < pos[id(n)]
        assert len(order) == len({id(n) for n in order})

    def test_nonscalar_rejected(self):
        with pytest.raises(ShapeError):
            T.backward(T.Tensor(np.ones(2), requires_grad=True))

    def test_deterministic(self, rng):
        x0 = rng.normal(size=(2, 6, 6))
        k = rng.normal(size=(3, 2, 3, 3))

        def grads():
            x = T.Tensor(x0.copy(), requires_grad=True)
            T.tanh(T.conv2d(x, T.Tensor(k), stride=2)).sum().backward()
            return x.grad

        assert np.array_equal(grads(), grads())

    @given(arr((3, 4)))
    def test_finite_outputs(self, x):
        y = T.sigmoid(T.tanh(T.Tensor(x)) * 3.0)
        assert np.all(np.isfinite(y.data))


class TestGradCheck:
    def test_tanh_sum(self, rng):
        rep = T.grad_check(lambda t: T.tanh(t).sum(), rng.uniform(-1, 1, size=(3, 4)), 1e-3, 1e-4)
        assert rep.passed

    def test_constant(self):
        rep = T.grad_check(lambda t: T.Tensor(np.array(2.0)), np.ones(3))
        assert rep.max_rel_error == 0.0

    def test_detects_wrong_gradient(self, rng):
        def bad(t):
            out = T.tanh(t)
            out._backward = lambda g: (2.0 * g,)
            return out.sum()

        assert not T.grad_check(bad, rng.uniform(-1, 1, size=4)).passed

    def test_warp_flow_grad(self):
        rng = np.random.default_rng(5)
        src = rng.uniform(size=(2, 5, 6))
        flow = interior_flow(rng, 5, 6)
        rep = T.grad_check(lambda t: (T.bilinear_warp(T.Tensor(src), t) * src).sum(), flow)
        assert rep.passed
