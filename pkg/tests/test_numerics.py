"""Autodiff engine, layers and optimizers.

Gradients are compared against central differences in float64; the float32
default makes finite differences too noisy to resolve a 1e-3 relative error.
"""

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from freqshield.numerics import (Adam, Conv2d, ConvTranspose2d, Dense, Flatten, LayerSpec, MaxPool2d,
                                 NonFiniteGradient, ReLU, Sequential, SGD, ShapeError, Sigmoid, Tensor, Unflatten,
                                 Upsample2x, gradcheck, layer_from_spec, precision, relu, sigmoid, tsum)
from freqshield.numerics.layers import conv2d, conv_transpose2d, dense, maxpool2d, upsample2x


def _t(rng, *shape, grad=True):
    return Tensor(rng.standard_normal(shape), requires_grad=grad)


def _weighted(fn, shape, rng):
    # random projection so the scalar depends on every output element differently
    w = rng.standard_normal(shape)
    return lambda *xs: tsum(fn(*xs) * w)


def conv_oracle(x, w, b, stride, padding):
    """Direct sextuple loop."""
    n, c, h, wd = x.shape
    o, _, k, _ = w.shape
    xp = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    ho = (h + 2 * padding - k) // stride + 1
    wo = (wd + 2 * padding - k) // stride + 1
    out = np.zeros((n, o, ho, wo))
    for bi in range(n):
        for oc in range(o):
            for i in range(ho):
                for j in range(wo):
                    patch = xp[bi, :, i * stride:i * stride + k, j * stride:j * stride + k]
                    out[bi, oc, i, j] = (patch * w[oc]).sum() + b[oc]
    return out


def tconv_oracle(x, w, b, stride, padding):
    """Scatter each input pixel times the kernel into the output."""
    n, c, h, wd = x.shape
    _, o, k, _ = w.shape
    full = np.zeros((n, o, (h - 1) * stride + k, (wd - 1) * stride + k))
    for bi in range(n):
        for ic in range(c):
            for i in range(h):
                for j in range(wd):
                    full[bi, :, i * stride:i * stride + k, j * stride:j * stride + k] += x[bi, ic, i, j] * w[ic]
    if padding:
        full = full[:, :, padding:-padding, padding:-padding]
    return full + b[None, :, None, None]


class TestForwardOracles:
    @pytest.mark.parametrize("stride,padding,k", [(1, 1, 3), (1, 0, 3), (2, 1, 3), (2, 0, 2), (1, 2, 5)])
    def test_conv2d_matches_loops(self, stride, padding, k):
        rng = np.random.default_rng(1)
        x, w, b = rng.standard_normal((2, 3, 7, 6)), rng.standard_normal((4, 3, k, k)), rng.standard_normal(4)
        with precision(np.float64):
            out = conv2d(Tensor(x), Tensor(w), Tensor(b), stride, padding).data
        np.testing.assert_allclose(out, conv_oracle(x, w, b, stride, padding), atol=1e-10)

    @pytest.mark.parametrize("stride,padding,k", [(2, 0, 2), (2, 1, 3), (1, 0, 3), (3, 0, 2)])
    def test_conv_transpose_matches_scatter(self, stride, padding, k):
        rng = np.random.default_rng(2)
        x, w, b = rng.standard_normal((2, 3, 4, 5)), rng.standard_normal((3, 2, k, k)), rng.standard_normal(2)
        with precision(np.float64):
            out = conv_transpose2d(Tensor(x), Tensor(w), Tensor(b), stride, padding).data
        np.testing.assert_allclose(out, tconv_oracle(x, w, b, stride, padding), atol=1e-10)

    def test_maxpool_and_upsample(self):
        x = np.arange(16, dtype=np.float64).reshape(1, 1, 4, 4)
        with precision(np.float64):
            assert maxpool2d(Tensor(x)).data.ravel().tolist() == [5, 7, 13, 15]
            up = upsample2x(Tensor(np.array([[[[1.0, 2.0]]]]))).data
        assert up.tolist() == [[[[1, 1, 2, 2], [1, 1, 2, 2]]]]

    def test_maxpool_tie_routes_to_first(self):
        x = Tensor(np.ones((1, 1, 2, 2)), requires_grad=True)
        tsum(maxpool2d(x)).backward()
        assert x.grad.ravel().tolist() == [1, 0, 0, 0]

    def test_dense_orientation(self):
        x = np.array([[1.0, 2.0]])
        w = np.array([[1.0, 0.0], [0.0, 3.0], [1.0, 1.0]])
        out = dense(Tensor(x), Tensor(w), Tensor(np.zeros(3))).data
        assert out.tolist() == [[1, 6, 3]]

    def test_sigmoid_stable_at_extremes(self):
        out = sigmoid(Tensor(np.array([-1000.0, 0.0, 1000.0]))).data
        assert np.all(np.isfinite(out))
        np.testing.assert_allclose(out, [0, 0.5, 1], atol=1e-7)


class TestGradients:
    """Every layer kind against central differences, 20+ probes per input."""

    @pytest.mark.parametrize("stride,padding,k", [(1, 1, 3), (2, 1, 3), (2, 0, 2)])
    def test_conv2d(self, stride, padding, k):
        rng = np.random.default_rng(3)
        with precision(np.float64):
            x, w, b = _t(rng, 2, 2, 6, 6), _t(rng, 3, 2, k, k), _t(rng, 3)
            out_shape = conv2d(x, w, b, stride, padding).shape
            err = gradcheck(_weighted(lambda *a: conv2d(*a, stride, padding), out_shape, rng), [x, w, b], rng)
        assert err < 1e-3

    @pytest.mark.parametrize("stride,padding,k", [(2, 0, 2), (2, 1, 3)])
    def test_conv_transpose2d(self, stride, padding, k):
        rng = np.random.default_rng(4)
        with precision(np.float64):
            x, w, b = _t(rng, 2, 3, 4, 4), _t(rng, 3, 2, k, k), _t(rng, 2)
            out_shape = conv_transpose2d(x, w, b, stride, padding).shape
            err = gradcheck(_weighted(lambda *a: conv_transpose2d(*a, stride, padding), out_shape, rng),
                            [x, w, b], rng)
        assert err < 1e-3

    def test_dense(self):
        rng = np.random.default_rng(5)
        with precision(np.float64):
            x, w, b = _t(rng, 4, 6), _t(rng, 3, 6), _t(rng, 3)
            assert gradcheck(_weighted(dense, (4, 3), rng), [x, w, b], rng) < 1e-3

    def test_maxpool(self):
        rng = np.random.default_rng(6)
        with precision(np.float64):
            x = _t(rng, 2, 3, 6, 6)
            assert gradcheck(_weighted(maxpool2d, (2, 3, 3, 3), rng), [x], rng, probes=30) < 1e-3

    def test_upsample(self):
        rng = np.random.default_rng(7)
        with precision(np.float64):
            x = _t(rng, 2, 2, 3, 3)
            assert gradcheck(_weighted(upsample2x, (2, 2, 6, 6), rng), [x], rng) < 1e-3

    @pytest.mark.parametrize("fn", [relu, sigmoid])
    def test_activations(self, fn):
        rng = np.random.default_rng(8)
        with precision(np.float64):
            # keep relu inputs away from the kink
            x = Tensor(rng.uniform(0.1, 1.0, (5, 7)) * rng.choice([-1, 1], (5, 7)), requires_grad=True)
            assert gradcheck(_weighted(fn, (5, 7), rng), [x], rng, probes=25) < 1e-3

    def test_flatten_unflatten_chain(self):
        rng = np.random.default_rng(9)
        with precision(np.float64):
            net = Sequential([Flatten(), Dense(2 * 4 * 4, 32), Unflatten((2, 4, 4)), Sigmoid()], (2, 4, 4))
            net.init(rng)
            x = _t(rng, 3, 2, 4, 4)
            params = [x, *net.parameters()]
            for p in net.parameters():
                p.requires_grad = True
            assert gradcheck(_weighted(lambda xx, *_: net(xx), (3, 2, 4, 4), rng), params, rng) < 1e-3

    def test_gradcheck_flags_a_wrong_backward(self):
        from freqshield.numerics import apply
        rng = np.random.default_rng(10)

        def bad_square(t):
            return apply(t.data ** 2, (t,), lambda g: (g * t.data,), "bad")  # missing factor 2

        with precision(np.float64):
            x = _t(rng, 5)
            assert gradcheck(lambda a: tsum(bad_square(a)), [x], rng, probes=5) > 0.4


class TestTape:
    def test_reused_node_accumulates(self):
        x = Tensor(np.array([3.0]), requires_grad=True)
        y = x * x + x
        tsum(y).backward()
        assert x.grad.tolist() == [7.0]

    def test_non_scalar_backward_rejected(self):
        x = Tensor(np.ones(3), requires_grad=True)
        with pytest.raises(ValueError):
            (x * 2.0).backward()

    def test_detached_loss_rejected(self):
        with pytest.raises(RuntimeError):
            tsum(Tensor(np.ones(3))).backward()

    def test_constant_inputs_get_no_grad(self):
        x = Tensor(np.ones(3), requires_grad=True)
        c = Tensor(np.ones(3))
        tsum(x * c).backward()
        assert c.grad is None

    def test_default_dtype_is_float32(self):
        assert Tensor(np.ones(2, dtype=np.float64)).data.dtype == np.float32
        with precision(np.float64):
            assert Tensor(np.ones(2)).data.dtype == np.float64


class TestShapes:
    def test_sequential_reports_bad_layer(self):
        with pytest.raises(ShapeError, match="layer 2"):
            Sequential([Conv2d(1, 4), MaxPool2d(), Dense(10, 2)], (1, 8, 8))

    def test_forward_checks_input_shape(self):
        net = Sequential([Flatten(), Dense(4, 2)], (1, 2, 2))
        net.init(np.random.default_rng(0))
        with pytest.raises(ShapeError):
            net(Tensor(np.zeros((1, 1, 3, 3))))

    def test_unknown_layer_kind(self):
        with pytest.raises(ValueError):
            LayerSpec("attention", {})

    def test_spec_round_trip(self):
        for layer in [Conv2d(1, 4, 3), ConvTranspose2d(4, 2), MaxPool2d(), Upsample2x(), Dense(3, 2), ReLU(),
                      Sigmoid(), Flatten(), Unflatten((1, 2, 2))]:
            again = layer_from_spec(layer.spec.to_dict())
            assert again.spec == layer.spec

    @settings(max_examples=30, deadline=None)
    @given(st.integers(4, 12), st.integers(4, 12), st.sampled_from([1, 2]), st.sampled_from([1, 3]))
    def test_inferred_shape_matches_forward(self, h, w, stride, k):
        net = Sequential([Conv2d(1, 2, k, stride), ReLU(), Flatten()], (1, h, w))
        net.init(np.random.default_rng(0))
        out = net(Tensor(np.zeros((2, 1, h, w))))
        assert out.shape == (2,) + net.output_shape


class TestOptimizers:
    def test_sgd_step(self):
        p = Tensor(np.array([1.0, 2.0]), requires_grad=True)
        p.grad = np.array([0.5, -1.0], dtype=np.float32)
        SGD([p], lr=0.1).step()
        np.testing.assert_allclose(p.data, [0.95, 2.1], rtol=1e-6)

    def test_adam_first_step_is_lr_times_sign(self):
        # bias correction makes the first update lr * g / (|g| + eps')
        p = Tensor(np.array([1.0, 1.0, 1.0]), requires_grad=True)
        p.grad = np.array([3.0, -0.2, 0.0], dtype=np.float32)
        Adam([p], lr=0.01).step()
        np.testing.assert_allclose(p.data, [0.99, 1.01, 1.0], atol=1e-6)

    def test_non_finite_gradient_raises(self):
        p = Tensor(np.array([1.0]), requires_grad=True)
        p.grad = np.array([np.nan], dtype=np.float32)
        with pytest.raises(NonFiniteGradient):
            Adam([p]).step()
        assert p.data.tolist() == [1.0]

    def test_adam_minimises_quadratic(self):
        p = Tensor(np.array([5.0, -3.0]), requires_grad=True)
        opt = Adam([p], lr=0.1)
        for _ in range(500):
            opt.zero_grad()
            tsum(p * p).backward()
            opt.step()
        assert np.abs(p.data).max() < 0.05
