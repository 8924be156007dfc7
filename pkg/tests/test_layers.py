"""Layers and optimizer: shapes, gradients, batchnorm statistics, Adam updates."""

import numpy as np
import pytest

from valence_gan import errors
from valence_gan.layers import INIT_STD, Adam, BatchNorm2D, Conv2D, Dense, TransposedConv2D
from valence_gan.tensor import Tensor, backward, grad_check


@pytest.fixture
def rng64():
    return np.random.default_rng(42)


def to64(layer):
    """Cast a layer's parameters to float64 for high-precision grad checks."""
    for _, p in layer.parameters():
        p.data = p.data.astype(np.float64)
    return layer


class TestDense:
    def test_shape(self, rng64):
        layer = Dense(6, 4, rng64)
        out = layer(Tensor(np.ones((3, 6), dtype=np.float32)))
        assert out.shape == (3, 4)

    def test_wrong_width_rejected(self, rng64):
        with pytest.raises(errors.GraphError):
            Dense(6, 4, rng64)(Tensor(np.ones((3, 5))))

    def test_gradients(self, rng64):
        layer = to64(Dense(5, 3, rng64))
        x = Tensor(rng64.standard_normal((2, 5)))
        assert grad_check(lambda t: (layer(t) ** 2.0).sum(), x)["passed"]
        w = layer.weights
        xc = Tensor(rng64.standard_normal((2, 5)))

        def wrt_weights(t):
            layer.weights = t
            try:
                return (layer(xc) ** 2.0).sum()
            finally:
                layer.weights = w

        assert grad_check(wrt_weights, Tensor(w.data.copy()))["passed"]

    def test_init_scale(self, rng64):
        layer = Dense(400, 400, rng64)
        assert abs(float(layer.weights.data.std()) - INIT_STD) < 0.002
        assert not layer.bias.data.any()


class TestConvLayers:
    def test_conv_halves_spatial(self, rng64):
        layer = Conv2D(1, 8, 3, rng64)
        out = layer(Tensor(np.ones((2, 1, 128, 64), dtype=np.float32)))
        assert out.shape == (2, 8, 64, 32)

    def test_tconv_doubles_spatial(self, rng64):
        layer = TransposedConv2D(8, 4, 3, rng64)
        out = layer(Tensor(np.ones((2, 8, 8, 4), dtype=np.float32)))
        assert out.shape == (2, 4, 16, 8)

    def test_channel_mismatch_rejected(self, rng64):
        with pytest.raises(errors.GraphError):
            Conv2D(3, 8, 3, rng64)(Tensor(np.ones((1, 1, 8, 8))))
        with pytest.raises(errors.GraphError):
            TransposedConv2D(3, 8, 3, rng64)(Tensor(np.ones((1, 1, 8, 8))))

    def test_conv_stack_gradient(self, rng64):
        c1 = to64(Conv2D(1, 2, 3, rng64))
        c2 = to64(Conv2D(2, 2, 3, rng64))
        x = Tensor(rng64.standard_normal((1, 1, 16, 8)))
        assert grad_check(
            lambda t: (c2(c1(t).leaky_relu(0.2)) ** 2.0).sum(), x)["passed"]


class TestBatchNorm:
    def test_normalizes_batch_statistics(self, rng64):
        bn = BatchNorm2D(3)
        x = Tensor(rng64.standard_normal((8, 3, 4, 4)).astype(np.float32) * 5 + 2)
        out = bn(x, train=True)
        per_channel = out.data.transpose(1, 0, 2, 3).reshape(3, -1)
        np.testing.assert_allclose(per_channel.mean(axis=1), 0.0, atol=1e-5)
        np.testing.assert_allclose(per_channel.std(axis=1), 1.0, atol=1e-2)

    def test_running_stats_updated(self, rng64):
        bn = BatchNorm2D(2, momentum=0.9)
        x = Tensor(np.full((4, 2, 2, 2), 3.0, dtype=np.float32))
        bn(x, train=True)
        np.testing.assert_allclose(bn.running_mean, 0.9 * 0.0 + 0.1 * 3.0, atol=1e-6)

    def test_eval_uses_running_stats(self, rng64):
        bn = BatchNorm2D(2)
        bn.running_mean[:] = 1.0
        bn.running_var[:] = 4.0
        out = bn(Tensor(np.full((1, 2, 2, 2), 3.0, dtype=np.float32)), train=False)
        np.testing.assert_allclose(out.data, (3.0 - 1.0) / 2.0, atol=1e-4)

    def test_train_requires_batch_of_two(self):
        bn = BatchNorm2D(2)
        with pytest.raises(errors.ContractError):
            bn(Tensor(np.ones((1, 2, 2, 2))), train=True)

    def test_gradients_through_normalization(self, rng64):
        bn = BatchNorm2D(2)
        bn.gamma.data = bn.gamma.data.astype(np.float64)
        bn.beta.data = bn.beta.data.astype(np.float64)
        x = Tensor(rng64.standard_normal((3, 2, 2, 2)))
        assert grad_check(lambda t: (bn(t, train=True) ** 2.0).sum(), x)["passed"]


class TestAdam:
    def test_single_step_moves_by_lr(self):
        p = Tensor(np.array([1.0], dtype=np.float32), requires_grad=True)
        p.grad = np.array([1.0], dtype=np.float32)
        Adam([("p", p)], lr=1e-3).step()
        # Bias-corrected m/sqrt(v) equals sign(g) on the first step.
        np.testing.assert_allclose(p.data, [1.0 - 1e-3], atol=1e-6)

    def test_missing_gradient_names_parameter(self):
        p = Tensor(np.ones(2), requires_grad=True)
        opt = Adam([("conv0.weights", p)], lr=1e-3)
        with pytest.raises(errors.ContractError, match="conv0.weights"):
            opt.step()

    def test_zero_grad_clears(self):
        p = Tensor(np.ones(2), requires_grad=True)
        p.grad = np.ones(2)
        opt = Adam([("p", p)], lr=1e-3)
        opt.zero_grad()
        assert p.grad is None

    def test_converges_on_quadratic(self):
        p = Tensor(np.array([0.0], dtype=np.float64), requires_grad=True)
        opt = Adam([("p", p)], lr=1e-2, beta1=0.5)
        for _ in range(3000):
            loss = ((p - 3.0) ** 2.0).sum()
            backward(loss)
            opt.step()
            opt.zero_grad()
        np.testing.assert_allclose(p.data, [3.0], atol=0.05)

    def test_beta1_default_follows_gan_recipe(self):
        assert Adam([], lr=1e-3).beta1 == 0.5
