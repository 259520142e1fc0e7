import numpy as np
import pytest

from dirfeat import checksuite
from dirfeat.layers import BatchNorm, Conv2D, ConvBlock, DenseUnit, LeakyReLU, MaxPool2D, out_size


def conv_reference(x, W, b, stride, pad):
    """Brute-force convolution: explicit loops over every index."""
    n, h, w, c_in = x.shape
    kh, kw, _, c_out = W.shape
    ho = (h + 2 * pad - kh) // stride + 1
    wo = (w + 2 * pad - kw) // stride + 1
    out = np.zeros((n, ho, wo, c_out))
    for i in range(n):
        for y in range(ho):
            for xx in range(wo):
                for k in range(c_out):
                    acc = b[k]
                    for u in range(kh):
                        for v in range(kw):
                            sy = y * stride + u - pad
                            sx = xx * stride + v - pad
                            if 0 <= sy < h and 0 <= sx < w:
                                for ci in range(c_in):
                                    acc += x[i, sy, sx, ci] * W[u, v, ci, k]
                    out[i, y, xx, k] = acc
    return out


def identity_center_kernel():
    w = np.zeros((3, 3, 1, 1))
    w[1, 1, 0, 0] = 1.0
    return w


class TestConv2D:
    def test_identity_center_kernel_on_single_pixel(self):
        conv = Conv2D(1, 1)
        conv.W[:] = identity_center_kernel()
        x = np.full((1, 1, 1, 1), 3.25)
        assert np.array_equal(conv.forward(x), x)

    def test_identity_center_kernel_preserves_map(self):
        conv = Conv2D(1, 1)
        conv.W[:] = identity_center_kernel()
        x = np.random.default_rng(0).standard_normal((1, 5, 5, 1))
        assert np.allclose(conv.forward(x), x, rtol=0, atol=0)

    def test_zero_weights_give_bias(self):
        conv = Conv2D(2, 3)
        conv.b[:] = [1.0, -2.0, 0.5]
        out = conv.forward(np.random.default_rng(1).standard_normal((2, 4, 4, 2)))
        assert np.allclose(out, conv.b, rtol=0, atol=0)

    def test_matches_bruteforce_oracle(self):
        rng = np.random.default_rng(2)
        conv = Conv2D(1, 1, rng=rng, init_std=1.0)
        x = rng.standard_normal((1, 5, 5, 1))
        want = conv_reference(x, conv.W, conv.b, stride=1, pad=1)
        np.testing.assert_allclose(conv.forward(x), want, rtol=0, atol=1e-12)

    def test_matches_bruteforce_oracle_strided_multichannel(self):
        rng = np.random.default_rng(3)
        conv = Conv2D(3, 4, stride=2, rng=rng, init_std=1.0)
        conv.b[:] = rng.standard_normal(4)
        x = rng.standard_normal((2, 7, 7, 3))
        want = conv_reference(x, conv.W, conv.b, stride=2, pad=1)
        np.testing.assert_allclose(conv.forward(x), want, rtol=0, atol=1e-12)

    def test_channel_mismatch(self):
        with pytest.raises(ValueError):
            Conv2D(2, 1).forward(np.zeros((1, 4, 4, 3)))

    def test_backward_zero_grad(self):
        rng = np.random.default_rng(4)
        conv = Conv2D(2, 2, rng=rng, init_std=1.0)
        out = conv.forward(rng.standard_normal((1, 4, 4, 2)))
        gx = conv.backward(np.zeros_like(out))
        assert not gx.any() and not conv.gW.any() and not conv.gb.any()

    def test_backward_routes_identity_kernel(self):
        conv = Conv2D(1, 1)
        conv.W[:] = identity_center_kernel()
        x = np.random.default_rng(5).standard_normal((1, 4, 4, 1))
        conv.forward(x)
        g = np.zeros((1, 4, 4, 1))
        g[0, 2, 1, 0] = 7.0
        gx = conv.backward(g)
        assert np.array_equal(gx, g)

    def test_gradients_vs_oracle(self):
        rep = checksuite.check_conv(seed=0)
        assert rep.ok, rep.row("conv2d")
        assert rep.max_rel_error < 1e-8


class TestBatchNorm:
    def test_constant_input_train_gives_zero(self):
        bn = BatchNorm(2)
        out = bn.forward(np.full((2, 3, 3, 2), 4.0), train=True)
        np.testing.assert_allclose(out, 0.0, atol=1e-12)

    def test_zero_gamma_gives_beta(self):
        bn = BatchNorm(2)
        bn.gamma[:] = 0.0
        bn.beta[:] = [1.5, -0.5]
        out = bn.forward(np.random.default_rng(6).standard_normal((2, 3, 3, 2)), train=True)
        assert np.allclose(out, bn.beta, rtol=0, atol=0)

    def test_train_moments(self):
        rng = np.random.default_rng(7)
        bn = BatchNorm(3)
        out = bn.forward(rng.normal(2.0, 4.0, size=(4, 6, 6, 3)), train=True)
        mean = out.mean(axis=(0, 1, 2))
        var = out.var(axis=(0, 1, 2))
        np.testing.assert_allclose(mean, 0.0, atol=1e-9)
        # the epsilon in the denominator biases the variance by eps/sigma^2
        np.testing.assert_allclose(var, 1.0, atol=1e-6)

    def test_running_stat_update(self):
        rng = np.random.default_rng(8)
        bn = BatchNorm(1)
        x = rng.normal(5.0, 2.0, size=(8, 4, 4, 1))
        bn.forward(x, train=True)
        want_mean = 0.1 * x.mean()
        want_var = 0.9 * 1.0 + 0.1 * x.var()
        np.testing.assert_allclose(bn.running_mean, want_mean, rtol=1e-12)
        np.testing.assert_allclose(bn.running_var, want_var, rtol=1e-12)

    def test_eval_uses_running_stats(self):
        bn = BatchNorm(1)
        bn.running_mean[:] = 2.0
        bn.running_var[:] = 4.0
        out = bn.forward(np.full((1, 2, 2, 1), 6.0), train=False)
        np.testing.assert_allclose(out, (6.0 - 2.0) / np.sqrt(4.0 + bn.eps), rtol=1e-12)

    def test_backward_zero_grad(self):
        rng = np.random.default_rng(9)
        bn = BatchNorm(2)
        out = bn.forward(rng.standard_normal((2, 3, 3, 2)), train=True)
        gx = bn.backward(np.zeros_like(out))
        assert not gx.any() and not bn.ggamma.any() and not bn.gbeta.any()

    def test_gamma_gradient_direct_sum(self):
        # constant grad_out g0: d loss / d gamma = g0 * sum of normalized activations
        rng = np.random.default_rng(10)
        bn = BatchNorm(2)
        x = rng.standard_normal((3, 4, 4, 2))
        bn.forward(x, train=True)
        xhat = (x - x.mean(axis=(0, 1, 2))) / np.sqrt(x.var(axis=(0, 1, 2)) + bn.eps)
        g0 = np.array([0.7, -1.2])
        bn.backward(np.broadcast_to(g0, x.shape).copy())
        # both sides are ~0 for a constant grad (sum of xhat vanishes), so
        # compare absolutely at rounding scale
        np.testing.assert_allclose(bn.ggamma, (xhat * g0).sum(axis=(0, 1, 2)), atol=1e-12)

    def test_gradients_vs_oracle(self):
        rep = checksuite.check_batchnorm()
        assert rep.ok, rep.row("batchnorm")


class TestLeakyReLU:
    def test_paper_slope_value(self):
        assert LeakyReLU(0.15).forward(np.full((1, 1, 1, 1), -2.0))[0, 0, 0, 0] == -0.3

    def test_zero_slope_is_relu(self):
        assert LeakyReLU(0.0).forward(np.full((1, 1, 1, 1), -5.0))[0, 0, 0, 0] == 0.0

    def test_positive_identity(self):
        x = np.abs(np.random.default_rng(11).standard_normal((1, 3, 3, 2)))
        assert np.array_equal(LeakyReLU(0.15).forward(x), x)

    def test_subgradient_at_zero_uses_slope(self):
        act = LeakyReLU(0.15)
        act.forward(np.zeros((1, 1, 1, 1)))
        assert act.backward(np.ones((1, 1, 1, 1)))[0, 0, 0, 0] == 0.15

    def test_negative_slope_rejected(self):
        with pytest.raises(ValueError):
            LeakyReLU(-0.1)

    def test_gradients_vs_oracle(self):
        rep = checksuite.check_leaky_relu()
        assert rep.ok, rep.row("leaky_relu")


def maxpool_reference(x, kernel=3, stride=2, pad=1):
    """Max over the real cells each window covers (padding never wins)."""
    n, h, w, c = x.shape
    ho = out_size(h, kernel, stride, pad)
    wo = out_size(w, kernel, stride, pad)
    out = np.empty((n, ho, wo, c))
    for i in range(n):
        for y in range(ho):
            for xx in range(wo):
                for k in range(c):
                    vals = []
                    for u in range(kernel):
                        for v in range(kernel):
                            sy = y * stride + u - pad
                            sx = xx * stride + v - pad
                            if 0 <= sy < h and 0 <= sx < w:
                                vals.append(x[i, sy, sx, k])
                    out[i, y, xx, k] = max(vals)
    return out


class TestMaxPool:
    def test_matches_bruteforce_oracle(self):
        x = np.random.default_rng(12).standard_normal((1, 6, 6, 1))
        pool = MaxPool2D()
        np.testing.assert_allclose(pool.forward(x), maxpool_reference(x), rtol=0, atol=0)

    def test_halves_128(self):
        out = MaxPool2D().forward(np.random.default_rng(13).standard_normal((1, 128, 128, 1)))
        assert out.shape == (1, 64, 64, 1)

    def test_constant_input_negative_too(self):
        for value in (2.5, -3.0):
            out = MaxPool2D().forward(np.full((1, 6, 6, 2), value))
            assert np.all(out == value)

    def test_backward_concentrates_at_tie_break(self):
        # constant map: every window's grad lands on its first real cell in
        # scan order (lowest y, then lowest x)
        pool = MaxPool2D()
        x = np.ones((1, 4, 4, 1))
        out = pool.forward(x)
        assert out.shape == (1, 2, 2, 1)
        gx = pool.backward(np.ones_like(out))
        want = np.zeros((1, 4, 4, 1))
        # windows are centered at (0,0),(0,2),(2,0),(2,2); first real cell of
        # the corner window is (0,0), of the others the lowest-index real cell
        want[0, 0, 0, 0] += 1.0
        want[0, 0, 1, 0] += 1.0
        want[0, 1, 0, 0] += 1.0
        want[0, 1, 1, 0] += 1.0
        assert np.array_equal(gx, want)

    def test_backward_partitions_grad_mass(self):
        rng = np.random.default_rng(14)
        pool = MaxPool2D()
        x = rng.standard_normal((2, 9, 9, 3))
        out = pool.forward(x)
        g = rng.standard_normal(out.shape)
        gx = pool.backward(g)
        np.testing.assert_allclose(gx.sum(), g.sum(), rtol=1e-12)

    def test_gradients_vs_oracle(self):
        rep = checksuite.check_maxpool()
        assert rep.ok, rep.row("maxpool")


class TestConvBlock:
    def test_composition_equals_manual_chaining(self):
        rng = np.random.default_rng(15)
        block = ConvBlock(2, 3, slope=0.15, rng=rng, init_std=0.5)
        x = rng.standard_normal((2, 5, 5, 2))
        got = block.forward(x, train=True)
        manual_conv = Conv2D(2, 3)
        manual_conv.W[:] = block.conv.W
        manual_conv.b[:] = block.conv.b
        manual_bn = BatchNorm(3)
        manual_bn.gamma[:] = block.bn.gamma
        manual_bn.beta[:] = block.bn.beta
        want = LeakyReLU(0.15).forward(manual_bn.forward(manual_conv.forward(x), train=True))
        assert np.array_equal(got, want)

    def test_zero_weights_constant_map(self):
        block = ConvBlock(2, 2, slope=0.15)
        block.bn.beta[:] = [0.5, -2.0]
        out = block.forward(np.random.default_rng(16).standard_normal((1, 4, 4, 2)), train=True)
        # conv output is the (zero) bias everywhere, BN maps it to beta,
        # leaky relu scales the negative channel
        assert np.allclose(out[..., 0], 0.5, rtol=0, atol=0)
        assert np.allclose(out[..., 1], -0.3, rtol=0, atol=0)

    def test_gradients_vs_oracle(self):
        rep = checksuite.check_conv_block()
        assert rep.ok, rep.row("conv_block")


class TestDenseUnit:
    def test_table_shape_first_unit(self):
        rng = np.random.default_rng(17)
        unit = DenseUnit(64, 64, slope=0.15, rng=rng, init_std=0.01)
        out = unit.forward(rng.standard_normal((1, 128, 128, 64)), train=True)
        assert out.shape == (1, 128, 128, 64)

    def test_table_shape_last_unit(self):
        rng = np.random.default_rng(18)
        unit = DenseUnit(256, 320, slope=0.0, rng=rng, init_std=0.01)
        out = unit.forward(rng.standard_normal((1, 8, 8, 256)), train=True)
        assert out.shape == (1, 8, 8, 320)

    def test_concat_fanout_shapes(self):
        unit = DenseUnit(3, 5, slope=0.15, rng=np.random.default_rng(19))
        assert unit.block_a.conv.W.shape == (3, 3, 3, 5)
        assert unit.block_b.conv.W.shape == (3, 3, 8, 5)
        assert unit.block_c.conv.W.shape == (3, 3, 13, 5)

    def test_gradients_vs_oracle(self):
        rep = checksuite.check_dense_unit()
        assert rep.ok, rep.row("dense_unit")
