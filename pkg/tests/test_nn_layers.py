"""Layer behavior and per-layer gradient checks against finite differences."""

import numpy as np
import pytest

from nmsse.nn.autodiff import Tensor, gradient_check
from nmsse.nn.layers import (
    AFF,
    IAFF,
    BatchNorm,
    Conv1d,
    Downsample,
    LSTMLayer,
    LSTMStack,
    MSCAM,
    PWConv,
    conv1d_op,
    downsample_geometry,
    global_avg_pool,
)

RNG = lambda s: np.random.default_rng(s)


def check_layer_gradients(forward, x, params, tol=1e-4):
    # weight the output with a fixed random probe; a plain sum of squares
    # is nearly constant after normalization layers and the finite
    # differences then drown in rounding noise
    probe = Tensor(RNG(99).standard_normal(forward().shape))
    tensors = [x] + list(params)
    return gradient_check(lambda *_: (forward() * probe).sum(), tensors) <= tol


class TestConv1d:
    def test_identity_kernel(self):
        x = Tensor(RNG(0).standard_normal((2, 6, 1)))
        w = Tensor(np.ones((1, 1, 1)))
        b = Tensor(np.zeros(1))
        out = conv1d_op(x, w, b, stride=1)
        np.testing.assert_allclose(out.data, x.data)

    def test_output_length_formula(self):
        x = Tensor(np.zeros((1, 100, 2)))
        conv = Conv1d(kernel=9, c_in=2, c_out=3, stride=10, rng=RNG(1))
        assert conv(x).shape == (1, 10, 3)

    def test_kernel_longer_than_input(self):
        conv = Conv1d(kernel=5, c_in=1, c_out=1, stride=1, rng=RNG(2))
        with pytest.raises(ValueError, match="exceeds"):
            conv(Tensor(np.zeros((1, 3, 1))))

    def test_matches_dense_matrix(self):
        # the conv is linear; realize it as an explicit matrix and compare
        rng = RNG(3)
        conv = Conv1d(kernel=4, c_in=2, c_out=3, stride=2, rng=rng)
        length = 12
        zero = conv(Tensor(np.zeros((1, length, 2)))).data.reshape(-1)
        basis = np.eye(length * 2)
        dense = np.stack(
            [
                conv(Tensor(e.reshape(1, length, 2))).data.reshape(-1) - zero
                for e in basis
            ],
            axis=1,
        )
        x = rng.standard_normal((1, length, 2))
        np.testing.assert_allclose(
            conv(Tensor(x)).data.reshape(-1), dense @ x.reshape(-1) + zero, atol=1e-12
        )

    @pytest.mark.parametrize("seed", range(3))
    def test_gradients(self, seed):
        rng = RNG(100 + seed)
        conv = Conv1d(kernel=3, c_in=2, c_out=2, stride=2, rng=rng)
        x = Tensor(rng.standard_normal((2, 8, 2)), requires_grad=True)
        ok = check_layer_gradients(lambda: conv(x), x, conv.params().values())
        assert ok


class TestDownsample:
    @pytest.mark.parametrize("length,expected", [(100, (10, 10)), (50, (5, 5)), (10, (1, 1))])
    def test_documented_geometry(self, length, expected):
        assert downsample_geometry(length) == expected

    @pytest.mark.parametrize("length", range(10, 201))
    def test_always_ten_outputs(self, length):
        p, r = downsample_geometry(length)
        assert p >= 1 and r >= 1
        assert (length - p) // r + 1 == 10

    def test_too_short(self):
        with pytest.raises(ValueError, match="at least 10"):
            downsample_geometry(7)

    def test_layer_emits_ten_steps(self):
        layer = Downsample(37, c_in=2, c_out=2, rng=RNG(5))
        out = layer(Tensor(np.zeros((3, 37, 2))))
        assert out.shape == (3, 10, 2)
        with pytest.raises(ValueError, match="built for length"):
            layer(Tensor(np.zeros((3, 36, 2))))

    def test_averaging_kernel_keeps_constants(self):
        layer = Downsample(50, c_in=1, c_out=1, rng=RNG(6))
        layer.conv.w.data[:] = 1.0 / layer.conv.kernel
        layer.conv.b.data[:] = 0.0
        out = layer(Tensor(np.full((1, 50, 1), 0.7)))
        np.testing.assert_allclose(out.data, 0.7)


class TestPWConv:
    def test_is_shared_affine_over_time(self):
        rng = RNG(7)
        pw = PWConv(3, 2, rng)
        x = rng.standard_normal((2, 5, 3))
        out = pw(Tensor(x)).data
        np.testing.assert_allclose(out, x @ pw.w.data + pw.b.data)

    def test_gradients(self):
        rng = RNG(8)
        pw = PWConv(2, 2, rng)
        x = Tensor(rng.standard_normal((2, 4, 2)), requires_grad=True)
        assert check_layer_gradients(lambda: pw(x), x, pw.params().values())


class TestBatchNorm:
    def test_training_normalizes_batch(self):
        bn = BatchNorm(3)
        x = Tensor(RNG(9).standard_normal((8, 5, 3)) * 4.0 + 2.0)
        out = bn(x, training=True).data
        np.testing.assert_allclose(out.mean(axis=(0, 1)), 0.0, atol=1e-12)
        np.testing.assert_allclose(out.std(axis=(0, 1)), 1.0, atol=1e-3)

    def test_inference_uses_frozen_stats(self):
        bn = BatchNorm(2)
        rng = RNG(10)
        for _ in range(50):
            bn(Tensor(rng.standard_normal((16, 4, 2)) * 3.0 + 1.0), training=True)
        x = Tensor(rng.standard_normal((4, 4, 2)))
        first = bn(x, training=False).data
        second = bn(x, training=False).data
        np.testing.assert_array_equal(first, second)
        # frozen stats should be near the generating distribution
        np.testing.assert_allclose(bn.running_mean, 1.0, atol=0.3)
        np.testing.assert_allclose(bn.running_var, 9.0, rtol=0.3)

    def test_identity_when_unit_stats(self):
        bn = BatchNorm(2, eps=0.0)
        x = Tensor(RNG(11).standard_normal((3, 4, 2)))
        np.testing.assert_allclose(bn(x, training=False).data, x.data)

    def test_gradients_training_mode(self):
        bn = BatchNorm(2)
        x = Tensor(RNG(12).standard_normal((3, 4, 2)), requires_grad=True)
        assert check_layer_gradients(lambda: bn(x, training=True), x, bn.params().values())


class TestLSTM:
    def test_zero_everything_gives_zero(self):
        layer = LSTMLayer(2, 3, RNG(13))
        for p in layer.params().values():
            p.data[:] = 0.0
        h, c = layer.step(Tensor(np.zeros((1, 2))), Tensor(np.zeros((1, 3))), Tensor(np.zeros((1, 3))))
        np.testing.assert_allclose(h.data, 0.0)
        np.testing.assert_allclose(c.data, 0.0)

    def test_saturated_gates_retain_memory(self):
        layer = LSTMLayer(2, 3, RNG(14))
        u = layer.units
        layer.b.data[:u] = -30.0  # input gate shut
        layer.b.data[u : 2 * u] = 30.0  # forget gate open
        layer.wx.data[:, : 2 * u] = 0.0
        layer.wh.data[:, : 2 * u] = 0.0
        c_prev = Tensor(RNG(15).standard_normal((2, 3)))
        _, c = layer.step(Tensor(RNG(16).standard_normal((2, 2))), Tensor(np.zeros((2, 3))), c_prev)
        np.testing.assert_allclose(c.data, c_prev.data, atol=1e-10)

    def test_sequence_shape(self):
        stack = LSTMStack(2, [4, 3], RNG(17))
        out = stack(Tensor(np.zeros((5, 7, 2))))
        assert out.shape == (5, 7, 3)

    @pytest.mark.parametrize("seed", range(3))
    def test_cell_gradients(self, seed):
        rng = RNG(200 + seed)
        layer = LSTMLayer(3, 4, rng)
        x = Tensor(rng.standard_normal((2, 5, 3)), requires_grad=True)
        assert check_layer_gradients(lambda: layer(x), x, layer.params().values())


class TestAttention:
    def test_zero_weights_give_half(self):
        cam = MSCAM(4, RNG(18))
        for name, p in cam.params().items():
            if "pw" in name:
                p.data[:] = 0.0
        m = cam(Tensor(RNG(19).standard_normal((2, 6, 4))), training=False)
        np.testing.assert_allclose(m.data, 0.5)

    def test_constant_time_input_gives_uniform_weights(self):
        cam = MSCAM(4, RNG(20))
        x = np.repeat(RNG(21).standard_normal((2, 1, 4)), 6, axis=1)
        m = cam(Tensor(x), training=False).data
        np.testing.assert_allclose(np.ptp(m, axis=1), 0.0, atol=1e-12)

    def test_weights_in_unit_interval(self):
        cam = MSCAM(4, RNG(22))
        m = cam(Tensor(RNG(23).standard_normal((3, 5, 4)) * 3.0), training=False).data
        assert np.all(m > 0.0) and np.all(m < 1.0)

    def test_needs_two_channels(self):
        with pytest.raises(ValueError, match="two channels"):
            MSCAM(1, RNG(24))

    def test_gap_shape(self):
        out = global_avg_pool(Tensor(np.ones((2, 9, 3))))
        assert out.shape == (2, 1, 3)
        np.testing.assert_allclose(out.data, 1.0)

    def test_aff_equal_inputs_pass_through(self):
        aff = AFF(4, RNG(25))
        x = Tensor(RNG(26).standard_normal((2, 5, 4)))
        out = aff(x, x, training=False)
        np.testing.assert_allclose(out.data, x.data, atol=1e-12)

    def test_aff_is_convex_blend(self):
        aff = AFF(4, RNG(27))
        rng = RNG(28)
        x, y = rng.standard_normal((2, 5, 4)), rng.standard_normal((2, 5, 4))
        out = aff(Tensor(x), Tensor(y), training=False).data
        assert np.all(out >= np.minimum(x, y) - 1e-12)
        assert np.all(out <= np.maximum(x, y) + 1e-12)

    def test_aff_shape_mismatch(self):
        aff = AFF(4, RNG(29))
        with pytest.raises(ValueError, match="shape"):
            aff(Tensor(np.zeros((1, 5, 4))), Tensor(np.zeros((1, 6, 4))), training=False)

    def test_iaff_equal_inputs_pass_through(self):
        fuse = IAFF(4, RNG(30))
        x = Tensor(RNG(31).standard_normal((2, 5, 4)))
        np.testing.assert_allclose(fuse(x, x, training=False).data, x.data, atol=1e-12)

    def test_iaff_zero_weights_average(self):
        fuse = IAFF(4, RNG(32))
        for name, p in fuse.params().items():
            if "pw" in name:
                p.data[:] = 0.0
        rng = RNG(33)
        x, y = rng.standard_normal((2, 5, 4)), rng.standard_normal((2, 5, 4))
        out = fuse(Tensor(x), Tensor(y), training=False).data
        np.testing.assert_allclose(out, 0.5 * (x + y), atol=1e-12)

    # attention modules are checked in inference mode: under training-mode
    # normalization a uniform shift from a pointwise bias is centered away,
    # so those biases have exactly zero gradient and the relative error
    # of the finite difference is pure rounding noise.  The batch-moment
    # backward itself is covered by the standalone batch-norm check above.
    def test_mscam_gradients(self):
        rng = RNG(34)
        cam = MSCAM(4, rng)
        x = Tensor(rng.standard_normal((2, 3, 4)), requires_grad=True)
        assert check_layer_gradients(lambda: cam(x, training=False), x, cam.params().values())

    def test_iaff_gradients(self):
        rng = RNG(35)
        fuse = IAFF(2, rng)
        x = Tensor(rng.standard_normal((2, 3, 2)), requires_grad=True)
        y = Tensor(rng.standard_normal((2, 3, 2)), requires_grad=True)
        probe = Tensor(RNG(36).standard_normal((2, 3, 2)))
        tensors = [x, y] + list(fuse.params().values())
        err = gradient_check(
            lambda *_: (fuse(x, y, training=False) * probe).sum(), tensors
        )
        assert err <= 1e-4

    def test_zero_gradient_biases_under_training_norm(self):
        # documents the degeneracy: in training mode the bias ahead of a
        # batch norm cannot move the loss at all
        rng = RNG(37)
        cam = MSCAM(4, rng)
        x = Tensor(rng.standard_normal((2, 3, 4)), requires_grad=True)
        loss = (cam(x, training=True) * Tensor(RNG(38).standard_normal((2, 3, 4)))).sum()
        loss.backward()
        for name, p in cam.params().items():
            if name.endswith("pw1.b") or name.endswith("pw2.b"):
                assert np.abs(p.grad).max() < 1e-12, name
