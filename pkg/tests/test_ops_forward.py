"""Forward semantics of the structured ops against hand values and the
scalar-loop oracles."""
import numpy as np
import pytest

from panseg import ops
from panseg.ops import ConvSpec
from panseg.tensor import ShapeError, Tensor

import oracles


class TestConv2d:
    def test_all_ones_3x3_padded(self):
        x = Tensor(np.ones((1, 1, 3, 3)))
        w = Tensor(np.ones((1, 1, 3, 3)))
        spec = ConvSpec(1, 1, 3, 3, stride=1, padding=1)
        out = ops.conv2d(x, w, None, spec)
        assert np.array_equal(out.data[0, 0], [[4, 6, 4], [6, 9, 6], [4, 6, 4]])

    def test_identity_1x1_kernel(self):
        rng = np.random.default_rng(0)
        x = Tensor(rng.normal(size=(2, 1, 5, 7)))
        w = Tensor(np.ones((1, 1, 1, 1)))
        out = ops.conv2d(x, w, None, ConvSpec(1, 1, 1, 1))
        assert np.array_equal(out.data, x.data)

    def test_zero_input_yields_bias(self):
        x = Tensor(np.zeros((1, 2, 5, 5)))
        rng = np.random.default_rng(1)
        w = Tensor(rng.normal(size=(3, 2, 3, 3)))
        b = Tensor(np.array([0.5, -1.0, 2.0]))
        out = ops.conv2d(x, w, b, ConvSpec(2, 3, 3, 3, padding=1, has_bias=True))
        for co, bv in enumerate([0.5, -1.0, 2.0]):
            assert np.allclose(out.data[:, co], bv)

    @pytest.mark.parametrize("stride,padding,dilation,kh,kw", [
        (1, 0, 1, 3, 3), (1, 1, 1, 3, 3), (2, 1, 1, 3, 3),
        (1, 2, 2, 3, 3), (1, 3, 1, 7, 7), (2, 2, 1, 5, 5), (1, 0, 1, 1, 1),
    ])
    def test_matches_oracle(self, stride, padding, dilation, kh, kw):
        rng = np.random.default_rng(stride * 100 + padding * 10 + dilation + kh)
        x = rng.normal(size=(2, 3, 8, 8))
        w = rng.normal(size=(4, 3, kh, kw))
        b = rng.normal(size=4)
        spec = ConvSpec(3, 4, kh, kw, stride=stride, padding=padding,
                        dilation=dilation, has_bias=True)
        got = ops.conv2d(Tensor(x), Tensor(w), Tensor(b), spec)
        ref = oracles.conv2d_ref(x, w, b, stride, padding, dilation)
        assert np.allclose(got.data, ref, atol=1e-10)

    def test_channel_mismatch_names_dimension(self):
        x = Tensor(np.zeros((1, 2, 4, 4)))
        w = Tensor(np.zeros((1, 3, 3, 3)))
        with pytest.raises(ShapeError, match="dim 1"):
            ops.conv2d(x, w, None, ConvSpec(3, 1, 3, 3))

    def test_non_positive_output_extent(self):
        x = Tensor(np.zeros((1, 1, 2, 2)))
        w = Tensor(np.zeros((1, 1, 3, 3)))
        with pytest.raises(ShapeError, match="output extent"):
            ops.conv2d(x, w, None, ConvSpec(1, 1, 3, 3))

    def test_dilated_impulse_support_widens(self):
        # A 3x3 kernel at dilation 2 has the footprint of a 5x5 kernel.
        x = np.zeros((1, 1, 9, 9))
        x[0, 0, 4, 4] = 1.0
        w = Tensor(np.ones((1, 1, 3, 3)))
        out = ops.conv2d(Tensor(x), w, None, ConvSpec(1, 1, 3, 3, padding=2, dilation=2))
        rows = np.nonzero(out.data[0, 0].sum(axis=1))[0]
        assert rows.min() == 2 and rows.max() == 6


class TestPool2d:
    def test_ave_2x2(self):
        x = Tensor(np.array([[1.0, 2.0], [3.0, 4.0]])[None, None])
        out = ops.pool2d(x, "ave", 2, 2)
        assert out.data.reshape(()) == 2.5

    def test_max_2x2(self):
        x = Tensor(np.array([[1.0, 2.0], [3.0, 4.0]])[None, None])
        out = ops.pool2d(x, "max", 2, 2)
        assert out.data.reshape(()) == 4.0

    @pytest.mark.parametrize("mode", ["max", "ave"])
    def test_constant_invariance(self, mode):
        x = Tensor(np.full((1, 2, 6, 6), 3.25))
        out = ops.pool2d(x, mode, 2, 2)
        assert np.all(out.data == 3.25)

    def test_kernel_too_large(self):
        with pytest.raises(ShapeError, match="kernel"):
            ops.pool2d(Tensor(np.zeros((1, 1, 3, 3))), "max", 4, 1)

    def test_ave_times_area_equals_window_sum(self):
        rng = np.random.default_rng(3)
        x = rng.normal(size=(1, 1, 8, 8))
        out = ops.pool2d(Tensor(x), "ave", 2, 2).data * 4.0
        # window sum accumulated in the same raster order the pool uses;
        # /4 then *4 is exact in binary, so equality is bitwise
        sums = np.zeros((1, 1, 4, 4))
        for i in range(4):
            for j in range(4):
                acc = 0.0
                for a in range(2):
                    for b in range(2):
                        acc += x[0, 0, 2 * i + a, 2 * j + b]
                sums[0, 0, i, j] = acc
        assert np.array_equal(out, sums)

    @pytest.mark.parametrize("mode,kernel,stride,padding", [
        ("max", 2, 2, 0), ("ave", 2, 2, 0), ("max", 3, 2, 1),
        ("ave", 3, 1, 0), ("max", 3, 3, 0),
    ])
    def test_matches_oracle(self, mode, kernel, stride, padding):
        rng = np.random.default_rng(kernel * 7 + stride)
        x = rng.normal(size=(2, 3, 7, 8))
        got = ops.pool2d(Tensor(x), mode, kernel, stride, padding)
        ref = oracles.pool2d_ref(x, mode, kernel, stride, padding)
        assert np.allclose(got.data, ref, atol=1e-12)


class TestGlobalAvgPool:
    def test_small_grid(self):
        x = Tensor(np.array([[1.0, 2.0], [3.0, 4.0]])[None, None])
        assert ops.global_avg_pool(x).data.reshape(()) == 2.5

    def test_constant(self):
        x = Tensor(np.full((2, 3, 5, 5), -1.5))
        assert np.all(ops.global_avg_pool(x).data == -1.5)

    def test_arange_raster(self):
        x = Tensor(np.arange(16, dtype=float).reshape(1, 1, 4, 4))
        assert ops.global_avg_pool(x).data.reshape(()) == 7.5


class TestBilinearUpsample:
    def test_constant_input(self):
        x = Tensor(np.full((1, 2, 3, 3), 4.5))
        out = ops.bilinear_upsample(x, 7, 9)
        assert np.all(out.data == 4.5)

    def test_single_pixel_broadcasts(self):
        x = Tensor(np.array([[[[3.14]]]]))
        out = ops.bilinear_upsample(x, 5, 6)
        assert np.all(out.data == 3.14)

    def test_2x2_to_4x4_matches_oracle(self):
        x = np.array([[1.0, 2.0], [3.0, 4.0]])[None, None]
        got = ops.bilinear_upsample(Tensor(x), 4, 4)
        ref = oracles.bilinear_upsample_ref(x, 4, 4)
        assert np.allclose(got.data, ref, atol=1e-12)

    @pytest.mark.parametrize("h,w,oh,ow", [(2, 3, 5, 7), (4, 4, 8, 8), (3, 5, 3, 5), (1, 1, 4, 4)])
    def test_matches_oracle(self, h, w, oh, ow):
        rng = np.random.default_rng(h * 10 + w)
        x = rng.normal(size=(2, 2, h, w))
        got = ops.bilinear_upsample(Tensor(x), oh, ow)
        assert np.allclose(got.data, oracles.bilinear_upsample_ref(x, oh, ow), atol=1e-12)

    def test_same_size_is_identity(self):
        rng = np.random.default_rng(9)
        x = rng.normal(size=(1, 1, 4, 6))
        out = ops.bilinear_upsample(Tensor(x), 4, 6)
        assert np.array_equal(out.data, x)

    def test_downsampling_rejected(self):
        with pytest.raises(ShapeError, match="downsampl"):
            ops.bilinear_upsample(Tensor(np.zeros((1, 1, 4, 4))), 2, 4)


class TestBatchNorm:
    def test_train_normalizes(self):
        rng = np.random.default_rng(11)
        x = rng.normal(2.0, 3.0, size=(4, 3, 6, 6))
        eps = 1e-8
        out = ops.batch_norm2d(Tensor(x), Tensor(np.ones(3)), Tensor(np.zeros(3)),
                               np.zeros(3), np.ones(3), training=True, eps=eps)
        for c in range(3):
            ch = out.data[:, c]
            var_in = x[:, c].var()
            assert abs(ch.mean()) < 1e-12
            # output variance is exactly var/(var+eps)
            assert abs(ch.var() - var_in / (var_in + eps)) < 1e-9

    def test_eval_identity_stats(self):
        rng = np.random.default_rng(12)
        x = rng.normal(size=(2, 2, 4, 4))
        out = ops.batch_norm2d(Tensor(x), Tensor(np.ones(2)), Tensor(np.zeros(2)),
                               np.zeros(2), np.ones(2), training=False, eps=1e-12)
        assert np.allclose(out.data, x, atol=1e-9)

    def test_affine_is_exact(self):
        rng = np.random.default_rng(13)
        x = rng.normal(size=(2, 2, 4, 4))
        args = dict(running_mean=np.zeros(2), running_var=np.ones(2), training=True, eps=1e-5)
        xhat = ops.batch_norm2d(Tensor(x), Tensor(np.ones(2)), Tensor(np.zeros(2)),
                                np.zeros(2), np.ones(2), training=True, eps=1e-5).data
        out = ops.batch_norm2d(Tensor(x), Tensor(np.full(2, 2.0)), Tensor(np.full(2, 3.0)),
                               **args).data
        assert np.array_equal(out, 2.0 * xhat + 3.0)

    def test_matches_oracle_both_modes(self):
        rng = np.random.default_rng(14)
        x = rng.normal(size=(2, 3, 5, 5))
        gamma, beta = rng.normal(size=3), rng.normal(size=3)
        rm, rv = rng.normal(size=3), rng.uniform(0.5, 2.0, size=3)
        for training in (True, False):
            got = ops.batch_norm2d(Tensor(x), Tensor(gamma), Tensor(beta),
                                   rm.copy(), rv.copy(), training=training, eps=1e-5)
            ref = oracles.batch_norm_ref(x, gamma, beta, rm, rv, training, 1e-5)
            assert np.allclose(got.data, ref, atol=1e-10)

    def test_running_stats_ema(self):
        rng = np.random.default_rng(15)
        x = rng.normal(1.0, 2.0, size=(4, 2, 3, 3))
        rm, rv = np.zeros(2), np.ones(2)
        ops.batch_norm2d(Tensor(x), Tensor(np.ones(2)), Tensor(np.zeros(2)),
                         rm, rv, training=True, momentum=0.1)
        m = 4 * 3 * 3
        assert np.allclose(rm, 0.1 * x.mean(axis=(0, 2, 3)))
        assert np.allclose(rv, 0.9 + 0.1 * x.var(axis=(0, 2, 3)) * m / (m - 1))

    def test_singleton_batch_rejected_in_train(self):
        with pytest.raises(ShapeError, match="variance"):
            ops.batch_norm2d(Tensor(np.ones((1, 2, 1, 1))), Tensor(np.ones(2)),
                             Tensor(np.zeros(2)), np.zeros(2), np.ones(2), training=True)


class TestCrossEntropy:
    def test_uniform_two_classes(self):
        logits = Tensor(np.zeros((1, 2, 1, 1)))
        labels = np.zeros((1, 1, 1), dtype=np.int64)
        loss = ops.cross_entropy(logits, labels)
        assert np.isclose(loss.data, np.log(2.0), atol=1e-12)

    def test_huge_logits_no_overflow(self):
        logits = np.zeros((1, 2, 1, 1))
        logits[0, 0] = 1000.0
        loss = ops.cross_entropy(Tensor(logits), np.zeros((1, 1, 1), dtype=np.int64))
        assert 0.0 <= float(loss.data) < 1e-300 or float(loss.data) == 0.0

    def test_ignored_pixel_masked(self):
        rng = np.random.default_rng(16)
        logits = rng.normal(size=(1, 3, 1, 2))
        labels = np.array([[[1, 255]]], dtype=np.int64)
        loss = ops.cross_entropy(Tensor(logits), labels)
        solo = ops.cross_entropy(Tensor(logits[:, :, :, :1]), labels[:, :, :1])
        assert np.isclose(float(loss.data), float(solo.data), atol=1e-14)

    def test_all_ignored_is_error(self):
        with pytest.raises(ShapeError, match="ignored"):
            ops.cross_entropy(Tensor(np.zeros((1, 2, 1, 1))),
                              np.full((1, 1, 1), 255, dtype=np.int64))

    def test_out_of_range_label_is_error(self):
        with pytest.raises(ShapeError, match="outside"):
            ops.cross_entropy(Tensor(np.zeros((1, 2, 1, 1))),
                              np.full((1, 1, 1), 5, dtype=np.int64))

    def test_matches_oracle(self):
        rng = np.random.default_rng(17)
        for case in range(5):
            logits = rng.normal(size=(2, 4, 3, 3)) * 3
            labels = rng.integers(0, 4, size=(2, 3, 3))
            labels[rng.random(labels.shape) < 0.2] = 255
            if (labels == 255).all():
                labels[0, 0, 0] = 0
            got = ops.cross_entropy(Tensor(logits), labels)
            ref = oracles.cross_entropy_ref(logits, labels, 255)
            assert np.isclose(float(got.data), ref, atol=1e-12)

    def test_internal_softmax_rows_sum_to_one(self):
        rng = np.random.default_rng(18)
        logits = rng.normal(size=(2, 5, 4, 4)) * 10
        probs = ops.softmax_probs(logits, axis=1)
        assert np.allclose(probs.sum(axis=1), 1.0, atol=1e-12)
