import numpy as np
import pytest

from tsgb.tensor import (
    ConvGeometry,
    ShapeMismatchError,
    Tensor,
    adaptive_avgpool2d,
    adaptive_avgpool2d_scatter,
    avgpool2d,
    avgpool2d_scatter,
    channel_sum,
    conv2d,
    conv2d_transposed,
    div_with_eps,
    ew_mul,
    global_avgpool,
    global_avgpool_scatter,
    guard_hits,
    maxpool2d,
    maxpool2d_backward,
    sign_mask,
    tensor_abs,
)

from oracles import naive_avgpool2d, naive_conv2d, naive_conv2d_transposed, naive_maxpool2d


def t(arr):
    return Tensor(np.asarray(arr, dtype=np.float32))


def rand_tensor(rng, shape):
    return Tensor(rng.standard_normal(shape).astype(np.float32))


class TestTensorType:
    def test_rejects_wrong_rank(self):
        with pytest.raises(ShapeMismatchError):
            Tensor(np.zeros((2, 3, 4)))

    def test_data_is_immutable(self):
        x = Tensor.zeros((1, 1, 2, 2))
        with pytest.raises(ValueError):
            x.data[0, 0, 0, 0] = 1.0

    def test_construction_copies(self):
        src = np.ones((1, 1, 2, 2), dtype=np.float32)
        x = Tensor(src)
        src[0, 0, 0, 0] = 5.0
        assert x.data[0, 0, 0, 0] == 1.0


class TestConvGeometry:
    def test_out_hw_formula(self):
        g = ConvGeometry(1, 1, (3, 3), (2, 2), (1, 1))
        assert g.out_hw((7, 9)) == (4, 5)

    def test_non_positive_output_rejected(self):
        g = ConvGeometry(1, 1, (5, 5))
        with pytest.raises(ShapeMismatchError):
            g.out_hw((4, 4))

    def test_bad_fields_rejected(self):
        with pytest.raises(ShapeMismatchError):
            ConvGeometry(0, 1, (3, 3))
        with pytest.raises(ShapeMismatchError):
            ConvGeometry(1, 1, (3, 3), (0, 1))
        with pytest.raises(ShapeMismatchError):
            ConvGeometry(1, 1, (3, 3), (1, 1), (-1, 0))


class TestConv2d:
    def test_all_ones_window_sums_to_nine(self):
        g = ConvGeometry(1, 1, (3, 3))
        out = conv2d(t(np.ones((1, 1, 3, 3))), t(np.ones((1, 1, 3, 3))), None, g)
        assert out.shape == (1, 1, 1, 1)
        assert out.data[0, 0, 0, 0] == 9.0

    def test_identity_kernel(self):
        rng = np.random.default_rng(0)
        x = rand_tensor(rng, (1, 1, 5, 5))
        g = ConvGeometry(1, 1, (1, 1))
        out = conv2d(x, t(np.ones((1, 1, 1, 1))), None, g)
        np.testing.assert_array_equal(out.data, x.data)

    def test_matches_naive_loops_padded(self):
        rng = np.random.default_rng(1)
        x = rand_tensor(rng, (1, 2, 5, 5))
        w = rand_tensor(rng, (3, 2, 3, 3))
        b = rng.standard_normal(3).astype(np.float32)
        g = ConvGeometry(2, 3, (3, 3), (1, 1), (1, 1))
        out = conv2d(x, w, b, g)
        ref = naive_conv2d(x.data, w.data, b, (1, 1), (1, 1))
        np.testing.assert_allclose(out.data, ref, rtol=1e-6, atol=1e-6)

    def test_matches_naive_loops_randomized(self):
        rng = np.random.default_rng(2)
        for _ in range(100):
            m = int(rng.integers(1, 4))
            n = int(rng.integers(1, 4))
            kh, kw = int(rng.integers(1, 4)), int(rng.integers(1, 4))
            sh, sw = int(rng.integers(1, 3)), int(rng.integers(1, 3))
            ph, pw = int(rng.integers(0, 2)), int(rng.integers(0, 2))
            h = int(rng.integers(kh, kh + 5))
            w = int(rng.integers(kw, kw + 5))
            x = rand_tensor(rng, (1, m, h, w))
            wt = rand_tensor(rng, (n, m, kh, kw))
            b = rng.standard_normal(n).astype(np.float32)
            geom = ConvGeometry(m, n, (kh, kw), (sh, sw), (ph, pw))
            out = conv2d(x, wt, b, geom)
            ref = naive_conv2d(x.data, wt.data, b, (sh, sw), (ph, pw))
            scale = max(np.abs(ref).max(), 1e-12)
            assert np.abs(out.data - ref).max() / scale < 1e-5

    def test_channel_mismatch_names_extent(self):
        g = ConvGeometry(2, 3, (3, 3))
        x = Tensor.zeros((1, 4, 5, 5))
        w = Tensor.zeros((3, 2, 3, 3))
        with pytest.raises(ShapeMismatchError, match="channel extent 4"):
            conv2d(x, w, None, g)

    def test_purity(self):
        rng = np.random.default_rng(3)
        x = rand_tensor(rng, (1, 2, 4, 4))
        w = rand_tensor(rng, (2, 2, 3, 3))
        g = ConvGeometry(2, 2, (3, 3), (1, 1), (1, 1))
        before = x.data.copy()
        a = conv2d(x, w, None, g)
        b = conv2d(x, w, None, g)
        np.testing.assert_array_equal(x.data, before)
        np.testing.assert_array_equal(a.data, b.data)


class TestConv2dTransposed:
    def test_single_pixel_scatters_block(self):
        g = ConvGeometry(1, 1, (3, 3))
        y = np.zeros((1, 1, 3, 3), dtype=np.float32)
        y[0, 0, 1, 1] = 1.0
        out = conv2d_transposed(t(y), t(np.ones((1, 1, 3, 3))), g)
        assert out.shape == (1, 1, 5, 5)
        np.testing.assert_array_equal(out.data[0, 0, 1:4, 1:4], np.ones((3, 3)))
        assert out.data.sum() == 9.0

    def test_adjoint_identity(self):
        rng = np.random.default_rng(4)
        for _ in range(50):
            m = int(rng.integers(1, 4))
            n = int(rng.integers(1, 4))
            kh, kw = int(rng.integers(1, 4)), int(rng.integers(1, 4))
            sh, sw = int(rng.integers(1, 3)), int(rng.integers(1, 3))
            ph, pw = int(rng.integers(0, 2)), int(rng.integers(0, 2))
            h = int(rng.integers(kh + 1, kh + 6))
            w = int(rng.integers(kw + 1, kw + 6))
            geom = ConvGeometry(m, n, (kh, kw), (sh, sw), (ph, pw))
            x = rand_tensor(rng, (1, m, h, w))
            wt = rand_tensor(rng, (n, m, kh, kw))
            y = rand_tensor(rng, (1, n, *geom.out_hw((h, w))))
            fwd = conv2d(x, wt, None, geom)
            adj = conv2d_transposed(y, wt, geom, output_hw=(h, w))
            # inner products accumulated in float64 so only the ops' own
            # float32 rounding is measured
            lhs = float(np.vdot(fwd.data.astype(np.float64), y.data.astype(np.float64)))
            rhs = float(np.vdot(x.data.astype(np.float64), adj.data.astype(np.float64)))
            assert abs(lhs - rhs) <= 1e-4 * max(abs(lhs), 1e-6)

    def test_stride2_matches_naive_scatter(self):
        rng = np.random.default_rng(5)
        geom = ConvGeometry(2, 3, (3, 3), (2, 2), (1, 1))
        y = rand_tensor(rng, (1, 3, 4, 4))
        k = rand_tensor(rng, (3, 2, 3, 3))
        out = conv2d_transposed(y, k, geom, output_hw=(8, 8))
        ref = naive_conv2d_transposed(y.data, k.data, (2, 2), (1, 1), (8, 8))
        np.testing.assert_allclose(out.data, ref, rtol=1e-5, atol=1e-6)

    def test_inconsistent_geometry_rejected(self):
        geom = ConvGeometry(1, 1, (3, 3), (2, 2))
        y = Tensor.zeros((1, 1, 4, 4))
        k = Tensor.zeros((1, 1, 3, 3))
        with pytest.raises(ShapeMismatchError):
            conv2d_transposed(y, k, geom, output_hw=(20, 20))


class TestElementwise:
    def test_sign_mask(self):
        x = t(np.array([-2.0, 0.0, 3.0]).reshape(1, 1, 1, 3))
        np.testing.assert_array_equal(
            sign_mask(x).data.ravel(), np.array([-1.0, 0.0, 1.0], dtype=np.float32)
        )

    def test_channel_sum_of_ones(self):
        out = channel_sum(Tensor(np.ones((1, 3, 2, 2), dtype=np.float32)))
        assert out.shape == (1, 1, 2, 2)
        np.testing.assert_array_equal(out.data, np.full((1, 1, 2, 2), 3.0, dtype=np.float32))

    def test_div_guard_at_zero(self):
        one = Tensor.full((1, 1, 1, 1), 1.0)
        zero = Tensor.zeros((1, 1, 1, 1))
        out = div_with_eps(one, zero, eps=1e-6)
        assert np.isfinite(out.data).all()
        np.testing.assert_allclose(out.data[0, 0, 0, 0], 1e6, rtol=1e-3)

    def test_div_guard_preserves_sign(self):
        one = Tensor.full((1, 1, 1, 1), 1.0)
        neg = Tensor.full((1, 1, 1, 1), -2.0)
        out = div_with_eps(one, neg)
        assert out.data[0, 0, 0, 0] < 0

    def test_guard_hits_counts_small_cells(self):
        b = t(np.array([0.0, 1e-9, 0.5, -1e-8]).reshape(1, 1, 1, 4))
        assert guard_hits(b, eps=1e-6) == 3

    def test_channel_broadcast(self):
        a = Tensor(np.ones((1, 3, 2, 2), dtype=np.float32))
        b = Tensor(np.full((1, 1, 2, 2), 2.0, dtype=np.float32))
        out = ew_mul(a, b)
        assert out.shape == (1, 3, 2, 2)
        assert (out.data == 2.0).all()

    def test_shape_mismatch_rejected(self):
        a = Tensor.zeros((1, 2, 2, 2))
        b = Tensor.zeros((1, 2, 3, 2))
        with pytest.raises(ShapeMismatchError):
            ew_mul(a, b)

    def test_abs(self):
        x = t(np.array([-1.5, 2.0]).reshape(1, 1, 1, 2))
        np.testing.assert_array_equal(tensor_abs(x).data.ravel(), [1.5, 2.0])


class TestPooling:
    def test_maxpool_matches_naive(self):
        rng = np.random.default_rng(6)
        x = rand_tensor(rng, (1, 2, 7, 7))
        out = maxpool2d(x, (3, 3), (2, 2), (1, 1))
        ref = naive_maxpool2d(x.data, (3, 3), (2, 2), (1, 1))
        np.testing.assert_allclose(out.data, ref, rtol=1e-6)

    def test_maxpool_backward_routes_to_argmax(self):
        x = t(np.array([[1.0, 2.0], [4.0, 3.0]]).reshape(1, 1, 2, 2))
        g = t(np.array([[10.0]]).reshape(1, 1, 1, 1))
        out = maxpool2d_backward(x, g, (2, 2), (2, 2))
        expect = np.zeros((1, 1, 2, 2), dtype=np.float32)
        expect[0, 0, 1, 0] = 10.0
        np.testing.assert_array_equal(out.data, expect)

    def test_maxpool_backward_tie_breaks_row_major(self):
        x = Tensor(np.ones((1, 1, 2, 2), dtype=np.float32))
        g = t(np.array([[7.0]]).reshape(1, 1, 1, 1))
        out = maxpool2d_backward(x, g, (2, 2), (2, 2))
        expect = np.zeros((1, 1, 2, 2), dtype=np.float32)
        expect[0, 0, 0, 0] = 7.0
        np.testing.assert_array_equal(out.data, expect)

    def test_avgpool_matches_naive(self):
        rng = np.random.default_rng(7)
        x = rand_tensor(rng, (1, 3, 6, 6))
        out = avgpool2d(x, (2, 2), (2, 2))
        ref = naive_avgpool2d(x.data, (2, 2), (2, 2))
        np.testing.assert_allclose(out.data, ref, rtol=1e-6)

    def test_avgpool_scatter_is_adjoint(self):
        rng = np.random.default_rng(8)
        x = rand_tensor(rng, (1, 2, 6, 6))
        y = rand_tensor(rng, (1, 2, 3, 3))
        lhs = float(np.vdot(avgpool2d(x, (2, 2), (2, 2)).data, y.data))
        rhs = float(np.vdot(x.data, avgpool2d_scatter(y, (6, 6), (2, 2), (2, 2)).data))
        assert abs(lhs - rhs) <= 1e-5 * abs(lhs)

    def test_adaptive_avgpool_even_partition(self):
        x = Tensor(np.arange(16, dtype=np.float32).reshape(1, 1, 4, 4))
        out = adaptive_avgpool2d(x, (2, 2))
        np.testing.assert_allclose(
            out.data[0, 0], np.array([[2.5, 4.5], [10.5, 12.5]]), rtol=1e-6
        )

    def test_adaptive_scatter_adjoint(self):
        rng = np.random.default_rng(9)
        x = rand_tensor(rng, (1, 2, 5, 7))
        y = rand_tensor(rng, (1, 2, 2, 3))
        lhs = float(np.vdot(adaptive_avgpool2d(x, (2, 3)).data, y.data))
        rhs = float(np.vdot(x.data, adaptive_avgpool2d_scatter(y, (5, 7)).data))
        assert abs(lhs - rhs) <= 1e-5 * max(abs(lhs), 1e-6)

    def test_global_avgpool_and_scatter(self):
        rng = np.random.default_rng(10)
        x = rand_tensor(rng, (1, 3, 4, 4))
        out = global_avgpool(x)
        np.testing.assert_allclose(
            out.data[0, :, 0, 0], x.data.mean(axis=(2, 3))[0], rtol=1e-6
        )
        y = rand_tensor(rng, (1, 3, 1, 1))
        lhs = float(np.vdot(out.data, y.data))
        rhs = float(np.vdot(x.data, global_avgpool_scatter(y, (4, 4)).data))
        assert abs(lhs - rhs) <= 1e-5 * max(abs(lhs), 1e-6)
