import numpy as np
import pytest

from voxseg import autodiff as ad
from voxseg.autodiff import Tensor

from helpers import check_gradients, rand_away_from_zero


class TestConv3d:
    def test_identity_kernel(self):
        rng = np.random.default_rng(0)
        x = Tensor(np.full((1, 1, 4, 4, 4), 3.7))
        k = Tensor(np.ones((1, 1, 1, 1, 1)))
        b = Tensor(np.zeros(1))
        out = ad.conv3d(x, k, b)
        np.testing.assert_allclose(out.data, x.data)

    def test_sum_of_ones(self):
        x = Tensor(np.ones((1, 1, 3, 3, 3)))
        k = Tensor(np.ones((1, 1, 3, 3, 3)))
        out = ad.conv3d(x, k, Tensor(np.zeros(1)))
        assert out.shape == (1, 1, 1, 1, 1)
        assert out.data.reshape(()) == pytest.approx(27.0)

    def test_output_shape_stride_padding(self):
        x = Tensor(np.zeros((2, 3, 9, 8, 7)))
        k = Tensor(np.zeros((4, 3, 3, 3, 3)))
        out = ad.conv3d(x, k, stride=2, padding=1)
        # D' = floor((D + 2p - k)/s) + 1
        assert out.shape == (2, 4, 5, 4, 4)

    def test_channel_mismatch_raises(self):
        x = Tensor(np.zeros((1, 2, 4, 4, 4)))
        k = Tensor(np.zeros((1, 3, 3, 3, 3)))
        with pytest.raises(ValueError, match="channels"):
            ad.conv3d(x, k)

    def test_gradients(self):
        rng = np.random.default_rng(1)
        x = rng.standard_normal((1, 2, 5, 5, 5))
        k = rng.standard_normal((3, 2, 3, 3, 3)) * 0.3
        b = rng.standard_normal(3) * 0.1

        def f(xt, kt, bt):
            return ad.conv3d(xt, kt, bt, stride=1, padding=1).sum()

        check_gradients(f, [x, k, b])

    def test_gradients_strided(self):
        rng = np.random.default_rng(2)
        x = rng.standard_normal((1, 1, 5, 5, 5))
        k = rng.standard_normal((2, 1, 3, 3, 3)) * 0.3

        def f(xt, kt):
            return (ad.conv3d(xt, kt, stride=2) ** 2).sum()

        check_gradients(f, [x, k])


class TestTransposeConv3d:
    def test_disjoint_blocks(self):
        rng = np.random.default_rng(3)
        x = rng.standard_normal((1, 1, 2, 2, 2))
        out = ad.transpose_conv3d(Tensor(x), Tensor(np.ones((1, 1, 2, 2, 2))), stride=2)
        assert out.shape == (1, 1, 4, 4, 4)
        for i in range(2):
            for j in range(2):
                for m in range(2):
                    block = out.data[0, 0, 2 * i: 2 * i + 2, 2 * j: 2 * j + 2, 2 * m: 2 * m + 2]
                    np.testing.assert_allclose(block, x[0, 0, i, j, m])

    def test_adjoint_identity(self):
        rng = np.random.default_rng(4)
        for stride in (1, 2):
            x = rng.standard_normal((2, 2, 5, 5, 5))
            k = rng.standard_normal((3, 2, 3, 3, 3))
            cx = ad.conv3d(Tensor(x), Tensor(k), stride=stride)
            y = rng.standard_normal(cx.shape)
            ty = ad.transpose_conv3d(Tensor(y), Tensor(k), stride=stride)
            lhs = float((cx.data * y).sum())
            rhs = float((x * ty.data).sum())
            assert lhs == pytest.approx(rhs, rel=1e-6)

    def test_output_padding_doubles(self):
        x = Tensor(np.zeros((1, 4, 8, 8, 8)))
        k = Tensor(np.zeros((4, 2, 3, 3, 3)))
        out = ad.transpose_conv3d(x, k, stride=2, padding=1, output_padding=1)
        assert out.shape == (1, 2, 16, 16, 16)

    def test_gradients(self):
        rng = np.random.default_rng(5)
        x = rng.standard_normal((1, 2, 3, 3, 3))
        k = rng.standard_normal((2, 2, 3, 3, 3)) * 0.3
        b = rng.standard_normal(2) * 0.1

        def f(xt, kt, bt):
            return (ad.transpose_conv3d(xt, kt, bt, stride=2, padding=1,
                                        output_padding=1) ** 2).sum()

        check_gradients(f, [x, k, b])


class TestPooling:
    def test_avg_constant(self):
        x = Tensor(np.full((1, 2, 6, 6, 6), 2.5))
        out = ad.avg_pool3d(x, kernel=3, stride=2, padding=1)
        np.testing.assert_allclose(out.data, 2.5)
        assert out.shape == (1, 2, 3, 3, 3)

    def test_max_single_one(self):
        x = np.zeros((1, 1, 4, 4, 4))
        x[0, 0, 1, 2, 3] = 1.0
        out = ad.max_pool3d(Tensor(x), kernel=2, stride=2)
        assert out.data.sum() == pytest.approx(1.0)
        assert (out.data == 1.0).sum() == 1

    def test_max_tie_first_occurrence(self):
        x = np.ones((1, 1, 2, 2, 2))
        xt = Tensor(x, requires_grad=True)
        out = ad.max_pool3d(xt, kernel=2)
        out.sum().backward()
        # all-equal window: gradient goes to the first linear index only
        expected = np.zeros_like(x)
        expected[0, 0, 0, 0, 0] = 1.0
        np.testing.assert_allclose(xt.grad, expected)

    def test_avg_gradients(self):
        rng = np.random.default_rng(6)
        x = rng.standard_normal((1, 2, 5, 5, 5))

        def f(xt):
            return (ad.avg_pool3d(xt, kernel=3, stride=2, padding=1) ** 2).sum()

        check_gradients(f, [x])

    def test_max_gradients(self):
        rng = np.random.default_rng(7)
        # distinct values keep the argmax stable under FD perturbation
        x = rng.permutation(4 ** 3).astype(np.float64).reshape(1, 1, 4, 4, 4)

        def f(xt):
            return (ad.max_pool3d(xt, kernel=2) ** 2).sum()

        check_gradients(f, [x])


class TestActivations:
    def test_relu_values(self):
        out = ad.relu(Tensor(np.array([-1.0, 2.0])))
        np.testing.assert_allclose(out.data, [0.0, 2.0])

    def test_sigmoid_zero(self):
        assert ad.sigmoid(Tensor(np.array(0.0))).data == pytest.approx(0.5)

    def test_sigmoid_extremes_finite(self):
        out = ad.sigmoid(Tensor(np.array([-1e4, 1e4])))
        assert np.all(np.isfinite(out.data))

    def test_softmax_channel_symmetry(self):
        x = Tensor(np.zeros((1, 2, 3, 3, 3)))
        out = ad.softmax_channel(x)
        np.testing.assert_allclose(out.data, 0.5)

    def test_softmax_channel_normalized(self):
        rng = np.random.default_rng(8)
        out = ad.softmax_channel(Tensor(rng.standard_normal((2, 4, 3, 3, 3))))
        np.testing.assert_allclose(out.data.sum(axis=1), 1.0, atol=1e-6)
        assert np.all(out.data > 0) and np.all(out.data < 1)

    def test_activation_gradients(self):
        rng = np.random.default_rng(9)
        x = rand_away_from_zero(rng, (2, 3, 2, 2, 2))
        check_gradients(lambda t: (ad.relu(t) ** 2).sum(), [x])
        check_gradients(lambda t: (ad.sigmoid(t) ** 2).sum(), [x])
        check_gradients(lambda t: (ad.softmax_channel(t) ** 2).sum(), [x])


class TestElementwiseAndMatmul:
    def test_matmul_identity(self):
        rng = np.random.default_rng(10)
        m = rng.standard_normal((4, 4))
        out = ad.matmul(Tensor(np.eye(4)), Tensor(m))
        np.testing.assert_allclose(out.data, m)

    def test_matmul_batched_gradients(self):
        rng = np.random.default_rng(11)
        a = rng.standard_normal((2, 3, 4))
        b = rng.standard_normal((2, 4, 5))
        check_gradients(lambda x, y: (ad.matmul(x, y) ** 2).sum(), [a, b])

    def test_broadcast_add_mul_gradients(self):
        rng = np.random.default_rng(12)
        a = rng.standard_normal((2, 3, 4))
        b = rng.standard_normal((3, 1))
        check_gradients(lambda x, y: ((x + y) * y).sum(), [a, b])

    def test_concat_channels_roundtrip(self):
        rng = np.random.default_rng(13)
        a = Tensor(rng.standard_normal((1, 2, 3, 3, 3)), requires_grad=True)
        b = Tensor(rng.standard_normal((1, 3, 3, 3, 3)), requires_grad=True)
        out = ad.concat_channels([a, b])
        assert out.shape == (1, 5, 3, 3, 3)
        (out ** 2).sum().backward()
        np.testing.assert_allclose(a.grad, 2 * a.data)
        np.testing.assert_allclose(b.grad, 2 * b.data)

    def test_div_sqrt_gradients(self):
        rng = np.random.default_rng(14)
        a = rng.uniform(0.5, 2.0, (3, 3))
        b = rng.uniform(0.5, 2.0, (3, 3))
        check_gradients(lambda x, y: (x / y + ad.sqrt(x)).sum(), [a, b])


class TestSpatialDropout:
    def test_rate_zero_identity(self):
        x = Tensor(np.ones((2, 5, 2, 2, 2)))
        out = ad.spatial_dropout(x, 0.0, training=True)
        assert out is x

    def test_inference_identity(self):
        x = Tensor(np.ones((2, 5, 2, 2, 2)))
        out = ad.spatial_dropout(x, 0.5, rng=np.random.default_rng(0), training=False)
        assert out is x

    def test_zeroed_fraction(self):
        rng = np.random.default_rng(42)
        x = Tensor(np.ones((1, 10000, 1, 1, 1)))
        out = ad.spatial_dropout(x, 0.5, rng=rng, training=True)
        frac = float((out.data == 0).mean())
        assert frac == pytest.approx(0.5, abs=0.05)

    def test_rescaling_and_determinism(self):
        x = Tensor(np.ones((2, 100, 1, 1, 1)))
        a = ad.spatial_dropout(x, 0.5, rng=np.random.default_rng(3), training=True)
        b = ad.spatial_dropout(x, 0.5, rng=np.random.default_rng(3), training=True)
        np.testing.assert_array_equal(a.data, b.data)
        surviving = a.data[a.data != 0]
        np.testing.assert_allclose(surviving, 2.0)

    def test_whole_channels_dropped(self):
        rng = np.random.default_rng(4)
        x = Tensor(np.ones((1, 50, 3, 3, 3)))
        out = ad.spatial_dropout(x, 0.5, rng=rng, training=True)
        per_channel = out.data.reshape(50, -1)
        for row in per_channel:
            assert np.all(row == 0) or np.all(row == 2.0)

    def test_invalid_rate(self):
        with pytest.raises(ValueError):
            ad.spatial_dropout(Tensor(np.ones((1, 1, 1, 1, 1))), 1.0)


class TestBackwardMechanics:
    def test_grad_accumulates_over_reuse(self):
        x = Tensor(np.array([2.0]), requires_grad=True)
        y = x * x + x
        y.sum().backward()
        np.testing.assert_allclose(x.grad, [5.0])

    def test_backward_requires_scalar(self):
        x = Tensor(np.ones(3), requires_grad=True)
        with pytest.raises(ValueError):
            (x * 2).backward()

    def test_no_grad_suppresses_tape(self):
        x = Tensor(np.ones(3), requires_grad=True)
        with ad.no_grad():
            y = x * 2
        assert not y.requires_grad

    def test_forward_finite_on_finite_inputs(self):
        rng = np.random.default_rng(15)
        x = Tensor(rng.standard_normal((1, 2, 4, 4, 4)) * 100)
        k = Tensor(rng.standard_normal((2, 2, 3, 3, 3)))
        out = ad.softmax_channel(ad.conv3d(ad.sigmoid(x), k, padding=1))
        assert np.all(np.isfinite(out.data))
