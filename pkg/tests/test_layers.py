import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from udtsep import layers as L
from udtsep.tensor import SeededRng, Tensor, grad_check


def _t(a):
    return Tensor(np.asarray(a, dtype=np.float64))


def _delta_kernel(c, k=5):
    w = np.zeros((c, c, k))
    for i in range(c):
        w[i, i, k // 2] = 1.0
    return w


class TestSoftplus:
    def test_zero(self):
        assert L.softplus(_t([0.0])).data[0] == pytest.approx(np.log(2), abs=1e-12)

    def test_large_positive_no_overflow(self):
        assert L.softplus(_t([100.0])).data[0] == pytest.approx(100.0)

    def test_large_negative_no_nan(self):
        v = L.softplus(_t([-100.0])).data[0]
        assert np.isfinite(v)
        assert v == pytest.approx(np.exp(-100.0), rel=1e-6)

    @settings(max_examples=50, deadline=None)
    @given(st.floats(-700, 700))
    def test_matches_reference(self, x):
        ref = np.logaddexp(0.0, x)
        assert L.softplus(_t([x])).data[0] == pytest.approx(ref, rel=1e-12, abs=1e-300)


class TestConv1d:
    def test_delta_kernel_is_identity(self, rng):
        x = rng.standard_normal((2, 3, 11))
        y = L.conv1d(_t(x), _t(_delta_kernel(3)), _t(np.zeros(3)), padding=2)
        np.testing.assert_allclose(y.data, x, atol=1e-15)

    def test_zero_input_zero_output(self):
        layer = L.Conv1d(4, 6, dtype=np.float64)
        layer.bias.data[:] = 0
        np.testing.assert_array_equal(layer(_t(np.zeros((1, 4, 9)))).data, 0.0)

    def test_full_scale_shape(self):
        layer = L.Conv1d(1024, 1024, 5)
        x = Tensor(np.zeros((2, 1024, 200), dtype=np.float32))
        assert layer(x).shape == (2, 1024, 200)

    def test_matches_direct_loop(self, rng):
        x, w, b = rng.standard_normal((2, 3, 8)), rng.standard_normal((4, 3, 5)), rng.standard_normal(4)
        y = L.conv1d(_t(x), _t(w), _t(b), padding=1).data
        xp = np.pad(x, ((0, 0), (0, 0), (1, 1)))
        ref = np.zeros((2, 4, 8 + 2 - 5 + 1))
        for t in range(ref.shape[-1]):
            ref[:, :, t] = np.einsum("bck,ock->bo", xp[:, :, t:t + 5], w) + b
        np.testing.assert_allclose(y, ref, atol=1e-12)

    def test_even_kernel_rejected(self):
        with pytest.raises(ValueError):
            L.Conv1d(2, 2, 4)

    def test_channel_mismatch_rejected(self):
        with pytest.raises(ValueError):
            L.Conv1d(3, 2)(_t(np.zeros((1, 4, 5))))

    def test_init_range(self):
        layer = L.Conv1d(8, 6, 5)
        bound = np.sqrt(1 / (8 * 5))
        assert np.all(np.abs(layer.weight.data) <= bound)
        np.testing.assert_array_equal(layer.bias.data, 0)

    @settings(max_examples=20, deadline=None)
    @given(st.floats(-3, 3), st.floats(-3, 3), st.integers(0, 2**31))
    def test_linear_in_input(self, a, b, seed):
        r = np.random.default_rng(seed)
        w = _t(r.standard_normal((3, 2, 5)))
        x, y = r.standard_normal((1, 2, 9)), r.standard_normal((1, 2, 9))
        lhs = L.conv1d(_t(a * x + b * y), w, None, 2).data
        rhs = a * L.conv1d(_t(x), w, None, 2).data + b * L.conv1d(_t(y), w, None, 2).data
        np.testing.assert_allclose(lhs, rhs, rtol=1e-6, atol=1e-9)

    @settings(max_examples=15, deadline=None)
    @given(st.integers(1, 3), st.integers(1, 4), st.integers(1, 4), st.integers(5, 12))
    def test_same_padding_preserves_shape(self, b, c_in, c_out, t):
        y = L.Conv1d(c_in, c_out, 5, dtype=np.float64)(_t(np.ones((b, c_in, t))))
        assert y.shape == (b, c_out, t)


class TestTransposedConv1d:
    def test_adjoint_of_conv(self, rng):
        w = rng.standard_normal((4, 3, 5))
        x, y = rng.standard_normal((2, 3, 10)), rng.standard_normal((2, 4, 10))
        lhs = np.sum(L.conv1d(_t(x), _t(w), None, 2).data * y)
        rhs = np.sum(x * L.conv_transpose1d(_t(y), _t(w), None, 2).data)
        assert abs(lhs - rhs) < 1e-4 * abs(lhs)

    def test_delta_kernel_is_identity(self, rng):
        x = rng.standard_normal((2, 3, 7))
        y = L.conv_transpose1d(_t(x), _t(_delta_kernel(3)), None, 2)
        np.testing.assert_allclose(y.data, x, atol=1e-15)

    def test_full_scale_shape(self):
        layer = L.TransposedConv1d(1024, 1024, 5)
        assert layer(Tensor(np.zeros((2, 1024, 200), dtype=np.float32))).shape == (2, 1024, 200)


class TestBatchNorm:
    def test_constant_input_gives_beta(self):
        bn = L.BatchNorm1d(2, dtype=np.float64)
        bn.gamma.data[:] = [3.0, -1.0]
        bn.beta.data[:] = [0.5, 2.0]
        out = bn(_t(np.full((2, 2, 5), 7.0))).data
        np.testing.assert_allclose(out[:, 0], 0.5, atol=1e-6)
        np.testing.assert_allclose(out[:, 1], 2.0, atol=1e-6)

    def test_plus_minus_one(self):
        bn = L.BatchNorm1d(1, dtype=np.float64)
        x = np.array([[[-1.0, 1.0, -1.0, 1.0]]])
        out = bn(_t(x)).data
        np.testing.assert_allclose(out, x / np.sqrt(1 + bn.eps), rtol=1e-12)

    def test_running_statistics_update(self):
        bn = L.BatchNorm1d(1, dtype=np.float64)
        bn(_t(np.ones((2, 1, 4))))
        assert bn.running_mean[0] == pytest.approx(0.1)
        assert bn.running_var[0] == pytest.approx(0.9)

    def test_output_moments(self, rng):
        bn = L.BatchNorm1d(3, dtype=np.float64)
        bn.gamma.data[:] = [0.5, 2.0, 1.5]
        bn.beta.data[:] = [1.0, -1.0, 0.0]
        out = bn(_t(3 + 2 * rng.standard_normal((4, 3, 32)))).data
        np.testing.assert_allclose(out.mean(axis=(0, 2)), bn.beta.data, atol=1e-4)
        np.testing.assert_allclose(out.var(axis=(0, 2)), bn.gamma.data ** 2, rtol=1e-4)

    def test_inference_uses_running_stats(self):
        bn = L.BatchNorm1d(1, dtype=np.float64)
        bn.running_mean[:] = 2.0
        bn.running_var[:] = 4.0
        bn.training = False
        out = bn(_t(np.full((1, 1, 3), 4.0))).data
        np.testing.assert_allclose(out, 2.0 / np.sqrt(4.0 + bn.eps))

    def test_single_value_batch_rejected_in_training(self):
        with pytest.raises(ValueError):
            L.BatchNorm1d(1)(_t(np.ones((1, 1, 1))))

    @settings(max_examples=20, deadline=None)
    @given(st.integers(0, 2**31))
    def test_running_var_non_negative(self, seed):
        r = np.random.default_rng(seed)
        bn = L.BatchNorm1d(2, dtype=np.float64)
        for _ in range(5):
            bn(_t(r.standard_normal((2, 2, 3)) * r.uniform(0, 3)))
            assert np.all(bn.running_var >= 0)


class TestDropout:
    def test_inference_is_identity(self, rng):
        x = _t(rng.standard_normal((3, 4)))
        d = L.Dropout(0.3)
        d.training = False
        assert d(x, SeededRng(0)) is x

    def test_same_seed_same_mask(self):
        x = _t(np.ones((5, 6)))
        a = L.dropout(x, 0.3, SeededRng(4)).data
        b = L.dropout(x, 0.3, SeededRng(4)).data
        np.testing.assert_array_equal(a, b)

    def test_expectation_preserved(self):
        out = L.dropout(_t(np.ones(100_000)), 0.3, SeededRng(2)).data
        assert abs(out.mean() - 1.0) < 0.02
        kept = out[out != 0]
        np.testing.assert_allclose(kept, 1 / 0.7)
        assert abs((out == 0).mean() - 0.3) < 0.01

    def test_invalid_probability(self):
        with pytest.raises(ValueError):
            L.Dropout(1.0)


@pytest.mark.parametrize("dtype, eps, tol", [(np.float64, 1e-3, 1e-6), (np.float32, 1e-3, 1e-3)])
def test_layer_gradients(dtype, eps, tol):
    from udtsep.verify import layer_checks

    errors = layer_checks(dtype, np.random.default_rng(1), eps)
    assert len(errors) >= 15
    worst = max(errors, key=errors.get)
    assert errors[worst] < tol, (worst, errors[worst])


def test_softplus_gradcheck_random_points(rng):
    # beyond |x| ~ 10 the smallest gradients fall below what differencing a
    # sum of O(10) values can resolve, so stay inside that range
    x = Tensor(rng.uniform(-8, 8, 20))
    proj = Tensor(rng.standard_normal(20))
    assert grad_check(lambda t: (L.softplus(t) * proj).sum(), x, 1e-3, richardson=True) < 1e-6
