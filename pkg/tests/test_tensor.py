import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from complexq2.errors import DimensionError
from complexq2.tensor import (
    ComplexTensor,
    complex_elementwise_mul,
    hermitian_matmul,
    relu2,
    rmsnorm_componentwise,
)


def ct(z):
    return ComplexTensor.from_complex(np.asarray(z, dtype=complex))


def random_ct(rng, shape):
    return ComplexTensor(rng.standard_normal(shape), rng.standard_normal(shape))


def loop_hermitian(x, w):
    m, k = x.shape
    n = w.shape[1]
    out = np.zeros((m, n), dtype=complex)
    for i in range(m):
        for j in range(n):
            acc = 0j
            for t in range(k):
                acc += complex(x[i, t]).conjugate() * complex(w[t, j])
            out[i, j] = acc
    return out


class TestComplexTensor:
    def test_planes_must_match(self):
        with pytest.raises(DimensionError):
            ComplexTensor(np.zeros(3), np.zeros(4))

    def test_complex_roundtrip(self):
        z = np.array([[1 + 2j, -3.5j]])
        np.testing.assert_array_equal(ct(z).to_complex(), z)


class TestHermitianMatmul:
    def test_conjugates_left_operand(self):
        y = hermitian_matmul(ct([[1 + 1j]]), ct([[2 + 0j]]))
        assert y.to_complex()[0, 0] == 2 - 2j

    def test_i_times_i(self):
        y = hermitian_matmul(ct([[1j]]), ct([[1j]]))
        assert y.to_complex()[0, 0] == 1 + 0j

    def test_matches_scalar_loop(self):
        rng = np.random.default_rng(0)
        x, w = random_ct(rng, (3, 4)), random_ct(rng, (4, 2))
        np.testing.assert_allclose(hermitian_matmul(x, w).to_complex(), loop_hermitian(x.to_complex(), w.to_complex()), rtol=1e-6)

    @pytest.mark.parametrize("shape", [(1, 1, 1), (2, 3, 5), (4, 1, 3), (5, 6, 2)])
    def test_equals_real_pair_expansion(self, shape):
        # [x_re | x_im] @ [[W_re, W_im], [W_im, -W_re]] is the 2n-dim real form of conj(x) W
        m, k, n = shape
        rng = np.random.default_rng(sum(shape))
        x, w = random_ct(rng, (m, k)), random_ct(rng, (k, n))
        big = np.block([[w.re, w.im], [w.im, -w.re]])
        real = np.concatenate([x.re, x.im], axis=1) @ big
        y = hermitian_matmul(x, w)
        np.testing.assert_allclose(np.concatenate([y.re, y.im], axis=1), real, rtol=1e-12, atol=1e-12)

    @pytest.mark.parametrize("alpha", [-2.5, 0.0, 0.3, 7.0])
    def test_real_scalar_linearity(self, alpha):
        rng = np.random.default_rng(1)
        x, w = random_ct(rng, (3, 4)), random_ct(rng, (4, 5))
        scaled = hermitian_matmul(ComplexTensor(alpha * x.re, alpha * x.im), w)
        base = hermitian_matmul(x, w)
        np.testing.assert_allclose(scaled.to_complex(), alpha * base.to_complex(), rtol=1e-12, atol=1e-12)

    def test_leading_axes(self):
        rng = np.random.default_rng(2)
        x, w = random_ct(rng, (2, 3, 4)), random_ct(rng, (4, 5))
        y = hermitian_matmul(x, w)
        assert y.shape == (2, 3, 5)
        np.testing.assert_allclose(y[1].to_complex(), hermitian_matmul(x[1], w).to_complex())

    def test_shape_mismatch(self):
        with pytest.raises(DimensionError):
            hermitian_matmul(ct(np.ones((2, 3))), ct(np.ones((4, 2))))


class TestElementwiseMul:
    def test_conjugate_pair(self):
        assert complex_elementwise_mul(ct([1 + 1j]), ct([1 - 1j])).to_complex()[0] == 2 + 0j

    def test_i_squared(self):
        assert complex_elementwise_mul(ct([1j]), ct([1j])).to_complex()[0] == -1 + 0j

    def test_matches_scalar_oracle(self):
        rng = np.random.default_rng(3)
        a, b = random_ct(rng, (4, 3)), random_ct(rng, (4, 3))
        za, zb = a.to_complex(), b.to_complex()
        expected = np.array([[za[i, j] * zb[i, j] for j in range(3)] for i in range(4)])
        np.testing.assert_allclose(complex_elementwise_mul(a, b).to_complex(), expected, rtol=1e-6)

    def test_shape_mismatch(self):
        with pytest.raises(DimensionError):
            complex_elementwise_mul(ct([1, 2]), ct([1]))


class TestRelu2:
    @pytest.mark.parametrize(
        "z, expected", [(2 - 3j, 4 + 0j), (-1 - 2j, 0j), (0.5 + 0.5j, 0.25 + 0.25j)]
    )
    def test_examples(self, z, expected):
        assert relu2(ct([z])).to_complex()[0] == expected

    @given(arrays(np.float64, (3, 4), elements=st.floats(-1e3, 1e3)), arrays(np.float64, (3, 4), elements=st.floats(-1e3, 1e3)))
    def test_nonnegative(self, re, im):
        out = relu2(ComplexTensor(re, im))
        assert (out.re >= 0).all() and (out.im >= 0).all()

    def test_idempotent_on_zero_one(self):
        z = ComplexTensor(np.array([0.0, 1.0, 1.0, 0.0]), np.array([1.0, 0.0, 1.0, 0.0]))
        out = relu2(z)
        np.testing.assert_array_equal(out.re, z.re)
        np.testing.assert_array_equal(out.im, z.im)


class TestRmsnorm:
    def test_hand_example(self):
        x = ComplexTensor(np.array([3.0, 4.0]), np.array([1.0, 1.0]))
        out = rmsnorm_componentwise(x, np.ones(2), np.ones(2), eps=0.0)
        np.testing.assert_allclose(out.re, [0.8485281374, 1.1313708499], rtol=1e-9)
        np.testing.assert_allclose(out.im, [1.0, 1.0])

    def test_zero_plane(self):
        out = rmsnorm_componentwise(ComplexTensor.zeros((2, 5)), np.ones(5), np.ones(5), eps=1e-6)
        assert not out.re.any() and not out.im.any()

    @pytest.mark.parametrize("s", [1e-3, 0.5, 3.0, 1e4])
    def test_scale_invariant(self, s):
        rng = np.random.default_rng(4)
        x = random_ct(rng, (3, 8))
        g_re, g_im = rng.standard_normal(8), rng.standard_normal(8)
        a = rmsnorm_componentwise(x, g_re, g_im, eps=0.0)
        b = rmsnorm_componentwise(ComplexTensor(s * x.re, s * x.im), g_re, g_im, eps=0.0)
        np.testing.assert_allclose(a.re, b.re, rtol=1e-12)
        np.testing.assert_allclose(a.im, b.im, rtol=1e-12)

    @settings(max_examples=50)
    @given(arrays(np.float64, (4, 6), elements=st.floats(-1e3, 1e3)))
    def test_unit_rms(self, plane):
        rows = np.abs(plane).max(axis=-1) > 1e-3
        x = ComplexTensor(plane, plane[::-1].copy())
        out = rmsnorm_componentwise(x, np.ones(6), np.ones(6), eps=0.0)
        assert out.shape == x.shape
        rms = np.sqrt(np.mean(out.re**2, axis=-1))
        np.testing.assert_allclose(rms[rows], 1.0, atol=1e-6)
