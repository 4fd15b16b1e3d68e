import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from itrefine.errors import ConjugateSymmetryError, GridError
from itrefine.field import (
    Grid,
    apply_laplacian,
    as_field,
    fft_forward,
    fft_inverse,
    folded_frequencies,
    ifft_complex,
    inner,
    l2_norm,
    laplacian_eigenvalues,
    laplacian_matrix,
)

finite = st.floats(-1e3, 1e3, allow_nan=False, allow_infinity=False)
scalars = finite.filter(lambda c: c == 0 or abs(c) > 1e-100)
sizes = st.sampled_from([4, 8, 16, 32, 64, 128])


def random_field(seed, n):
    return np.random.default_rng(seed).standard_normal(n)


def dft_oracle(f):
    n = len(f)
    i = np.arange(n)
    return np.exp(-2j * np.pi * np.outer(i, i) / n) @ f


class TestGrid:
    @pytest.mark.parametrize("n", [0, 2, 3, 6, 12, 100])
    def test_rejects_bad_sizes(self, n):
        with pytest.raises(GridError):
            Grid(n)

    def test_accepts_power_of_two(self):
        g = Grid(128)
        assert g.nyquist == 64
        np.testing.assert_array_equal(g.zeros(), np.zeros(128))

    def test_as_field_checks(self):
        with pytest.raises(GridError):
            as_field(np.zeros(8), Grid(16))
        with pytest.raises(GridError):
            as_field(np.zeros(6))
        with pytest.raises(ValueError):
            as_field([0.0, np.nan, 0.0, 0.0])

    def test_non_power_of_two_fft_rejected(self):
        with pytest.raises(GridError):
            fft_forward(np.zeros(12))


class TestLaplacian:
    def test_stencil_hand_value(self):
        np.testing.assert_array_equal(apply_laplacian([0.0, 1.0, 0.0, 0.0]), [1.0, -2.0, 1.0, 0.0])

    def test_constant_annihilated(self):
        np.testing.assert_array_equal(apply_laplacian(np.full(16, 3.7)), np.zeros(16))

    @pytest.mark.parametrize("k", [0, 1, 5, 32, 64])
    def test_cosine_eigenfunctions(self, k):
        n = 128
        f = np.cos(2 * np.pi * k * np.arange(n) / n)
        np.testing.assert_allclose(apply_laplacian(f), (2 * np.cos(2 * np.pi * k / n) - 2) * f, atol=1e-13)

    def test_matrix_matches_stencil_and_spectrum(self):
        n = 16
        L = laplacian_matrix(n)
        f = random_field(1, n)
        np.testing.assert_allclose(L @ f, apply_laplacian(f), atol=1e-14)
        np.testing.assert_allclose(np.sort(np.linalg.eigvalsh(L)), np.sort(laplacian_eigenvalues(n)), atol=1e-12)

    @given(seed=st.integers(0, 10_000), n=sizes)
    def test_self_adjoint_and_nonpositive(self, seed, n):
        rng = np.random.default_rng(seed)
        f, g = rng.standard_normal((2, n))
        lhs, rhs = inner(apply_laplacian(f), g), inner(f, apply_laplacian(g))
        assert abs(lhs - rhs) <= 1e-12 * max(1.0, abs(lhs))
        assert inner(apply_laplacian(f), f) <= 1e-12

    def test_batched(self):
        F = np.random.default_rng(0).standard_normal((3, 8))
        np.testing.assert_array_equal(apply_laplacian(F)[1], apply_laplacian(F[1]))


class TestFFT:
    def test_delta(self):
        f = np.zeros(16)
        f[0] = 1.0
        np.testing.assert_allclose(fft_forward(f), np.ones(16), atol=1e-15)

    def test_constant(self):
        expected = np.zeros(32, dtype=complex)
        expected[0] = 2.5 * 32
        np.testing.assert_allclose(fft_forward(np.full(32, 2.5)), expected, atol=1e-12)

    @pytest.mark.parametrize("n", [4, 8, 64, 128, 256])
    def test_matches_direct_sum(self, n):
        f = random_field(n, n)
        np.testing.assert_allclose(fft_forward(f), dft_oracle(f), rtol=0, atol=1e-11 * n)

    @given(seed=st.integers(0, 10_000), n=sizes)
    def test_parseval(self, seed, n):
        f = random_field(seed, n)
        energy = np.sum(f * f)
        spec = np.sum(np.abs(fft_forward(f)) ** 2) / n
        assert abs(energy - spec) <= 1e-12 * energy

    @given(seed=st.integers(0, 10_000), n=sizes)
    def test_round_trip(self, seed, n):
        f = random_field(seed, n) * 10.0 ** np.random.default_rng(seed).integers(-3, 4)
        back = fft_inverse(fft_forward(f))
        assert np.linalg.norm(back - f) <= 1e-12 * np.linalg.norm(f)

    @settings(max_examples=30)
    @given(a=finite, b=finite, seed=st.integers(0, 1000))
    def test_linearity(self, a, b, seed):
        rng = np.random.default_rng(seed)
        f, g = rng.standard_normal((2, 64))
        lhs = fft_forward(a * f + b * g)
        rhs = a * fft_forward(f) + b * fft_forward(g)
        scale = max(1.0, np.max(np.abs(rhs)))
        np.testing.assert_allclose(lhs, rhs, rtol=0, atol=1e-12 * scale)

    def test_zero_spectrum(self):
        np.testing.assert_array_equal(fft_inverse(np.zeros(8, dtype=complex)), np.zeros(8))

    def test_single_mode_inverse(self):
        n = 16
        s = np.zeros(n, dtype=complex)
        s[1] = n
        # one-sided coefficient: complex exponential with unit amplitude
        z = ifft_complex(s)
        i = np.arange(n)
        np.testing.assert_allclose(z.real, np.cos(2 * np.pi * i / n), atol=1e-15)
        np.testing.assert_allclose(z.imag, np.sin(2 * np.pi * i / n), atol=1e-15)
        # the conjugate-symmetric pair gives a real cosine
        s[n - 1] = n
        np.testing.assert_allclose(fft_inverse(s / 2), np.cos(2 * np.pi * i / n), atol=1e-15)

    def test_asymmetric_spectrum_rejected(self):
        s = np.zeros(8, dtype=complex)
        s[1] = 8.0
        with pytest.raises(ConjugateSymmetryError):
            fft_inverse(s)

    def test_batched_axis(self):
        F = np.random.default_rng(3).standard_normal((4, 32))
        np.testing.assert_allclose(fft_forward(F)[2], fft_forward(F[2]), atol=0)

    def test_folded_frequencies(self):
        np.testing.assert_array_equal(folded_frequencies(8), [0, 1, 2, 3, 4, 3, 2, 1])


class TestNorm:
    def test_hand_values(self):
        assert l2_norm(np.zeros(8)) == 0.0
        assert l2_norm(np.full(8, 2.0)) == 2.0
        assert l2_norm([3.0, 4.0, 0.0, 0.0]) == 2.5

    @given(arrays(np.float64, 16, elements=finite), arrays(np.float64, 16, elements=finite), scalars)
    def test_triangle_and_homogeneity(self, f, g, c):
        assert l2_norm(f + g) <= l2_norm(f) + l2_norm(g) + 1e-9
        np.testing.assert_allclose(l2_norm(c * f), abs(c) * l2_norm(f), rtol=1e-12, atol=1e-300)
