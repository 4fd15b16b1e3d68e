"""Fields on a 1-D periodic grid: Laplacian, radix-2 FFT and norms.

A field is a float64 array whose last axis has length ``n`` (a power of
two).  Leading axes are batch axes; every function here broadcasts over
them, so a stack of samples is just a ``(batch, n)`` array.

Transform convention: the forward transform is unnormalized,
``F[k] = sum_i f[i] exp(-2j pi i k / n)``, and the inverse divides by ``n``.
"""

from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from .errors import ConjugateSymmetryError, GridError

IMAG_TOL = 1e-10


def is_power_of_two(n):
    return n >= 1 and (n & (n - 1)) == 0


@dataclass(frozen=True)
class Grid:
    """Uniform periodic grid with unit spacing."""

    n: int

    def __post_init__(self):
        if not isinstance(self.n, (int, np.integer)) or isinstance(self.n, bool):
            raise GridError(f"grid size must be an integer, got {self.n!r}")
        if self.n < 4 or not is_power_of_two(int(self.n)):
            raise GridError(f"grid size must be a power of two >= 4, got {self.n}")

    @property
    def nyquist(self):
        return self.n // 2

    def coordinates(self):
        return np.arange(self.n, dtype=np.float64)

    def zeros(self):
        return np.zeros(self.n)


def as_field(values, grid=None):
    """Validate ``values`` as a (possibly batched) field and return float64.

    Raises GridError when the trailing length is not a valid grid size or
    differs from ``grid.n``, and ValueError for non-finite samples.
    """
    f = np.asarray(values, dtype=np.float64)
    if f.ndim == 0:
        raise GridError("a field needs at least one axis")
    n = f.shape[-1]
    if grid is not None and n != grid.n:
        raise GridError(f"field length {n} does not match grid size {grid.n}")
    Grid(n)
    if not np.all(np.isfinite(f)):
        raise ValueError("field contains non-finite values")
    return f


def apply_laplacian(f):
    """Periodic second difference ``f[i-1] - 2 f[i] + f[i+1]``."""
    f = np.asarray(f, dtype=np.float64)
    return np.roll(f, 1, axis=-1) - 2.0 * f + np.roll(f, -1, axis=-1)


def laplacian_eigenvalues(n):
    """Eigenvalues ``2 cos(2 pi k / n) - 2`` of the periodic Laplacian, k = 0..n-1."""
    k = np.arange(n)
    return 2.0 * np.cos(2.0 * np.pi * k / n) - 2.0


def laplacian_matrix(n):
    """Dense n x n periodic Laplacian (used by residual checks and tests)."""
    eye = np.eye(n)
    return apply_laplacian(eye)


@lru_cache(maxsize=None)
def _bit_reverse_permutation(n):
    bits = n.bit_length() - 1
    idx = np.arange(n)
    rev = np.zeros(n, dtype=np.int64)
    for b in range(bits):
        rev |= ((idx >> b) & 1) << (bits - 1 - b)
    rev.setflags(write=False)
    return rev


@lru_cache(maxsize=None)
def _twiddles(size, sign):
    half = size // 2
    w = np.exp(sign * 2j * np.pi * np.arange(half) / size)
    w.setflags(write=False)
    return w


def _radix2(a, sign):
    # iterative decimation-in-time over the last axis
    n = a.shape[-1]
    if not is_power_of_two(n):
        raise GridError(f"FFT length must be a power of two, got {n}")
    lead = a.shape[:-1]
    a = a[..., _bit_reverse_permutation(n)]
    size = 2
    while size <= n:
        half = size // 2
        blocks = a.reshape(lead + (n // size, size))
        even = blocks[..., :half]
        odd = blocks[..., half:] * _twiddles(size, sign)
        a = np.concatenate((even + odd, even - odd), axis=-1).reshape(lead + (n,))
        size *= 2
    return a


def fft_forward(f):
    """Unnormalized forward DFT of a real or complex field along the last axis."""
    return _radix2(np.asarray(f, dtype=np.complex128), -1)


def ifft_complex(coeffs):
    """Inverse DFT (divides by n) without discarding the imaginary part."""
    c = np.asarray(coeffs, dtype=np.complex128)
    return _radix2(c, +1) / c.shape[-1]


def fft_inverse(coeffs):
    """Inverse DFT of the spectrum of a real field.

    The imaginary residue must stay below ``IMAG_TOL`` (scaled by the field
    magnitude when that exceeds one); otherwise the spectrum is not
    conjugate-symmetric and ConjugateSymmetryError is raised.
    """
    z = ifft_complex(coeffs)
    scale = max(1.0, float(np.max(np.abs(z.real), initial=0.0)))
    residue = float(np.max(np.abs(z.imag), initial=0.0))
    if residue > IMAG_TOL * scale:
        raise ConjugateSymmetryError(
            f"imaginary residue {residue:.3e} exceeds {IMAG_TOL:.0e}; spectrum is not Hermitian"
        )
    return np.ascontiguousarray(z.real)


def folded_frequencies(n):
    """Folded frequency magnitude ``min(k, n - k)`` for k = 0..n-1."""
    k = np.arange(n)
    return np.minimum(k, n - k)


def l2_norm(f):
    """Root-mean-square norm over the last axis, ``sqrt(mean(f**2))``."""
    f = np.asarray(f, dtype=np.float64)
    return np.sqrt(np.mean(f * f, axis=-1))


def inner(f, g):
    """Mean inner product matching ``l2_norm``: ``mean(f * g)``."""
    return np.mean(np.asarray(f) * np.asarray(g), axis=-1)
