"""Base operators that produce the initial estimate ``h0``.

The model problem is the periodic screened equation ``(I - eps L) y = f``,
which the Fourier transform diagonalizes.  Besides the exact solver there is
a degraded surrogate that keeps only the low Fourier modes and perturbs the
coarse structure, mimicking a learned operator with spectral bias.
"""

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError
from .field import Grid, apply_laplacian, as_field, fft_forward, fft_inverse, folded_frequencies, laplacian_eigenvalues

BASE_KINDS = ("exact", "truncated", "zero")


@dataclass(frozen=True)
class EllipticProblem:
    eps: float = 0.3
    n: int = 128

    def __post_init__(self):
        if not self.eps >= 0:
            raise ConfigError(f"eps must be nonnegative, got {self.eps}")
        Grid(self.n)

    @property
    def grid(self):
        return Grid(self.n)

    def symbol(self):
        """Fourier multiplier of ``I - eps L`` for k = 0..n-1 (all >= 1)."""
        return 1.0 - self.eps * laplacian_eigenvalues(self.n)

    def apply(self, y):
        return np.asarray(y) - self.eps * apply_laplacian(y)

    def residual(self, y, f):
        """RMS residual of ``(I - eps L) y = f``."""
        r = self.apply(y) - np.asarray(f)
        return np.sqrt(np.mean(r * r, axis=-1))


@dataclass(frozen=True)
class BaseOperatorSpec:
    """Which base operator to use and how to degrade it.

    ``noise_modes`` is the inclusive range of folded modes that receive the
    seeded low-mode noise of the truncated operator.
    """

    kind: str = "truncated"
    cutoff_fraction: float = 0.25
    noise_amp: float = 0.0
    seed: int = 0
    noise_modes: tuple = (1, 4)

    def __post_init__(self):
        if self.kind not in BASE_KINDS:
            raise ConfigError(f"base kind must be one of {BASE_KINDS}, got {self.kind!r}")
        if not 0.0 < self.cutoff_fraction <= 1.0:
            raise ConfigError(f"cutoff_fraction must be in (0, 1], got {self.cutoff_fraction}")
        if not self.noise_amp >= 0:
            raise ConfigError("noise_amp must be nonnegative")
        lo, hi = self.noise_modes
        if not 0 <= lo <= hi:
            raise ConfigError(f"invalid noise mode range {self.noise_modes}")
        object.__setattr__(self, "noise_modes", (int(lo), int(hi)))


def solve_exact(prob, f):
    """Solve ``(I - eps L) y = f`` by dividing each Fourier mode by its symbol."""
    f = as_field(f, prob.grid)
    return fft_inverse(fft_forward(f) / prob.symbol())


def _low_mode_noise(spec, n, count, sample_ids):
    # one independent stream per (seed, sample) so batches and single samples agree
    lo, hi = spec.noise_modes
    hi = min(hi, n // 2)
    idx = np.arange(n)
    out = np.zeros((count, n))
    if hi < lo:
        return out
    modes = np.arange(lo, hi + 1)
    for row, sid in enumerate(sample_ids):
        rng = np.random.default_rng([spec.seed, int(sid)])
        a = rng.standard_normal(len(modes))
        b = rng.standard_normal(len(modes))
        for m, am, bm in zip(modes, a, b):
            if m == 0:
                out[row] += am
            elif 2 * m == n:
                out[row] += am * np.cos(np.pi * idx)
            else:
                phase = 2.0 * np.pi * m * idx / n
                out[row] += am * np.cos(phase) + bm * np.sin(phase)
    return spec.noise_amp * out


def truncate_modes(y, cutoff_fraction):
    """Zero every Fourier mode whose folded index exceeds ``cutoff_fraction * n/2``."""
    y = np.asarray(y, dtype=np.float64)
    n = y.shape[-1]
    keep = folded_frequencies(n) <= cutoff_fraction * (n // 2)
    return fft_inverse(fft_forward(y) * keep)


def base_predict(spec, prob, f, sample_ids=None):
    """Initial estimate ``h0 = T_base(f)`` for one field or a ``(B, n)`` batch.

    ``sample_ids`` keys the noise stream of each row (defaults to the row
    index), keeping noise deterministic per sample regardless of batching.
    """
    f = as_field(f, prob.grid)
    if spec.kind == "zero":
        return np.zeros_like(f)
    y = solve_exact(prob, f)
    if spec.kind == "exact":
        return y
    h = truncate_modes(y, spec.cutoff_fraction)
    if spec.noise_amp > 0:
        batch = np.atleast_2d(h)
        if sample_ids is None:
            sample_ids = range(batch.shape[0])
        sample_ids = np.atleast_1d(np.asarray(sample_ids))
        noise = _low_mode_noise(spec, prob.n, batch.shape[0], sample_ids)
        h = h + (noise[0] if h.ndim == 1 else noise)
    return h
