"""Numerical checks of the contraction picture and spectral error analysis.

Covers the Jacobian of the learned update at the true solution (strong
monotonicity constant ``m``, operator norm ``M``, contraction factor ``q``),
the forward-invariant ball, fits of the error recursion
``e_{k+1} <= q e_k + c e_k**2 + b``, bias/error-floor correlation, and
per-frequency / per-band spectral error ratios.
"""

import math
from dataclasses import asdict, dataclass, field

import numpy as np
import scipy.linalg
from scipy.optimize import nnls

from .base import base_predict
from .errors import (
    ConvergenceError,
    InsufficientDataError,
    NoInvariantBallError,
    UndefinedCorrelationError,
)
from .field import fft_forward, l2_norm
from .mlp import jacobian_h
from .refine import RefineConfig, as_operator, refine_batch

POWER_TOL = 1e-12
POWER_MAX_ITERS = 10_000
RATIO_EPS = 1e-10
BANDS = ("low", "mid", "high")


# -- Jacobian spectra -------------------------------------------------------

def jacobian_at(params, x, h):
    """Dense ``A = -D_h Phi(x, h)``."""
    return -jacobian_h(params, x, h)


def power_iteration_sym(S, iters=POWER_MAX_ITERS, tol=POWER_TOL, seed=0):
    """Dominant eigenvalue of a symmetric PSD matrix via Rayleigh quotients.

    Stops when the quotient changes by less than ``tol`` relative; raises
    ConvergenceError (carrying the last estimate) after ``iters`` steps.
    """
    S = np.asarray(S, dtype=np.float64)
    return power_iteration_op(S.__matmul__, S.shape[0], iters, tol, seed)


def power_iteration_op(apply, n, iters=POWER_MAX_ITERS, tol=POWER_TOL, seed=0):
    """``power_iteration_sym`` for an operator given as a function on R^n."""
    v = np.random.default_rng(seed).standard_normal(n)
    v /= np.linalg.norm(v)
    w = apply(v)
    lam = float(v @ w)
    for _ in range(iters):
        nrm = np.linalg.norm(w)
        if nrm == 0.0:
            return 0.0
        v = w / nrm
        w = apply(v)
        new = float(v @ w)
        if abs(new - lam) <= tol * max(abs(new), 1e-300):
            return new
        lam = new
    raise ConvergenceError(f"power iteration did not converge in {iters} steps", estimate=lam)


def gershgorin_bound(S):
    """Upper bound on the eigenvalues of a symmetric matrix."""
    S = np.asarray(S)
    return float(np.max(np.diag(S) + np.sum(np.abs(S), axis=1) - np.abs(np.diag(S))))


def operator_norm(A, method="dense", **kw):
    """``sigma_max(A)``; the power route iterates on ``A^T A``."""
    A = np.asarray(A, dtype=np.float64)
    if method == "dense":
        return float(np.linalg.norm(A, 2))
    return math.sqrt(max(power_iteration_sym(A.T @ A, **kw), 0.0))


def monotonicity_constants(A, method="dense", **kw):
    """``(m, M, sigma_min)`` of a square matrix.

    ``m`` is the smallest eigenvalue of the symmetric part, ``M`` and
    ``sigma_min`` the extreme singular values.  ``method="power"`` uses power
    iterations only: shifted by a Gershgorin bound for ``m``, plain on
    ``A^T A`` for ``M``, and inverse iteration for ``sigma_min`` (a shift by
    ``M**2`` stalls whenever ``sigma_min`` is small next to ``M``).
    """
    A = np.asarray(A, dtype=np.float64)
    S = 0.5 * (A + A.T)
    if method == "dense":
        m = float(np.linalg.eigvalsh(S)[0])
        sv = np.linalg.svd(A, compute_uv=False)
        return m, float(sv[0]), float(sv[-1])
    if method != "power":
        raise ValueError(f"unknown method {method!r}")
    eye = np.eye(A.shape[0])
    c = max(gershgorin_bound(S), 0.0) + 1.0
    m = c - power_iteration_sym(c * eye - S, **kw)
    G = A.T @ A
    M2 = power_iteration_sym(G, **kw)
    try:
        lu = scipy.linalg.lu_factor(A, check_finite=True)
    except (ValueError, np.linalg.LinAlgError):
        return float(m), math.sqrt(max(M2, 0.0)), 0.0
    if np.any(np.diag(lu[0]) == 0.0):
        return float(m), math.sqrt(max(M2, 0.0)), 0.0

    def inv_gram(v):
        # (A^T A)^{-1} v = A^{-1} A^{-T} v
        return scipy.linalg.lu_solve(lu, scipy.linalg.lu_solve(lu, v, trans=1))

    inv_top = power_iteration_op(inv_gram, A.shape[0], **kw)
    smin = 1.0 / math.sqrt(inv_top) if inv_top > 0 else 0.0
    return float(m), math.sqrt(max(M2, 0.0)), smin


def contraction_factor(A, alpha, method="dense", **kw):
    """``q = ||I - alpha A||_op``."""
    A = np.asarray(A, dtype=np.float64)
    return operator_norm(np.eye(A.shape[0]) - alpha * A, method=method, **kw)


def step_size_bound(m, M):
    """Largest step ``2m / M**2`` for which strong monotonicity guarantees q < 1."""
    return 2.0 * m / (M * M) if m > 0 else 0.0


@dataclass
class JacobianReport:
    m: float
    M: float
    q: float
    sigma_min: float
    alpha_used: float
    method: str = "dense_exact"


def jacobian_report(params, x, y, alpha, method="dense"):
    """Spectral constants of the linearization at the true solution ``y``."""
    A = jacobian_at(params, x, y)
    m, M, smin = monotonicity_constants(A, method=method)
    q = contraction_factor(A, alpha, method=method)
    tag = "dense_exact" if method == "dense" else f"power_iteration({POWER_MAX_ITERS},{POWER_TOL:g})"
    return JacobianReport(m=m, M=M, q=q, sigma_min=smin, alpha_used=alpha, method=tag)


def summarize_reports(reports):
    """Mean/std of m, M and q plus the fraction of samples with m > 0."""
    ms = np.array([r.m for r in reports])
    Ms = np.array([r.M for r in reports])
    qs = np.array([r.q for r in reports])
    return {
        "count": len(reports),
        "m_mean": float(ms.mean()), "m_std": float(ms.std()),
        "M_mean": float(Ms.mean()), "M_std": float(Ms.std()),
        "q_mean": float(qs.mean()), "q_std": float(qs.std()),
        "frac_m_positive": float(np.mean(ms > 0)),
    }


# -- invariant ball, recursion, iteration count ------------------------------

def invariant_ball_radii(q, c, alpha, b_norm):
    """Radii ``(r_minus, r_plus)`` between which the ball around y is forward invariant.

    They are the roots of ``(1 - q) r - c r**2 = alpha * b_norm``.  With
    ``c == 0`` the condition is linear and every ``r >= alpha b / (1 - q)``
    works, so ``(alpha b / (1 - q), inf)`` is returned.
    """
    if not q < 1:
        raise ValueError(f"contraction factor must be < 1, got {q}")
    if c < 0:
        raise ValueError("c must be nonnegative")
    gap = 1.0 - q
    if c == 0:
        return alpha * b_norm / gap, math.inf
    disc = gap * gap - 4.0 * alpha * c * b_norm
    if disc < 0:
        raise NoInvariantBallError(
            f"bias {b_norm} exceeds (1-q)^2/(4 alpha c) = {gap * gap / (4 * alpha * c):.6g}"
        )
    root = math.sqrt(disc)
    return (gap - root) / (2.0 * c), (gap + root) / (2.0 * c)


@dataclass
class RecursionFit:
    q_hat: float
    c_hat: float
    b_hat: float
    residual: float
    points: int

    def predict(self, e):
        e = np.asarray(e, dtype=np.float64)
        return self.q_hat * e + self.c_hat * e * e + self.b_hat

    def floor(self):
        """Smallest nonnegative fixed point of the fitted recursion (inf if none)."""
        a, bq, b = self.c_hat, self.q_hat - 1.0, self.b_hat
        if a == 0:
            if bq >= 0:
                return 0.0 if b == 0 else math.inf
            return b / -bq
        disc = bq * bq - 4 * a * b
        if disc < 0:
            return math.inf
        return (-bq - math.sqrt(disc)) / (2 * a)


def fit_error_recursion(error_norms):
    """Nonnegative least-squares fit of ``e_{k+1}`` on ``(e_k, e_k**2, 1)``.

    Accepts a trajectory (anything with ``error_norms``) or a sequence.
    """
    e = getattr(error_norms, "error_norms", error_norms)
    if e is None:
        raise InsufficientDataError("trajectory has no error norms (run with y)")
    e = np.asarray(e, dtype=np.float64)
    e = e[np.isfinite(e)]
    if len(e) < 4:
        raise InsufficientDataError(f"need at least 4 error norms, got {len(e)}")
    X = np.column_stack([e[:-1], e[:-1] ** 2, np.ones(len(e) - 1)])
    coef, res = nnls(X, e[1:])
    return RecursionFit(float(coef[0]), float(coef[1]), float(coef[2]), float(res), len(e))


def geometric_iteration_count(e0, eps, q):
    """Steps ``ceil(log(e0/eps) / log(1/q))`` for a geometric decay to reach ``eps``."""
    if not 0 < q < 1:
        raise ValueError(f"need 0 < q < 1, got {q}")
    if eps <= 0:
        raise ValueError("eps must be positive")
    if e0 <= eps:
        return 0
    k = math.log(e0 / eps) / math.log(1.0 / q)
    # guard against log round-off turning an exact integer into k + 1
    return max(1, math.ceil(k - 1e-9 * max(1.0, k)))


def first_hit(error_norms, eps):
    """First index k with ``error_norms[k] <= eps`` (None if never reached)."""
    hits = np.nonzero(np.asarray(error_norms) <= eps)[0]
    return int(hits[0]) if len(hits) else None


# -- correlation -------------------------------------------------------------

def pearson(xs, ys):
    xs = np.asarray(xs, dtype=np.float64)
    ys = np.asarray(ys, dtype=np.float64)
    if xs.shape != ys.shape or xs.ndim != 1 or len(xs) < 3:
        raise ValueError("pearson needs two equal-length 1-D samples of size >= 3")
    dx = xs - xs.mean()
    dy = ys - ys.mean()
    sx = math.sqrt(float(dx @ dx))
    sy = math.sqrt(float(dy @ dy))
    if sx == 0 or sy == 0:
        raise UndefinedCorrelationError("correlation undefined for a constant sample")
    return float(dx @ dy) / (sx * sy)


@dataclass
class BiasErrorReport:
    bias: np.ndarray
    min_error: np.ndarray
    r: float = None  # None when undefined
    diverged: int = 0
    steps: int = 24
    note: str = ""

    def as_dict(self):
        return {"bias": self.bias.tolist(), "min_error": self.min_error.tolist(), "pearson_r": self.r,
                "diverged": self.diverged, "steps": self.steps, "note": self.note}


def bias_error_pairs(model, xs, ys, h0, alpha, steps=24):
    """Per-sample bias ``||Phi(x, y)||`` against ``min_k ||e_k||`` over ``steps`` steps.

    ``model`` is MlpParams or an ``f(x, h)`` callable.  Diverged samples are
    dropped and counted.  ``r`` is None (with a note) when undefined.
    """
    op = as_operator(model)
    xs = np.atleast_2d(xs)
    ys = np.atleast_2d(ys)
    bias = l2_norm(op(xs, ys))
    traj = refine_batch(op, xs, h0, RefineConfig(alpha=alpha, k_max=steps), y=ys)
    ok = ~traj.diverged
    min_err = np.min(traj.error_norms[:, ok], axis=0)
    rep = BiasErrorReport(bias=bias[ok], min_error=min_err, diverged=int((~ok).sum()), steps=steps)
    try:
        rep.r = pearson(rep.bias, rep.min_error)
    except (UndefinedCorrelationError, ValueError) as exc:
        rep.note = str(exc)
    return rep


def bias_error_study(model, dataset, prob, base_spec, alpha=0.2, steps=24):
    """Bias/error-floor study over a Dataset, starting from the base prediction."""
    h0 = base_predict(base_spec, prob, dataset.xs, sample_ids=dataset.sample_ids)
    return bias_error_pairs(model, dataset.xs, dataset.ys, h0, alpha, steps)


# -- spectral error ------------------------------------------------------------

def spectral_error_profile(h, y):
    """``(|h_hat(w)| - |y_hat(w)|)**2`` for folded frequencies w = 0..n/2."""
    h = np.asarray(h, dtype=np.float64)
    n = h.shape[-1]
    d = np.abs(fft_forward(h)) - np.abs(fft_forward(y))
    return (d * d)[..., : n // 2 + 1]


def normalized_ratio(profile_k, profile_0, eps=RATIO_EPS):
    return np.asarray(profile_k) / (np.asarray(profile_0) + eps)


def band_partition(n):
    """Bottom/middle/top thirds of the folded frequencies 1..n/2 (DC excluded)."""
    freqs = np.arange(1, n // 2 + 1)
    return dict(zip(BANDS, np.array_split(freqs, 3)))


@dataclass
class BandRatioReport:
    """``median/q25/q75[band]`` arrays indexed by step k = 0..K."""

    bands: dict
    median: dict
    q25: dict
    q75: dict
    dc_median: np.ndarray = field(default=None)

    def rows(self):
        for k in range(len(next(iter(self.median.values())))):
            for b in BANDS:
                yield k, b, float(self.median[b][k]), float(self.q25[b][k]), float(self.q75[b][k])

    def as_dict(self):
        return {b: {"median": self.median[b].tolist(), "q25": self.q25[b].tolist(),
                    "q75": self.q75[b].tolist()} for b in BANDS}


def band_ratios(profiles, eps=RATIO_EPS):
    """Median over samples of band-summed error at step k over that at step 0.

    ``profiles`` has shape ``(samples, steps + 1, n/2 + 1)``; index 0 on the
    step axis is the base prediction.
    """
    P = np.asarray(profiles, dtype=np.float64)
    if P.ndim != 3 or P.shape[0] < 1:
        raise ValueError("profiles must be (samples, steps, freqs) with >= 1 sample")
    n = 2 * (P.shape[-1] - 1)
    bands = band_partition(n)
    med, lo, hi = {}, {}, {}
    for b, idx in bands.items():
        s = P[:, :, idx].sum(axis=-1)
        r = s / (s[:, :1] + eps)
        med[b] = np.median(r, axis=0)
        lo[b] = np.quantile(r, 0.25, axis=0)
        hi[b] = np.quantile(r, 0.75, axis=0)
    dc = np.median(P[:, :, 0] / (P[:, :1, 0] + eps), axis=0)
    return BandRatioReport(bands=bands, median=med, q25=lo, q75=hi, dc_median=dc)


def trajectory_profiles(iterates, ys):
    """Spectral error profiles for batch iterates ``(K+1, B, n)`` -> ``(B, K+1, n/2+1)``."""
    P = spectral_error_profile(np.asarray(iterates), np.asarray(ys)[None])
    return np.transpose(P, (1, 0, 2))


def refinement_band_ratios(model, xs, ys, h0, alpha, steps):
    traj = refine_batch(model, xs, h0, RefineConfig(alpha=alpha, k_max=steps), y=ys)
    ok = ~traj.diverged
    return band_ratios(trajectory_profiles(traj.iterates[:, ok], ys[ok]))


def report_to_dict(rep):
    return asdict(rep)

