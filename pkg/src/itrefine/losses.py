"""Training losses and their gradients through the unrolled refinement loop.

Per-sample losses use the RMS-norm conventions of ``field``: the spatial
term is a mean-square error, the fixed-point term is the mean square of
``Phi(x, y)``, and the spectral term compares magnitude spectra of the
unnormalized transform with frequency weights ``1 + (|w|/w_nyq)**lam``.
Batched inputs ``(B, n)`` give the mean over the batch.
"""

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, DivergenceError
from .field import fft_forward, folded_frequencies, ifft_complex
from .mlp import phi_backward, phi_forward


@dataclass(frozen=True)
class LossWeights:
    beta_spectral: float = 0.1
    beta_fp: float = 1.0
    lambda_start: float = 1.0
    lambda_end: float = 2.0
    spectral_warmup_epochs: int = 5

    def __post_init__(self):
        if self.beta_spectral < 0 or self.beta_fp < 0:
            raise ConfigError("loss weights must be nonnegative")
        if self.lambda_end < self.lambda_start:
            raise ConfigError("lambda_end must be >= lambda_start")
        if self.spectral_warmup_epochs < 0:
            raise ConfigError("spectral_warmup_epochs must be nonnegative")

    def beta_spectral_at(self, epoch):
        """Warmed-up spectral weight for 1-based ``epoch``."""
        if self.spectral_warmup_epochs == 0:
            return self.beta_spectral
        return self.beta_spectral * min(1.0, epoch / self.spectral_warmup_epochs)


def lambda_schedule(k, K, weights):
    """Exponent for step ``k`` in 1..K, linear from lambda_start to lambda_end."""
    if not 1 <= k <= K:
        raise ConfigError(f"step {k} outside 1..{K}")
    if K == 1:
        return weights.lambda_start
    return weights.lambda_start + (k - 1) / (K - 1) * (weights.lambda_end - weights.lambda_start)


def spectral_weight(omega_mag, nyq, lam):
    return 1.0 + (np.asarray(omega_mag, dtype=np.float64) / nyq) ** lam


def _weights_for(n, lam):
    rho = spectral_weight(folded_frequencies(n), n // 2, lam)
    return rho / rho.mean()


def spectral_loss_step(h, y, lam, y_hat_abs=None):
    """Weighted squared difference of magnitude spectra, per sample."""
    h = np.asarray(h, dtype=np.float64)
    n = h.shape[-1]
    ya = np.abs(fft_forward(y)) if y_hat_abs is None else y_hat_abs
    d = np.abs(fft_forward(h)) - ya
    return np.sum(_weights_for(n, lam) * d * d, axis=-1) / n


def spectral_loss_grad(h, y, lam, y_hat_abs=None):
    """Gradient of ``spectral_loss_step`` with respect to the real field ``h``.

    Where a coefficient of ``h`` vanishes the magnitude is not differentiable
    and the zero subgradient is used.
    """
    h = np.asarray(h, dtype=np.float64)
    n = h.shape[-1]
    hh = fft_forward(h)
    mag = np.abs(hh)
    ya = np.abs(fft_forward(y)) if y_hat_abs is None else y_hat_abs
    coef = 2.0 * _weights_for(n, lam) * (mag - ya) / n
    with np.errstate(invalid="ignore", divide="ignore"):
        g = np.where(mag > 0, coef * hh / mag, 0.0)
    # adjoint of the unnormalized forward transform is n * inverse
    return n * ifft_complex(g).real


def spatial_loss(traj, y):
    """Mean over k = 1..K of the mean-square error of h_k (h_0 excluded)."""
    it = np.asarray(traj.iterates if hasattr(traj, "iterates") else traj)
    if len(it) < 2:
        raise ConfigError("spatial loss needs at least one refinement step")
    err = it[1:] - np.asarray(y)
    return float(np.mean(np.mean(err * err, axis=-1), axis=0).mean())


def fixed_point_loss(params, x, y):
    """Mean square of ``Phi(x, y)``, averaged over a batch."""
    out, _ = phi_forward(params, x, y)
    return float(np.mean(np.mean(out * out, axis=-1)))


@dataclass
class LossBreakdown:
    total: float
    spatial: float
    spectral: float
    fp: float

    def as_dict(self):
        return {"L_total": self.total, "L_spatial": self.spatial, "L_spectral": self.spectral, "L_fp": self.fp}


def unrolled_loss(params, x, y, h0, alpha, K, weights, deep_supervision=True,
                  beta_spectral=None, need_grad=True):
    """Algorithm-level objective and, optionally, its parameter gradient.

    Unrolls K steps from ``h0`` (which carries no gradient), supervises every
    step (or only step K when ``deep_supervision`` is false), adds the
    fixed-point penalty once, and backpropagates through all K steps with
    shared weights.  Returns ``(LossBreakdown, grads or None)``.
    """
    if K < 1:
        raise ConfigError("K must be >= 1")
    beta_sp = weights.beta_spectral if beta_spectral is None else beta_spectral
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    y = np.atleast_2d(np.asarray(y, dtype=np.float64))
    h = np.atleast_2d(np.array(h0, dtype=np.float64))
    B, n = h.shape
    y_abs = np.abs(fft_forward(y))

    tapes, hs = [], []
    for k in range(1, K + 1):
        out, tape = phi_forward(params, x, h)
        h = h + alpha * out
        if not np.all(np.isfinite(h)):
            raise DivergenceError(f"non-finite iterate during unroll at step {k}", step=k)
        tapes.append(tape)
        hs.append(h)

    supervised = list(range(1, K + 1)) if deep_supervision else [K]
    w = 1.0 / len(supervised)
    spatial = np.zeros(B)
    spectral = np.zeros(B)
    for k in supervised:
        err = hs[k - 1] - y
        spatial += w * np.mean(err * err, axis=-1)
        if beta_sp:
            spectral += w * spectral_loss_step(hs[k - 1], y, lambda_schedule(k, K, weights), y_abs)

    fp_out, fp_tape = phi_forward(params, x, y)
    fp = np.mean(fp_out * fp_out, axis=-1)
    total = spatial + beta_sp * spectral + weights.beta_fp * fp
    bd = LossBreakdown(float(total.mean()), float(spatial.mean()), float(spectral.mean()), float(fp.mean()))
    if not np.isfinite(bd.total):
        raise DivergenceError("non-finite loss")
    if not need_grad:
        return bd, None

    grads = params.zeros_like()
    gh = np.zeros_like(h)
    for k in range(K, 0, -1):
        if k in supervised:
            hk = hs[k - 1]
            direct = 2.0 * (hk - y) / n
            if beta_sp:
                direct = direct + beta_sp * spectral_loss_grad(hk, y, lambda_schedule(k, K, weights), y_abs)
            gh = gh + (w / B) * direct
        pg, _, hg = phi_backward(tapes[k - 1], alpha * gh)
        grads = grads.add(pg)
        gh = gh + hg
    if weights.beta_fp:
        pg, _, _ = phi_backward(fp_tape, weights.beta_fp * 2.0 * fp_out / (n * B))
        grads = grads.add(pg)
    return bd, grads


def total_loss(params, x, y, h0, cfg, weights, beta_spectral=None):
    """Objective value and per-term breakdown for a TrainConfig-like ``cfg``."""
    bd, _ = unrolled_loss(params, x, y, h0, cfg.alpha, cfg.K, weights,
                          deep_supervision=cfg.deep_supervision,
                          beta_spectral=beta_spectral, need_grad=False)
    return bd.total, bd
