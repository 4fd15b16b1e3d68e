"""Inference-time fixed-point loop ``h_{k+1} = h_k + alpha_k * Phi(x, h_k)``."""

import csv
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, DivergenceError
from .field import l2_norm
from .metrics import vrmse
from .mlp import MlpParams, phi

BLOWUP_FACTOR = 1e6


@dataclass(frozen=True)
class RefineConfig:
    """Step size, horizon and stopping rule of the refinement loop.

    ``alpha_schedule`` is ``"constant"`` or ``"decay"``; with decay the step
    at iteration k is ``alpha * decay_rate**k``.  ``stop_threshold`` is
    compared with the RMS norm of the raw update; zero disables stopping.
    """

    alpha: float = 0.2
    k_max: int = 12
    stop_threshold: float = 0.0
    alpha_schedule: str = "constant"
    decay_rate: float = 1.0

    def __post_init__(self):
        if not 0.0 < self.alpha <= 1.0:
            raise ConfigError(f"alpha must be in (0, 1], got {self.alpha}")
        if self.k_max < 0:
            raise ConfigError("k_max must be nonnegative")
        if self.stop_threshold < 0:
            raise ConfigError("stop_threshold must be nonnegative")
        if self.alpha_schedule not in ("constant", "decay"):
            raise ConfigError(f"unknown alpha_schedule {self.alpha_schedule!r}")
        if self.alpha_schedule == "decay" and not 0.0 < self.decay_rate <= 1.0:
            raise ConfigError("decay_rate must be in (0, 1]")

    def step_size(self, k):
        if self.alpha_schedule == "decay":
            return self.alpha * self.decay_rate**k
        return self.alpha


@dataclass
class RefinementTrajectory:
    iterates: np.ndarray  # (k_stop + 1, n)
    update_norms: np.ndarray  # (k_stop,)
    error_norms: np.ndarray = None  # (k_stop + 1,) when y was given
    stopped_early: bool = False
    vrmse: np.ndarray = None

    @property
    def steps(self):
        return len(self.iterates) - 1

    def to_csv(self, path):
        write_trajectory_csv(path, self)


def as_operator(model):
    """Turn MlpParams or any ``f(x, h)`` callable into a batched callable."""
    if isinstance(model, MlpParams):
        return lambda x, h: phi(model, x, h)
    if callable(model):
        return model
    raise TypeError(f"cannot use {type(model).__name__} as a refinement operator")


def linear_operator(A, y, b=None):
    """``Phi(x, h) = A (y - h) + b``: the closed-form model of the local analysis."""
    A = np.asarray(A, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    b = np.zeros(A.shape[0]) if b is None else np.asarray(b, dtype=np.float64)

    def op(x, h):
        return (y - np.asarray(h)) @ A.T + b

    return op


def refine_step(model, x, h, alpha, step=None):
    """One correction ``h + alpha * Phi(x, h)``; raises DivergenceError on non-finite output."""
    op = as_operator(model)
    out = np.asarray(h) + alpha * op(x, h)
    if not np.all(np.isfinite(out)):
        raise DivergenceError(f"non-finite iterate at step {step}", step=step)
    return out


def run_refinement(model, x, h0, cfg, y=None):
    """Iterate from ``h0`` for up to ``cfg.k_max`` steps, recording norms.

    Stops after the step whose raw update norm falls below
    ``cfg.stop_threshold``.  A non-finite iterate, or one whose norm exceeds
    ``1e6 * (1 + ||h0||)``, raises DivergenceError with the partial
    trajectory attached.
    """
    op = as_operator(model)
    h = np.array(h0, dtype=np.float64)
    limit = BLOWUP_FACTOR * (1.0 + float(l2_norm(h)))
    iterates = [h]
    updates = []
    stopped = False
    for k in range(cfg.k_max):
        u = np.asarray(op(x, h), dtype=np.float64)
        unorm = float(l2_norm(u))
        h = h + cfg.step_size(k) * u
        if not np.all(np.isfinite(h)) or not float(l2_norm(h)) <= limit:
            partial = _build(iterates, updates, y, False)
            raise DivergenceError(f"refinement diverged at step {k + 1}", step=k + 1, trajectory=partial)
        iterates.append(h)
        updates.append(unorm)
        if cfg.stop_threshold > 0 and unorm < cfg.stop_threshold:
            stopped = k + 1 < cfg.k_max
            break
    return _build(iterates, updates, y, stopped)


def _build(iterates, updates, y, stopped):
    it = np.array(iterates)
    traj = RefinementTrajectory(iterates=it, update_norms=np.array(updates), stopped_early=stopped)
    if y is not None:
        y = np.asarray(y, dtype=np.float64)
        traj.error_norms = l2_norm(y - it)
        traj.vrmse = vrmse(it, y)
    return traj


@dataclass
class BatchTrajectory:
    """Fixed-horizon trajectories for a batch; diverged rows are frozen at NaN."""

    iterates: np.ndarray  # (k_max + 1, B, n)
    update_norms: np.ndarray  # (k_max, B)
    error_norms: np.ndarray = None  # (k_max + 1, B)
    diverged: np.ndarray = None  # (B,) bool

    def sample(self, i):
        traj = RefinementTrajectory(
            iterates=self.iterates[:, i], update_norms=self.update_norms[:, i]
        )
        if self.error_norms is not None:
            traj.error_norms = self.error_norms[:, i]
        return traj


def refine_batch(model, x, h0, cfg, y=None):
    """Vectorized run over ``(B, n)`` inputs without early stopping.

    Rows that blow up are flagged in ``diverged`` and set to NaN from the
    offending step on instead of aborting the whole batch.
    """
    op = as_operator(model)
    h = np.array(np.atleast_2d(h0), dtype=np.float64)
    x = np.atleast_2d(x)
    limit = BLOWUP_FACTOR * (1.0 + l2_norm(h))
    diverged = np.zeros(h.shape[0], dtype=bool)
    iterates = [h.copy()]
    updates = []
    for k in range(cfg.k_max):
        with np.errstate(all="ignore"):
            u = np.asarray(op(x, h), dtype=np.float64)
            unorm = l2_norm(u)
            h = h + cfg.step_size(k) * u
            bad = ~np.all(np.isfinite(h), axis=-1) | ~(l2_norm(h) <= limit)
        diverged |= bad
        h[diverged] = np.nan
        unorm = np.where(diverged, np.nan, unorm)
        iterates.append(h.copy())
        updates.append(unorm)
    out = BatchTrajectory(iterates=np.array(iterates), update_norms=np.array(updates).reshape(cfg.k_max, -1),
                          diverged=diverged)
    if y is not None:
        out.error_norms = l2_norm(np.atleast_2d(y)[None] - out.iterates)
    return out


def _fmt(v):
    return format(float(v), ".17g")


def write_trajectory_csv(path, traj):
    """One row per iterate: k, update_norm (blank for the last), error_norm, vrmse."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["k", "update_norm", "error_norm", "vrmse"])
        for k in range(len(traj.iterates)):
            un = _fmt(traj.update_norms[k]) if k < len(traj.update_norms) else ""
            en = _fmt(traj.error_norms[k]) if traj.error_norms is not None else ""
            vr = _fmt(traj.vrmse[k]) if traj.vrmse is not None else ""
            w.writerow([k, un, en, vr])
