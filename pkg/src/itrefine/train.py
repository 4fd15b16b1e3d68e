"""AdamW optimizer, learning-rate schedule and the refinement trainer."""

import csv
import math
from dataclasses import dataclass, field

import numpy as np

from .base import base_predict
from .errors import ConfigError, DivergenceError
from .losses import unrolled_loss
from .mlp import init_params

BETA1 = 0.9
BETA2 = 0.999
ADAM_EPS = 1e-8


@dataclass(frozen=True)
class TrainConfig:
    K: int = 4
    alpha: float = 0.2
    epochs: int = 200
    batch_size: int = 16
    lr: float = 3e-4
    weight_decay: float = 1e-5
    grad_clip: float = 1.0
    lr_schedule: str = "cosine"
    min_lr: float = 1e-6
    seed: int = 0
    deep_supervision: bool = True
    hidden_dim: int = 256
    init_gain: float = 0.1

    def __post_init__(self):
        if self.K < 1:
            raise ConfigError("K must be >= 1")
        if not self.grad_clip > 0:
            raise ConfigError("grad_clip must be positive")
        if not 0.0 < self.alpha <= 1.0:
            raise ConfigError("alpha must be in (0, 1]")
        if self.epochs < 0 or self.batch_size < 1:
            raise ConfigError("epochs must be >= 0 and batch_size >= 1")
        if self.lr < 0 or self.weight_decay < 0:
            raise ConfigError("lr and weight_decay must be nonnegative")
        if self.lr_schedule not in ("cosine", "constant"):
            raise ConfigError(f"unknown lr_schedule {self.lr_schedule!r}")
        if self.hidden_dim < 1:
            raise ConfigError("hidden_dim must be >= 1")


def learning_rate(epoch, cfg):
    """Learning rate for 0-based ``epoch``; cosine decays from lr to min_lr."""
    if cfg.lr_schedule == "constant" or cfg.epochs <= 1:
        return cfg.lr
    lo = min(cfg.min_lr, cfg.lr)
    return lo + 0.5 * (cfg.lr - lo) * (1.0 + math.cos(math.pi * epoch / (cfg.epochs - 1)))


@dataclass
class OptimizerState:
    m: object
    v: object
    step: int = 0

    @classmethod
    def zeros_like(cls, params):
        return cls(params.zeros_like(), params.zeros_like(), 0)


def clip_by_global_norm(grads, max_norm):
    norm = grads.global_norm()
    if not math.isfinite(norm):
        raise DivergenceError("non-finite gradient")
    if norm > max_norm:
        grads = grads.scale(max_norm / norm)
    return grads, norm


def optimizer_step(state, params, grads, cfg, lr=None):
    """One AdamW update with global-norm clipping; returns (params, state, grad_norm).

    Clipping happens before the moment update; weight decay is decoupled
    (``p *= 1 - lr * wd``).  Inputs are not modified.
    """
    lr = cfg.lr if lr is None else lr
    grads, norm = clip_by_global_norm(grads, cfg.grad_clip)
    t = state.step + 1
    c1 = 1.0 - BETA1**t
    c2 = 1.0 - BETA2**t
    new_p, new_m, new_v = [], [], []
    for p, g, m, v in zip(params.arrays(), grads.arrays(), state.m.arrays(), state.v.arrays()):
        m = BETA1 * m + (1.0 - BETA1) * g
        v = BETA2 * v + (1.0 - BETA2) * g * g
        p = p * (1.0 - lr * cfg.weight_decay)
        p = p - lr * (m / c1) / (np.sqrt(v / c2) + ADAM_EPS)
        new_p.append(p)
        new_m.append(m)
        new_v.append(v)
    pick = params._from_arrays
    return pick(new_p), OptimizerState(pick(new_m), pick(new_v), t), norm


@dataclass
class TrainingLog:
    rows: list = field(default_factory=list)

    COLUMNS = ("epoch", "L_total", "L_spatial", "L_spectral", "L_fp", "lr", "grad_norm")

    def append(self, **row):
        self.rows.append(row)

    def column(self, name):
        return np.array([r[name] for r in self.rows])

    def to_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(self.COLUMNS)
            for r in self.rows:
                w.writerow([r["epoch"]] + [format(float(r[c]), ".17g") for c in self.COLUMNS[1:]])


def train(dataset, base_spec, prob, cfg, weights, params=None, progress=None):
    """Fit the refinement network on ``dataset = (xs, ys)``.

    Every epoch visits the samples in a shuffle drawn from ``(seed, epoch)``.
    For each mini-batch the base prediction is fixed, K steps are unrolled,
    and the gradient of the batch-mean objective drives one AdamW step.
    Logged losses are sample-weighted epoch means measured before each
    update.  Returns ``(params, TrainingLog)``.
    """
    xs, ys = (np.asarray(a, dtype=np.float64) for a in dataset)
    if xs.ndim != 2 or len(xs) == 0:
        raise ConfigError("training set must be a nonempty (N, n) array")
    if ys.shape != xs.shape:
        raise ConfigError("inputs and targets differ in shape")
    N, n = xs.shape
    if n != prob.n:
        raise ConfigError(f"dataset grid {n} does not match problem grid {prob.n}")
    if params is None:
        params = init_params(cfg.seed, cfg.hidden_dim, n, cfg.init_gain)
    h0_all = base_predict(base_spec, prob, xs, sample_ids=np.arange(N))
    state = OptimizerState.zeros_like(params)
    log = TrainingLog()

    for epoch in range(cfg.epochs):
        lr = learning_rate(epoch, cfg)
        beta_sp = weights.beta_spectral_at(epoch + 1)
        order = np.random.default_rng([cfg.seed, epoch]).permutation(N)
        sums = np.zeros(4)
        gnorms = []
        for start in range(0, N, cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            try:
                bd, grads = unrolled_loss(params, xs[idx], ys[idx], h0_all[idx], cfg.alpha, cfg.K,
                                          weights, cfg.deep_supervision, beta_sp)
                params, state, gnorm = optimizer_step(state, params, grads, cfg, lr)
            except DivergenceError as exc:
                exc.log = log
                raise
            sums += len(idx) * np.array([bd.total, bd.spatial, bd.spectral, bd.fp])
            gnorms.append(gnorm)
        means = sums / N
        log.append(epoch=epoch + 1, L_total=means[0], L_spatial=means[1], L_spectral=means[2],
                   L_fp=means[3], lr=lr, grad_norm=float(np.mean(gnorms)))
        if progress is not None:
            progress(log.rows[-1])
    return params, log
