"""Synthetic (x, y) pairs for the periodic screened problem and their file format.

File layout (all little-endian)::

    8 bytes   magic b"ITRFDS01"
    4 bytes   uint32 header length H
    H bytes   UTF-8 JSON header {n, eps, rhs_family, seed, count, ...}
    count * 2 * n float64 values: x_0, y_0, x_1, y_1, ...
"""

import csv
import json
import struct
from dataclasses import dataclass

import numpy as np

from .base import EllipticProblem, solve_exact
from .errors import ConfigError

MAGIC = b"ITRFDS01"
RESIDUAL_TOL = 1e-9
RHS_FAMILIES = ("tanh", "fourier")


@dataclass(frozen=True)
class DataSpec:
    n_train: int = 512
    n_test: int = 200
    rhs_family: str = "tanh"
    seed: int = 0
    perturb_amp: float = 0.1

    def __post_init__(self):
        if self.rhs_family not in RHS_FAMILIES:
            raise ConfigError(f"rhs_family must be one of {RHS_FAMILIES}, got {self.rhs_family!r}")
        if self.n_train < 0 or self.n_test < 0:
            raise ConfigError("sample counts must be nonnegative")
        if self.perturb_amp < 0:
            raise ConfigError("perturb_amp must be nonnegative")


@dataclass
class Dataset:
    xs: np.ndarray
    ys: np.ndarray
    n: int
    eps: float
    rhs_family: str
    seed: int
    first_index: int = 0

    def __len__(self):
        return len(self.xs)

    @property
    def count(self):
        return len(self.xs)

    @property
    def sample_ids(self):
        return np.arange(self.first_index, self.first_index + len(self.xs))

    def pairs(self):
        return self.xs, self.ys

    def header(self):
        return {"n": self.n, "eps": self.eps, "rhs_family": self.rhs_family, "seed": self.seed,
                "count": self.count, "first_index": self.first_index}


def power_law_field(rng, n, decay=1.5):
    """Random cosine series with mode amplitudes ``g_k (1 + k)**-decay``.

    ``g_k`` is standard normal and every mode gets a uniform random phase.
    """
    k = np.arange(n // 2 + 1)
    amp = rng.standard_normal(len(k)) * (1.0 + k) ** (-decay)
    phase = rng.uniform(0.0, 2.0 * np.pi, len(k))
    s = np.arange(n)
    return np.sum(amp[:, None] * np.cos(2.0 * np.pi * np.outer(k, s) / n + phase[:, None]), axis=0)


def sample_rhs(family, seed, index, n, perturb_amp=0.1):
    """Right-hand side number ``index`` of a seeded family.

    ``tanh``: ``a tanh(b cos(2 pi s / n + phi))`` plus a power-law
    perturbation of relative size ``perturb_amp``.  ``fourier``: a pure
    power-law field.
    """
    rng = np.random.default_rng([seed, index])
    if family == "tanh":
        a = rng.uniform(0.5, 1.5)
        b = rng.uniform(1.0, 8.0)
        phi = rng.uniform(0.0, 2.0 * np.pi)
        s = np.arange(n)
        x = a * np.tanh(b * np.cos(2.0 * np.pi * s / n + phi))
        return x + perturb_amp * a * power_law_field(rng, n)
    if family == "fourier":
        return power_law_field(rng, n)
    raise ConfigError(f"unknown rhs_family {family!r}")


def generate_dataset(prob, family="tanh", seed=0, count=1, first_index=0, perturb_amp=0.1):
    """``count`` pairs with targets from the exact solver; deterministic per sample index."""
    if count < 1:
        raise ConfigError("dataset count must be >= 1")
    xs = np.array([sample_rhs(family, seed, first_index + i, prob.n, perturb_amp) for i in range(count)])
    ys = solve_exact(prob, xs)
    return Dataset(xs, ys, prob.n, prob.eps, family, seed, first_index)


def train_test_split(prob, spec):
    """Training and test sets drawn from disjoint index ranges of one stream."""
    train = generate_dataset(prob, spec.rhs_family, spec.seed, spec.n_train, 0, spec.perturb_amp)
    test = generate_dataset(prob, spec.rhs_family, spec.seed, spec.n_test, spec.n_train, spec.perturb_amp)
    return train, test


def check_residuals(ds, tol=RESIDUAL_TOL):
    prob = EllipticProblem(eps=ds.eps, n=ds.n)
    res = prob.residual(ds.ys, ds.xs)
    worst = float(np.max(res, initial=0.0))
    if worst > tol:
        bad = int(np.argmax(res))
        raise ConfigError(f"sample {bad} violates (I - eps L) y = x: residual {worst:.3e}")
    return worst


def save_dataset(ds, path):
    header = json.dumps(ds.header(), sort_keys=True).encode()
    body = np.empty((ds.count, 2, ds.n), dtype="<f8")
    body[:, 0] = ds.xs
    body[:, 1] = ds.ys
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", len(header)))
        fh.write(header)
        fh.write(body.tobytes())


def load_dataset(path):
    """Read a dataset file and re-check every residual."""
    with open(path, "rb") as fh:
        raw = fh.read()
    if raw[:8] != MAGIC:
        raise ConfigError(f"{path}: not a dataset file")
    (hlen,) = struct.unpack("<I", raw[8:12])
    header = json.loads(raw[12:12 + hlen].decode())
    n, count = int(header["n"]), int(header["count"])
    body = np.frombuffer(raw[12 + hlen:], dtype="<f8")
    if body.size != count * 2 * n:
        raise ConfigError(f"{path}: expected {count * 2 * n} values, found {body.size}")
    body = body.reshape(count, 2, n).astype(np.float64)
    ds = Dataset(body[:, 0].copy(), body[:, 1].copy(), n, float(header["eps"]), header["rhs_family"],
                 int(header["seed"]), int(header.get("first_index", 0)))
    check_residuals(ds)
    return ds


def export_csv(ds, path):
    """Long-format CSV: sample, index, x, y."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["sample", "index", "x", "y"])
        for s in range(ds.count):
            for i in range(ds.n):
                w.writerow([s, i, format(ds.xs[s, i], ".17g"), format(ds.ys[s, i], ".17g")])
