"""Field-comparison metrics: VRMSE, RFNE and anomaly correlation."""

import numpy as np

from .errors import UndefinedCorrelationError

EPS = 1e-10


def vrmse(u, v, eps=EPS):
    """RMSE of ``u`` against reference ``v``, scaled by the spatial variance of ``v``."""
    u = np.asarray(u, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    mse = np.mean((u - v) ** 2, axis=-1)
    var = np.mean((v - v.mean(axis=-1, keepdims=True)) ** 2, axis=-1)
    return np.sqrt(mse / (var + eps))


def rfne(pred, ref):
    """Relative Frobenius-norm error ``||pred - ref|| / ||ref||``."""
    pred = np.asarray(pred, dtype=np.float64)
    ref = np.asarray(ref, dtype=np.float64)
    denom = np.linalg.norm(ref, axis=-1)
    if np.any(denom == 0):
        raise ZeroDivisionError("RFNE is undefined for a zero reference field")
    return np.linalg.norm(pred - ref, axis=-1) / denom


def acc(pred, ref):
    """Anomaly correlation: cosine similarity after removing spatial means."""
    pa = np.asarray(pred, dtype=np.float64)
    ra = np.asarray(ref, dtype=np.float64)
    pa = pa - pa.mean(axis=-1, keepdims=True)
    ra = ra - ra.mean(axis=-1, keepdims=True)
    pp = np.sum(pa * pa, axis=-1)
    rr = np.sum(ra * ra, axis=-1)
    if np.any(pp == 0) or np.any(rr == 0):
        raise UndefinedCorrelationError("ACC is undefined when an anomaly field is zero")
    return np.sum(pa * ra, axis=-1) / np.sqrt(pp * rr)
