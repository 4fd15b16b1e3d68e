"""End-to-end runs: data, training, refinement trajectories and diagnostics.

Everything written is a deterministic function of the config except the
timestamp inside ``manifest.json``.
"""

import csv
import dataclasses
import hashlib
import json
import os
import platform
import time
from concurrent.futures import ThreadPoolExecutor
from contextlib import contextmanager
from importlib import metadata

import numpy as np

from . import diagnostics as dg
from .base import base_predict
from .config import serialize
from .data import train_test_split
from .errors import InsufficientDataError, RefineError
from .mlp import save_params
from .refine import RefineConfig, refine_batch, run_refinement, write_trajectory_csv
from .train import train

THREADS_ENV = "ITREFINE_THREADS"


def worker_count():
    try:
        return max(1, int(os.environ.get(THREADS_ENV, "1")))
    except ValueError:
        return 1


@contextmanager
def phase(name, sample=None):
    """Tag package errors raised inside the block with the phase and sample index."""
    try:
        yield
    except RefineError as exc:
        if getattr(exc, "phase", None) is None:
            exc.phase = name
            exc.sample = sample
        raise


def _fmt(v):
    return format(float(v), ".17g")


def _dump_json(obj, path):
    with open(path, "w") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True, allow_nan=True)
        fh.write("\n")


# -- evaluation --------------------------------------------------------------

def monotonicity_study(params, xs, ys, alpha, stride=1):
    """JacobianReports at the true solutions of every ``stride``-th sample."""
    idx = list(range(0, len(xs), stride))

    def one(i):
        with phase("monotonicity", i):
            return dg.jacobian_report(params, xs[i], ys[i], alpha)

    with ThreadPoolExecutor(max_workers=worker_count()) as pool:
        reports = list(pool.map(one, idx))
    return idx, reports


def step_size_sweep(params, xs, ys, h0, alphas, steps):
    """Batch trajectories for each step size; diverged samples become NaN."""
    out = {}
    for a in alphas:
        with phase("step_size_sweep"):
            out[a] = refine_batch(params, xs, h0, RefineConfig(alpha=a, k_max=steps), y=ys)
    return out


def sweep_summary(trajs):
    rows = {}
    for a, tj in trajs.items():
        ok = ~tj.diverged
        curve = np.mean(tj.error_norms[:, ok], axis=1) if ok.any() else np.full(len(tj.error_norms), np.nan)
        entry = {
            "mean_error": curve.tolist(),
            "diverged": int((~ok).sum()),
            "monotone": bool(ok.any() and np.all(np.diff(curve) < 0)),
            "final_over_min": float(curve[-1] / np.min(curve)) if ok.any() else None,
        }
        try:
            fit = dg.fit_error_recursion(curve)
            entry["fit"] = dataclasses.asdict(fit)
        except InsufficientDataError:
            entry["fit"] = None
        rows[repr(float(a))] = entry
    return rows


def band_ratio_rows(report):
    return [(k, b, med, q25, q75) for k, b, med, q25, q75 in report.rows()]


def write_band_csv(report, path):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["k", "band", "median", "q25", "q75"])
        for k, b, med, q25, q75 in band_ratio_rows(report):
            w.writerow([k, b, _fmt(med), _fmt(q25), _fmt(q75)])


def evaluate(params, cfg, test):
    """Diagnostics dictionary for a trained model on the test set."""
    d = cfg.diagnostics
    alpha = cfg.refine.alpha
    h0 = base_predict(cfg.base, cfg.problem, test.xs, sample_ids=test.sample_ids)
    result = {}
    if d.monotonicity:
        idx, reports = monotonicity_study(params, test.xs, test.ys, alpha, d.sample_stride)
        result["monotonicity"] = {
            "summary": dg.summarize_reports(reports),
            "samples": [dict(sample=int(test.first_index + i), **dataclasses.asdict(r))
                        for i, r in zip(idx, reports)],
        }
    if d.bias_error:
        with phase("bias_error"):
            result["bias_error"] = dg.bias_error_pairs(params, test.xs, test.ys, h0, alpha, d.bias_steps).as_dict()
    traj = refine_batch(params, test.xs, h0, RefineConfig(alpha=alpha, k_max=cfg.refine.k_max), y=test.ys)
    if d.recursion_fit:
        ok = ~traj.diverged
        fits = []
        for i in np.nonzero(ok)[0]:
            try:
                fits.append(dg.fit_error_recursion(traj.error_norms[:, i]))
            except InsufficientDataError:
                pass
        curve = np.mean(traj.error_norms[:, ok], axis=1)
        result["recursion_fit"] = {
            "mean_curve_fit": dataclasses.asdict(dg.fit_error_recursion(curve)) if len(curve) >= 4 else None,
            "q_hat_median": float(np.median([f.q_hat for f in fits])) if fits else None,
            "c_hat_median": float(np.median([f.c_hat for f in fits])) if fits else None,
            "b_hat_median": float(np.median([f.b_hat for f in fits])) if fits else None,
        }
    if d.step_size_sweep:
        result["step_size_sweep"] = step_size_sweep(params, test.xs, test.ys, h0, d.step_size_sweep,
                                                    2 * cfg.train.K)
    bands = None
    if d.band_ratios:
        ok = ~traj.diverged
        bands = dg.band_ratios(dg.trajectory_profiles(traj.iterates[:, ok], test.ys[ok]))
        result["band_ratios"] = bands.as_dict()
    return result, bands, traj


# -- runs ------------------------------------------------------------------------

def _versions():
    out = {"python": platform.python_version(), "numpy": np.__version__}
    for pkg in ("scipy", "artifact"):
        try:
            out[pkg] = metadata.version(pkg)
        except metadata.PackageNotFoundError:
            out[pkg] = None
    return out


def _sha256(path):
    with open(path, "rb") as fh:
        return hashlib.sha256(fh.read()).hexdigest()


def write_manifest(cfg, out_dir, files, kind="experiment"):
    manifest = {
        "kind": kind,
        "config_sha256": cfg.digest(),
        "versions": _versions(),
        "timestamp": time.strftime("%Y-%m-%dT%H:%M:%SZ", time.gmtime()),
        "files": {os.path.relpath(f, out_dir): _sha256(f) for f in sorted(files)},
    }
    path = os.path.join(out_dir, "manifest.json")
    _dump_json(manifest, path)
    return path


def train_model(cfg, train_set, progress=None):
    with phase("train"):
        return train(train_set.pairs(), cfg.base, cfg.problem, cfg.train, cfg.losses, progress=progress)


def run_experiment(cfg, progress=None, params=None):
    """Train (unless ``params`` is given), refine every test sample and run diagnostics.

    Writes into ``cfg.output_dir``: ``config.txt``, ``model.json``,
    ``training_log.csv``, ``trajectories/sample_XXXX.csv``, and when the
    matching toggles are on ``diagnostics.json``, ``band_ratios.csv`` and
    ``step_sweep/alpha_<a>.csv``; finally ``manifest.json``.  Returns a dict
    with the params, training log, diagnostics and written paths.
    """
    out = cfg.output_dir
    os.makedirs(os.path.join(out, "trajectories"), exist_ok=True)
    files = []

    def path(*parts):
        p = os.path.join(out, *parts)
        files.append(p)
        return p

    with open(path("config.txt"), "w") as fh:
        fh.write(serialize(cfg))
    with phase("data"):
        train_set, test = train_test_split(cfg.problem, cfg.data)
    log = None
    if params is None:
        params, log = train_model(cfg, train_set, progress)
        log.to_csv(path("training_log.csv"))
    save_params(params, path("model.json"))

    h0 = base_predict(cfg.base, cfg.problem, test.xs, sample_ids=test.sample_ids)
    for i in range(test.count):
        sid = test.first_index + i
        with phase("refine", sid):
            traj = run_refinement(params, test.xs[i], h0[i], cfg.refine, y=test.ys[i])
        write_trajectory_csv(path("trajectories", f"sample_{sid:04d}.csv"), traj)

    diag, bands = {}, None
    if any(getattr(cfg.diagnostics, f) for f in ("monotonicity", "bias_error", "band_ratios", "recursion_fit")) \
            or cfg.diagnostics.step_size_sweep:
        diag, bands, _ = evaluate(params, cfg, test)
        sweep = diag.pop("step_size_sweep", None)
        if sweep is not None:
            os.makedirs(os.path.join(out, "step_sweep"), exist_ok=True)
            for a, tj in sweep.items():
                _write_sweep_csv(tj, path("step_sweep", f"alpha_{a:g}.csv"), test.first_index)
            diag["step_size_sweep"] = sweep_summary(sweep)
        _dump_json(diag, path("diagnostics.json"))
        if bands is not None:
            write_band_csv(bands, path("band_ratios.csv"))
    manifest = write_manifest(cfg, out, files)
    return {"params": params, "log": log, "diagnostics": diag, "bands": bands, "files": files + [manifest]}


def _write_sweep_csv(tj, path, first_index):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["sample", "k", "error_norm"])
        for i in range(tj.error_norms.shape[1]):
            for k in range(tj.error_norms.shape[0]):
                w.writerow([first_index + i, k, _fmt(tj.error_norms[k, i])])


# -- ablations ---------------------------------------------------------------------

ABLATIONS = ("none", "deep_supervision", "lambda")


def ablation_arms(cfg, ablate="deep_supervision", fixed_lambdas=(1.0, 2.0)):
    """``[(name, cfg)]`` pairs differing only in the ablated setting."""
    if ablate == "none":
        return [("control_a", cfg), ("control_b", cfg)]
    if ablate == "deep_supervision":
        return [("full", cfg.replace(**{"train.deep_supervision": True})),
                ("no_deep_supervision", cfg.replace(**{"train.deep_supervision": False}))]
    if ablate == "lambda":
        arms = [("progressive", cfg)]
        for lam in fixed_lambdas:
            arms.append((f"fixed_{lam:g}", cfg.replace(**{"losses.lambda_start": lam, "losses.lambda_end": lam})))
        return arms
    raise ValueError(f"unknown ablation {ablate!r}; choose from {ABLATIONS}")


def arm_summary(params, cfg, test):
    """Table-style metrics of one trained arm."""
    alpha = cfg.refine.alpha
    _, reports = monotonicity_study(params, test.xs, test.ys, alpha, cfg.diagnostics.sample_stride)
    summary = dg.summarize_reports(reports)
    h0 = base_predict(cfg.base, cfg.problem, test.xs, sample_ids=test.sample_ids)
    K = cfg.train.K
    bands = dg.refinement_band_ratios(params, test.xs, test.ys, h0, alpha, 2 * K)
    for b in dg.BANDS:
        summary[f"{b}_ratio_K"] = float(bands.median[b][K])
        summary[f"{b}_ratio_2K"] = float(bands.median[b][2 * K])
    return summary


def ablation_suite(cfg, ablate="deep_supervision", fixed_lambdas=(1.0, 2.0), progress=None):
    """Train one model per arm on the same data and compare them side by side.

    Writes ``ablation.json`` and ``ablation.csv`` (one row per arm) into
    ``cfg.output_dir`` and returns ``{arm: summary}``.
    """
    os.makedirs(cfg.output_dir, exist_ok=True)
    with phase("data"):
        train_set, test = train_test_split(cfg.problem, cfg.data)
    results = {}
    for name, arm_cfg in ablation_arms(cfg, ablate, fixed_lambdas):
        params, _ = train_model(arm_cfg, train_set, progress)
        results[name] = arm_summary(params, arm_cfg, test)
    jpath = os.path.join(cfg.output_dir, "ablation.json")
    _dump_json({"ablate": ablate, "arms": results}, jpath)
    cpath = os.path.join(cfg.output_dir, "ablation.csv")
    write_ablation_csv(results, cpath)
    write_manifest(cfg, cfg.output_dir, [jpath, cpath], kind=f"ablation:{ablate}")
    return results


def table_rows(results):
    """Rows ``arm, m (mean ± std), m>0, M (mean ± std), band ratios`` for display."""
    rows = []
    for name, s in results.items():
        rows.append([
            name,
            f"{s['m_mean']:.3f} ± {s['m_std']:.3f}",
            f"{100 * s['frac_m_positive']:.1f}%",
            f"{s['M_mean']:.3f} ± {s['M_std']:.3f}",
            f"{s['low_ratio_K']:.4f}", f"{s['mid_ratio_K']:.4f}", f"{s['high_ratio_K']:.4f}",
        ])
    return rows


TABLE_HEADER = ["arm", "m (mean ± std)", "m>0", "M (mean ± std)", "low R_K", "mid R_K", "high R_K"]


def write_ablation_csv(results, path):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(TABLE_HEADER)
        w.writerows(table_rows(results))
