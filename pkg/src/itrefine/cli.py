"""Command line entry point: ``itrefine <verb> [--config FILE] [--section.key=value ...]``.

Verbs: gen-data, train, refine, diagnose, ablate, report.  Dotted flags
override config keys.  Exit codes: 0 success, 2 config error, 3 divergence,
4 I/O error.  Environment: ITREFINE_OUTPUT_DIR overrides the output
directory, ITREFINE_THREADS sizes the diagnostics worker pool.
"""

import argparse
import json
import os
import sys

from .config import ExperimentConfig, load_config, save_config
from .data import export_csv, save_dataset, train_test_split
from .errors import ConfigError, DivergenceError, RefineError
from .experiment import (
    ABLATIONS,
    TABLE_HEADER,
    ablation_suite,
    run_experiment,
    table_rows,
    train_model,
    write_manifest,
)
from .mlp import load_params, save_params

OUTPUT_ENV = "ITREFINE_OUTPUT_DIR"
EXIT_OK, EXIT_CONFIG, EXIT_DIVERGED, EXIT_IO = 0, 2, 3, 4


def build_parser():
    p = argparse.ArgumentParser(prog="itrefine", description="Learned fixed-point refinement experiments.")
    sub = p.add_subparsers(dest="verb", required=True)

    def verb(name, help_):
        s = sub.add_parser(name, help=help_)
        s.add_argument("--config", help="key=value config file")
        s.add_argument("--output-dir", help="overrides output_dir")
        s.add_argument("--quiet", action="store_true", help="no per-epoch progress")
        return s

    g = verb("gen-data", "write train/test dataset files")
    g.add_argument("--csv", action="store_true", help="also export long-format CSV")
    verb("train", "train a model and write model.json plus the training log")
    for name, help_ in (("refine", "refinement trajectories for every test sample"),
                        ("diagnose", "trajectories plus all enabled diagnostics")):
        s = verb(name, help_)
        s.add_argument("--model", help="model.json (default: <output_dir>/model.json)")
    a = verb("ablate", "paired training runs differing in one setting")
    a.add_argument("--ablate", choices=ABLATIONS, default="deep_supervision")
    a.add_argument("--fixed-lambdas", default="1.0,2.0", help="comma-separated fixed exponents")
    verb("report", "print the summary tables found in the output directory")
    return p


def split_overrides(extra):
    """``["--train.lr=1e-3", "--data.seed", "3"]`` -> ``{"train.lr": "1e-3", "data.seed": "3"}``."""
    out, i = {}, 0
    while i < len(extra):
        tok = extra[i]
        if not tok.startswith("--"):
            raise ConfigError(f"unexpected argument {tok!r}")
        key = tok[2:]
        if "=" in key:
            key, value = key.split("=", 1)
        elif i + 1 < len(extra):
            i += 1
            value = extra[i]
        else:
            raise ConfigError(f"missing value for {tok}")
        out[key.replace("-", "_") if "." not in key else key] = value
        i += 1
    return out


def resolve_config(args, extra):
    cfg = load_config(args.config) if args.config else ExperimentConfig()
    overrides = split_overrides(extra)
    if os.environ.get(OUTPUT_ENV):
        overrides.setdefault("output_dir", os.environ[OUTPUT_ENV])
    if args.output_dir:
        overrides["output_dir"] = args.output_dir
    return cfg.replace(**overrides)


def _progress(args):
    if args.quiet:
        return None
    return lambda row: print(
        f"epoch {row['epoch']:4d}  L_total={row['L_total']:.6g}  L_spatial={row['L_spatial']:.6g}  "
        f"L_fp={row['L_fp']:.6g}  lr={row['lr']:.3g}", file=sys.stderr)


def _model_path(args, cfg):
    return args.model or os.path.join(cfg.output_dir, "model.json")


def cmd_gen_data(args, cfg):
    os.makedirs(cfg.output_dir, exist_ok=True)
    train_set, test = train_test_split(cfg.problem, cfg.data)
    files = []
    for name, ds in (("train", train_set), ("test", test)):
        path = os.path.join(cfg.output_dir, f"{name}.bin")
        save_dataset(ds, path)
        files.append(path)
        if args.csv:
            export_csv(ds, path[:-4] + ".csv")
            files.append(path[:-4] + ".csv")
    write_manifest(cfg, cfg.output_dir, files, kind="gen-data")
    print(f"wrote {len(train_set)} train and {len(test)} test pairs to {cfg.output_dir}")


def cmd_train(args, cfg):
    os.makedirs(cfg.output_dir, exist_ok=True)
    train_set, _ = train_test_split(cfg.problem, cfg.data)
    params, log = train_model(cfg, train_set, _progress(args))
    files = [os.path.join(cfg.output_dir, f) for f in ("model.json", "training_log.csv", "config.txt")]
    save_params(params, files[0])
    log.to_csv(files[1])
    save_config(cfg, files[2])
    write_manifest(cfg, cfg.output_dir, files, kind="train")
    last = log.rows[-1] if log.rows else {}
    print(f"trained {cfg.train.epochs} epochs; final L_total={last.get('L_total', float('nan')):.6g}")


def cmd_refine(args, cfg, diagnose=False):
    params = load_params(_model_path(args, cfg))
    if not diagnose:
        cfg = cfg.replace(**{"diagnostics.monotonicity": False, "diagnostics.bias_error": False,
                             "diagnostics.band_ratios": False, "diagnostics.recursion_fit": False,
                             "diagnostics.step_size_sweep": ()})
    res = run_experiment(cfg, params=params)
    mono = res["diagnostics"].get("monotonicity")
    if mono:
        s = mono["summary"]
        print(f"m = {s['m_mean']:.4f} ± {s['m_std']:.4f}  m>0: {100 * s['frac_m_positive']:.1f}%  "
              f"M = {s['M_mean']:.4f} ± {s['M_std']:.4f}")
    print(f"wrote {len(res['files'])} files to {cfg.output_dir}")


def cmd_ablate(args, cfg):
    try:
        lams = tuple(float(v) for v in args.fixed_lambdas.split(",") if v.strip())
    except ValueError:
        raise ConfigError(f"bad --fixed-lambdas {args.fixed_lambdas!r}") from None
    results = ablation_suite(cfg, args.ablate, lams, progress=_progress(args))
    print_table(results)


def print_table(results):
    rows = [TABLE_HEADER] + table_rows(results)
    widths = [max(len(r[i]) for r in rows) for i in range(len(TABLE_HEADER))]
    for r in rows:
        print("  ".join(c.ljust(w) for c, w in zip(r, widths)))


def cmd_report(args, cfg):
    found = False
    abl = os.path.join(cfg.output_dir, "ablation.json")
    if os.path.exists(abl):
        with open(abl) as fh:
            doc = json.load(fh)
        print(f"ablation: {doc['ablate']}")
        print_table(doc["arms"])
        found = True
    diag = os.path.join(cfg.output_dir, "diagnostics.json")
    if os.path.exists(diag):
        with open(diag) as fh:
            doc = json.load(fh)
        if "monotonicity" in doc:
            s = doc["monotonicity"]["summary"]
            print(f"monotonicity over {s['count']} samples: m = {s['m_mean']:.4f} ± {s['m_std']:.4f}, "
                  f"m>0 {100 * s['frac_m_positive']:.1f}%, M = {s['M_mean']:.4f}, q = {s['q_mean']:.4f}")
        if "bias_error" in doc:
            r = doc["bias_error"]["pearson_r"]
            print(f"bias vs error floor: r = {r if r is None else format(r, '.4f')} "
                  f"({doc['bias_error']['diverged']} diverged)")
        if "band_ratios" in doc:
            for b, v in doc["band_ratios"].items():
                print(f"band {b:4s}: " + " ".join(f"{x:.3g}" for x in v["median"]))
        if "step_size_sweep" in doc:
            for a, e in doc["step_size_sweep"].items():
                print(f"alpha {a}: final/min = {e['final_over_min']}, monotone = {e['monotone']}, "
                      f"diverged = {e['diverged']}")
        found = True
    if not found:
        raise FileNotFoundError(f"no diagnostics.json or ablation.json in {cfg.output_dir}")


COMMANDS = {
    "gen-data": cmd_gen_data,
    "train": cmd_train,
    "refine": cmd_refine,
    "diagnose": lambda a, c: cmd_refine(a, c, diagnose=True),
    "ablate": cmd_ablate,
    "report": cmd_report,
}


def main(argv=None):
    parser = build_parser()
    args, extra = parser.parse_known_args(argv)
    try:
        cfg = resolve_config(args, extra)
        COMMANDS[args.verb](args, cfg)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except DivergenceError as exc:
        where = f" (phase {getattr(exc, 'phase', '?')}, sample {getattr(exc, 'sample', None)})"
        print(f"diverged: {exc}{where}", file=sys.stderr)
        return EXIT_DIVERGED
    except OSError as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    except RefineError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
