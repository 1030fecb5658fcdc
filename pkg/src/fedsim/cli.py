"""Command-line entry points.

Subcommands: run (single experiment), grid (cartesian sweep), certify
(post-hoc smoothing pass over a stored run), report (re-emit plots from
a stored results.csv). Exit codes: 0 success, 2 config error, 3
runtime error.
"""

import argparse
import csv
import os
import sys

import numpy as np

from . import certify as certify_mod
from . import harness, learner
from .rng import child_seed


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="fedsim")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", required=True, help="YAML or JSON config file")
        p.add_argument("--seed", type=int, default=None, help="override master seed")
        p.add_argument("--out", default=None, help="override output directory")
        p.add_argument("--rounds", type=int, default=None, help="override round count")
        p.add_argument("--quiet", action="store_true")

    run_p = sub.add_parser("run", help="run one experiment")
    common(run_p)

    grid_p = sub.add_parser("grid", help="run the config's grid sweep")
    common(grid_p)

    cert_p = sub.add_parser("certify", help="certify a finished run's final model")
    common(cert_p)
    cert_p.add_argument("--run-dir", default=None,
                        help="directory holding final_model.npy (defaults to --out)")

    rep_p = sub.add_parser("report", help="re-emit plots from a stored results.csv")
    rep_p.add_argument("--run-dir", required=True)
    rep_p.add_argument("--quiet", action="store_true")
    return parser


def _load_config(args) -> harness.ExperimentConfig:
    cfg = harness.load_config(args.config)
    if args.seed is not None:
        cfg.master_seed = args.seed
    if args.out is not None:
        cfg.out_dir = args.out
    if getattr(args, "rounds", None) is not None:
        cfg.train.rounds = args.rounds
    return cfg


def cmd_run(args) -> int:
    cfg = _load_config(args)
    results = harness.run_experiment(cfg, rounds=args.rounds)
    if not args.quiet:
        print(f"rounds={len(results.logs)} final_ma={results.final_ma:.4f} "
              f"final_ba={results.final_ba:.4f}")
        if cfg.out_dir:
            print(f"outputs in {cfg.out_dir}")
    return 0


def cmd_grid(args) -> int:
    cfg = _load_config(args)
    grid = harness.grid_values(args.config)
    if not grid:
        raise harness.ConfigError("config has no grid block")
    out_dir = cfg.out_dir or "grid_out"
    rows = harness.run_grid(cfg, grid, out_dir, rounds=args.rounds)
    if not args.quiet:
        print(f"{len(rows)} runs -> {os.path.join(out_dir, 'grid_summary.csv')}")
    return 0


def cmd_certify(args) -> int:
    cfg = _load_config(args)
    run_dir = args.run_dir or cfg.out_dir
    if not run_dir:
        raise harness.ConfigError("certify needs --run-dir or an out_dir in the config")
    model_path = os.path.join(run_dir, "final_model.npy")
    if not os.path.exists(model_path):
        raise FileNotFoundError(f"no stored model at {model_path}; run the experiment first")
    w = np.load(model_path)

    smoothing = cfg.certify or certify_mod.SmoothingConfig()
    exp = harness.Experiment(cfg)
    X = exp.X_test[: cfg.certify_examples]
    y = exp.y_test[: cfg.certify_examples]
    certs = certify_mod.certify_dataset(w, exp.model_spec, X, smoothing,
                                        seed=child_seed(cfg.master_seed, "certify"))
    harness.write_certificates_csv(certs, os.path.join(run_dir, "certificates.csv"))
    if not args.quiet:
        radii = [c.radius for c in certs]
        certified = np.mean([c.prediction == yy and c.prediction != certify_mod.ABSTAIN
                             for c, yy in zip(certs, y)])
        print(f"certified {len(certs)} examples; mean radius {np.mean(radii):.5f}; "
              f"certified-correct fraction {certified:.3f}")
    return 0


def cmd_report(args) -> int:
    path = os.path.join(args.run_dir, "results.csv")
    with open(path) as fh:
        rows = list(csv.DictReader(fh))
    logs = [harness.RoundLog(
        round=int(r["round"]), ma=float(r["ma"]), ba=float(r["ba"]),
        gamma=float(r["gamma"]) if r["gamma"] else None,
        accepted_total=int(r["accepted_total"]),
        accepted_malicious=int(r["accepted_malicious"]),
        clipped_count=int(r["clipped_count"])) for r in rows]
    fake = harness.Results(logs=logs, final_w=np.zeros(1),
                           config=harness.ExperimentConfig())
    harness.write_plots(fake, os.path.join(args.run_dir, "plots"))
    if not args.quiet:
        print(f"plots rebuilt in {os.path.join(args.run_dir, 'plots')}")
    return 0


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    handlers = {"run": cmd_run, "grid": cmd_grid, "certify": cmd_certify,
                "report": cmd_report}
    try:
        return handlers[args.command](args)
    except harness.ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # runtime failures map to a distinct code
        print(f"error: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
