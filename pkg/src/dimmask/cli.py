"""Command line: train, eval, gen-synth, trim, sweep, plot.

Exit codes: 0 success, 1 bad input (flags, config, files), 2 runtime failure
(diverged training, unexpected errors).  DML_LOG={quiet,info,debug} controls
verbosity; the default is info.
"""

from __future__ import annotations

import argparse
import dataclasses
import logging
import os
import sys
from pathlib import Path

from . import trainflow
from .data import gen_synthetic, save_synthetic
from .errors import InputError
from .svgplot import frontier_svg

log = logging.getLogger(__name__)

_LOG_LEVELS = {"quiet": logging.WARNING, "info": logging.INFO, "debug": logging.DEBUG}


class _Parser(argparse.ArgumentParser):
    # argparse exits with status 2 on usage errors; bad flags are input errors here
    def error(self, message):
        raise InputError(message)


def _build_parser() -> _Parser:
    p = _Parser(prog="dimmask", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", help="train one run from a JSON config")
    t.add_argument("--config", required=True, help="JSON run config")
    t.add_argument("--out", help="output directory (overrides config 'out')")
    t.add_argument("--seed", type=int, help="override config seed")

    e = sub.add_parser("eval", help="evaluate a checkpoint on a data file")
    e.add_argument("--model", required=True, help="checkpoint directory")
    e.add_argument("--data", required=True, help="data file to score")

    g = sub.add_parser("gen-synth", help="generate a synthetic dataset file")
    g.add_argument("--out", required=True)
    g.add_argument("--vocab", type=int, default=1000)
    g.add_argument("--planted", required=True,
                   help="comma-separated latent dims, one per feature (0 = irrelevant)")
    g.add_argument("--irrelevant", type=int, default=0,
                   help="append this many zero-signal features")
    g.add_argument("--rows", type=int, default=100000)
    g.add_argument("--noise", type=float, default=0.5)
    g.add_argument("--seed", type=int, default=1)
    g.add_argument("--rate", type=float, default=0.2)
    g.add_argument("--main-gain", type=float, default=2.0,
                   help="strength of the rank-1 per-feature effect, in noise units")
    g.add_argument("--cross-gain", type=float, default=2.0,
                   help="strength of the cross-feature latent interactions")

    r = sub.add_parser("trim", help="cut a trained model to its discovered widths")
    r.add_argument("--model", required=True, help="trained checkpoint directory")
    r.add_argument("--out", required=True, help="directory for the trimmed checkpoint")

    s = sub.add_parser("sweep", help="regularizer/weight grid plus a baseline run")
    s.add_argument("--config", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--regularizers", default="l1,l2")
    s.add_argument("--weights", default=",".join(f"{w:g}" for w in trainflow.SWEEP_WEIGHTS))
    s.add_argument("--jobs", type=int, default=1, help="parallel runs (sweep only)")

    pl = sub.add_parser("plot", help="render frontier.csv as an SVG scatter")
    pl.add_argument("--frontier", required=True, help="frontier.csv from a sweep")
    pl.add_argument("--out", required=True, help="output .svg path")
    return p


def _cmd_train(args) -> int:
    config = trainflow.load_config(args.config)
    if args.out:
        config = dataclasses.replace(config, out=args.out)
    if args.seed is not None:
        config = dataclasses.replace(config, seed=args.seed)
    result = trainflow.train(config)
    dims = result.meta["finalized_dims"]
    if dims:
        pretty = ", ".join(f"{k}={v}" for k, v in dims.items())
        print(f"finalized dims: {pretty} (total {sum(dims.values())})")
    if result.report is not None:
        auc_text = "n/a" if result.report.auc is None else f"{result.report.auc:.6f}"
        print(f"test: logloss={result.report.logloss:.6f} auc={auc_text} "
              f"rce={result.report.rce:.6f}")
    print(f"artifacts written to {result.out_dir}")
    return 0


def _cmd_eval(args) -> int:
    report = trainflow.eval_checkpoint(args.model, args.data)
    auc_text = "n/a" if report.auc is None else f"{report.auc:.6f}"
    print(f"rows={report.rows} positive_rate={report.positive_rate:.6f}")
    print(f"logloss={report.logloss:.6f} auc={auc_text} rce={report.rce:.6f}")
    return 0


def _cmd_gen_synth(args) -> int:
    try:
        planted = [int(k) for k in args.planted.split(",")]
    except ValueError:
        raise InputError(f"--planted must be comma-separated integers, got {args.planted!r}")
    if args.irrelevant < 0:
        raise InputError("--irrelevant must be >= 0")
    planted = planted + [0] * args.irrelevant
    ds = gen_synthetic(args.vocab, planted, args.rows, args.noise, args.seed,
                       args.rate, args.main_gain, args.cross_gain)
    save_synthetic(ds, args.out, args.seed)
    rate = float(ds.labels.mean())
    print(f"wrote {len(ds)} rows x {len(planted)} features to {args.out} "
          f"(positive rate {rate:.4f})")
    return 0


def _cmd_trim(args) -> int:
    meta = trainflow.trim(args.model, args.out)
    dims = {f["name"]: f["base_dim"] for f in meta["features"]}
    pretty = ", ".join(f"{k}={v}" for k, v in dims.items())
    print(f"trimmed to: {pretty} (total {sum(dims.values())})")
    print(f"checkpoint written to {args.out}")
    return 0


def _cmd_sweep(args) -> int:
    config = trainflow.load_config(args.config)
    regs = [r.strip() for r in args.regularizers.split(",") if r.strip()]
    try:
        weights = [float(w) for w in args.weights.split(",") if w.strip()]
    except ValueError:
        raise InputError(f"--weights must be comma-separated floats, got {args.weights!r}")
    if args.jobs < 1:
        raise InputError("--jobs must be >= 1")
    rows = trainflow.sweep(config, args.out, regs, weights, jobs=args.jobs)
    for r in rows:
        rce_text = "n/a" if r["test_rce"] is None else f"{r['test_rce']:.4f}"
        print(f"{r['run']}: total_dims={r['total_dims']} test_rce={rce_text} "
              f"zero_dim_features={r['zero_dim_features']}")
    print(f"frontier written to {Path(args.out) / 'frontier.csv'}")
    return 0


def _cmd_plot(args) -> int:
    rows = trainflow.read_frontier(args.frontier)
    svg = frontier_svg(rows)
    Path(args.out).write_text(svg, encoding="utf-8", newline="\n")
    print(f"wrote {args.out}")
    return 0


_COMMANDS = {
    "train": _cmd_train,
    "eval": _cmd_eval,
    "gen-synth": _cmd_gen_synth,
    "trim": _cmd_trim,
    "sweep": _cmd_sweep,
    "plot": _cmd_plot,
}


def run(argv) -> int:
    level = os.environ.get("DML_LOG", "info").lower()
    if level not in _LOG_LEVELS:
        print(f"warning: unknown DML_LOG value {level!r}, using info", file=sys.stderr)
        level = "info"
    logging.basicConfig(level=_LOG_LEVELS[level], format="%(levelname)s %(name)s: %(message)s")
    try:
        args = _build_parser().parse_args(argv)
        return _COMMANDS[args.command](args)
    except InputError as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    except FileNotFoundError as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    except Exception as e:  # diverged runs, IO failures mid-run
        log.debug("runtime failure", exc_info=True)
        print(f"runtime failure: {e}", file=sys.stderr)
        return 2


def main():
    sys.exit(run(sys.argv[1:]))


if __name__ == "__main__":
    main()
