"""Command-line entry point: ``fdrelay {run,sweep,validate,converge,complexity,plot}``."""

import argparse
import csv
import logging
import os
import sys
from dataclasses import replace

from . import experiments as ex
from .errors import FdRelayError
from .system import draw_channels, make_rng

logger = logging.getLogger("fdrelay")


def _common(parser):
    parser.add_argument("--config", help="YAML configuration file")
    parser.add_argument("--seed", type=int, help="master seed (64-bit)")
    parser.add_argument("--trials", type=int, help="number of Monte Carlo trials")
    parser.add_argument("--out", default="out", help="output directory (default: out)")
    parser.add_argument("--method", help="comma-separated method list, e.g. aware,unaware,hd")
    parser.add_argument("--full-scale", action="store_true",
                        help="4x4 antennas, d=2 and 100 trials instead of the desk defaults")
    parser.add_argument("-v", "--verbose", action="store_true")


def build_parser():
    parser = argparse.ArgumentParser(prog="fdrelay", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)
    for name, help_ in (("run", "design and evaluate one channel realization"),
                        ("sweep", "Monte Carlo parameter sweep"),
                        ("validate", "closed forms against the symbol-level simulator"),
                        ("converge", "convergence traces of the MSE design"),
                        ("complexity", "block-update problem sizes and operation bounds"),
                        ("plot", "SVG figures from the CSV files in --out")):
        p = sub.add_parser(name, help=help_)
        _common(p)
        if name == "validate":
            p.add_argument("--n-sym", type=int, default=100_000)
    return parser


def _spec(args):
    spec = ex.load_config(args.config, full_scale=args.full_scale)
    changes = {}
    if args.seed is not None:
        changes["master_seed"] = args.seed
    if args.trials is not None:
        changes["trials"] = args.trials
    if args.method:
        changes["methods"] = tuple(m.strip() for m in args.method.split(",") if m.strip())
    return replace(spec, **changes) if changes else spec


def _first_point(spec):
    return ex.apply_sweep_value(spec.base, spec.sweep_param, spec.sweep_values[0])


def cmd_run(args):
    spec = _spec(args)
    spec = replace(spec, trials=1, sweep_values=spec.sweep_values[:1])
    records = ex.run_sweep(spec, args.out)
    for r in records:
        print(f"{r.method:16s} mse={r.mse:.6g} rate={r.rate:.6g} outer={r.outer_iters} "
              f"status={r.status}")
    return 0


def cmd_sweep(args):
    spec = _spec(args)
    records = ex.run_sweep(spec, args.out)
    for row in ex.summarize(records):
        print(f"{row['sweep_param']}={row['sweep_value']:<8g} {row['method']:16s} "
              f"median mse={row['mse_median']:.4g} ({row['n_ok']}/{row['n']} ok)")
    return 0


def cmd_validate(args):
    spec = _spec(args)
    cfg = _first_point(spec)
    os.makedirs(args.out, exist_ok=True)
    path = os.path.join(args.out, "validation.csv")
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["trial", "err_r_out", "err_y", "err_mse", "n_sym", "wall_s"])
        for t in range(spec.trials if args.trials is not None else 1):
            ch = draw_channels(cfg, make_rng(spec.trial_seed(t)))
            _, _, _, _, design = ex.evaluate_method(cfg, ch, "aware", spec.pdd)
            rep = ex.validate(cfg, ch, design, args.n_sym, rng=spec.trial_seed(t))
            w.writerow([t, repr(rep.err_r_out), repr(rep.err_y), repr(rep.err_mse),
                        rep.n_sym, repr(rep.wall_s)])
            print(f"trial {t}: r_out {rep.err_r_out:.3%}  y {rep.err_y:.3%}  "
                  f"mse {rep.err_mse:.3%}  ({rep.wall_s:.1f} s)")
    return 0


def cmd_converge(args):
    spec = _spec(args)
    cfg = _first_point(spec)
    for k in range(spec.trials if args.trials is not None else 1):
        ch = draw_channels(cfg, make_rng(spec.trial_seed(k)))
        trace = ex.convergence_report(cfg, ch, spec.pdd, args.out, k)
        print(f"trace_{k}: {trace.outer_iters} outer iterations, final zeta "
              f"{trace.final_zeta:.3e}, converged={trace.converged}")
    return 0


def cmd_complexity(args):
    spec = _spec(args)
    rows = ex.complexity_report(_first_point(spec))
    print(ex.format_table(rows))
    os.makedirs(args.out, exist_ok=True)
    with open(os.path.join(args.out, "complexity.csv"), "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(rows[0]))
        w.writeheader()
        w.writerows(rows)
    return 0


def cmd_plot(args):
    from .plotting import plot_directory

    made = plot_directory(args.out)
    for path in made:
        print(path)
    if not made:
        print(f"no CSV files to plot in {args.out}", file=sys.stderr)
        return 1
    return 0


COMMANDS = {"run": cmd_run, "sweep": cmd_sweep, "validate": cmd_validate,
            "converge": cmd_converge, "complexity": cmd_complexity, "plot": cmd_plot}


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args)
    except (FdRelayError, ValueError, KeyError, OSError) as exc:
        print(f"fdrelay: error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
