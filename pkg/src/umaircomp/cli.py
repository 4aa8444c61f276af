"""Command line entry point: ``umaircomp <command> [options]``."""

from __future__ import annotations

import argparse
import csv
import sys
from pathlib import Path

from .experiment import PLOT_KINDS, emit_plot_data, run_experiment

COMMANDS = ("optimize", "simulate-fl", "verify-bounds", "bench", "emit-plots")


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON experiment config (or a manifest.json to re-run)")
    common.add_argument("--seed", type=int, help="override the seed list with one seed")
    common.add_argument("--out-dir", help="output directory (results directory for emit-plots)")
    common.add_argument("--scheme", help="restrict to one scheme: identity, digital, digital-proj, pam, agp")

    p = argparse.ArgumentParser(prog="umaircomp", description=__doc__, parents=[common])
    sub = p.add_subparsers(dest="command", required=True)
    sub.add_parser("optimize", parents=[common], help="solve designs over the configured sweep")
    sub.add_parser("simulate-fl", parents=[common], help="designs plus federated simulation")
    sub.add_parser("verify-bounds", parents=[common], help="federated simulation and loss-bound checks")
    sub.add_parser("bench", parents=[common], help="designs with wall-clock timing (median of repeats)")
    ep = sub.add_parser("emit-plots", parents=[common], help="write plot-ready CSVs from results")
    ep.add_argument("--kind", action="append", choices=PLOT_KINDS,
                    help="figure kind (repeatable; default: every kind with data)")
    return p


def _print_bounds(out_dir: Path) -> None:
    path = out_dir / "bounds.csv"
    if not path.exists():
        return
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    cols = ("scheme", "seed", "theorem", "bound", "gap_ci_upper", "verdict")
    widths = [max(len(c), *(len(r.get(c, "")[:12]) for r in rows)) for c in cols]
    print("  ".join(c.ljust(w) for c, w in zip(cols, widths)))
    for r in rows:
        print("  ".join(r.get(c, "")[:12].ljust(w) for c, w in zip(cols, widths)))


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    if args.command == "emit-plots":
        if not args.out_dir:
            print("emit-plots needs --out-dir pointing at a results directory", file=sys.stderr)
            return 1
        kinds = args.kind or list(PLOT_KINDS)
        written = 0
        for kind in kinds:
            try:
                print(emit_plot_data(args.out_dir, kind, args.scheme))
                written += 1
            except ValueError as exc:
                if args.kind:
                    print(f"error: {exc}", file=sys.stderr)
                    return 1
        if not written:
            print(f"error: no plot data found; available kinds: {', '.join(PLOT_KINDS)}", file=sys.stderr)
            return 1
        return 0

    config = args.config if args.config else {}
    fl = args.command in ("simulate-fl", "verify-bounds")
    status = run_experiment(config, out_dir=args.out_dir, seed=args.seed, scheme=args.scheme,
                            timing=True if args.command == "bench" else None, fl=fl)
    if status != 1:
        out_dir = Path(args.out_dir) if args.out_dir else None
        if out_dir is None:
            import json
            cfg = json.loads(Path(args.config).read_text()) if args.config else {}
            out_dir = Path(cfg.get("config", cfg).get("output_dir", "results"))
        print(f"results written to {out_dir}")
        if args.command == "verify-bounds":
            _print_bounds(out_dir)
    return status


if __name__ == "__main__":
    sys.exit(main())
