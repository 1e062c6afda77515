"""Command-line front end for matrix runs and report extraction.

Exit codes: 0 all requested work succeeded, 2 some matrix cells failed,
3 configuration problem (bad flags, missing inputs, missing artifacts).
"""

import argparse
import csv
import io
import json
import sys
from pathlib import Path

from .feeder import OPTIONS
from .runner import (
    BASE_TAG,
    MatrixConfig,
    MatrixError,
    cell_dirname,
    emit_cost_lol_table,
    emit_dlmc_series,
    format_table,
    run_matrix,
    write_series_csv,
)

EXIT_OK = 0
EXIT_CELL_FAILURES = 2
EXIT_CONFIG = 3

_OPTION_ALIASES = {
    "bau": "bau",
    "tou": "tou",
    "pq": "pq",
    "pq-opt": "pq",
    "full": "full",
    "full-opt": "full",
    BASE_TAG: BASE_TAG,
}


class _Parser(argparse.ArgumentParser):
    """Flag mistakes are configuration errors, not cell failures."""

    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise SystemExit(EXIT_CONFIG)


def normalize_option(text):
    key = str(text).strip().lower()
    if key not in _OPTION_ALIASES:
        raise MatrixError(
            f"unknown scheduling option {text!r}; expected one of "
            f"{sorted(set(_OPTION_ALIASES) - {BASE_TAG})}"
        )
    return _OPTION_ALIASES[key]


def _parse_grid(tokens):
    grid = {}
    for tok in tokens:
        key, _, values = tok.partition("=")
        if key not in ("evs", "pv") or not values:
            raise MatrixError(f"bad grid token {tok!r}; expected evs=... or pv=...")
        grid[key] = [float(v) for v in values.split(",")]
    return grid


def build_parser():
    parser = _Parser(prog="dlmcflow", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="run a scenario matrix or a single cell")
    run.add_argument("--feeder", help="feeder JSON file")
    run.add_argument("--trajectories", help="hourly trajectories CSV")
    run.add_argument("--out", help="output directory")
    run.add_argument("--grid", nargs="+", default=["evs=0,3,6", "pv=0,30,60"],
                     metavar="KEY=V,V", help="penetration grid, e.g. evs=0,3,6 pv=0,30,60")
    run.add_argument("--options", default=",".join(OPTIONS),
                     help="comma-separated scheduling options")
    run.add_argument("--evs", type=int, help="single-cell EV count")
    run.add_argument("--pv-kva", type=float, help="single-cell PV kVA")
    run.add_argument("--option", help="single-cell scheduling option")
    run.add_argument("--node", type=int,
                     help="place the fleet at this monitored transformer only")
    run.add_argument("--protection", action="store_true",
                     help="enable protection ampacity on monitored transformers")
    run.add_argument("--jobs", type=int, default=1, help="concurrent cell solves")
    run.add_argument("--config", help="JSON config file; entries override flags")

    report = sub.add_parser("report", help="extract tables from a finished run")
    what = report.add_subparsers(dest="what", required=True)

    table = what.add_parser("table", help="cost deltas and LoL per cell")
    table.add_argument("run_dir")
    table.add_argument("--csv", help="also write the table here")

    dlmc = what.add_parser("dlmc", help="hourly price components at one node")
    dlmc.add_argument("run_dir")
    dlmc.add_argument("--node", type=int, required=True)
    dlmc.add_argument("--evs", type=int, required=True)
    dlmc.add_argument("--pv-kva", type=float, required=True)
    dlmc.add_argument("--option", required=True)
    dlmc.add_argument("--side", choices=("P", "Q"), default="P")
    dlmc.add_argument("--decompose", action="store_true",
                      help="append the transformer component's time structure")
    dlmc.add_argument("--csv", help="write rows here instead of stdout")

    dec = what.add_parser("decompose", help="transformer degradation price structure")
    dec.add_argument("run_dir")
    dec.add_argument("--evs", type=int, required=True)
    dec.add_argument("--pv-kva", type=float, required=True)
    dec.add_argument("--option", required=True)
    dec.add_argument("--transformer", type=int, help="restrict to one unit")
    dec.add_argument("--csv", help="write rows here instead of stdout")
    return parser


def _apply_config_file(args):
    if not args.config:
        return
    with open(args.config) as fh:
        overrides = json.load(fh)
    known = {"feeder", "trajectories", "out", "grid", "options", "evs",
             "pv_kva", "option", "protection", "jobs", "node"}
    for key, value in overrides.items():
        if key not in known:
            raise MatrixError(f"unknown config key {key!r}")
        if key == "grid":
            value = [f"{k}={','.join(str(x) for x in v)}" for k, v in value.items()]
        if key == "options" and isinstance(value, list):
            value = ",".join(value)
        setattr(args, key, value)


def _matrix_config(args):
    _apply_config_file(args)
    for field in ("feeder", "trajectories", "out"):
        if not getattr(args, field):
            raise MatrixError(f"--{field} is required")
    for field in ("feeder", "trajectories"):
        if not Path(getattr(args, field)).exists():
            raise MatrixError(f"{field} file not found: {getattr(args, field)}")
    single = [args.evs is not None, args.pv_kva is not None, args.option is not None]
    if any(single) and not all(single):
        raise MatrixError("single-cell runs need --evs, --pv-kva and --option together")
    if all(single):
        evs, pv, options = [args.evs], [args.pv_kva], (normalize_option(args.option),)
    else:
        if args.node is not None:
            raise MatrixError("--node is a single-cell shorthand; give --evs/--pv-kva/--option")
        grid = _parse_grid(args.grid)
        evs = [int(e) for e in grid.get("evs", [0, 3, 6])]
        pv = grid.get("pv", [0.0, 30.0, 60.0])
        options = tuple(normalize_option(o) for o in args.options.split(","))
        options = tuple(o for o in options if o != BASE_TAG)
    return MatrixConfig(
        feeder=str(args.feeder), trajectories=str(args.trajectories),
        out_dir=str(args.out), evs=tuple(evs), pv_kva=tuple(pv),
        options=options, protection=bool(args.protection), jobs=int(args.jobs),
        node=args.node,
    )


def _print_rows(rows, csv_path):
    if csv_path:
        write_series_csv(rows, csv_path)
        print(f"wrote {len(rows)} rows to {csv_path}")
        return
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=list(rows[0]))
    w.writeheader()
    for row in rows:
        w.writerow(row)
    sys.stdout.write(buf.getvalue())


def cmd_run(args):
    config = _matrix_config(args)
    index = run_matrix(config)
    failed = 0
    for name in sorted(index["cells"]):
        outcome = index["cells"][name]
        if outcome["status"] == "ok":
            s = outcome["summary"]
            print(f"ok    {name}: total {s['total_cost']:.4f} $  "
                  f"cone {s['cone_residual']:.1e}  {s['solve_seconds']:.1f}s")
        else:
            failed += 1
            print(f"FAIL  {name}: {outcome['message']}")
    print(f"{len(index['cells']) - failed}/{len(index['cells'])} cells ok -> {config.out_dir}")
    return EXIT_CELL_FAILURES if failed else EXIT_OK


def cmd_report_table(args):
    rows = emit_cost_lol_table(args.run_dir, csv_path=args.csv)
    print(format_table(rows))
    return EXIT_OK


def cmd_report_dlmc(args):
    rows = emit_dlmc_series(
        args.run_dir, args.node, args.evs, args.pv_kva,
        normalize_option(args.option), side=args.side, decompose=args.decompose,
    )
    _print_rows(rows, args.csv)
    return EXIT_OK


def cmd_report_decompose(args):
    option = normalize_option(args.option)
    path = (Path(args.run_dir) / cell_dirname(args.evs, args.pv_kva, option)
            / "decompose.csv")
    if not path.exists():
        raise MatrixError(f"no decomposition artifact at {path}")
    with open(path, newline="") as fh:
        rows = [row for row in csv.DictReader(fh)
                if args.transformer is None or int(row["transformer"]) == args.transformer]
    if not rows:
        raise MatrixError(f"transformer {args.transformer} not in this cell")
    _print_rows(rows, args.csv)
    return EXIT_OK


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        if args.command == "run":
            return cmd_run(args)
        if args.what == "table":
            return cmd_report_table(args)
        if args.what == "dlmc":
            return cmd_report_dlmc(args)
        return cmd_report_decompose(args)
    except MatrixError as exc:
        print(f"dlmcflow: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
