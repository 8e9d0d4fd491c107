"""Command line entry point: ``sync run`` and ``sync topo``."""
from __future__ import annotations

import argparse
import csv
import sys
from collections import defaultdict

import numpy as np

from .config import ALGORITHMS, ExperimentConfig, load_config
from .errors import SyncError
from .experiment import fmt, run_experiment, topology_for_run, write_results


def _algorithms(text: str) -> tuple:
    names = tuple(v.strip().lower() for v in text.split(",") if v.strip())
    if names == ("all",):
        return ALGORITHMS
    bad = [n for n in names if n not in ALGORITHMS]
    if bad or not names:
        raise argparse.ArgumentTypeError(f"choose from {', '.join(ALGORITHMS)} or all")
    return names


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="sync", description="Cooperative clock synchronization simulator")
    sub = parser.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="run a Monte Carlo experiment and write CSV tables")
    run.add_argument("--config", required=True, help="experiment config file (key = value per line)")
    run.add_argument("--out", required=True, help="output directory")
    run.add_argument("--seed", type=int, default=None, help="override the config seed")
    run.add_argument("--algo", type=_algorithms, default=None, help="bp, mf, ats, admm, lc, a comma list, or all")
    run.add_argument("--bcrb", action="store_true", help="also compute the per-node BCRB")
    run.add_argument("--trace", action="store_true", help="write a per-iteration trace file per run")
    run.add_argument("--workers", type=int, default=None, help="parallel worker processes")

    topo = sub.add_parser("topo", help="generate a topology")
    topo.add_argument("--preview", action="store_true", help="print nodes and edges as CSV")
    topo.add_argument("--config", default=None, help="config file (defaults otherwise)")
    topo.add_argument("--seed", type=int, default=None)
    topo.add_argument("--run", type=int, default=0, help="Monte Carlo run whose network to show")
    return parser


def _summary(result, stream):
    groups = defaultdict(list)
    for m in result.metrics:
        groups[(m.sweep_value, m.algorithm)].append(m)
    for (value, algo), rows in groups.items():
        ok = [m for m in rows if np.isfinite(m.rmse_phase_s)]
        failed = sum(m.status != "ok" for m in rows)
        phase = np.mean([m.rmse_phase_s for m in ok]) if ok else float("nan")
        skew = np.mean([m.rmse_skew_ppm for m in ok]) if ok else float("nan")
        label = "" if np.isnan(value) else f"{result.config.sweep_key}={fmt(value)} "
        print(f"{label}{algo}: runs={len(rows)} not_ok={failed} mean_rmse_phase_s={fmt(phase)} "
              f"mean_rmse_skew_ppm={fmt(skew)}", file=stream)


def cmd_run(args, stream) -> int:
    cfg = load_config(args.config)
    result = run_experiment(cfg, seed=args.seed, algorithms=args.algo, with_bcrb=args.bcrb or None,
                            trace=args.trace or None, workers=args.workers)
    paths = write_results(result, args.out)
    _summary(result, stream)
    for p in paths:
        print(f"wrote {p}", file=stream)
    return 0


def cmd_topo(args, stream) -> int:
    cfg = load_config(args.config) if args.config else ExperimentConfig()
    seed = cfg.seed if args.seed is None else args.seed
    topo = topology_for_run(cfg, seed, args.run)
    w = csv.writer(stream, lineterminator="\n")
    w.writerow(("node", "x", "y", "is_master"))
    for k in range(topo.num_nodes):
        x, y = topo.positions[k]
        w.writerow((k, fmt(float(x)), fmt(float(y)), int(topo.is_master(k))))
    stream.write("\n")
    w.writerow(("node_i", "node_j"))
    for i, j in topo.edges:
        w.writerow((i, j))
    return 0


def main(argv=None, stream=None) -> int:
    stream = sys.stdout if stream is None else stream
    args = build_parser().parse_args(argv)
    try:
        if args.command == "run":
            return cmd_run(args, stream)
        return cmd_topo(args, stream)
    except SyncError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
