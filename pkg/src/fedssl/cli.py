"""``fedssl`` command line: run, sweep, gradcheck, partition-report.

Exit codes: 0 success, 1 configuration or data error, 2 numeric abort.
"""
from __future__ import annotations

import argparse
import csv
import json
import math
import sys
from pathlib import Path

from . import harness
from .data import DataError, build_clients, partition_report
from .nn import ConfigError as ShapeError
from .nn import GRADCHECK_KINDS, NumericError, gradcheck_suite

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC = 0, 1, 2
GRADCHECK_TOL = 1e-4


def _cmd_run(args) -> int:
    cfg = harness.parse_config(args.config)
    path = harness.run_experiment(cfg, audit=args.audit)
    summary = json.loads(path.with_suffix(".summary.json").read_text())
    print(f"wrote {path}")
    print(f"final test accuracy: {summary['final_test_acc']}")
    return EXIT_OK


def _cmd_sweep(args) -> int:
    cfg, grid = harness.parse_grid(args.grid)
    path = harness.sweep(cfg, grid, workers=args.workers)
    print(f"wrote {path}")
    print((path.parent / "summary.txt").read_text(), end="")
    return EXIT_OK


def _cmd_gradcheck(args) -> int:
    worst = gradcheck_suite(args.seeds)
    ok = True
    for kind in GRADCHECK_KINDS:
        good = worst[kind] <= GRADCHECK_TOL
        ok &= good
        print(f"{kind:8s} max rel err {worst[kind]:.3e}  {'ok' if good else 'FAIL'}")
    return EXIT_OK if ok else EXIT_NUMERIC


def _cmd_partition_report(args) -> int:
    cfg = harness.parse_config(args.config)
    train, _, _ = harness.load_dataset(cfg)
    clients = build_clients(train, cfg.partition_spec())
    rows = partition_report(clients)
    out = Path(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    path = out / "partition.csv"
    n = clients[0].n_classes if clients else 0
    with open(path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["client", "n_labeled", "n_unlabeled", "mismatch"]
                   + [f"labeled_{j}" for j in range(n)] + [f"unlabeled_{j}" for j in range(n)])
        for r in rows:
            w.writerow([r["client"], r["n_labeled"], r["n_unlabeled"],
                        "nan" if math.isnan(r["mismatch"]) else repr(r["mismatch"])]
                       + r["labeled_hist"] + r["unlabeled_hist"])
    finite = [r["mismatch"] for r in rows if not math.isnan(r["mismatch"])]
    for r in rows:
        print(f"client {r['client']:3d}  labeled {r['n_labeled']:4d}  unlabeled {r['n_unlabeled']:5d}  "
              f"mismatch {r['mismatch']:.3f}")
    if finite:
        print(f"mean mismatch {sum(finite) / len(finite):.4f}")
    print(f"wrote {path}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="fedssl", description="Federated semi-supervised learning simulator.")
    sub = p.add_subparsers(dest="command", required=True)

    r = sub.add_parser("run", help="train one configuration and write its metrics CSV")
    r.add_argument("config", type=Path)
    r.add_argument("--audit", action="store_true", help="also write per-sample pseudo-label decisions")
    r.set_defaults(func=_cmd_run)

    s = sub.add_parser("sweep", help="run the cross product of a [grid] table")
    s.add_argument("grid", type=Path)
    s.add_argument("--workers", type=int, default=1)
    s.set_defaults(func=_cmd_sweep)

    g = sub.add_parser("gradcheck", help="compare backprop against finite differences")
    g.add_argument("--seeds", type=int, default=20)
    g.set_defaults(func=_cmd_gradcheck)

    pr = sub.add_parser("partition-report", help="per-client class histograms and mismatch scores")
    pr.add_argument("config", type=Path)
    pr.set_defaults(func=_cmd_partition_report)
    return p


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (harness.ConfigError, ShapeError, DataError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except (NumericError, FloatingPointError) as e:
        print(f"numeric abort: {e}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
