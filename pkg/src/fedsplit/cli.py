"""Command-line entry point: ``fedsplit {run,partition,sweep-cut,verify,report}``.

Exit codes: 0 success, 1 failed verification or runtime error, 2 configuration
error, 3 numeric error (non-finite values during training).  ``FEDSPLIT_LOG``
sets the log level (DEBUG, INFO, WARNING, ...).
"""

from __future__ import annotations

import argparse
import csv
import logging
import os
import sys
from collections import defaultdict
from pathlib import Path

import numpy as np

from . import experiment as X
from . import partition as P
from . import verify
from .config import load_config
from .errors import ConfigError, NumericError, PartitionError
from .metrics import emit_report, export_embeddings, load_report

log = logging.getLogger("fedsplit")

EXIT_OK, EXIT_FAIL, EXIT_CONFIG, EXIT_NUMERIC = 0, 1, 2, 3


def _configure_logging():
    level = os.environ.get("FEDSPLIT_LOG", "WARNING").upper()
    logging.basicConfig(level=getattr(logging, level, logging.WARNING),
                        format="%(levelname)s %(name)s: %(message)s")


def _load(args):
    cfg = load_config(args.config)
    if getattr(args, "seed", None) is not None:
        cfg.experiment["seeds"] = [args.seed]
    if getattr(args, "out", None):
        cfg.experiment["out"] = args.out
    return cfg


def write_ledgers(results, path) -> Path:
    """One ledger CSV for all seeds: ``seed, round, direction, variant, scalars``."""
    path = Path(path)
    with path.open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["seed", "round", "direction", "variant", "scalars"])
        for r in results:
            for row in r.state.ledger.rows():
                w.writerow([r.record.seed, *row])
    return path


def cmd_run(args) -> int:
    cfg = _load(args)
    results = X.run_seeds(cfg, parallel=args.parallel_seeds)
    out = Path(cfg.experiment["out"])
    emit_report([r.record for r in results], out)
    write_ledgers(results, out / "ledger.csv")
    tag = cfg.experiment["embeddings"]
    if tag:
        first = results[0]
        model = X.S.composite_models(first.state)[0]
        export_embeddings(model, first.test, tag, out / "embeddings.csv")
    for r in results:
        m = r.record.metrics
        name = "accuracy" if m.task == "classification" else "mae"
        print(f"{r.record.strategy} seed={r.record.seed} {name}={m.value:.4f} "
              f"ks={r.record.partition_ks:.3f} scalars={m.comm_totals.get('total_scalars', 0)}")
    print(f"wrote {out / 'results.json'}")
    return EXIT_OK


def cmd_partition(args) -> int:
    cfg = _load(args)
    seed = cfg.seeds[0]
    train, _ = X.build_dataset(cfg, seed)
    part = X.build_partition(cfg, train, seed)
    print(f"K = {part.K}")
    print(f"sizes = {part.sizes}")
    if part.K > 1:
        mat = P.pairwise_ks(train, part)
        print(f"mean KS = {P.mean_pairwise_ks(train, part):.4f}")
        print("pairwise KS:")
        for row in mat:
            print("  " + " ".join(f"{v:.3f}" for v in row))
    else:
        print("mean KS = n/a (single institution)")
    if args.out:
        Path(args.out).write_text(part.to_json(), encoding="utf-8")
    return EXIT_OK


def cmd_sweep_cut(args) -> int:
    cfg = _load(args)
    rows = X.sweep_cut(cfg, cfg.seeds[0])
    out = Path(cfg.experiment["out"])
    out.mkdir(parents=True, exist_ok=True)
    path = out / "sweep.csv"
    with path.open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["cut", "boundary", "server_params", "metric", "status"])
        for r in rows:
            w.writerow([r.cut, r.boundary, r.server_params, repr(r.metric), r.status])
    print(f"{'cut':>3}  {'boundary':<20} {'server params':>13}  {'metric':>8}  status")
    for r in rows:
        print(f"{r.cut:>3}  {r.boundary:<20} {r.server_params:>13}  {r.metric:8.4f}  {r.status}")
    print(f"wrote {path}")
    return EXIT_OK


def cmd_verify(args) -> int:
    results = verify.run_all(args.only or None)
    print(verify.format_matrix(results))
    return EXIT_OK if all(r.passed for r in results) else EXIT_FAIL


def cmd_report(args) -> int:
    records = []
    for p in args.results:
        records.extend(load_report(p))
    if not records:
        print("no records")
        return EXIT_OK
    groups = defaultdict(list)
    for r in records:
        groups[(r.label, r.strategy)].append(r)
    print(f"{'experiment':<20} {'strategy':<12} {'seeds':>5} {'KS':>6} {'metric':>8} {'std':>7}")
    for (label, strategy), rs in sorted(groups.items()):
        vals = np.array([r.metrics.value for r in rs])
        ks = np.mean([r.partition_ks or 0.0 for r in rs])
        print(f"{label:<20} {strategy:<12} {len(rs):>5} {ks:6.3f} {vals.mean():8.4f} {vals.std():7.4f}")
    if args.out:
        emit_report(records, args.out)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="fedsplit",
        description="Simulate federated and split training on partitioned data.",
        epilog="exit codes: 0 ok, 1 failure, 2 configuration error, 3 numeric error")
    sub = parser.add_subparsers(dest="command", required=True)

    def with_config(name, help_):
        p = sub.add_parser(name, help=help_)
        p.add_argument("config", help="experiment TOML file")
        p.add_argument("--seed", type=int, help="run only this seed (overrides experiment.seeds)")
        p.add_argument("--out", help="output directory (overrides experiment.out)")
        return p

    run = with_config("run", "train and evaluate every configured seed")
    run.add_argument("--parallel-seeds", type=int, default=1, metavar="N",
                     help="run up to N seeds concurrently on threads")
    run.set_defaults(func=cmd_run)
    part = with_config("partition", "print partition sizes and KS statistics")
    part.set_defaults(func=cmd_partition)
    part.epilog = "--out writes the partition as JSON"
    with_config("sweep-cut", "run the split strategy at every cut layer").set_defaults(func=cmd_sweep_cut)
    ver = sub.add_parser("verify", help="run the exactness self-checks")
    ver.add_argument("--only", nargs="*", choices=list(verify.CHECKS), help="subset of checks to run")
    ver.set_defaults(func=cmd_verify)
    rep = sub.add_parser("report", help="summarise results.json files")
    rep.add_argument("results", nargs="+", help="results.json files or run directories")
    rep.add_argument("--out", help="write a merged results.json/csv here")
    rep.set_defaults(func=cmd_report)
    return parser


def main(argv=None) -> int:
    _configure_logging()
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (ConfigError, PartitionError) as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except (NumericError, FloatingPointError) as e:
        print(f"numeric error: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    except OSError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_FAIL


if __name__ == "__main__":
    sys.exit(main())
