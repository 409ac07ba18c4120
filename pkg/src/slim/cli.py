"""Command line entry point: ``slim run``, ``slim bench`` and ``slim relations``."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path
from typing import List, Optional, Sequence

from . import bench
from .relations import build_factor_graph, load_commonsense, relation_table_rows, run_belief_propagation
from .simworld import WorldError, load_world

log = logging.getLogger("slim")


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", type=Path, default=bench.DEFAULT_CONFIG,
                   help="world JSON (default: the shipped apartment)")
    p.add_argument("--seed", type=int, help="master seed")
    p.add_argument("--trials", type=int, help="trials per (method, target) cell")
    p.add_argument("--timeout", type=float, help="search time limit in seconds")
    p.add_argument("--prior-offset", type=float, help="landmark prior displacement for Known modes (m)")
    p.add_argument("--commonsense", type=Path, help="commonsense CSV overriding the world's table")
    p.add_argument("--workers", type=int, default=1, help="parallel trial processes")
    p.add_argument("--out", type=Path, required=True, help="results CSV")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="slim", description="Active object search with relation-coupled particle beliefs in a 2D apartment.")
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="run one method on one target")
    _common(run)
    run.add_argument("--method", required=True, help=f"one of {', '.join(bench.METHOD_ORDER)}")
    run.add_argument("--target", required=True, help="target object class")
    run.add_argument("--svg-dir", type=Path, help="write per-step belief CSVs and a final SVG per trial")

    b = sub.add_parser("bench", help="run the method comparison")
    _common(b)
    b.add_argument("--all", action="store_true", help="every method on every target in the world")
    b.add_argument("--methods", help="comma separated method names")
    b.add_argument("--targets", help="comma separated target classes")

    rel = sub.add_parser("relations", help="print the marginal relation beliefs")
    rel.add_argument("--config", type=Path, default=bench.DEFAULT_CONFIG)
    rel.add_argument("--commonsense", type=Path)
    rel.add_argument("--target", help="restrict to the object set searched for this target")
    return ap


def _config(args) -> bench.TrialConfig:
    return bench.trial_config(args.config, seed=args.seed, trials=args.trials, timeout=args.timeout,
                              prior_offset=args.prior_offset, commonsense=args.commonsense)


def _print_summary(rows: Sequence[bench.SummaryRow]) -> None:
    print(f"{'target':16s} {'method':18s} {'n':>3s} {'views':>7s} {'time_s':>8s} {'path_m':>8s} {'success':>7s}")
    for r in rows:
        print(f"{r.target:16s} {r.method:18s} {r.n:3d} {r.views:7.2f} {r.time_s:8.1f} {r.path_m:8.1f} "
              f"{r.success_rate:7.2f}")


def _targets(config: bench.TrialConfig) -> List[str]:
    return load_world(config.world, config.seed).targets


def cmd_run(args) -> int:
    config = _config(args)
    method = bench.get_method(args.method)
    world = load_world(config.world, config.seed)
    bench.object_set(world, args.target)      # validates the target before any trial runs
    if args.svg_dir is None:
        results, summary = bench.run_benchmark(config, [method.name], [args.target], workers=args.workers)
    else:
        results = [bench.run_trial(config, method, args.target, config.trial_seed(k), snapshot_dir=args.svg_dir)
                   for k in range(config.trials)]
        summary = bench.summarize(results)
    bench.emit_csv(results, args.out)
    _print_summary(summary)
    return 0


def cmd_bench(args) -> int:
    config = _config(args)
    if args.all:
        methods, targets = list(bench.METHOD_ORDER), _targets(config)
    else:
        if not args.methods or not args.targets:
            raise ValueError("pass --all or both --methods and --targets")
        methods = [bench.get_method(m).name for m in args.methods.split(",")]
        targets = args.targets.split(",")
    world = load_world(config.world, config.seed)
    for t in targets:
        bench.object_set(world, t)
    results, summary = bench.run_benchmark(config, methods, targets, workers=args.workers)
    bench.emit_csv(results, args.out)
    _print_summary(summary)
    return 0


def cmd_relations(args) -> int:
    world = load_world(args.config)
    cs = args.commonsense or world.commonsense
    if cs is None:
        raise WorldError("no commonsense table configured")
    if args.target:
        ids = bench.object_set(world, args.target)
    else:
        ids = list(range(len(world.objects)))
    classes = [world.objects[i].cls for i in ids]
    table = load_commonsense(cs, world.invalid_expressions)
    beliefs = run_belief_propagation(build_factor_graph(classes, table))
    rows = relation_table_rows(classes, beliefs)
    widths = [max(len(r[c]) for r in rows) for c in range(len(rows[0]))]
    for r in rows:
        print("  ".join(cell.ljust(w) for cell, w in zip(r, widths)))
    if not beliefs.converged:
        print(f"warning: belief propagation stopped after {beliefs.iterations} iterations without converging",
              file=sys.stderr)
    return 0


COMMANDS = {"run": cmd_run, "bench": cmd_bench, "relations": cmd_relations}


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args)
    except (WorldError, ValueError, KeyError, OSError, json.JSONDecodeError) as exc:
        msg = exc.args[0] if isinstance(exc, KeyError) and exc.args else exc
        print(f"slim: error: {msg}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
