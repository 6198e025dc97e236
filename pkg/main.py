"""Command-line entry point for the adaptive LR membrane studies."""

import argparse
import logging
import sys
from pathlib import Path
from typing import List, Optional

from config import config
from errors import LRMembraneError
from sim_cli import (
    RunReport,
    ScenarioConfig,
    ScenarioRunner,
    compare_runs,
    load_config,
    with_overrides,
    write_comparison,
)

# Configure logging
logging.basicConfig(
    level=getattr(logging, config.log_level),
    format='%(asctime)s - %(name)s - %(levelname)s - %(message)s'
)
logger = logging.getLogger(__name__)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="lr-membrane",
        description="Adaptive LR NURBS membrane simulations with rigid-sphere contact",
    )
    commands = parser.add_subparsers(dest="command", required=True)
    for name, summary in (
        ("inflate", "Inflate a hemisphere under a volume constraint"),
        ("indent", "Indent a pre-stretched sheet with a rigid sphere"),
        ("slide", "Slide a rigid sphere across a constant-volume cushion"),
    ):
        sub = commands.add_parser(name, help=summary)
        sub.add_argument("--config", type=Path, help="JSON scenario file (defaults apply when omitted)")
        sub.add_argument("--out", type=Path, help="Output directory")
        sub.add_argument("--uniform-depth", type=int, help="Refine uniformly k times and disable adaptivity")
        sub.add_argument("--seed", type=int, help="Run seed recorded in the report")

    compare = commands.add_parser("compare", help="Relative force errors of a run against a reference run")
    compare.add_argument("report", type=Path, help="Run directory or report.json")
    compare.add_argument("reference", type=Path, help="Reference run directory or report.json")
    compare.add_argument("--out", type=Path, help="Where to write comparison.json")
    return parser


def resolve_scenario(args: argparse.Namespace) -> ScenarioConfig:
    if args.config is not None:
        scenario = load_config(args.config)
        if scenario.scenario != args.command:
            raise LRMembraneError(
                f"config {args.config} describes a '{scenario.scenario}' run, not '{args.command}'"
            )
    else:
        scenario = ScenarioConfig(scenario=args.command)
    return with_overrides(scenario, uniform_depth=args.uniform_depth, seed=args.seed)


def run_command(args: argparse.Namespace) -> int:
    scenario = resolve_scenario(args)
    report = ScenarioRunner(scenario, args.out).run()
    print(f"{scenario.scenario}: {len(report.rows)} steps, {report.final_dofs} dofs")
    for name, value in sorted(report.metrics.items()):
        print(f"  {name}: {value:.6g}")
    if report.failed:
        print(f"  FAILED: {report.message}")
        return 1
    return 0


def compare_command(args: argparse.Namespace) -> int:
    table = compare_runs(RunReport.load(args.report), RunReport.load(args.reference))
    target = args.out or (args.report if args.report.is_dir() else args.report.parent)
    path = write_comparison(table, Path(target) / "comparison.json")
    print(f"{'step':>5} {'load':>10} {'e_n':>10} {'e_t':>10} {'dofs':>8}")
    for row in table.rows:
        print(f"{row.step:>5} {row.load:>10.4g} {row.e_n:>10.3e} {row.e_t:>10.3e} {row.dof_ratio:>8.3f}")
    print(f"max e_n = {table.max_e_n:.3e}, max e_t = {table.max_e_t:.3e}, final dof ratio = {table.final_dof_ratio:.3f}")
    logger.info(f"Comparison written to {path}")
    return 0


def main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        if args.command == "compare":
            return compare_command(args)
        return run_command(args)
    except LRMembraneError as exc:
        logger.error(f"{args.command} failed: {exc}")
        return 2


if __name__ == "__main__":
    sys.exit(main())
