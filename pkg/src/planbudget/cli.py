"""Command line entry point: ``planbudget <subcommand>``."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

from . import bam, harness, scheduling, uncertainty
from .errors import PlanBudgetError
from .prompting import DATASET_PRESETS, QueryRecord


def _read_json(path: str) -> dict:
    if path == "-":
        return json.load(sys.stdin)
    with open(path, encoding="utf-8") as fh:
        return json.load(fh)


def _print(obj) -> None:
    print(json.dumps(obj, indent=2))


def cmd_allocate(args) -> int:
    data = _read_json(args.instance)
    params = scheduling.ScheduleParams.from_dict(data)
    scores = data.get("scores") or [1.0] * int(data["m"])
    alloc = scheduling.schedule_and_allocate(scores, params, int(data["B"]))
    out = alloc.to_dict()
    out["schedule"] = params.to_dict()
    _print(out)
    if args.figure:
        from .plotting import plot_decay_allocations

        plot_decay_allocations(args.figure, int(data["B"]), len(scores), params.p, params.gamma, params.epsilon)
    return 0


def cmd_bam(args) -> int:
    instance = bam.AllocationInstance.from_dict(_read_json(args.instance))
    solution = bam.allocate_kkt(instance, tol=args.tol)
    out = solution.to_dict()
    out["closed_form"] = list(bam.allocate_closed_form(instance))
    out["closed_form_objective"] = bam.objective(instance.c, instance.beta, out["closed_form"])
    _print(out)
    return 0


def cmd_uq(args) -> int:
    data = _read_json(args.ensemble)
    report = uncertainty.decompose(uncertainty.PredictiveEnsemble.from_dict(data))
    _print(report.to_dict())
    return 0


def cmd_plan(args) -> int:
    config = harness.ExperimentConfig.load(args.config)
    domain = args.domain or config.domain or DATASET_PRESETS[config.preset].domain
    record = QueryRecord("cli", args.question, level=args.level, domain=domain)
    planner = config.planner.build()
    try:
        ex = harness.plan_query(record, config, planner)
    finally:
        planner.close()
    out = ex.plan.to_dict()
    out["total_budget"] = ex.total_budget
    out["billed_tokens"] = ex.completion_tokens
    _print(out)
    return 0


def cmd_run(args) -> int:
    config = harness.ExperimentConfig.load(args.config)
    changes = {}
    if args.n_runs is not None:
        changes["n_runs"] = args.n_runs
    if args.method is not None:
        changes["method"] = args.method
    if args.no_figures:
        changes["figures"] = False
    if changes:
        config = replace(config, **changes)
    out_dir = args.output_dir or config.output_dir or "results"
    result = harness.run_experiment(config, output_dir=out_dir)
    _print(result.report.row())
    return 0


def cmd_report(args) -> int:
    rows = harness.load_traces(args.traces)
    reports = harness.reaggregate(rows)
    if args.output_dir:
        harness.write_reports(reports, Path(args.output_dir), figures=not args.no_figures)
    sys.stdout.write(harness.metrics.reports_to_csv(reports))
    return 0


def cmd_verify_tables(args) -> int:
    checks = harness.verify_tables(args.fixture, tol=args.tol)
    failed = 0
    for c in checks:
        status = "PASS" if c.passed else "FAIL"
        at = "" if c.printed_a_over_t is None else f"  A/T {c.computed_a_over_t:.3f} vs {c.printed_a_over_t:g} (dev {c.a_over_t_deviation:.3f})"
        print(f"{status}  {c.label}: E3 {c.computed_e3:.4f} vs {c.printed_e3:g} (dev {c.e3_deviation:.3f}){at}")
        failed += not c.passed
    print(f"{len(checks) - failed}/{len(checks)} rows within +/-{args.tol}")
    return 1 if failed else 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="planbudget", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("plan", help="decompose and credit one query, print the plan as JSON")
    p.add_argument("--config", required=True)
    p.add_argument("--question", required=True)
    p.add_argument("--level", type=int, default=3)
    p.add_argument("--domain")
    p.set_defaults(func=cmd_plan)

    p = sub.add_parser("allocate", help="schedule a budget from a JSON file {B, scores, kind, p, gamma, epsilon}")
    p.add_argument("instance")
    p.add_argument("--figure", help="also render the decay allocation figure to this path")
    p.set_defaults(func=cmd_allocate)

    p = sub.add_parser("bam", help="solve a budget allocation instance {B, items:[{c, beta}]}")
    p.add_argument("instance")
    p.add_argument("--tol", type=float, default=bam.DEFAULT_TOL)
    p.set_defaults(func=cmd_bam)

    p = sub.add_parser("uq", help="decompose ensemble uncertainty {members, base}")
    p.add_argument("ensemble")
    p.set_defaults(func=cmd_uq)

    p = sub.add_parser("run", help="run a full experiment from a YAML config")
    p.add_argument("--config", required=True)
    p.add_argument("--output-dir")
    p.add_argument("--n-runs", type=int)
    p.add_argument("--method")
    p.add_argument("--no-figures", action="store_true")
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("report", help="re-aggregate one or more trace JSONL files")
    p.add_argument("traces", nargs="+")
    p.add_argument("--output-dir")
    p.add_argument("--no-figures", action="store_true")
    p.set_defaults(func=cmd_report)

    p = sub.add_parser("verify-tables", help="recompute E3 and A/T for published table rows")
    p.add_argument("fixture", nargs="?")
    p.add_argument("--tol", type=float, default=harness.TABLE_TOLERANCE)
    p.set_defaults(func=cmd_verify_tables)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (PlanBudgetError, OSError, json.JSONDecodeError, KeyError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
