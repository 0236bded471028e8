"""Command line: ``python -m src.harness.cli {run,suite,verify,report}``.

Exit codes: 0 all assertions hold, 1 an assertion failed (or a secret is
UNSAFE for ``verify``), 2 the scenario or transcript could not be used.
"""
from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from pydantic import ValidationError

from src.config import LOG_LEVEL, REPORT_DIR, RUNS_DIR, SCENARIO_DIR
from src.log import configure_logging
from src.protocol.errors import MalformedTranscript, ScenarioError
from src.harness import runner
from src.harness.scenario import load_scenario

CONFIG_ERRORS = (ValidationError, json.JSONDecodeError, ScenarioError, FileNotFoundError)


def _run(args: argparse.Namespace) -> int:
    try:
        config = load_scenario(args.scenario, seed=args.seed)
    except CONFIG_ERRORS as exc:
        print(f"Invalid scenario {args.scenario}: {runner.config_error_message(exc)}", file=sys.stderr)
        return runner.EXIT_CONFIG
    if args.capture_payloads:
        config = config.model_copy(update={"capture_payloads": True})
    transcript = args.transcript or runner.default_transcript_path(config)
    metrics = args.metrics or transcript.with_suffix(".metrics.json")
    result = runner.run_scenario(config, transcript, metrics)
    print(f"{config.name}: {result.outcome} (seed {config.seed}, {result.duration_ms} ms simulated)")
    print("Wrote:", transcript)
    print("Wrote:", metrics)
    for failure in result.failures[:1]:
        print(f"Assertion failed: {failure}")
    return result.exit_code


def _suite(args: argparse.Namespace) -> int:
    try:
        table = runner.run_suite(args.dir, args.filter, out_dir=args.out)
    except CONFIG_ERRORS as exc:
        print(f"Invalid suite {args.dir}: {runner.config_error_message(exc)}", file=sys.stderr)
        return runner.EXIT_CONFIG
    if table.empty:
        print("No scenarios matched.")
        return runner.EXIT_OK
    print(table[["name", "outcome", "duration_ms", "assertions"]].to_string(index=False))
    return runner.EXIT_OK if table["passed"].all() else runner.EXIT_ASSERTION


def _verify(args: argparse.Namespace) -> int:
    try:
        report = runner.verify_transcript(args.transcript)
    except MalformedTranscript as exc:
        print(f"Malformed transcript {args.transcript}: {exc.detail}", file=sys.stderr)
        return runner.EXIT_CONFIG
    for verdict in report.secrets:
        print(f"{verdict.label:<14} {'SAFE' if verdict.safe else 'UNSAFE'}")
    for goal in report.goals:
        status = "holds" if goal.holds else f"VIOLATED ({goal.detail})"
        print(f"{goal.goal:<40} {status}")
    return runner.EXIT_OK if report.all_safe else runner.EXIT_ASSERTION


def _report(args: argparse.Namespace) -> int:
    from src.analysis import report

    try:
        return report.main(args.dir, args.out, args.filter)
    except CONFIG_ERRORS as exc:
        print(f"Invalid suite {args.dir}: {runner.config_error_message(exc)}", file=sys.stderr)
        return runner.EXIT_CONFIG


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="mfa-sim", description="Passwordless MFA protocol simulator")
    parser.add_argument("--log-level", default=None, help="structlog level, overrides MFA_LOG_LEVEL")
    sub = parser.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="run one scenario")
    run.add_argument("--scenario", type=Path, required=True)
    run.add_argument("--seed", type=int, default=None)
    run.add_argument("--transcript", type=Path, default=None)
    run.add_argument("--metrics", type=Path, default=None)
    run.add_argument("--capture-payloads", action="store_true")
    run.set_defaults(func=_run)

    suite = sub.add_parser("suite", help="run every scenario in a directory")
    suite.add_argument("--dir", type=Path, default=SCENARIO_DIR)
    suite.add_argument("--filter", default="*", help="glob on scenario names")
    suite.add_argument("--out", type=Path, default=RUNS_DIR)
    suite.set_defaults(func=_suite)

    verify = sub.add_parser("verify", help="secrecy and authenticity report for a transcript")
    verify.add_argument("--transcript", type=Path, required=True)
    verify.set_defaults(func=_verify)

    rep = sub.add_parser("report", help="run the suite and write LaTeX tables and a figure")
    rep.add_argument("--dir", type=Path, default=SCENARIO_DIR)
    rep.add_argument("--filter", default="*")
    rep.add_argument("--out", type=Path, default=REPORT_DIR)
    rep.set_defaults(func=_report)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    configure_logging(args.log_level or LOG_LEVEL)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
