"""Operator entry point: run cells, render reports, replay audits, validate
scenario files, and host the interactive HITL channel.

The CLI itself requires no environment variables; the artifact keeps its own
ambient authority empty on purpose.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from .agent import ScriptedAgentFactory
from .canonical import canonical_json
from .errors import BrokerError, SchemaError
from .external import ExternalAgentFactory
from .harness import (
    PHASES,
    check_expectations,
    parse_report,
    render_table,
    replay,
    run_suite,
    serialize_report,
)
from .mitigations import HitlMode, HitlPolicy
from .model import ToolName
from .scenarios import DEFAULT_SCENARIO_IDS, load_scenario, scenario_to_dict, shipped_scenarios

EXIT_OK = 0
EXIT_FAILURE = 1
EXIT_USAGE = 2


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="toolbroker",
        description="Policy-gated tool-execution broker and evaluation harness",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="execute scenario cells and write reports")
    run.add_argument("--scenario", default="all",
                     help="scenario id or 'all' (default: all)")
    run.add_argument("--phase", default="both", choices=["baseline", "mitigated", "both"])
    run.add_argument("--runs", type=int, default=10)
    run.add_argument("--seed", type=int, default=42)
    run.add_argument("--workers", type=int, default=1)
    run.add_argument("--agent", nargs="+", default=["scripted"],
                     metavar=("KIND", "COMMAND"),
                     help="'scripted' or 'external <command>'")
    run.add_argument("--hitl", nargs="+", default=["off"],
                     metavar=("MODE", "FILE"),
                     help="'off', 'interactive', or 'policy <file>'")
    run.add_argument("--out", default="out", help="output directory (default: out)")
    run.add_argument("--redact", action="store_true",
                     help="force output redaction on every cell")
    run.add_argument("--check", default=None,
                     help="expectations file; exit nonzero on violations")

    report = sub.add_parser("report", help="render a machine report as the table")
    report.add_argument("path", help="report.json produced by run")

    rep = sub.add_parser("replay", help="replay an audit log and verify it")
    rep.add_argument("audit", help="audit .jsonl file")

    validate = sub.add_parser("validate", help="validate a scenario definition file")
    validate.add_argument("scenario_file")
    validate.add_argument("--canonical", action="store_true",
                          help="print the canonical form on success")
    return parser


def _select_scenarios(selector: str) -> list:
    shipped = shipped_scenarios()
    if selector == "all":
        return [shipped[s] for s in DEFAULT_SCENARIO_IDS]
    if selector not in shipped:
        raise SystemExit(_usage_error(
            f"unknown scenario {selector!r}; valid ids: {', '.join(DEFAULT_SCENARIO_IDS)} or 'all'"
        ))
    return [shipped[selector]]


def _usage_error(message: str) -> int:
    print(f"error: {message}", file=sys.stderr)
    return EXIT_USAGE


def _build_factory(agent_args: list[str]):
    kind = agent_args[0]
    if kind == "scripted":
        if len(agent_args) != 1:
            raise SystemExit(_usage_error("--agent scripted takes no command"))
        return ScriptedAgentFactory()
    if kind == "external":
        if len(agent_args) != 2:
            raise SystemExit(_usage_error("--agent external needs a command string"))
        return ExternalAgentFactory(agent_args[1])
    raise SystemExit(_usage_error(f"unknown agent kind {kind!r}"))


def _build_hitl(hitl_args: list[str], workers: int) -> HitlPolicy | None:
    mode = hitl_args[0]
    if mode == "off":
        return None
    if mode == "interactive":
        if not sys.stdin.isatty():
            raise SystemExit(_usage_error(
                "interactive HITL needs a terminal attached (approvals are never implied)"
            ))
        if workers != 1:
            raise SystemExit(_usage_error("interactive HITL requires --workers 1"))
        return HitlPolicy(
            mode=HitlMode.INTERACTIVE,
            privileged_tools=frozenset({ToolName.SHELL_EXEC, ToolName.RUN_PIPELINE}),
            prompt=lambda message: input(message),
        )
    if mode == "policy":
        if len(hitl_args) != 2:
            raise SystemExit(_usage_error("--hitl policy needs a decisions file"))
        data = json.loads(Path(hitl_args[1]).read_text(encoding="utf-8"))
        # Published format: a list of {scenario, tool, decision} records. An
        # object form with an explicit privileged_tools set is also accepted.
        if isinstance(data, list):
            return HitlPolicy.from_records(data)
        return HitlPolicy.from_records(data["decisions"], data.get("privileged_tools"))
    raise SystemExit(_usage_error(f"unknown hitl mode {mode!r}"))


def cmd_run(args) -> int:
    scenarios = _select_scenarios(args.scenario)
    phases = PHASES if args.phase == "both" else (args.phase,)
    factory = _build_factory(args.agent)
    hitl_policy = _build_hitl(args.hitl, args.workers)
    out_dir = Path(args.out)
    audit_dir = out_dir / "audits"
    try:
        report, _records = run_suite(
            scenarios,
            args.runs,
            args.seed,
            factory,
            phases=phases,
            workers=args.workers,
            audit_dir=audit_dir,
            force_output_redact=args.redact,
            hitl_policy=hitl_policy,
        )
    except BrokerError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_FAILURE
    out_dir.mkdir(parents=True, exist_ok=True)
    machine = serialize_report(report)
    (out_dir / "report.json").write_text(canonical_json(machine) + "\n", encoding="utf-8")
    table = render_table(report)
    (out_dir / "report.txt").write_text(table, encoding="utf-8")
    print(table, end="")
    if args.check:
        expectations = json.loads(Path(args.check).read_text(encoding="utf-8"))
        violations = check_expectations(report, expectations)
        if violations:
            for violation in violations:
                print(f"check failed: {violation}", file=sys.stderr)
            return EXIT_FAILURE
        print(f"check passed: {args.check}")
    return EXIT_OK


def cmd_report(args) -> int:
    try:
        report = parse_report(args.path)
    except (OSError, ValueError, KeyError, json.JSONDecodeError) as exc:
        print(f"error: cannot parse report: {exc}", file=sys.stderr)
        return EXIT_FAILURE
    print(render_table(report), end="")
    return EXIT_OK


def cmd_replay(args) -> int:
    try:
        result = replay(args.audit)
    except BrokerError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_FAILURE
    print(f"run:            {result.run_id}")
    print(f"events:         {result.event_count}")
    print(f"verdict match:  {result.verdict_match}")
    print(f"ledger match:   {result.ledger_match}")
    print(f"record hash ok: {result.record_hash_match}")
    print(f"verdict:        {json.dumps(result.replayed_verdict.to_dict(), sort_keys=True)}")
    return EXIT_OK if result.ok() else EXIT_FAILURE


def cmd_validate(args) -> int:
    try:
        scenario = load_scenario(args.scenario_file)
    except SchemaError as exc:
        print(f"invalid: {exc}", file=sys.stderr)
        return EXIT_FAILURE
    except (OSError, json.JSONDecodeError) as exc:
        print(f"error: cannot read scenario file: {exc}", file=sys.stderr)
        return EXIT_FAILURE
    print(f"ok: {scenario.scenario_id}")
    if args.canonical:
        print(canonical_json(scenario_to_dict(scenario)))
    return EXIT_OK


def main(argv: list[str] | None = None) -> int:
    parser = _build_parser()
    args = parser.parse_args(argv)
    handlers = {
        "run": cmd_run,
        "report": cmd_report,
        "replay": cmd_replay,
        "validate": cmd_validate,
    }
    return handlers[args.command](args)


if __name__ == "__main__":
    sys.exit(main())
