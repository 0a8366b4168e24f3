"""Two-phase experiment harness: run cells, compute metrics, emit reports,
and replay audit logs.

Concurrency lives here and only here: episodes are independent, so a bounded
worker pool executes them and a deterministic sort aggregates the results.
Reports are identical for 1 worker and N workers modulo wall-clock fields.
"""

from __future__ import annotations

import json
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

from . import audit as audit_mod
from .agent import DEFAULT_BUDGET, run_episode
from .audit import ParsedAudit, RunRecord, compute_record_hash, ledger_fingerprint, parse_audit_file
from .canonical import canonical_json, text_hash
from .errors import BrokerError, CorruptLog, EmptyInput, IncompleteReport
from .mitigations import HitlPolicy, redact
from .model import EventKind, Verdict
from .scenarios import (
    DEFAULT_SCENARIO_IDS,
    Scenario,
    evaluate_events,
    load_scenario,
    resolve_fixture_files,
)

PHASES = ("baseline", "mitigated")
REPORT_SCHEMA_VERSION = 1


class PhaseError(BrokerError):
    """An episode failed; completed records of the phase are preserved."""

    def __init__(self, message: str, partial_records: list[RunRecord]):
        super().__init__(message)
        self.partial_records = partial_records


@dataclass(frozen=True)
class PhaseMetrics:
    scenario_id: str
    phase: str
    runs: int
    unsafe_rate: float
    leak_rate: float
    success_rate: float
    mean_duration_ms: float
    denial_count: int

    def to_dict(self) -> dict:
        return {
            "scenario_id": self.scenario_id,
            "phase": self.phase,
            "runs": self.runs,
            "unsafe_rate": self.unsafe_rate,
            "leak_rate": self.leak_rate,
            "success_rate": self.success_rate,
            "mean_duration_ms": self.mean_duration_ms,
            "denial_count": self.denial_count,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "PhaseMetrics":
        return cls(
            scenario_id=data["scenario_id"],
            phase=data["phase"],
            runs=int(data["runs"]),
            unsafe_rate=float(data["unsafe_rate"]),
            leak_rate=float(data["leak_rate"]),
            success_rate=float(data["success_rate"]),
            mean_duration_ms=float(data["mean_duration_ms"]),
            denial_count=int(data["denial_count"]),
        )


def compute_ubr(verdicts: list[Verdict]) -> float:
    """Unsafe behavior rate: unsafe runs over total runs."""
    if not verdicts:
        raise EmptyInput("no verdicts to aggregate")
    return sum(1 for v in verdicts if v.unsafe) / len(verdicts)


def compute_rate(verdicts: list[Verdict], attr: str) -> float:
    if not verdicts:
        raise EmptyInput("no verdicts to aggregate")
    return sum(1 for v in verdicts if getattr(v, attr)) / len(verdicts)


def count_denials(record: RunRecord) -> int:
    """Mitigation-triggered denials/blocks in one run (the autonomy-cost proxy)."""
    return sum(
        1 for e in record.events
        if e.kind is EventKind.MITIGATION_ACTION and e.payload.get("decision") in ("deny", "block")
    )


def metrics_for(records: list[RunRecord]) -> PhaseMetrics:
    if not records:
        raise EmptyInput("no records to aggregate")
    verdicts = [r.verdict for r in records]
    return PhaseMetrics(
        scenario_id=records[0].scenario_id,
        phase=records[0].phase,
        runs=len(records),
        unsafe_rate=compute_ubr(verdicts),
        leak_rate=compute_rate(verdicts, "leaked"),
        success_rate=compute_rate(verdicts, "task_success"),
        mean_duration_ms=sum(r.duration_ms for r in records) / len(records),
        denial_count=sum(count_denials(r) for r in records),
    )


def run_phase(scenario: Scenario, phase: str, runs: int, base_seed: int, policy_factory,
              **episode_kwargs) -> tuple[list[RunRecord], PhaseMetrics]:
    """Sequential execution of one (scenario, phase) cell."""
    if runs < 1:
        raise ValueError("runs must be >= 1")
    records: list[RunRecord] = []
    for run_index in range(runs):
        try:
            records.append(run_episode(scenario, phase, run_index, base_seed,
                                        policy_factory, **episode_kwargs))
        except BrokerError as exc:
            raise PhaseError(
                f"{scenario.scenario_id}/{phase} run {run_index} failed: {exc}", records
            ) from exc
    return records, metrics_for(records)


@dataclass
class SuiteReport:
    config: dict
    cells: list[PhaseMetrics]
    run_hashes: dict[str, str] = field(default_factory=dict)
    ledger_hashes: dict[str, str] = field(default_factory=dict)

    def cell(self, scenario_id: str, phase: str) -> PhaseMetrics | None:
        for metrics in self.cells:
            if metrics.scenario_id == scenario_id and metrics.phase == phase:
                return metrics
        return None

    def scenario_ids(self) -> list[str]:
        return list(self.config.get("scenarios", []))

    def is_complete(self) -> bool:
        return set(self.scenario_ids()) >= set(DEFAULT_SCENARIO_IDS) and all(
            self.cell(s, p) is not None for s in DEFAULT_SCENARIO_IDS for p in PHASES
        )

    def deltas(self) -> list[dict]:
        """Per-scenario mitigated - baseline deltas, always recomputed."""
        out = []
        for scenario_id in self.scenario_ids():
            base = self.cell(scenario_id, "baseline")
            mit = self.cell(scenario_id, "mitigated")
            if base is None or mit is None:
                continue
            out.append({
                "scenario_id": scenario_id,
                "delta_unsafe": mit.unsafe_rate - base.unsafe_rate,
                "delta_leak": mit.leak_rate - base.leak_rate,
                "delta_success": mit.success_rate - base.success_rate,
                "delta_time_ms": mit.mean_duration_ms - base.mean_duration_ms,
            })
        return out


def build_report(config: dict, records: list[RunRecord]) -> SuiteReport:
    groups: dict[tuple[str, str], list[RunRecord]] = {}
    for record in records:
        groups.setdefault((record.scenario_id, record.phase), []).append(record)
    cells = []
    for scenario_id in config["scenarios"]:
        for phase in PHASES:
            group = groups.get((scenario_id, phase))
            if group:
                group.sort(key=lambda r: r.run_index)
                cells.append(metrics_for(group))
    return SuiteReport(
        config=config,
        cells=cells,
        run_hashes={r.run_id: r.record_hash for r in sorted(records, key=lambda r: r.run_id)},
        ledger_hashes={r.run_id: r.ledger_hash for r in sorted(records, key=lambda r: r.run_id)},
    )


def run_suite(
    scenarios: list[Scenario],
    runs: int,
    base_seed: int,
    policy_factory,
    *,
    phases: tuple[str, ...] = PHASES,
    workers: int = 1,
    budget: int = DEFAULT_BUDGET,
    audit_dir: str | Path | None = None,
    force_output_redact: bool = False,
    hitl_policy: HitlPolicy | None = None,
) -> tuple[SuiteReport, list[RunRecord]]:
    """Execute the requested cells and aggregate a SuiteReport."""
    jobs = [
        (scenario, phase, run_index)
        for scenario in scenarios
        for phase in phases
        for run_index in range(runs)
    ]
    kwargs = dict(
        budget=budget,
        audit_dir=audit_dir,
        force_output_redact=force_output_redact,
        hitl_policy=hitl_policy,
    )

    def one(job) -> RunRecord:
        scenario, phase, run_index = job
        return run_episode(scenario, phase, run_index, base_seed, policy_factory, **kwargs)

    if workers <= 1:
        records = [one(job) for job in jobs]
    else:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            records = list(pool.map(one, jobs))
    records.sort(key=lambda r: (r.scenario_id, r.phase, r.run_index))
    config = {
        "base_seed": base_seed,
        "runs": runs,
        "budget": budget,
        "scenarios": [s.scenario_id for s in scenarios],
        "phases": list(phases),
        "profile_version": getattr(policy_factory, "version", policy_factory.label),
        "pattern_version": _suite_pattern_version(scenarios),
        "output_redact_forced": force_output_redact,
        "hitl": hitl_policy.mode.value if hitl_policy is not None else None,
    }
    return build_report(config, records), records


def _suite_pattern_version(scenarios: list[Scenario]) -> str:
    versions = sorted({s.pattern_version for s in scenarios if s.pattern_version})
    return versions[0] if versions else "none"


# --- report serialization ----------------------------------------------------

def serialize_report(report: SuiteReport) -> dict:
    return {
        "schema_version": REPORT_SCHEMA_VERSION,
        "partial": not report.is_complete(),
        "config": report.config,
        "cells": [m.to_dict() for m in report.cells],
        "deltas": report.deltas(),
        "run_hashes": report.run_hashes,
        "ledger_hashes": report.ledger_hashes,
    }


def parse_report(source: str | Path | dict) -> SuiteReport:
    if isinstance(source, (str, Path)):
        data = json.loads(Path(source).read_text(encoding="utf-8"))
    else:
        data = source
    report = SuiteReport(
        config=data["config"],
        cells=[PhaseMetrics.from_dict(c) for c in data["cells"]],
        run_hashes=dict(data.get("run_hashes", {})),
        ledger_hashes=dict(data.get("ledger_hashes", {})),
    )
    # Deltas are derived, never trusted from the file.
    stored = data.get("deltas", [])
    if stored != report.deltas():
        raise ValueError("stored deltas disagree with recomputation from the metrics")
    return report


def strip_wallclock(machine: dict) -> dict:
    """Drop wall-clock-derived fields for determinism comparisons."""
    clone = json.loads(json.dumps(machine))
    for cell in clone.get("cells", []):
        cell.pop("mean_duration_ms", None)
    for delta in clone.get("deltas", []):
        delta.pop("delta_time_ms", None)
    return clone


def _pct(rate: float) -> str:
    return f"{rate * 100:.1f}%"


def render_table(report: SuiteReport) -> str:
    """The paper-shaped table: base/mit pairs for unsafe, leak, success + delta time."""
    headers = ["Scenario", "Unsafe%", "Unsafe%", "Leak%", "Leak%",
               "Success%", "Success%", "DTime"]
    subheaders = ["", "(base)", "(mit)", "(base)", "(mit)", "(base)", "(mit)", ""]
    rows = [headers, subheaders]
    for scenario_id in report.scenario_ids():
        base = report.cell(scenario_id, "baseline")
        mit = report.cell(scenario_id, "mitigated")
        delta = (f"{mit.mean_duration_ms - base.mean_duration_ms:+.1f}ms"
                 if base and mit else "-")
        rows.append([
            scenario_id,
            _pct(base.unsafe_rate) if base else "-",
            _pct(mit.unsafe_rate) if mit else "-",
            _pct(base.leak_rate) if base else "-",
            _pct(mit.leak_rate) if mit else "-",
            _pct(base.success_rate) if base else "-",
            _pct(mit.success_rate) if mit else "-",
            delta,
        ])
    widths = [max(len(row[i]) for row in rows) for i in range(len(headers))]
    lines = []
    for row in rows:
        lines.append("  ".join(cell.ljust(widths[i]) for i, cell in enumerate(row)).rstrip())
    denial_bits = []
    for scenario_id in report.scenario_ids():
        mit = report.cell(scenario_id, "mitigated")
        if mit is not None:
            denial_bits.append(f"{scenario_id}={mit.denial_count}")
    if denial_bits:
        lines.append("")
        lines.append("mitigation denials (autonomy cost): " + ", ".join(denial_bits))
    return "\n".join(lines) + "\n"


def emit_report(report: SuiteReport, format: str) -> str:
    """Render the complete suite report; IncompleteReport if cells are missing."""
    if not report.is_complete():
        raise IncompleteReport("report does not cover all default scenarios in both phases")
    if format == "table":
        return render_table(report)
    if format == "machine":
        return canonical_json(serialize_report(report))
    raise ValueError(f"unknown report format {format!r}")


# --- expectations / --check --------------------------------------------------

def check_expectations(report: SuiteReport, expectations: dict) -> list[str]:
    """Compare report cells against an expectations file; returns violations."""
    violations = []
    for expected in expectations.get("cells", []):
        scenario_id = expected["scenario_id"]
        phase = expected["phase"]
        cell = report.cell(scenario_id, phase)
        if cell is None:
            violations.append(f"{scenario_id}/{phase}: missing from report")
            continue
        for metric in ("unsafe_rate", "leak_rate", "success_rate"):
            if metric in expected and getattr(cell, metric) != expected[metric]:
                violations.append(
                    f"{scenario_id}/{phase}: {metric} = {getattr(cell, metric)!r}, "
                    f"expected {expected[metric]!r}"
                )
    return violations


# --- replay -------------------------------------------------------------------

@dataclass
class ReplayReport:
    run_id: str
    verdict_match: bool
    ledger_match: bool
    record_hash_match: bool
    original_verdict: Verdict
    replayed_verdict: Verdict
    event_count: int

    def ok(self) -> bool:
        return self.verdict_match and self.ledger_match and self.record_hash_match


def replay(audit_path: str | Path) -> ReplayReport:
    """Recompute verdict and side-effect ledgers purely from a serialized audit
    log and compare them with what the original run recorded."""
    parsed = parse_audit_file(audit_path)
    return replay_parsed(parsed)


def replay_parsed(parsed: ParsedAudit) -> ReplayReport:
    meta = parsed.meta
    try:
        scenario = load_scenario(meta["scenario"])
    except (KeyError, BrokerError) as exc:
        raise CorruptLog(f"embedded scenario definition unusable: {exc}") from exc
    run_index = int(meta["run_index"])
    events = [e for e in parsed.events if e.kind is not EventKind.VERDICT]

    replayed_verdict = evaluate_events(scenario, run_index, events, parsed.final_answer)

    redacting = bool(meta.get("mitigations", {}).get("output_redact"))
    manifest = scenario.fixtures.secrets

    fixtures = resolve_fixture_files(scenario, run_index)
    files = audit_mod.apply_file_effects(fixtures, events)
    digests = {}
    for rel, content in files.items():
        digests[rel] = text_hash(redact(content, manifest) if redacting else content)

    network = []
    for detail in audit_mod.network_requests_from_events(events):
        entry = {
            "url": detail.get("url", ""),
            "method": detail.get("method", ""),
            "body": detail.get("body", ""),
            "origin": detail.get("origin", "agent"),
            "endpoint_kind": _endpoint_kind(scenario, detail.get("url", "")),
        }
        network.append(entry)

    ledger_hash = ledger_fingerprint(digests, network,
                                     audit_mod.pipeline_logs_from_events(events))
    record_hash = compute_record_hash(meta, parsed.events)

    return ReplayReport(
        run_id=meta.get("run_id", "?"),
        verdict_match=replayed_verdict == parsed.verdict,
        ledger_match=ledger_hash == parsed.ledger_hash,
        record_hash_match=record_hash == parsed.record_hash,
        original_verdict=parsed.verdict,
        replayed_verdict=replayed_verdict,
        event_count=len(parsed.events),
    )


def _endpoint_kind(scenario: Scenario, url: str) -> str:
    matched = scenario.fixtures.network.match(url)
    if matched is None:
        return "unmatched"
    return matched[1].kind.value
