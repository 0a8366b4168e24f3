"""Audit stream plumbing: event sink, run records, and the on-disk log format.

The audit stream is the accounting source of truth for a run: verdicts,
ledgers, and replay all derive from it. When output redaction is active the
sink redacts every payload at emission time, so the persisted stream is safe
and the derived accounting is consistent with what replay can see.

On-disk format (one file per run, newline-delimited JSON):

    {"type": "run_meta", ...}          # config + embedded scenario definition
    {"type": "event", ...}             # AuditEvent, seq strictly increasing
    ...
    {"type": "run_end", ...}           # ledger hash, record hash, duration
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable, Iterable

from .canonical import canonical_hash
from .errors import CorruptLog
from .model import AuditEvent, EventKind, SideEffectKind, Verdict


class AuditSink:
    """Collects the strictly-ordered event stream for one run."""

    def __init__(self, run_id: str, redactor: Callable[[Any], Any] | None = None):
        self.run_id = run_id
        self.events: list[AuditEvent] = []
        self._redactor = redactor or (lambda payload: payload)

    def emit(self, kind: EventKind, payload: dict, logical_time: int) -> AuditEvent:
        event = AuditEvent(
            run_id=self.run_id,
            seq=len(self.events) + 1,
            kind=kind,
            payload=self._redactor(payload),
            logical_time=logical_time,
        )
        self.events.append(event)
        return event


def ledger_fingerprint(files: dict[str, str], network: list[dict], pipelines: list[str]) -> str:
    """Canonical hash over the run's reconstructible side-effect ledgers."""
    return canonical_hash({
        "files": dict(sorted(files.items())),
        "network": network,
        "pipelines": pipelines,
    })


@dataclass
class RunRecord:
    """Everything one episode produced. Wall-clock duration is the only field
    excluded from the canonical record hash."""

    run_id: str
    scenario_id: str
    phase: str
    run_index: int
    base_seed: int
    run_seed: int
    profile_version: str
    pattern_version: str
    budget: int
    mitigations: dict
    scenario_def: dict
    events: list[AuditEvent]
    verdict: Verdict
    final_answer: str
    ledger_hash: str
    record_hash: str
    duration_ms: float = 0.0

    def meta_dict(self) -> dict:
        return {
            "run_id": self.run_id,
            "scenario_id": self.scenario_id,
            "phase": self.phase,
            "run_index": self.run_index,
            "base_seed": self.base_seed,
            "run_seed": self.run_seed,
            "profile_version": self.profile_version,
            "pattern_version": self.pattern_version,
            "budget": self.budget,
            "mitigations": self.mitigations,
            "scenario": self.scenario_def,
        }

    def tool_call_events(self) -> list[AuditEvent]:
        return [e for e in self.events if e.kind is EventKind.TOOL_CALL]

    def side_effects(self) -> list[tuple[int, dict]]:
        """(call_id, effect dict) pairs in stream order."""
        out = []
        for event in self.events:
            if event.kind is EventKind.TOOL_RESULT:
                for effect in event.payload.get("side_effects", []):
                    out.append((event.payload["call_id"], effect))
        return out


def compute_record_hash(meta: dict, events: Iterable[AuditEvent]) -> str:
    return canonical_hash({"meta": meta, "events": [e.to_dict() for e in events]})


def write_audit_file(record: RunRecord, path: str | Path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    lines = [json.dumps({"type": "run_meta", **record.meta_dict()}, sort_keys=True)]
    for event in record.events:
        lines.append(json.dumps({"type": "event", **event.to_dict()}, sort_keys=True))
    lines.append(json.dumps({
        "type": "run_end",
        "ledger_hash": record.ledger_hash,
        "record_hash": record.record_hash,
        "final_answer": record.final_answer,
        "duration_ms": record.duration_ms,
    }, sort_keys=True))
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")


@dataclass
class ParsedAudit:
    meta: dict
    events: list[AuditEvent]
    ledger_hash: str
    record_hash: str
    final_answer: str
    duration_ms: float
    verdict: Verdict


def parse_audit_file(path: str | Path) -> ParsedAudit:
    """Parse and structurally validate an audit log; CorruptLog on any defect."""
    path = Path(path)
    if not path.is_file():
        raise CorruptLog(f"no such audit log: {path}")
    raw = path.read_text(encoding="utf-8").strip()
    if not raw:
        raise CorruptLog("empty audit log")
    lines = raw.splitlines()
    try:
        parsed = [json.loads(line) for line in lines]
    except json.JSONDecodeError as exc:
        raise CorruptLog(f"bad JSON at line {exc.lineno}: {exc.msg}") from exc
    if parsed[0].get("type") != "run_meta":
        raise CorruptLog("first line must be run_meta")
    if parsed[-1].get("type") != "run_end":
        raise CorruptLog("last line must be run_end (truncated log?)")
    meta = parsed[0]
    end = parsed[-1]
    events: list[AuditEvent] = []
    for i, obj in enumerate(parsed[1:-1], start=1):
        if obj.get("type") != "event":
            raise CorruptLog(f"line {i + 1}: expected event")
        try:
            event = AuditEvent.from_dict(obj)
        except (KeyError, ValueError) as exc:
            raise CorruptLog(f"line {i + 1}: malformed event: {exc}") from exc
        if event.seq != i:
            raise CorruptLog(f"line {i + 1}: seq {event.seq} out of order (expected {i})")
        events.append(event)
    if not events:
        raise CorruptLog("audit log has no events")
    verdict_events = [e for e in events if e.kind is EventKind.VERDICT]
    if len(verdict_events) != 1 or events[-1].kind is not EventKind.VERDICT:
        raise CorruptLog("audit log must end with exactly one verdict event")
    try:
        verdict = Verdict.from_dict(verdict_events[0].payload)
    except (KeyError, ValueError) as exc:
        raise CorruptLog(f"malformed verdict payload: {exc}") from exc
    for key in ("ledger_hash", "record_hash", "final_answer", "duration_ms"):
        if key not in end:
            raise CorruptLog(f"run_end missing {key}")
    return ParsedAudit(
        meta={k: v for k, v in meta.items() if k != "type"},
        events=events,
        ledger_hash=end["ledger_hash"],
        record_hash=end["record_hash"],
        final_answer=end["final_answer"],
        duration_ms=float(end["duration_ms"]),
        verdict=verdict,
    )


def apply_file_effects(fixtures: dict[str, str], events: Iterable[AuditEvent]) -> dict[str, str]:
    """Reconstruct the final workspace contents purely from the audit stream.

    Starts from the scenario's fixture files and applies file_written /
    file_deleted side effects in order; write contents come from the recorded
    effect details (post-redaction when redaction was active).
    """
    files = dict(fixtures)
    for event in events:
        if event.kind is not EventKind.TOOL_RESULT:
            continue
        for effect in event.payload.get("side_effects", []):
            kind = effect.get("kind")
            detail = effect.get("detail", {})
            if kind == SideEffectKind.FILE_WRITTEN.value:
                files[detail["path"]] = detail["content"]
            elif kind == SideEffectKind.FILE_DELETED.value:
                files.pop(detail["path"], None)
    return files


def network_requests_from_events(events: Iterable[AuditEvent]) -> list[dict]:
    """network_request effect details in stream order (url/method/body/origin)."""
    out = []
    for event in events:
        if event.kind is not EventKind.TOOL_RESULT:
            continue
        for effect in event.payload.get("side_effects", []):
            if effect.get("kind") == SideEffectKind.NETWORK_REQUEST.value:
                out.append(dict(effect["detail"]))
    return out


def pipeline_logs_from_events(events: Iterable[AuditEvent]) -> list[str]:
    logs = []
    for event in events:
        if event.kind is EventKind.TOOL_RESULT and event.payload.get("status") == "ok":
            effects = event.payload.get("side_effects", [])
            if any(e.get("kind") == SideEffectKind.PIPELINE_TRIGGERED.value for e in effects):
                logs.append(event.payload.get("output", ""))
    return logs
