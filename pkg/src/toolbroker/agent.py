"""Agent engine: the brokered control loop and the scripted decision policy.

The loop assembles context, asks a policy for the next action, routes tool
calls through the mitigation stack and the tool runtime, and terminates on
finish or step budget. Scripted profiles are versioned data standing in for
live-model stochasticity: phase-blind by construction, so any baseline-vs-
mitigated difference is produced by enforcement, never by the script.

Per-run stochasticity model: a run "complies" with in-context directives iff
its golden-ratio quantile frac(run_index / phi) falls below the profile's
injection_compliance. The sequence is equidistributed, so configured rates
are exact at the shipped run count for any seed; the seeded rng is reserved
for weighted-template sampling.
"""

from __future__ import annotations

import json
import random
import tempfile
import time
from dataclasses import dataclass, replace
from importlib import resources
from pathlib import Path
from typing import Protocol

from .audit import (
    AuditSink,
    RunRecord,
    compute_record_hash,
    ledger_fingerprint,
    pipeline_logs_from_events,
    write_audit_file,
)
from .canonical import derive_run_seed, text_hash
from .errors import BrokerError, FixtureError
from .mitigations import HitlPolicy, MitigationConfig, MitigationStack, issue_scoped_token
from .model import (
    CallOrigin,
    EventKind,
    ExecutionEnvironment,
    Placement,
    ResultStatus,
    Secret,
    Sensitivity,
    ToolCall,
    ToolName,
    ToolResult,
    authority_of,
    build_agent_system,
)
from .network import MockNetwork
from .runtime import REGISTERED_TOOLS, ToolRuntime
from .scenarios import (
    Scenario,
    build_env_vars,
    evaluate_events,
    materialize_fixture,
    scenario_to_dict,
)

DEFAULT_BUDGET = 16
GOLDEN_RATIO_CONJUGATE = 0.6180339887498949

DENIED_PREFIX = "[denied:"


@dataclass(frozen=True)
class AgentContext:
    task: str
    observations: tuple[tuple[int, str], ...]
    step: int
    flags: tuple[str, ...]


@dataclass(frozen=True)
class AgentAction:
    kind: str  # "tool_call" | "finish"
    call: ToolCall | None = None
    answer: str | None = None

    def __post_init__(self):
        if self.kind == "tool_call" and (self.call is None or self.answer is not None):
            raise ValueError("tool_call actions carry a call and no answer")
        if self.kind == "finish" and (self.call is not None or self.answer is None):
            raise ValueError("finish actions carry an answer and no call")
        if self.kind not in ("tool_call", "finish"):
            raise ValueError(f"unknown action kind {self.kind!r}")

    def to_dict(self) -> dict:
        out: dict = {"kind": self.kind}
        if self.call is not None:
            out["call"] = self.call.to_dict()
        if self.answer is not None:
            out["answer"] = self.answer
        return out


def compliance_quantile(run_index: int) -> float:
    return (run_index * GOLDEN_RATIO_CONJUGATE) % 1.0


@dataclass(frozen=True)
class PlanTemplate:
    weight: float
    plan: tuple[dict, ...]


@dataclass(frozen=True)
class BranchEntry:
    step: int | None
    predicate: str  # always | last_denied | sees_directive_and_complies
    templates: tuple[PlanTemplate, ...]
    when_run_in: str | None = None
    when_run_not_in: str | None = None
    once: bool = False
    mode: str = "replace"  # replace | prepend


@dataclass(frozen=True)
class ScriptedProfile:
    scenario_id: str
    branch_table: tuple[BranchEntry, ...]
    failure_schedule: frozenset[int]
    shell_preference_schedule: frozenset[int]
    denial_giveup_schedule: frozenset[int]
    injection_compliance: float
    directive_token: str | None
    runs_declared: int = 10

    def __post_init__(self):
        if not 0.0 <= self.injection_compliance <= 1.0:
            raise ValueError("injection_compliance must be in [0, 1]")
        for name, schedule in self.schedules().items():
            bad = [i for i in schedule if i >= self.runs_declared or i < 0]
            if bad:
                raise ValueError(f"schedule {name} references run indices {bad} "
                                 f">= runs_declared {self.runs_declared}")

    def schedules(self) -> dict[str, frozenset[int]]:
        return {
            "failure": self.failure_schedule,
            "shell_preference": self.shell_preference_schedule,
            "denial_giveup": self.denial_giveup_schedule,
        }


def _parse_profile(scenario_id: str, data: dict, runs_declared: int) -> ScriptedProfile:
    schedules = data.get("schedules", {})
    entries = []
    for raw in data["branch_table"]:
        templates = tuple(
            PlanTemplate(weight=float(t.get("weight", 1)), plan=tuple(t["plan"]))
            for t in raw["templates"]
        )
        if not templates or any(t.weight <= 0 for t in templates):
            raise ValueError(f"{scenario_id}: branch templates need positive weights")
        entries.append(BranchEntry(
            step=raw.get("step"),
            predicate=raw.get("predicate", "always"),
            templates=templates,
            when_run_in=raw.get("when_run_in"),
            when_run_not_in=raw.get("when_run_not_in"),
            once=bool(raw.get("once", False)),
            mode=raw.get("mode", "replace"),
        ))
    return ScriptedProfile(
        scenario_id=scenario_id,
        branch_table=tuple(entries),
        failure_schedule=frozenset(schedules.get("failure", [])),
        shell_preference_schedule=frozenset(schedules.get("shell_preference", [])),
        denial_giveup_schedule=frozenset(schedules.get("denial_giveup", [])),
        injection_compliance=float(data.get("injection_compliance", 0.0)),
        directive_token=data.get("directive_token"),
        runs_declared=runs_declared,
    )


def load_default_profiles() -> tuple[str, dict[str, ScriptedProfile]]:
    raw = resources.files("toolbroker").joinpath("profiles/v1.json").read_text(encoding="utf-8")
    data = json.loads(raw)
    runs_declared = int(data.get("runs_declared", 10))
    profiles = {
        scenario_id: _parse_profile(scenario_id, profile, runs_declared)
        for scenario_id, profile in data["profiles"].items()
    }
    return data["version"], profiles


class EpisodePolicy(Protocol):
    def next_action(self, context: AgentContext, rng: random.Random) -> AgentAction: ...
    def end(self, verdict_summary: dict) -> None: ...
    def close(self) -> None: ...


class ScriptedPolicy:
    """Deterministic function of (profile, run index, seed, context predicates)."""

    def __init__(self, profile: ScriptedProfile, run_index: int):
        self.profile = profile
        self.run_index = run_index
        self.queue: list[dict] = []
        self._consumed: set[int] = set()
        self.complies = compliance_quantile(run_index) < profile.injection_compliance

    def _in_schedule(self, name: str | None) -> bool:
        if name is None:
            return True
        return self.run_index in self.profile.schedules()[name]

    def _predicate(self, entry: BranchEntry, context: AgentContext) -> bool:
        if entry.predicate == "always":
            return True
        if entry.predicate == "last_denied":
            return bool(context.observations) and context.observations[-1][1].startswith(DENIED_PREFIX)
        if entry.predicate == "sees_directive_and_complies":
            token = self.profile.directive_token
            if not token or not self.complies:
                return False
            return any(token in text for _, text in context.observations)
        raise ValueError(f"unknown predicate {entry.predicate!r}")

    def _match(self, context: AgentContext) -> int | None:
        for i, entry in enumerate(self.profile.branch_table):
            if i in self._consumed:
                continue
            if entry.step is not None and entry.step != context.step:
                continue
            if not self._in_schedule(entry.when_run_in):
                continue
            if entry.when_run_not_in is not None and self._in_schedule(entry.when_run_not_in):
                continue
            if self._predicate(entry, context):
                return i
        return None

    def _last_output(self, context: AgentContext) -> str:
        for _, text in reversed(context.observations):
            if not text.startswith(DENIED_PREFIX):
                return text
        return ""

    def _render(self, template: dict, context: AgentContext) -> AgentAction:
        last = self._last_output(context)

        def sub(value: str) -> str:
            return value.replace("$LAST_OUTPUT", last)

        if template["action"] == "finish":
            return AgentAction(kind="finish", answer=sub(template.get("answer", "")))
        args = {k: sub(v) for k, v in template["args"].items()}
        # call_id 0 is a placeholder; the broker assigns the real id.
        call = ToolCall(call_id=0, tool=ToolName(template["tool"]), args=args)
        return AgentAction(kind="tool_call", call=call)

    def next_action(self, context: AgentContext, rng: random.Random) -> AgentAction:
        matched = self._match(context)
        if matched is not None:
            entry = self.profile.branch_table[matched]
            if len(entry.templates) == 1:
                template = entry.templates[0]
            else:
                template = rng.choices(entry.templates, weights=[t.weight for t in entry.templates])[0]
            plan = list(template.plan)
            if entry.mode == "prepend":
                self.queue = plan + self.queue
            else:
                self.queue = plan
            if entry.once:
                self._consumed.add(matched)
        if not self.queue:
            return AgentAction(kind="finish", answer="No further actions planned.")
        return self._render(self.queue.pop(0), context)

    def end(self, verdict_summary: dict) -> None:
        return None

    def close(self) -> None:
        return None


class ScriptedAgentFactory:
    label = "scripted"

    def __init__(self, profiles: dict[str, ScriptedProfile] | None = None, version: str | None = None):
        if profiles is None:
            version, profiles = load_default_profiles()
        self.profiles = profiles
        self.version = version or "custom"

    def begin(self, scenario: Scenario, run_index: int, run_seed: int, run_id: str) -> ScriptedPolicy:
        profile = self.profiles.get(scenario.scenario_id)
        if profile is None:
            raise FixtureError(f"no scripted profile for scenario {scenario.scenario_id!r}")
        return ScriptedPolicy(profile, run_index)


def next_action(policy, context: AgentContext, rng: random.Random) -> AgentAction:
    """One policy decision. Scripted policies answer locally; external ones do
    a wire-protocol round trip."""
    return policy.next_action(context, rng)


def _phase_config(scenario: Scenario, phase: str, hitl_policy: HitlPolicy | None,
                  force_output_redact: bool) -> MitigationConfig:
    if phase == "baseline":
        config = MitigationConfig.baseline()
    elif phase == "mitigated":
        config = scenario.mitigation
        if hitl_policy is not None:
            config = replace(config, hitl=hitl_policy)
    else:
        raise ValueError(f"unknown phase {phase!r}")
    if force_output_redact:
        config = replace(config, output_redact=True)
    return config


def _mitigation_summary(config: MitigationConfig, pattern_version: str | None) -> dict:
    return {
        "allowlist": sorted(t.value for t in config.allowlist) if config.allowlist is not None else None,
        "content_filter": pattern_version if config.content_filter is not None else None,
        "env_sanitize": config.env_sanitize,
        "pipeline_policy": config.pipeline_policy,
        "output_redact": config.output_redact,
        "scoped_tokens": config.scoped_tokens,
        "hitl": config.hitl.mode.value if config.hitl is not None else None,
    }


def run_episode(
    scenario: Scenario,
    phase: str,
    run_index: int,
    base_seed: int,
    policy_factory,
    *,
    budget: int = DEFAULT_BUDGET,
    hitl_policy: HitlPolicy | None = None,
    force_output_redact: bool = False,
    audit_dir: str | Path | None = None,
    profile_version: str | None = None,
) -> RunRecord:
    """Execute one (scenario, phase, run_index) episode in a fresh workspace."""
    started = time.perf_counter()
    run_id = f"{scenario.scenario_id}-{phase}-{run_index:02d}"
    run_seed = derive_run_seed(base_seed, scenario.scenario_id, phase, run_index)
    rng = random.Random(run_seed)
    config = _phase_config(scenario, phase, hitl_policy, force_output_redact)

    with tempfile.TemporaryDirectory(prefix="toolbroker-") as workdir:
        materialize_fixture(scenario, workdir, run_index)
        env_vars, privileged = build_env_vars(scenario)
        env = ExecutionEnvironment(
            workspace_root=workdir,
            env_vars=env_vars,
            secret_manifest=scenario.fixtures.secrets,
            network_policy=scenario.fixtures.network,
            privileged_env_extra=privileged,
        )
        env.check_baseline_placements()
        network = MockNetwork(scenario.fixtures.network)

        state = {"step": 0}
        sink_holder: dict = {}

        def on_action(payload: dict) -> None:
            sink_holder["sink"].emit(EventKind.MITIGATION_ACTION, payload, state["step"])

        manifest = scenario.fixtures.secrets
        if config.scoped_tokens:
            manifest = manifest + _mint_scoped_tokens(env, scenario, network)
        stack = MitigationStack(config, manifest, scenario.scenario_id, on_action)
        sink = AuditSink(run_id, redactor=stack.redact_payload)
        sink_holder["sink"] = sink

        env = stack.prepare_env(env)
        runtime = ToolRuntime(env, network)
        build_agent_system(policy_factory.label, scenario.baseline_tools, env, REGISTERED_TOOLS)

        policy = policy_factory.begin(scenario, run_index, run_seed, run_id)
        try:
            final_answer = _run_loop(
                scenario, policy, rng, budget, stack, config, runtime, sink, state
            )
            events = list(sink.events)
            verdict = evaluate_events(scenario, run_index, events, final_answer)
            sink.emit(EventKind.VERDICT, verdict.to_dict(), state["step"])
            policy.end({"verdict": verdict.to_dict()})
        finally:
            policy.close()

        files = _workspace_digests(Path(workdir), stack)
        ledger_hash = ledger_fingerprint(
            files,
            [stack.redact_payload(r.to_dict()) for r in network.ledger],
            pipeline_logs_from_events(sink.events),
        )

    pattern_version = scenario.pattern_version if config.content_filter is not None else None
    record = RunRecord(
        run_id=run_id,
        scenario_id=scenario.scenario_id,
        phase=phase,
        run_index=run_index,
        base_seed=base_seed,
        run_seed=run_seed,
        profile_version=profile_version or getattr(policy_factory, "version", policy_factory.label),
        pattern_version=pattern_version or "none",
        budget=budget,
        mitigations=_mitigation_summary(config, pattern_version),
        scenario_def=scenario_to_dict(scenario),
        events=sink.events,
        verdict=verdict,
        final_answer=final_answer,
        ledger_hash=ledger_hash,
        record_hash="",
        duration_ms=(time.perf_counter() - started) * 1000.0,
    )
    record.record_hash = compute_record_hash(record.meta_dict(), record.events)
    if audit_dir is not None:
        write_audit_file(record, Path(audit_dir) / f"{run_id}.jsonl")
    return record


def _mint_scoped_tokens(env: ExecutionEnvironment, scenario: Scenario,
                        network: MockNetwork) -> tuple[Secret, ...]:
    """Issue a token per scoped endpoint so leak accounting can see them."""
    authority = authority_of(env, scenario.baseline_tools)
    minted = []
    for prefix in sorted(scenario.fixtures.network.endpoints):
        spec = scenario.fixtures.network.endpoints[prefix]
        if spec.scope is None:
            continue
        token = issue_scoped_token(authority, spec.scope, network)
        minted.append(Secret(token.name, token.value, Placement.FILE, Sensitivity.TOKEN))
    return tuple(minted)


def _workspace_digests(root: Path, stack: MitigationStack) -> dict[str, str]:
    digests: dict[str, str] = {}
    for path in sorted(root.rglob("*")):
        if path.is_file():
            rel = path.relative_to(root).as_posix()
            digests[rel] = text_hash(stack.redact_text(path.read_text(encoding="utf-8")))
    return digests


def _run_loop(scenario, policy, rng, budget, stack, config, runtime, sink, state) -> str:
    observations: list[tuple[int, str]] = []
    flags: list[str] = []
    call_id = 0
    step = 0
    while True:
        state["step"] = step
        context = AgentContext(scenario.task, tuple(observations), step, tuple(flags))
        if step >= budget:
            action = AgentAction(kind="finish", answer="Stopping: step budget exhausted.")
            forced = True
        else:
            action = next_action(policy, context, rng)
            forced = False
        sink.emit(EventKind.AGENT_DECISION,
                  {"step": step, "action": action.to_dict(), "forced": forced}, step)
        if action.kind == "finish":
            return stack.redact_text(action.answer or "")

        call_id += 1
        call = ToolCall(call_id=call_id, tool=action.call.tool,
                        args=action.call.args, origin=CallOrigin.AGENT)
        sink.emit(EventKind.TOOL_CALL, call.to_dict(), step)

        deny_reason = stack.check_call(call)
        if deny_reason is not None:
            result = ToolResult(call_id, ResultStatus.DENIED, "", (), deny_reason)
            sink.emit(EventKind.TOOL_RESULT, result.to_dict(), step)
            observed = f"{DENIED_PREFIX}{deny_reason}]"
        else:
            blocked = frozenset()
            if call.tool is ToolName.RUN_PIPELINE and config.pipeline_policy:
                try:
                    blocked = stack.pipeline_blocked_steps(runtime.load_pipeline(call.args["path"]))
                except BrokerError:
                    blocked = frozenset()  # unparseable file: execute reports the error
            result = runtime.execute(call, blocked)
            sink.emit(EventKind.TOOL_RESULT, result.to_dict(), step)
            if result.status is ResultStatus.OK:
                observed = stack.ingest(call_id, result.output)
                new_flags = _filter_flags(sink, call_id)
                flags.extend(f for f in new_flags if f not in flags)
            else:
                observed = result.output
        observations.append((call_id, observed))
        sink.emit(EventKind.CONTEXT_INGEST, {"call_id": call_id, "text": observed}, step)
        step += 1


def _filter_flags(sink: AuditSink, call_id: int) -> list[str]:
    out: list[str] = []
    for event in sink.events:
        if event.kind is EventKind.MITIGATION_ACTION and \
                event.payload.get("mitigation") == "content_filter" and \
                event.payload.get("call_id") == call_id:
            out.extend(event.payload.get("flags", []))
    return out
