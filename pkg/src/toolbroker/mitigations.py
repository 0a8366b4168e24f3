"""Composable mitigation middleware.

Six strategies, each interceptable at a distinct point of the brokered call
path. The published application order is:

    env_sanitize -> allowlist -> hitl -> (execute)
    -> pipeline_policy (pre-exec, run_pipeline only)
    -> content_filter (on context ingest) -> output_redact (on results/logs)

An empty MitigationConfig is the baseline phase: every hook is a no-op.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from enum import Enum
from importlib import resources
from typing import Callable

from .errors import PolicyIncomplete, ScopeExceeded
from .model import (
    AuthoritySet,
    ExecutionEnvironment,
    Placement,
    Secret,
    ToolCall,
    ToolName,
)
from .network import MockNetwork
from .pipeline import Pipeline, StepKind, template_refs


class PatternAction(str, Enum):
    STRIP = "strip"
    BLOCK = "block"


@dataclass(frozen=True)
class InjectionPattern:
    pattern_id: str
    match: str  # case-insensitive literal phrase
    action: PatternAction = PatternAction.STRIP

    def to_dict(self) -> dict:
        return {"pattern_id": self.pattern_id, "match": self.match, "action": self.action.value}

    @classmethod
    def from_dict(cls, data: dict) -> "InjectionPattern":
        return cls(data["pattern_id"], data["match"], PatternAction(data.get("action", "strip")))


class HitlMode(str, Enum):
    INTERACTIVE = "interactive"
    POLICY_FILE = "policy_file"


@dataclass(frozen=True)
class HitlPolicy:
    mode: HitlMode
    privileged_tools: frozenset[ToolName]
    # policy_file mode: (scenario, tool) -> "approve" | "deny"; scenario "*" is
    # a wildcard. Interactive mode ignores `decisions` and prompts instead.
    decisions: dict = field(default_factory=dict)
    prompt: Callable[[str], str] | None = None

    @classmethod
    def from_records(cls, records: list[dict], privileged_tools=None) -> "HitlPolicy":
        decisions = {}
        for rec in records:
            decisions[(rec["scenario"], rec["tool"])] = rec["decision"]
        privileged = frozenset(
            ToolName(t) for t in (privileged_tools or [r["tool"] for r in records])
        )
        return cls(HitlMode.POLICY_FILE, privileged, decisions)


@dataclass(frozen=True)
class MitigationConfig:
    allowlist: frozenset[ToolName] | None = None
    content_filter: tuple[InjectionPattern, ...] | None = None
    env_sanitize: bool = False
    pipeline_policy: bool = False
    output_redact: bool = False
    scoped_tokens: bool = False
    hitl: HitlPolicy | None = None

    def is_empty(self) -> bool:
        return (
            self.allowlist is None
            and self.content_filter is None
            and not self.env_sanitize
            and not self.pipeline_policy
            and not self.output_redact
            and not self.scoped_tokens
            and self.hitl is None
        )

    @classmethod
    def baseline(cls) -> "MitigationConfig":
        return cls()


@dataclass(frozen=True)
class ScopedToken:
    name: str
    value: str
    scope: str


def allowlist_check(call: ToolCall, allowlist: frozenset[ToolName] | set[ToolName]) -> str | None:
    """None to allow; the mitigation id "allowlist" to deny."""
    return None if call.tool in allowlist else "allowlist"


def filter_content(text: str, patterns: list[InjectionPattern] | tuple[InjectionPattern, ...]) -> tuple[str, list[str]]:
    """Strip or block injected instructions at context-ingest time.

    A `strip` match removes the whole line containing the match (partial
    removal would leave the tail of the directive actionable); `block`
    replaces the entire text with a placeholder. Returns the filtered text and
    the ids of every pattern that matched.
    """
    flags: list[str] = []
    lowered = text.lower()
    for pattern in patterns:
        if pattern.match.lower() in lowered and pattern.action is PatternAction.BLOCK:
            flags.append(pattern.pattern_id)
            return f"[content blocked: {pattern.pattern_id}]", flags
    lines = text.splitlines(keepends=True)
    kept: list[str] = []
    for line in lines:
        hit = False
        for pattern in patterns:
            if pattern.action is PatternAction.STRIP and pattern.match.lower() in line.lower():
                if pattern.pattern_id not in flags:
                    flags.append(pattern.pattern_id)
                hit = True
        if not hit:
            kept.append(line)
    if not flags:
        return text, []
    return "".join(kept), flags


def sanitize_env(env: ExecutionEnvironment) -> ExecutionEnvironment:
    """Drop every manifest-named variable (env or pipeline_env placement) from
    env_vars; non-secret keys survive; the input env is left untouched."""
    secret_names = {
        s.name for s in env.secret_manifest
        if s.placement in (Placement.ENV, Placement.PIPELINE_ENV)
    }
    cleaned = {k: v for k, v in env.env_vars.items() if k not in secret_names}
    return env.with_env_vars(cleaned)


def check_pipeline_policy(
    pipeline: Pipeline, secret_names: frozenset[str] | set[str] | tuple[str, ...] = (),
) -> list[tuple[str, str]]:
    """Taint propagation over pipeline variable bindings.

    Returns (step name, rule) violations: an egress step is flagged when its
    data template references a variable tainted (transitively) by a
    read_secret binding, or when its literal data names a manifest secret.
    Empty list means ok. Violating steps are the ones the broker blocks.
    """
    violations: list[tuple[str, str]] = []
    tainted: set[str] = set()
    for step in pipeline.steps:
        if step.kind is StepKind.READ_SECRET:
            tainted.add(step.params["bind"])
        elif step.kind is StepKind.EGRESS:
            data = step.params.get("data", "")
            refs = template_refs(data)
            if refs & tainted:
                violations.append((step.name, "secret_flow_to_egress"))
            elif any(name in data for name in secret_names):
                violations.append((step.name, "secret_name_in_egress_data"))
    return violations


def redact(text: str, manifest: list[Secret] | tuple[Secret, ...]) -> str:
    """Replace every manifest value with "[REDACTED:<name>]"; idempotent."""
    out = text
    for secret in sorted(manifest, key=lambda s: len(s.value), reverse=True):
        out = out.replace(secret.value, f"[REDACTED:{secret.name}]")
    return out


def redact_payload(payload, manifest):
    """Recursively redact every string inside a JSON-shaped payload."""
    if isinstance(payload, str):
        return redact(payload, manifest)
    if isinstance(payload, list):
        return [redact_payload(v, manifest) for v in payload]
    if isinstance(payload, dict):
        return {k: redact_payload(v, manifest) for k, v in payload.items()}
    return payload


def issue_scoped_token(authority: AuthoritySet, scope: str, network: MockNetwork) -> ScopedToken:
    """Mint a token the mock network accepts only for `scope`.

    The scope must name a resource reachable under the given authority
    (an egress atom covering an endpoint declaring that scope). The token is
    registered with the network and must be added to the run's manifest by the
    caller so its leak stays detectable.
    """
    covered = False
    for prefix, spec in network.policy.endpoints.items():
        if spec.scope == scope and (f"egress:{prefix}" in authority or "egress:*" in authority):
            covered = True
            break
    if not covered:
        raise ScopeExceeded(f"scope {scope!r} is not reachable under the given authority")
    digest = hashlib.sha256(f"scoped|{scope}".encode("utf-8")).hexdigest()[:16]
    token = ScopedToken(name=f"SCOPED_TOKEN_{scope.upper().replace('-', '_')}",
                        value=f"scoped-{scope}-{digest}", scope=scope)
    network.register_token(token.value, scope)
    return token


def hitl_gate(call: ToolCall, policy: HitlPolicy, scenario_id: str = "*") -> str:
    """Returns "approve" or "deny" for a privileged call.

    Non-privileged tools bypass the gate entirely (callers must not invoke it
    for them). Interactive mode blocks on the policy's prompt channel;
    policy_file mode must be total over encountered privileged calls.
    """
    if call.tool not in policy.privileged_tools:
        return "approve"
    if policy.mode is HitlMode.INTERACTIVE:
        prompt = policy.prompt
        if prompt is None:
            raise PolicyIncomplete("interactive HITL requires a terminal channel")
        answer = prompt(f"approve {call.tool.value}({json.dumps(call.args, sort_keys=True)})? [y/n] ")
        return "approve" if answer.strip().lower() in ("y", "yes") else "deny"
    for key in ((scenario_id, call.tool.value), ("*", call.tool.value)):
        if key in policy.decisions:
            decision = policy.decisions[key]
            if decision not in ("approve", "deny"):
                raise PolicyIncomplete(f"bad decision {decision!r} for {key}")
            return decision
    raise PolicyIncomplete(f"no HITL decision for ({scenario_id}, {call.tool.value})")


def load_default_patterns() -> tuple[str, tuple[InjectionPattern, ...]]:
    """Shipped pattern set; returns (version, patterns)."""
    raw = resources.files("toolbroker").joinpath("patterns/v1.json").read_text(encoding="utf-8")
    data = json.loads(raw)
    return data["version"], tuple(InjectionPattern.from_dict(p) for p in data["patterns"])


class MitigationStack:
    """Per-run middleware pipeline wired from a MitigationConfig.

    Stateless apart from the HITL channel; one instance per episode. Each hook
    reports what it did through the `actions` callback so the broker can log
    mitigation_action events.
    """

    def __init__(self, config: MitigationConfig, manifest: tuple[Secret, ...],
                 scenario_id: str = "*",
                 on_action: Callable[[dict], None] | None = None):
        self.config = config
        self.manifest = manifest
        self.scenario_id = scenario_id
        self._on_action = on_action or (lambda payload: None)

    def _note(self, payload: dict) -> None:
        self._on_action(payload)

    def prepare_env(self, env: ExecutionEnvironment) -> ExecutionEnvironment:
        if not self.config.env_sanitize:
            return env
        cleaned = sanitize_env(env)
        removed = sorted(set(env.env_vars) - set(cleaned.env_vars))
        self._note({"mitigation": "env_sanitize", "decision": "sanitize", "removed": removed})
        return cleaned

    def check_call(self, call: ToolCall) -> str | None:
        """Returns a deny reason (mitigation id) or None to let the call run."""
        if self.config.allowlist is not None:
            reason = allowlist_check(call, self.config.allowlist)
            if reason is not None:
                self._note({"mitigation": "allowlist", "decision": "deny",
                            "call_id": call.call_id, "tool": call.tool.value})
                return reason
        if self.config.hitl is not None and call.tool in self.config.hitl.privileged_tools:
            decision = hitl_gate(call, self.config.hitl, self.scenario_id)
            self._note({"mitigation": "hitl", "decision": decision,
                        "call_id": call.call_id, "tool": call.tool.value})
            if decision == "deny":
                return "hitl"
        return None

    def pipeline_blocked_steps(self, pipeline: Pipeline) -> frozenset[str]:
        if not self.config.pipeline_policy:
            return frozenset()
        violations = check_pipeline_policy(pipeline, {s.name for s in self.manifest})
        for step_name, rule in violations:
            self._note({"mitigation": "pipeline_policy", "decision": "block",
                        "step": step_name, "rule": rule})
        return frozenset(step for step, _ in violations)

    def ingest(self, call_id: int, text: str) -> str:
        """Context-ingest path: content filter, then output redaction."""
        filtered = text
        if self.config.content_filter is not None:
            filtered, flags = filter_content(text, self.config.content_filter)
            if flags:
                self._note({"mitigation": "content_filter", "decision": "strip",
                            "call_id": call_id, "flags": flags})
        if self.config.output_redact:
            filtered = redact(filtered, self.manifest)
        return filtered

    def redact_text(self, text: str) -> str:
        return redact(text, self.manifest) if self.config.output_redact else text

    def redact_payload(self, payload):
        return redact_payload(payload, self.manifest) if self.config.output_redact else payload
