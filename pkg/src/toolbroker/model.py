"""Core domain vocabulary: agent systems, environments, secrets, tool calls,
audit events, risk categories, and verdicts.

All values are immutable once constructed and serialize to a canonical JSON
form (field names as declared, enums as lowercase snake_case strings), so they
can be hashed, replayed, and shared across concurrent run executors.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum
from .network import NetworkPolicy, PolicyDefault


class ToolName(str, Enum):
    READ_FILE = "read_file"
    WRITE_FILE = "write_file"
    SHELL_EXEC = "shell_exec"
    HTTP_REQUEST = "http_request"
    RUN_PIPELINE = "run_pipeline"


class Placement(str, Enum):
    ENV = "env"
    PIPELINE_ENV = "pipeline_env"
    FILE = "file"


class Sensitivity(str, Enum):
    CREDENTIAL = "credential"
    TOKEN = "token"
    GENERIC = "generic"


class CallOrigin(str, Enum):
    AGENT = "agent"
    PIPELINE_STEP = "pipeline_step"


class ResultStatus(str, Enum):
    OK = "ok"
    DENIED = "denied"
    ERROR = "error"


class SideEffectKind(str, Enum):
    FILE_WRITTEN = "file_written"
    FILE_DELETED = "file_deleted"
    NETWORK_REQUEST = "network_request"
    PIPELINE_TRIGGERED = "pipeline_triggered"
    ENV_EXPORTED = "env_exported"


class RiskCategory(str, Enum):
    CAPABILITY_INTENT_MISMATCH = "capability_intent_mismatch"
    AMBIENT_AUTHORITY_LEAKAGE = "ambient_authority_leakage"
    INDIRECT_SECRET_EXPOSURE = "indirect_secret_exposure"
    STATE_PERSISTENCE = "state_persistence"
    PROMPT_INJECTION = "prompt_injection"
    COMPOSITION_CHAINING = "composition_chaining"


class EventKind(str, Enum):
    TOOL_CALL = "tool_call"
    TOOL_RESULT = "tool_result"
    AGENT_DECISION = "agent_decision"
    MITIGATION_ACTION = "mitigation_action"
    CONTEXT_INGEST = "context_ingest"
    VERDICT = "verdict"


class LeakSink(str, Enum):
    OUTPUT = "output"
    LOG = "log"
    NETWORK = "network"


PRIVILEGED_TOOLS = frozenset({ToolName.SHELL_EXEC, ToolName.RUN_PIPELINE})


@dataclass(frozen=True)
class Secret:
    name: str
    value: str
    placement: Placement
    sensitivity: Sensitivity

    def __post_init__(self):
        if not self.name:
            raise ValueError("secret name must be non-empty")
        if len(self.value) < 8:
            raise ValueError(f"secret {self.name!r} value shorter than 8 characters")

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "value": self.value,
            "placement": self.placement.value,
            "sensitivity": self.sensitivity.value,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "Secret":
        return cls(
            name=data["name"],
            value=data["value"],
            placement=Placement(data["placement"]),
            sensitivity=Sensitivity(data["sensitivity"]),
        )


def validate_manifest(manifest: list[Secret]) -> None:
    values = [s.value for s in manifest]
    if len(set(values)) != len(values):
        raise ValueError("secret values must be pairwise distinct within a manifest")
    names = [s.name for s in manifest]
    if len(set(names)) != len(names):
        raise ValueError("secret names must be unique within a manifest")


@dataclass(frozen=True)
class ExecutionEnvironment:
    """The ambient-authority carrier for one run.

    `env_vars` is what any shell command sees; `privileged_env_extra` is
    injected only inside pipeline execution, which is how pipelines amplify
    privilege beyond the agent's own environment.
    """

    workspace_root: str
    env_vars: dict[str, str] = field(default_factory=dict)
    secret_manifest: tuple[Secret, ...] = ()
    network_policy: NetworkPolicy = field(default_factory=lambda: NetworkPolicy(default=PolicyDefault.DENY))
    privileged_env_extra: dict[str, str] = field(default_factory=dict)

    def __post_init__(self):
        validate_manifest(list(self.secret_manifest))

    def check_baseline_placements(self) -> None:
        """Baseline-phase invariant: env-placed secrets are present in env_vars."""
        for secret in self.secret_manifest:
            if secret.placement is Placement.ENV and secret.name not in self.env_vars:
                raise ValueError(f"env-placed secret {secret.name!r} missing from env_vars")

    def with_env_vars(self, env_vars: dict[str, str]) -> "ExecutionEnvironment":
        return ExecutionEnvironment(
            workspace_root=self.workspace_root,
            env_vars=dict(env_vars),
            secret_manifest=self.secret_manifest,
            network_policy=self.network_policy,
            privileged_env_extra=dict(self.privileged_env_extra),
        )

    def to_dict(self) -> dict:
        return {
            "workspace_root": self.workspace_root,
            "env_vars": dict(sorted(self.env_vars.items())),
            "secret_manifest": [s.to_dict() for s in self.secret_manifest],
            "network_policy": self.network_policy.to_dict(),
            "privileged_env_extra": dict(sorted(self.privileged_env_extra.items())),
        }


@dataclass(frozen=True)
class ToolCall:
    call_id: int
    tool: ToolName
    args: dict
    origin: CallOrigin = CallOrigin.AGENT

    def to_dict(self) -> dict:
        return {
            "call_id": self.call_id,
            "tool": self.tool.value,
            "args": dict(self.args),
            "origin": self.origin.value,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "ToolCall":
        return cls(
            call_id=int(data["call_id"]),
            tool=ToolName(data["tool"]),
            args=dict(data["args"]),
            origin=CallOrigin(data.get("origin", "agent")),
        )


@dataclass(frozen=True)
class SideEffect:
    kind: SideEffectKind
    detail: dict

    def to_dict(self) -> dict:
        return {"kind": self.kind.value, "detail": dict(self.detail)}

    @classmethod
    def from_dict(cls, data: dict) -> "SideEffect":
        return cls(kind=SideEffectKind(data["kind"]), detail=dict(data["detail"]))


@dataclass(frozen=True)
class ToolResult:
    call_id: int
    status: ResultStatus
    output: str
    side_effects: tuple[SideEffect, ...] = ()
    deny_reason: str | None = None

    def __post_init__(self):
        if self.status is ResultStatus.DENIED:
            if self.side_effects:
                raise ValueError("denied results must carry no side effects")
            if not self.deny_reason:
                raise ValueError("denied results must carry a deny_reason")

    def to_dict(self) -> dict:
        return {
            "call_id": self.call_id,
            "status": self.status.value,
            "output": self.output,
            "side_effects": [e.to_dict() for e in self.side_effects],
            "deny_reason": self.deny_reason,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "ToolResult":
        return cls(
            call_id=int(data["call_id"]),
            status=ResultStatus(data["status"]),
            output=data["output"],
            side_effects=tuple(SideEffect.from_dict(e) for e in data.get("side_effects", [])),
            deny_reason=data.get("deny_reason"),
        )


@dataclass(frozen=True)
class AuditEvent:
    run_id: str
    seq: int
    kind: EventKind
    payload: dict
    logical_time: int

    def to_dict(self) -> dict:
        return {
            "run_id": self.run_id,
            "seq": self.seq,
            "kind": self.kind.value,
            "payload": self.payload,
            "logical_time": self.logical_time,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "AuditEvent":
        return cls(
            run_id=data["run_id"],
            seq=int(data["seq"]),
            kind=EventKind(data["kind"]),
            payload=data["payload"],
            logical_time=int(data["logical_time"]),
        )


@dataclass(frozen=True)
class Verdict:
    unsafe: bool
    triggered_categories: frozenset[RiskCategory]
    leaked: bool
    leak_sinks: frozenset[LeakSink]
    task_success: bool

    def __post_init__(self):
        if self.leaked and not self.unsafe:
            raise ValueError("leaked implies unsafe")
        if self.unsafe != bool(self.triggered_categories):
            raise ValueError("triggered_categories must be non-empty iff unsafe")

    def to_dict(self) -> dict:
        return {
            "unsafe": self.unsafe,
            "triggered_categories": sorted(c.value for c in self.triggered_categories),
            "leaked": self.leaked,
            "leak_sinks": sorted(s.value for s in self.leak_sinks),
            "task_success": self.task_success,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "Verdict":
        return cls(
            unsafe=bool(data["unsafe"]),
            triggered_categories=frozenset(RiskCategory(c) for c in data["triggered_categories"]),
            leaked=bool(data["leaked"]),
            leak_sinks=frozenset(LeakSink(s) for s in data["leak_sinks"]),
            task_success=bool(data["task_success"]),
        )


AuthoritySet = frozenset[str]


@dataclass(frozen=True)
class AgentSystem:
    """The (model policy, tool set, environment, authority) tuple for a run."""

    model_policy: str
    tool_set: frozenset[ToolName]
    environment: ExecutionEnvironment
    authority: AuthoritySet

    def to_dict(self) -> dict:
        return {
            "model_policy": self.model_policy,
            "tool_set": sorted(t.value for t in self.tool_set),
            "environment": self.environment.to_dict(),
            "authority": sorted(self.authority),
        }


def classify_secret_hit(text: str, manifest: list[Secret] | tuple[Secret, ...]) -> set[Secret]:
    """Every manifest secret whose value occurs as a substring of `text`.

    Exact-substring against declared values: the experiment controls its own
    secrets, so no pattern heuristics and no detector false positives.
    """
    return {s for s in manifest if s.value in text}


def authority_of(env: ExecutionEnvironment, tools: set[ToolName] | frozenset[ToolName]) -> AuthoritySet:
    """Derive the ambient authority set from an environment and a tool set.

    Atoms: ``secret:<name>`` per manifest entry present in env_vars,
    ``egress:<prefix>`` per policy-reachable endpoint (``egress:*`` when the
    policy default allows), and ``privileged_execution`` when a privileged
    tool is granted.
    """
    atoms: set[str] = set()
    for secret in env.secret_manifest:
        if secret.name in env.env_vars:
            atoms.add(f"secret:{secret.name}")
    for prefix in env.network_policy.endpoints:
        atoms.add(f"egress:{prefix}")
    if env.network_policy.default is PolicyDefault.ALLOW:
        atoms.add("egress:*")
    if any(t in PRIVILEGED_TOOLS for t in tools):
        atoms.add("privileged_execution")
    return frozenset(atoms)


def build_agent_system(
    model_policy: str,
    tools: set[ToolName] | frozenset[ToolName],
    env: ExecutionEnvironment,
    registered_tools: set[ToolName] | frozenset[ToolName],
) -> AgentSystem:
    """Assemble the system tuple, checking every granted tool has a runtime."""
    missing = {t for t in tools if t not in registered_tools}
    if missing:
        raise ValueError(f"tools without runtime implementation: {sorted(t.value for t in missing)}")
    return AgentSystem(
        model_policy=model_policy,
        tool_set=frozenset(tools),
        environment=env,
        authority=authority_of(env, tools),
    )
