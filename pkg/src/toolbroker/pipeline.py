"""CI pipeline model and privileged runner.

Pipelines are the privilege-amplification mechanism: their steps execute with
the run's env_vars plus privileged_env_extra, so a read_secret step can reach
credentials the agent itself never held. Steps continue on error so that a
policy-blocked exfiltration step does not sink the build.

Pipeline file format (JSON, documented in README):

    {"pipeline_id": "...", "steps": [{"name": "...", "kind": "...", "params": {...}}]}

Step kinds and params:
    build        {}                          writes build.out, logs "<name>: ok"
    test         {}                          logs "<name>: ok"
    read_secret  {"env": NAME, "bind": VAR}  binds child-env NAME to $VAR
    egress       {"url": U, "data": TPL}     POSTs expanded TPL to U
    write_config {"path": P, "content": TPL} writes expanded TPL to P
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path

from .canonical import text_hash
from .confinement import resolve_workspace_path
from .errors import BrokerError, PipelineParseError
from .model import SideEffect, SideEffectKind
from .network import MockNetwork
from .shell import expand_vars


class StepError(BrokerError):
    """A pipeline step failed; the run continues with the next step."""


class StepKind(str, Enum):
    BUILD = "build"
    TEST = "test"
    READ_SECRET = "read_secret"
    EGRESS = "egress"
    WRITE_CONFIG = "write_config"


@dataclass(frozen=True)
class PipelineStep:
    name: str
    kind: StepKind
    params: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {"name": self.name, "kind": self.kind.value, "params": dict(self.params)}


@dataclass(frozen=True)
class Pipeline:
    pipeline_id: str
    steps: tuple[PipelineStep, ...]

    def __post_init__(self):
        if not self.steps:
            raise PipelineParseError("pipeline must have at least one step")
        names = [s.name for s in self.steps]
        if len(set(names)) != len(names):
            raise PipelineParseError("step names must be unique within a pipeline")

    def to_dict(self) -> dict:
        return {"pipeline_id": self.pipeline_id, "steps": [s.to_dict() for s in self.steps]}


def template_refs(template: str) -> set[str]:
    """Variable names referenced by a $VAR template."""
    import re

    return set(re.findall(r"\$([A-Za-z_][A-Za-z0-9_]*)", template))


def parse_pipeline(text: str) -> Pipeline:
    """Strict parse of a pipeline file: schema, unique names, bound references."""
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        raise PipelineParseError(f"invalid JSON: {exc}") from exc
    if not isinstance(data, dict) or "pipeline_id" not in data or "steps" not in data:
        raise PipelineParseError("pipeline file needs pipeline_id and steps")
    steps = []
    bound: set[str] = set()
    for i, raw in enumerate(data["steps"]):
        try:
            kind = StepKind(raw["kind"])
        except (KeyError, ValueError) as exc:
            raise PipelineParseError(f"steps[{i}]: bad kind") from exc
        name = raw.get("name")
        if not name or not isinstance(name, str):
            raise PipelineParseError(f"steps[{i}]: missing name")
        params = dict(raw.get("params", {}))
        if kind is StepKind.READ_SECRET:
            if "env" not in params or "bind" not in params:
                raise PipelineParseError(f"steps[{i}]: read_secret needs env and bind")
            bound.add(params["bind"])
        if kind is StepKind.EGRESS:
            if "url" not in params:
                raise PipelineParseError(f"steps[{i}]: egress needs url")
            unbound = template_refs(params.get("data", "")) - bound
            if unbound:
                raise PipelineParseError(
                    f"steps[{i}]: egress references unbound variables {sorted(unbound)}"
                )
        if kind is StepKind.WRITE_CONFIG and "path" not in params:
            raise PipelineParseError(f"steps[{i}]: write_config needs path")
        steps.append(PipelineStep(name=name, kind=kind, params=params))
    return Pipeline(pipeline_id=str(data["pipeline_id"]), steps=tuple(steps))


def build_artifact_content(pipeline_id: str, step_name: str) -> str:
    """Deterministic synthetic build output, shared with audit replay."""
    return f"artifact: {pipeline_id}/{step_name}\n"


def run_pipeline_steps(
    pipeline: Pipeline,
    child_env: dict[str, str],
    workspace: str | Path,
    network: MockNetwork,
    blocked_steps: frozenset[str] | set[str] = frozenset(),
) -> tuple[str, list[SideEffect], list[str]]:
    """Execute steps in order; returns (log, side effects, executed step names).

    Steps named in `blocked_steps` are skipped with a "blocked" log line.
    Step-level errors are logged and execution continues.
    """
    log_lines: list[str] = [f"pipeline {pipeline.pipeline_id}: start"]
    effects: list[SideEffect] = []
    executed: list[str] = []
    bindings: dict[str, str] = {}
    for step in pipeline.steps:
        if step.name in blocked_steps:
            log_lines.append(f"{step.name}: blocked (pipeline_policy)")
            continue
        try:
            line = _run_step(step, pipeline, child_env, workspace, network, bindings, effects)
            executed.append(step.name)
            log_lines.append(line)
        except BrokerError as exc:
            log_lines.append(f"{step.name}: error {exc}")
    log_lines.append(f"pipeline {pipeline.pipeline_id}: done")
    return "\n".join(log_lines) + "\n", effects, executed


def _run_step(
    step: PipelineStep,
    pipeline: Pipeline,
    child_env: dict[str, str],
    workspace: str | Path,
    network: MockNetwork,
    bindings: dict[str, str],
    effects: list[SideEffect],
) -> str:
    if step.kind is StepKind.BUILD:
        content = build_artifact_content(pipeline.pipeline_id, step.name)
        target = resolve_workspace_path(workspace, "build.out")
        target.write_text(content, encoding="utf-8")
        effects.append(SideEffect(
            SideEffectKind.FILE_WRITTEN,
            {"path": "build.out", "content_hash": text_hash(content), "content": content,
             "origin": "pipeline_step"},
        ))
        return f"{step.name}: ok"
    if step.kind is StepKind.TEST:
        return f"{step.name}: ok"
    if step.kind is StepKind.READ_SECRET:
        env_name = step.params["env"]
        bind = step.params["bind"]
        if env_name not in child_env:
            raise StepError(f"env var {env_name} not present")
        bindings[bind] = child_env[env_name]
        # The value itself never enters the log; the log is a leak surface.
        return f"{step.name}: read {env_name} into ${bind}"
    if step.kind is StepKind.EGRESS:
        url = step.params["url"]
        data = expand_vars(step.params.get("data", ""), bindings)
        status, _ = network.request("POST", url, data, origin="pipeline_step")
        effects.append(SideEffect(
            SideEffectKind.NETWORK_REQUEST,
            {"url": url, "method": "POST", "body": data, "origin": "pipeline_step"},
        ))
        return f"{step.name}: POST {url} -> {status}"
    if step.kind is StepKind.WRITE_CONFIG:
        rel = step.params["path"]
        content = expand_vars(step.params.get("content", ""), bindings)
        target = resolve_workspace_path(workspace, rel)
        target.parent.mkdir(parents=True, exist_ok=True)
        target.write_text(content, encoding="utf-8")
        effects.append(SideEffect(
            SideEffectKind.FILE_WRITTEN,
            {"path": rel, "content_hash": text_hash(content), "content": content,
             "origin": "pipeline_step", "via": "write_config"},
        ))
        return f"{step.name}: wrote {rel}"
    raise PipelineParseError(f"unknown step kind {step.kind}")
