"""Tool runtime: the five tools executed inside one confined workspace.

One runtime instance per run. Calls reaching `execute` have already passed
the mitigation stack; the runtime itself only enforces mechanics (path
confinement, network policy, argument schemas) and reports what happened as
ToolResults with side effects.
"""

from __future__ import annotations

from pathlib import Path

from .canonical import text_hash
from .confinement import resolve_workspace_path
from .errors import BrokerError, ConfinementError, NetworkDenied, NotFound, ParseError, PipelineParseError
from .model import (
    ExecutionEnvironment,
    ResultStatus,
    SideEffect,
    SideEffectKind,
    ToolCall,
    ToolName,
    ToolResult,
)
from .network import MockNetwork
from .pipeline import parse_pipeline, run_pipeline_steps
from .shell import MockShell

TOOL_ARG_SCHEMAS: dict[ToolName, dict[str, str]] = {
    ToolName.READ_FILE: {"path": "string"},
    ToolName.WRITE_FILE: {"path": "string", "content": "string"},
    ToolName.SHELL_EXEC: {"command": "string"},
    ToolName.HTTP_REQUEST: {"method": "string", "url": "string", "body": "string"},
    ToolName.RUN_PIPELINE: {"path": "string"},
}

REGISTERED_TOOLS = frozenset(TOOL_ARG_SCHEMAS)


def validate_args(tool: ToolName, args: dict) -> str | None:
    """Schema check for a tool's argument record; returns an error string or None."""
    schema = TOOL_ARG_SCHEMAS[tool]
    missing = [k for k in schema if k not in args]
    if missing:
        return f"missing args: {missing}"
    extra = [k for k in args if k not in schema]
    if extra:
        return f"unknown args: {extra}"
    bad = [k for k, v in args.items() if not isinstance(v, str)]
    if bad:
        return f"non-string args: {bad}"
    return None


class ToolRuntime:
    def __init__(self, env: ExecutionEnvironment, network: MockNetwork):
        self.env = env
        self.network = network
        self.workspace = Path(env.workspace_root)

    def execute(self, call: ToolCall, pipeline_blocked: frozenset[str] = frozenset()) -> ToolResult:
        bad = validate_args(call.tool, call.args)
        if bad is not None:
            return ToolResult(call.call_id, ResultStatus.ERROR, f"invalid args: {bad}")
        try:
            if call.tool is ToolName.READ_FILE:
                return self._read_file(call)
            if call.tool is ToolName.WRITE_FILE:
                return self._write_file(call)
            if call.tool is ToolName.SHELL_EXEC:
                return self._shell_exec(call)
            if call.tool is ToolName.HTTP_REQUEST:
                return self._http_request(call)
            if call.tool is ToolName.RUN_PIPELINE:
                return self._run_pipeline(call, pipeline_blocked)
        except (ConfinementError, NotFound, ParseError, NetworkDenied, PipelineParseError) as exc:
            return ToolResult(call.call_id, ResultStatus.ERROR, f"{type(exc).__name__}: {exc}")
        except BrokerError as exc:
            return ToolResult(call.call_id, ResultStatus.ERROR, f"{type(exc).__name__}: {exc}")
        raise ValueError(f"no runtime for tool {call.tool}")

    def _read_file(self, call: ToolCall) -> ToolResult:
        path = resolve_workspace_path(self.workspace, call.args["path"])
        if not path.is_file():
            raise NotFound(f"not found: {call.args['path']}")
        return ToolResult(call.call_id, ResultStatus.OK, path.read_text(encoding="utf-8"))

    def _write_file(self, call: ToolCall) -> ToolResult:
        rel = call.args["path"]
        content = call.args["content"]
        path = resolve_workspace_path(self.workspace, rel)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(content, encoding="utf-8")
        effect = SideEffect(
            SideEffectKind.FILE_WRITTEN,
            {"path": rel, "content_hash": text_hash(content), "content": content,
             "origin": call.origin.value},
        )
        return ToolResult(call.call_id, ResultStatus.OK, f"wrote {rel}", (effect,))

    def _shell_exec(self, call: ToolCall) -> ToolResult:
        shell = MockShell(self.workspace, self.env.env_vars, self.network)
        output, effects = shell.run(call.args["command"], origin=call.origin.value)
        return ToolResult(call.call_id, ResultStatus.OK, output, tuple(effects))

    def _http_request(self, call: ToolCall) -> ToolResult:
        method = call.args["method"].upper()
        url = call.args["url"]
        body = call.args["body"]
        status, response = self.network.request(method, url, body, origin=call.origin.value)
        effect = SideEffect(
            SideEffectKind.NETWORK_REQUEST,
            {"url": url, "method": method, "body": body, "origin": call.origin.value},
        )
        output = response if status < 400 else f"http {status}: {response}"
        return ToolResult(call.call_id, ResultStatus.OK, output, (effect,))

    def _run_pipeline(self, call: ToolCall, blocked: frozenset[str]) -> ToolResult:
        path = resolve_workspace_path(self.workspace, call.args["path"])
        if not path.is_file():
            raise NotFound(f"not found: {call.args['path']}")
        pipeline = parse_pipeline(path.read_text(encoding="utf-8"))
        child_env = {**self.env.env_vars, **self.env.privileged_env_extra}
        log, step_effects, executed = run_pipeline_steps(
            pipeline, child_env, self.workspace, self.network, blocked
        )
        effects = [SideEffect(
            SideEffectKind.PIPELINE_TRIGGERED,
            {"pipeline_id": pipeline.pipeline_id, "steps_executed": executed},
        )]
        effects.extend(step_effects)
        return ToolResult(call.call_id, ResultStatus.OK, log, tuple(effects))

    def load_pipeline(self, rel_path: str):
        """Parse a workspace pipeline file (for pre-execution policy checks)."""
        path = resolve_workspace_path(self.workspace, rel_path)
        if not path.is_file():
            raise NotFound(f"not found: {rel_path}")
        return parse_pipeline(path.read_text(encoding="utf-8"))
