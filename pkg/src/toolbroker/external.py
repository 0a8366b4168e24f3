"""External agent policies speaking the wire protocol over stdio.

One child process per episode. Messages are newline-delimited JSON:

    broker -> agent: {"type": "step", "run_id", "task", "tools", "observations", "step"}
    agent -> broker: {"type": "action", "kind": "tool_call"|"finish", "tool"?, "args"?, "answer"?}
    broker -> agent: {"type": "end", "verdict": {...}}

A malformed or out-of-order reply is a ProtocolError; the broker never
retries a malformed reply.
"""

from __future__ import annotations

import json
import random
import shlex
import subprocess

from .errors import ProtocolError
from .model import ToolCall, ToolName
from .runtime import TOOL_ARG_SCHEMAS
from .scenarios import Scenario


def tool_schemas(tools) -> list[dict]:
    return [
        {"name": tool.value, "args": dict(TOOL_ARG_SCHEMAS[tool])}
        for tool in sorted(tools, key=lambda t: t.value)
    ]


class ExternalEpisodePolicy:
    def __init__(self, command: str, scenario: Scenario, run_id: str):
        self.scenario = scenario
        self.run_id = run_id
        self.proc = subprocess.Popen(
            shlex.split(command),
            stdin=subprocess.PIPE,
            stdout=subprocess.PIPE,
            text=True,
            bufsize=1,
        )

    def _send(self, message: dict) -> None:
        if self.proc.stdin is None or self.proc.poll() is not None:
            raise ProtocolError("external agent process is gone")
        self.proc.stdin.write(json.dumps(message, sort_keys=True) + "\n")
        self.proc.stdin.flush()

    def _recv(self) -> dict:
        if self.proc.stdout is None:
            raise ProtocolError("external agent has no stdout")
        line = self.proc.stdout.readline()
        if not line:
            raise ProtocolError("external agent closed its stream mid-episode")
        try:
            message = json.loads(line)
        except json.JSONDecodeError as exc:
            raise ProtocolError(f"malformed reply: {exc}") from exc
        if not isinstance(message, dict) or message.get("type") != "action":
            raise ProtocolError(f"expected an action message, got: {line.strip()[:200]}")
        return message

    def next_action(self, context, rng: random.Random):
        from .agent import AgentAction  # local import avoids a module cycle

        self._send({
            "type": "step",
            "run_id": self.run_id,
            "task": context.task,
            "tools": tool_schemas(self.scenario.baseline_tools),
            "observations": [[cid, text] for cid, text in context.observations],
            "step": context.step,
        })
        reply = self._recv()
        kind = reply.get("kind")
        if kind == "finish":
            answer = reply.get("answer")
            if not isinstance(answer, str):
                raise ProtocolError("finish action needs a string answer")
            return AgentAction(kind="finish", answer=answer)
        if kind == "tool_call":
            try:
                tool = ToolName(reply.get("tool"))
            except ValueError as exc:
                raise ProtocolError(f"unknown tool {reply.get('tool')!r}") from exc
            args = reply.get("args")
            if not isinstance(args, dict):
                raise ProtocolError("tool_call action needs an args object")
            return AgentAction(kind="tool_call", call=ToolCall(0, tool, args))
        raise ProtocolError(f"unknown action kind {kind!r}")

    def end(self, verdict_summary: dict) -> None:
        try:
            self._send({"type": "end", **verdict_summary})
        except ProtocolError:
            pass  # the episode is already complete; a dead adapter is a no-op here

    def close(self) -> None:
        if self.proc.stdin is not None:
            try:
                self.proc.stdin.close()
            except OSError:
                pass
        try:
            self.proc.wait(timeout=5)
        except subprocess.TimeoutExpired:
            self.proc.kill()
            self.proc.wait(timeout=5)


class ExternalAgentFactory:
    label = "external"

    def __init__(self, command: str):
        self.command = command
        self.version = f"external:{command}"

    def begin(self, scenario: Scenario, run_index: int, run_seed: int, run_id: str):
        return ExternalEpisodePolicy(self.command, scenario, run_id)
