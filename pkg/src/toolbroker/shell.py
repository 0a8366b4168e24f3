"""Deterministic mock shell over a closed grammar.

Grammar (documented in README):

    script   := command ("&&" command)*
    command  := "cat" path
              | "echo" word*
              | "env"
              | "export" NAME "=" value
              | "cp" path path
              | "send" url word*

Words undergo `$VAR` expansion against the session environment (the ambient
env_vars plus any `export`s made earlier in the same script). `env` prints
`NAME=value` lines sorted by name. Execution stops at the first failing
command, like `&&` chains in a real shell; side effects of earlier commands
stand. This is an interpreter, not an OS shell: it preserves exactly the
semantics the risk scenarios need (env inheritance, file access, egress)
while staying deterministic and safe.
"""

from __future__ import annotations

import re
from pathlib import Path

from .canonical import text_hash
from .confinement import resolve_workspace_path
from .errors import NotFound, ParseError
from .model import SideEffect, SideEffectKind
from .network import MockNetwork

_VAR_RE = re.compile(r"\$([A-Za-z_][A-Za-z0-9_]*)")
_NAME_RE = re.compile(r"^[A-Za-z_][A-Za-z0-9_]*$")


def expand_vars(word: str, env: dict[str, str]) -> str:
    return _VAR_RE.sub(lambda m: env.get(m.group(1), ""), word)


class MockShell:
    """One shell session per tool call, sharing the run's network ledger."""

    def __init__(self, workspace: str | Path, env_vars: dict[str, str], network: MockNetwork):
        self.workspace = Path(workspace)
        self.session_env = dict(env_vars)
        self.network = network

    def run(self, script: str, origin: str = "agent") -> tuple[str, list[SideEffect]]:
        if not script.strip():
            raise ParseError("empty command")
        output_parts: list[str] = []
        effects: list[SideEffect] = []
        for command in script.split("&&"):
            out = self._run_one(command.strip(), effects, origin)
            output_parts.append(out)
        return "".join(output_parts), effects

    def _run_one(self, command: str, effects: list[SideEffect], origin: str) -> str:
        if not command:
            raise ParseError("empty command in sequence")
        tokens = command.split()
        name, args = tokens[0], tokens[1:]
        if name == "cat":
            if len(args) != 1:
                raise ParseError("cat takes exactly one path")
            return self._read(args[0])
        if name == "echo":
            return " ".join(expand_vars(a, self.session_env) for a in args) + "\n"
        if name == "env":
            if args:
                raise ParseError("env takes no arguments")
            return "".join(f"{k}={v}\n" for k, v in sorted(self.session_env.items()))
        if name == "export":
            if len(args) != 1 or "=" not in args[0]:
                raise ParseError("export takes NAME=value")
            key, _, value = args[0].partition("=")
            if not _NAME_RE.match(key):
                raise ParseError(f"bad export name: {key!r}")
            value = expand_vars(value, self.session_env)
            self.session_env[key] = value
            effects.append(SideEffect(SideEffectKind.ENV_EXPORTED, {"name": key, "value": value}))
            return ""
        if name == "cp":
            if len(args) != 2:
                raise ParseError("cp takes source and destination")
            return self._copy(args[0], args[1], effects)
        if name == "send":
            if not args:
                raise ParseError("send takes a url and optional body words")
            url = expand_vars(args[0], self.session_env)
            body = " ".join(expand_vars(a, self.session_env) for a in args[1:])
            status, resp = self.network.request("POST", url, body, origin=origin)
            effects.append(SideEffect(
                SideEffectKind.NETWORK_REQUEST,
                {"url": url, "method": "POST", "body": body, "origin": origin},
            ))
            return f"{status} {resp}\n"
        raise ParseError(f"unknown command: {name!r}")

    def _read(self, candidate: str) -> str:
        path = resolve_workspace_path(self.workspace, expand_vars(candidate, self.session_env))
        if not path.is_file():
            raise NotFound(f"not found: {candidate}")
        return path.read_text(encoding="utf-8")

    def _copy(self, src: str, dst: str, effects: list[SideEffect]) -> str:
        src_rel = expand_vars(src, self.session_env)
        dst_rel = expand_vars(dst, self.session_env)
        src_path = resolve_workspace_path(self.workspace, src_rel)
        dst_path = resolve_workspace_path(self.workspace, dst_rel)
        if not src_path.is_file():
            raise NotFound(f"not found: {src_rel}")
        content = src_path.read_text(encoding="utf-8")
        dst_path.parent.mkdir(parents=True, exist_ok=True)
        dst_path.write_text(content, encoding="utf-8")
        effects.append(SideEffect(
            SideEffectKind.FILE_WRITTEN,
            {"path": dst_rel, "content_hash": text_hash(content), "content": content,
             "src": src_rel},
        ))
        return ""
