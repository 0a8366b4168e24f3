import os
import random

import pytest

from toolbroker.confinement import resolve_workspace_path
from toolbroker.errors import ConfinementError


def test_plain_join(workspace):
    resolved = resolve_workspace_path(workspace, "notes.txt")
    assert resolved == workspace.resolve() / "notes.txt"


def test_dotdot_escape_rejected(workspace):
    with pytest.raises(ConfinementError):
        resolve_workspace_path(workspace, "../etc/hosts")


def test_absolute_rejected(workspace):
    with pytest.raises(ConfinementError):
        resolve_workspace_path(workspace, "/etc/hosts")


def test_symlink_escape_rejected(tmp_path):
    outside = tmp_path / "outside"
    outside.mkdir()
    ws = tmp_path / "ws"
    ws.mkdir()
    (ws / "link").symlink_to(outside)
    with pytest.raises(ConfinementError):
        resolve_workspace_path(ws, "link/esc.txt")
    # Independent canonicalization confirms the candidate would have escaped.
    leaked = os.path.realpath(ws / "link" / "esc.txt")
    assert not leaked.startswith(str(ws.resolve()) + os.sep)


def test_internal_symlink_allowed(tmp_path):
    ws = tmp_path / "ws"
    (ws / "sub").mkdir(parents=True)
    (ws / "inlink").symlink_to(ws / "sub")
    resolved = resolve_workspace_path(ws, "inlink/file.txt")
    assert str(resolved).startswith(str(ws.resolve()))


def test_dotdot_inside_workspace_allowed(workspace):
    (workspace / "a").mkdir()
    resolved = resolve_workspace_path(workspace, "a/../notes.txt")
    assert resolved == workspace.resolve() / "notes.txt"


def test_confinement_fuzz_smoke(tmp_path):
    # The full 1000-candidate fuzz lives in the acceptance suite.
    outside = tmp_path / "outside"
    outside.mkdir()
    ws = tmp_path / "ws"
    (ws / "sub").mkdir(parents=True)
    (ws / "link").symlink_to(outside)
    rng = random.Random(99)
    segments = ["..", "sub", "link", "notes.txt", ".", "x"]
    root_real = str(ws.resolve())
    for _ in range(100):
        candidate = "/".join(rng.choice(segments) for _ in range(rng.randint(1, 5)))
        if rng.random() < 0.2:
            candidate = "/" + candidate
        try:
            resolved = resolve_workspace_path(ws, candidate)
        except ConfinementError:
            continue
        real = os.path.realpath(resolved)
        assert real == root_real or real.startswith(root_real + os.sep)
