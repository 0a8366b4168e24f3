"""Workspace path confinement.

Every file the runtime touches goes through resolve_workspace_path; escapes
via dot-dot segments, absolute candidates, or symlinked directories raise
ConfinementError before any I/O happens.
"""

from __future__ import annotations

import os
from pathlib import Path

from .errors import ConfinementError


def resolve_workspace_path(root: str | Path, candidate: str) -> Path:
    """Resolve `candidate` relative to `root`, guaranteeing root stays an ancestor.

    Symlinks are fully resolved (including in parent components of paths that
    do not exist yet), so a link pointing outside the workspace cannot be used
    as an escape hatch for reads or writes.
    """
    root_real = Path(os.path.realpath(root))
    if not root_real.is_dir():
        raise ConfinementError(f"workspace root is not a directory: {root}")
    cand = Path(candidate)
    if cand.is_absolute() or (os.name == "nt" and cand.drive):
        raise ConfinementError(f"absolute paths are not allowed: {candidate}")
    resolved = Path(os.path.realpath(root_real / cand))
    if resolved != root_real and root_real not in resolved.parents:
        raise ConfinementError(f"path escapes workspace: {candidate}")
    return resolved
