import json
import subprocess
import sys
from importlib import resources
from pathlib import Path

import pytest

from toolbroker.harness import strip_wallclock

STUB = Path(__file__).parent / "stub_agent.py"


def cli(*args, cwd=None):
    return subprocess.run(
        [sys.executable, "-m", "toolbroker.cli", *args],
        capture_output=True, text=True, cwd=cwd,
    )


def shipped_path(name):
    return str(resources.files("toolbroker").joinpath(f"scenarios/{name}.json"))


def expectations_path():
    return str(resources.files("toolbroker").joinpath("expectations/default.json"))


def test_run_single_cell(tmp_path):
    result = cli("run", "--scenario", "s3_ambient_authority", "--phase", "mitigated",
                 "--runs", "1", "--seed", "42", "--out", str(tmp_path / "out"))
    assert result.returncode == 0, result.stderr
    assert "0.0%" in result.stdout
    assert (tmp_path / "out" / "report.json").exists()
    assert (tmp_path / "out" / "report.txt").exists()
    audits = list((tmp_path / "out" / "audits").glob("*.jsonl"))
    assert len(audits) == 1


def test_run_unknown_scenario_is_usage_error(tmp_path):
    result = cli("run", "--scenario", "nope", "--out", str(tmp_path / "out"))
    assert result.returncode == 2
    assert "s1_capability_mismatch" in result.stderr  # lists valid ids


def test_run_full_suite_with_check(tmp_path):
    result = cli("run", "--scenario", "all", "--phase", "both", "--runs", "10",
                 "--seed", "42", "--out", str(tmp_path / "out"),
                 "--check", expectations_path())
    assert result.returncode == 0, result.stderr
    assert "check passed" in result.stdout
    report = json.loads((tmp_path / "out" / "report.json").read_text())
    assert report["partial"] is False
    assert len(report["cells"]) == 8


def test_run_check_violation_sets_exit_code(tmp_path):
    bad = tmp_path / "expect.json"
    bad.write_text(json.dumps({"cells": [
        {"scenario_id": "s3_ambient_authority", "phase": "baseline", "unsafe_rate": 0.0},
    ]}))
    result = cli("run", "--scenario", "s3_ambient_authority", "--runs", "2",
                 "--out", str(tmp_path / "out"), "--check", str(bad))
    assert result.returncode == 1
    assert "check failed" in result.stderr


def test_cli_reports_are_deterministic(tmp_path):
    out1, out2 = tmp_path / "a", tmp_path / "b"
    for out in (out1, out2):
        result = cli("run", "--scenario", "s2_prompt_injection", "--runs", "4",
                     "--seed", "7", "--out", str(out))
        assert result.returncode == 0
    r1 = json.loads((out1 / "report.json").read_text())
    r2 = json.loads((out2 / "report.json").read_text())
    assert strip_wallclock(r1) == strip_wallclock(r2)


def test_report_command_matches_run_output(tmp_path):
    out = tmp_path / "out"
    run_result = cli("run", "--scenario", "all", "--runs", "2", "--out", str(out))
    assert run_result.returncode == 0
    table = (out / "report.txt").read_text()
    report_result = cli("report", str(out / "report.json"))
    assert report_result.returncode == 0
    assert report_result.stdout == table


def test_report_command_rejects_corrupt_file(tmp_path):
    bad = tmp_path / "report.json"
    bad.write_text("{not json")
    result = cli("report", str(bad))
    assert result.returncode == 1


def test_replay_command(tmp_path):
    out = tmp_path / "out"
    cli("run", "--scenario", "s4_composition", "--phase", "baseline", "--runs", "1",
        "--out", str(out))
    audit = next((out / "audits").glob("*.jsonl"))
    result = cli("replay", str(audit))
    assert result.returncode == 0
    assert "verdict match:  True" in result.stdout


def test_replay_command_truncated_log(tmp_path):
    out = tmp_path / "out"
    cli("run", "--scenario", "s4_composition", "--phase", "baseline", "--runs", "1",
        "--out", str(out))
    audit = next((out / "audits").glob("*.jsonl"))
    lines = audit.read_text().splitlines()
    truncated = tmp_path / "t.jsonl"
    truncated.write_text("\n".join(lines[:-1]))
    result = cli("replay", str(truncated))
    assert result.returncode == 1


def test_validate_shipped_scenario():
    result = cli("validate", shipped_path("s1_capability_mismatch"))
    assert result.returncode == 0
    assert "ok: s1_capability_mismatch" in result.stdout


def test_validate_unknown_field_names_it(tmp_path):
    definition = json.loads(Path(shipped_path("s1_capability_mismatch")).read_text())
    definition["surprise"] = 1
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps(definition))
    result = cli("validate", str(bad))
    assert result.returncode == 1
    assert "surprise" in result.stderr


def test_validate_canonical_roundtrip(tmp_path):
    result = cli("validate", shipped_path("s2_prompt_injection"), "--canonical")
    assert result.returncode == 0
    canonical_line = result.stdout.splitlines()[-1]
    parsed = json.loads(canonical_line)
    assert parsed["scenario_id"] == "s2_prompt_injection"
    # Canonical output revalidates and re-serializes to itself.
    again = tmp_path / "canon.json"
    again.write_text(canonical_line)
    second = cli("validate", str(again), "--canonical")
    assert second.stdout.splitlines()[-1] == canonical_line


def test_interactive_hitl_requires_tty(tmp_path):
    result = cli("run", "--scenario", "s3_ambient_authority", "--runs", "1",
                 "--hitl", "interactive", "--out", str(tmp_path / "out"))
    assert result.returncode == 2
    assert "terminal" in result.stderr


def test_interactive_hitl_requires_single_worker(tmp_path, monkeypatch):
    # Even with a pty the workers check happens; simulate by policy: workers>1
    # without tty still errors on the tty check first, so assert the message
    # for the non-tty path and the workers path via direct main() invocation.
    from toolbroker import cli as cli_mod

    monkeypatch.setattr(sys.stdin, "isatty", lambda: True)
    with pytest.raises(SystemExit) as err:
        cli_mod.main(["run", "--scenario", "s3_ambient_authority", "--runs", "1",
                      "--hitl", "interactive", "--workers", "2",
                      "--out", str(tmp_path / "out")])
    assert err.value.code == 2


def test_hitl_policy_file_mode(tmp_path):
    decisions = tmp_path / "decisions.json"
    decisions.write_text(json.dumps({
        "privileged_tools": ["shell_exec", "run_pipeline"],
        "decisions": [
            {"scenario": "*", "tool": "shell_exec", "decision": "deny"},
            {"scenario": "*", "tool": "run_pipeline", "decision": "deny"},
        ],
    }))
    out = tmp_path / "out"
    result = cli("run", "--scenario", "s4_composition", "--phase", "mitigated",
                 "--runs", "1", "--hitl", "policy", str(decisions), "--out", str(out))
    assert result.returncode == 0
    # HITL denied the pipeline: the task cannot succeed, and nothing ran.
    report = json.loads((out / "report.json").read_text())
    cell = report["cells"][0]
    assert cell["success_rate"] == 0.0
    assert cell["unsafe_rate"] == 0.0
    assert cell["denial_count"] == 1


def test_hitl_policy_file_bare_list_form(tmp_path):
    decisions = tmp_path / "decisions.json"
    decisions.write_text(json.dumps([
        {"scenario": "*", "tool": "run_pipeline", "decision": "deny"},
    ]))
    out = tmp_path / "out"
    result = cli("run", "--scenario", "s4_composition", "--phase", "mitigated",
                 "--runs", "1", "--hitl", "policy", str(decisions), "--out", str(out))
    assert result.returncode == 0
    report = json.loads((out / "report.json").read_text())
    assert report["cells"][0]["denial_count"] == 1


def test_external_agent_flag(tmp_path):
    out = tmp_path / "out"
    result = cli("run", "--scenario", "s3_ambient_authority", "--phase", "baseline",
                 "--runs", "2", "--agent", "external", f"{sys.executable} {STUB} s3",
                 "--out", str(out))
    assert result.returncode == 0, result.stderr
    assert "100.0%" in result.stdout  # baseline env dump is unsafe in both runs
