from __future__ import annotations

import pytest

from toolbroker.agent import ScriptedAgentFactory
from toolbroker.harness import run_suite
from toolbroker.model import ExecutionEnvironment, Secret
from toolbroker.network import MockNetwork, NetworkPolicy
from toolbroker.scenarios import shipped_scenarios


@pytest.fixture(scope="session")
def shipped():
    return shipped_scenarios()


@pytest.fixture(scope="session")
def factory():
    return ScriptedAgentFactory()


@pytest.fixture(scope="session")
def default_suite(tmp_path_factory, factory):
    """One canonical suite execution (10 runs, seed 42) shared by read-only tests."""
    audit_dir = tmp_path_factory.mktemp("audits")
    scenarios = list(shipped_scenarios().values())
    report, records = run_suite(scenarios, 10, 42, factory, audit_dir=audit_dir)
    return report, records, audit_dir


@pytest.fixture
def workspace(tmp_path):
    root = tmp_path / "ws"
    root.mkdir()
    return root


def make_env(workspace, env_vars=None, secrets=(), network=None, privileged=None):
    return ExecutionEnvironment(
        workspace_root=str(workspace),
        env_vars=dict(env_vars or {}),
        secret_manifest=tuple(secrets),
        network_policy=network or NetworkPolicy(),
        privileged_env_extra=dict(privileged or {}),
    )


def make_network(policy=None):
    return MockNetwork(policy or NetworkPolicy())


def secret(name="SECRET_TOKEN", value="s3cr3t-t0ken", placement="env", sensitivity="token"):
    from toolbroker.model import Placement, Sensitivity

    return Secret(name, value, Placement(placement), Sensitivity(sensitivity))
