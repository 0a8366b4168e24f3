"""Recording mock network: policy, endpoints, and the single egress ledger.

Both the `http_request` tool and the shell `send` command route through one
MockNetwork instance per run, so leak accounting has exactly one ledger and
the "network totality" property (every network side effect appears in the
ledger exactly once) holds by construction.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum

from .errors import NetworkDenied, SchemaError


class EndpointKind(str, Enum):
    INTERNAL = "internal"
    ATTACKER = "attacker"
    EXTERNAL = "external"


class PolicyDefault(str, Enum):
    DENY = "deny"
    ALLOW = "allow"


@dataclass(frozen=True)
class EndpointSpec:
    kind: EndpointKind
    response_status: int = 200
    response_body: str = "ok"
    # Resource scope for scoped-token checks; None means the endpoint does not
    # require a token.
    scope: str | None = None

    def to_dict(self) -> dict:
        out: dict = {
            "kind": self.kind.value,
            "response_status": self.response_status,
            "response_body": self.response_body,
        }
        if self.scope is not None:
            out["scope"] = self.scope
        return out

    @classmethod
    def from_dict(cls, data: dict) -> "EndpointSpec":
        return cls(
            kind=EndpointKind(data["kind"]),
            response_status=int(data.get("response_status", 200)),
            response_body=str(data.get("response_body", "ok")),
            scope=data.get("scope"),
        )


@dataclass(frozen=True)
class NetworkPolicy:
    endpoints: dict[str, EndpointSpec] = field(default_factory=dict)
    default: PolicyDefault = PolicyDefault.DENY

    def __post_init__(self):
        prefixes = sorted(self.endpoints)
        for i, a in enumerate(prefixes):
            for b in prefixes[i + 1:]:
                if b.startswith(a) or a.startswith(b):
                    raise SchemaError("network.endpoints", f"url prefixes overlap: {a!r} vs {b!r}")

    def match(self, url: str) -> tuple[str, EndpointSpec] | None:
        for prefix, spec in self.endpoints.items():
            if url.startswith(prefix):
                return prefix, spec
        return None

    def to_dict(self) -> dict:
        return {
            "endpoints": {p: s.to_dict() for p, s in sorted(self.endpoints.items())},
            "default": self.default.value,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "NetworkPolicy":
        return cls(
            endpoints={p: EndpointSpec.from_dict(s) for p, s in data.get("endpoints", {}).items()},
            default=PolicyDefault(data.get("default", "deny")),
        )


@dataclass
class RecordedRequest:
    url: str
    method: str
    body: str
    origin: str  # "agent" | "pipeline_step"
    endpoint_kind: str  # EndpointKind value, or "unmatched" under default=allow

    def to_dict(self) -> dict:
        return {
            "url": self.url,
            "method": self.method,
            "body": self.body,
            "origin": self.origin,
            "endpoint_kind": self.endpoint_kind,
        }


class MockNetwork:
    """Executes requests against the policy and records every one of them."""

    def __init__(self, policy: NetworkPolicy):
        self.policy = policy
        self.ledger: list[RecordedRequest] = []
        self._token_scopes: dict[str, str] = {}

    def register_token(self, value: str, scope: str) -> None:
        self._token_scopes[value] = scope

    def request(self, method: str, url: str, body: str, origin: str = "agent") -> tuple[int, str]:
        """Returns (status, response body); raises NetworkDenied per policy.

        Denied requests are never recorded: they did not leave the broker.
        """
        matched = self.policy.match(url)
        if matched is None:
            if self.policy.default is PolicyDefault.DENY:
                raise NetworkDenied(f"network denied: {url}")
            self.ledger.append(RecordedRequest(url, method, body, origin, "unmatched"))
            return 200, ""
        _, spec = matched
        self.ledger.append(RecordedRequest(url, method, body, origin, spec.kind.value))
        if spec.scope is not None:
            presented = [s for v, s in self._token_scopes.items() if v in body]
            if spec.scope not in presented:
                return 403, "forbidden"
        return spec.response_status, spec.response_body

    def exfiltration_record(self) -> list[RecordedRequest]:
        """Bodies received by attacker endpoints (always recorded)."""
        return [r for r in self.ledger if r.endpoint_kind == EndpointKind.ATTACKER.value]
