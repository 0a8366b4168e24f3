"""Exception types shared across the broker, runtime, and harness."""


class BrokerError(Exception):
    """Base class for all toolbroker errors."""


class ConfinementError(BrokerError):
    """A candidate path resolves outside the workspace root."""


class NotFound(BrokerError):
    """A requested workspace file does not exist."""


class ParseError(BrokerError):
    """Mock-shell input does not match the published grammar."""


class NetworkDenied(BrokerError):
    """The network policy rejects an outbound request."""


class PipelineParseError(BrokerError):
    """A pipeline file does not match the published schema."""


class SchemaError(BrokerError):
    """A scenario definition violates the schema.

    Carries the dotted path of the offending field so diagnostics can name it.
    """

    def __init__(self, path: str, message: str):
        self.path = path
        super().__init__(f"{path}: {message}")


class FixtureError(BrokerError):
    """Scenario fixtures cannot be materialized as declared."""


class ProtocolError(BrokerError):
    """An external agent sent a malformed or out-of-order wire message."""


class PolicyIncomplete(BrokerError):
    """HITL policy-file mode has no decision for an encountered call."""


class ScopeExceeded(BrokerError):
    """A scoped-token request names a resource outside the issuer's authority."""


class EmptyInput(BrokerError):
    """A metric was requested over an empty verdict list."""


class IncompleteReport(BrokerError):
    """Full-table rendering was requested for a partial suite report."""


class IncompleteRecord(BrokerError):
    """Verdict evaluation was requested for an unfinished episode."""


class CorruptLog(BrokerError):
    """An audit log is empty, unparseable, or fails sequence/hash checks."""
