"""toolbroker: policy-gated tool-execution broker and evaluation harness."""

from .model import (
    AgentSystem,
    AuditEvent,
    ExecutionEnvironment,
    RiskCategory,
    Secret,
    SideEffect,
    ToolCall,
    ToolName,
    ToolResult,
    Verdict,
    authority_of,
    classify_secret_hit,
)

__version__ = "0.1.0"

__all__ = [
    "AgentSystem",
    "AuditEvent",
    "ExecutionEnvironment",
    "RiskCategory",
    "Secret",
    "SideEffect",
    "ToolCall",
    "ToolName",
    "ToolResult",
    "Verdict",
    "authority_of",
    "classify_secret_hit",
    "__version__",
]
