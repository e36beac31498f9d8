"""Tool-feedback autoformalization: syntax and consistency tools, the revision
loop around a chat model, training-data operations and evaluation."""

__version__ = "0.1.0"

from .core import (
    ConsistencyReport,
    Diagnostic,
    FormalStatement,
    JudgeVerdict,
    MathQuery,
    RunConfig,
    Status,
    SyntaxReport,
    Trajectory,
    count_revisions,
)

__all__ = [
    "ConsistencyReport",
    "Diagnostic",
    "FormalStatement",
    "JudgeVerdict",
    "MathQuery",
    "RunConfig",
    "Status",
    "SyntaxReport",
    "Trajectory",
    "count_revisions",
]
