"""Value types shared by the tools, the revision loop, the data pipeline and the
evaluation harness, plus the line-delimited trajectory interchange format.

All types are frozen dataclasses; "updates" build new values.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, fields, replace
from enum import Enum
from pathlib import Path
from typing import Any, Iterable, Iterator, Union

from .errors import EmptyTrajectory

DEFAULT_IMPORTS: tuple[str, ...] = ("Mathlib", "Aesop")


class Severity(str, Enum):
    ERROR = "error"
    WARNING = "warning"
    INFO = "info"


class ToolName(str, Enum):
    SYNTAX_CHECK = "syntax_check"
    CONSISTENCY_CHECK = "consistency_check"


class Stage(str, Enum):
    PRECHECK = "precheck"
    BATCH = "batch"
    INDIVIDUAL_FALLBACK = "individual_fallback"


class Ruling(str, Enum):
    CONSISTENT = "consistent"
    INCONSISTENT = "inconsistent"
    UNPARSEABLE = "unparseable"


class StepKind(str, Enum):
    MODEL_TURN = "model_turn"
    TOOL_RESULT = "tool_result"


class Status(str, Enum):
    SUCCESS = "success"
    FAILED_BUDGET = "failed_budget"
    FAILED_RULE = "failed_rule"
    ABORTED = "aborted"


@dataclass(frozen=True)
class MathQuery:
    id: str
    text: str
    source: str = ""

    def __post_init__(self) -> None:
        if not self.id:
            raise ValueError("MathQuery.id must be nonempty")
        if not self.text.strip():
            raise ValueError(f"MathQuery {self.id!r} has empty text")

    def to_dict(self) -> dict[str, Any]:
        return {"id": self.id, "text": self.text, "source": self.source}

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> MathQuery:
        return cls(id=str(data["id"]), text=data["text"], source=data.get("source", ""))


@dataclass(frozen=True)
class FormalStatement:
    code: str
    required_imports: tuple[str, ...] = DEFAULT_IMPORTS

    def __post_init__(self) -> None:
        if not self.code:
            raise ValueError("FormalStatement.code must be nonempty")
        object.__setattr__(self, "required_imports", tuple(self.required_imports))

    def to_dict(self) -> dict[str, Any]:
        return {"code": self.code, "required_imports": list(self.required_imports)}

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> FormalStatement:
        return cls(code=data["code"], required_imports=tuple(data.get("required_imports", DEFAULT_IMPORTS)))


@dataclass(frozen=True)
class Diagnostic:
    """One compiler message. Lines are 1-based, columns 0-based."""

    severity: Severity
    start_line: int
    start_col: int
    end_line: int
    end_col: int
    message: str

    def __post_init__(self) -> None:
        object.__setattr__(self, "severity", Severity(self.severity))
        if self.start_line < 1 or self.end_line < 1 or self.start_col < 0 or self.end_col < 0:
            raise ValueError(f"diagnostic position out of range: {self}")
        if (self.start_line, self.start_col) > (self.end_line, self.end_col):
            raise ValueError(f"diagnostic ends before it starts: {self}")

    def shifted(self, line_delta: int) -> Diagnostic:
        return replace(self, start_line=self.start_line + line_delta, end_line=self.end_line + line_delta)

    def to_wire(self) -> dict[str, Any]:
        return {
            "severity": self.severity.value,
            "pos": {"line": self.start_line, "column": self.start_col},
            "endPos": {"line": self.end_line, "column": self.end_col},
            "data": self.message,
        }

    @classmethod
    def from_wire(cls, data: dict[str, Any]) -> Diagnostic:
        pos = data["pos"]
        end = data.get("endPos") or pos
        return cls(
            severity=Severity(data.get("severity", "error")),
            start_line=int(pos["line"]),
            start_col=int(pos["column"]),
            end_line=int(end["line"]),
            end_col=int(end["column"]),
            message=str(data.get("data", "")),
        )


@dataclass(frozen=True)
class SyntaxReport:
    passed: bool
    errors: tuple[Diagnostic, ...] = ()
    stage: Stage = Stage.BATCH
    backend_error: str | None = None

    def __post_init__(self) -> None:
        object.__setattr__(self, "errors", tuple(self.errors))
        object.__setattr__(self, "stage", Stage(self.stage))
        has_error = any(d.severity is Severity.ERROR for d in self.errors)
        if self.passed == has_error:
            raise ValueError("SyntaxReport passes iff it carries no error diagnostic")
        if self.passed and self.backend_error:
            raise ValueError("a passing SyntaxReport cannot carry a backend error")

    @classmethod
    def from_diagnostics(cls, diags: Iterable[Diagnostic], stage: Stage) -> SyntaxReport:
        diags = tuple(diags)
        return cls(passed=not any(d.severity is Severity.ERROR for d in diags), errors=diags, stage=stage)

    def payload(self) -> dict[str, Any]:
        """The tool output shown to the model."""
        out: dict[str, Any] = {"pass": self.passed, "errors": [d.to_wire() for d in self.errors]}
        if self.backend_error:
            out["backend_error"] = self.backend_error
        return out

    def to_dict(self) -> dict[str, Any]:
        return {**self.payload(), "stage": self.stage.value, "backend_error": self.backend_error}

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> SyntaxReport:
        return cls(
            passed=bool(data["pass"]),
            errors=tuple(Diagnostic.from_wire(e) for e in data.get("errors", [])),
            stage=Stage(data.get("stage", "batch")),
            backend_error=data.get("backend_error"),
        )


@dataclass(frozen=True)
class JudgeVerdict:
    judge_id: str
    ruling: Ruling
    explanation: str = ""
    raw: str = ""
    error: str | None = None

    def __post_init__(self) -> None:
        object.__setattr__(self, "ruling", Ruling(self.ruling))
        if self.ruling is Ruling.UNPARSEABLE and self.explanation:
            raise ValueError("unparseable verdicts carry no explanation")

    def to_dict(self) -> dict[str, Any]:
        return {
            "judge_id": self.judge_id,
            "ruling": self.ruling.value,
            "explanation": self.explanation,
            "raw": self.raw,
            "error": self.error,
        }

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> JudgeVerdict:
        return cls(
            judge_id=data["judge_id"],
            ruling=Ruling(data["ruling"]),
            explanation=data.get("explanation", ""),
            raw=data.get("raw", ""),
            error=data.get("error"),
        )


@dataclass(frozen=True)
class ConsistencyReport:
    passed: bool
    explanations: str
    per_judge: tuple[JudgeVerdict, ...] = ()

    def __post_init__(self) -> None:
        object.__setattr__(self, "per_judge", tuple(self.per_judge))
        if self.per_judge and self.passed != all(v.ruling is Ruling.CONSISTENT for v in self.per_judge):
            raise ValueError("ConsistencyReport.passed disagrees with its verdicts")

    def payload(self) -> dict[str, Any]:
        return {"pass": self.passed, "explanations": self.explanations}

    def to_dict(self) -> dict[str, Any]:
        return {**self.payload(), "per_judge": [v.to_dict() for v in self.per_judge]}

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> ConsistencyReport:
        return cls(
            passed=bool(data["pass"]),
            explanations=data.get("explanations", ""),
            per_judge=tuple(JudgeVerdict.from_dict(v) for v in data.get("per_judge", [])),
        )


Report = Union[SyntaxReport, ConsistencyReport]


@dataclass(frozen=True)
class ToolInvocation:
    tool: ToolName
    arguments: dict[str, Any]
    raw: str = ""

    def __post_init__(self) -> None:
        object.__setattr__(self, "tool", ToolName(self.tool))

    @property
    def code(self) -> str:
        return str(self.arguments.get("lean4_code", ""))

    def to_dict(self) -> dict[str, Any]:
        return {"tool": self.tool.value, "arguments": self.arguments, "raw": self.raw}

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> ToolInvocation:
        return cls(tool=ToolName(data["tool"]), arguments=dict(data["arguments"]), raw=data.get("raw", ""))


@dataclass(frozen=True)
class ToolResult:
    tool: ToolName
    payload: Report
    raw: str = ""

    def __post_init__(self) -> None:
        object.__setattr__(self, "tool", ToolName(self.tool))
        expected = SyntaxReport if self.tool is ToolName.SYNTAX_CHECK else ConsistencyReport
        if not isinstance(self.payload, expected):
            raise TypeError(f"{self.tool.value} result needs a {expected.__name__}")

    @property
    def passed(self) -> bool:
        return self.payload.passed

    def to_dict(self) -> dict[str, Any]:
        return {"tool": self.tool.value, "payload": self.payload.to_dict(), "raw": self.raw}

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> ToolResult:
        tool = ToolName(data["tool"])
        report_cls = SyntaxReport if tool is ToolName.SYNTAX_CHECK else ConsistencyReport
        return cls(tool=tool, payload=report_cls.from_dict(data["payload"]), raw=data.get("raw", ""))


@dataclass(frozen=True)
class TrajectoryStep:
    kind: StepKind
    text: str
    invocation: ToolInvocation | None = None
    result: ToolResult | None = None
    statement_version: int | None = None

    def __post_init__(self) -> None:
        object.__setattr__(self, "kind", StepKind(self.kind))
        if self.kind is StepKind.TOOL_RESULT and (self.invocation is not None or self.result is None):
            raise ValueError("tool_result steps carry a result and no invocation")
        if self.kind is StepKind.MODEL_TURN and self.result is not None:
            raise ValueError("model turns carry no tool result")

    def to_dict(self) -> dict[str, Any]:
        return {
            "kind": self.kind.value,
            "text": self.text,
            "invocation": self.invocation.to_dict() if self.invocation else None,
            "result": self.result.to_dict() if self.result else None,
            "statement_version": self.statement_version,
        }

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> TrajectoryStep:
        inv = data.get("invocation")
        res = data.get("result")
        return cls(
            kind=StepKind(data["kind"]),
            text=data["text"],
            invocation=ToolInvocation.from_dict(inv) if inv else None,
            result=ToolResult.from_dict(res) if res else None,
            statement_version=data.get("statement_version"),
        )


@dataclass(frozen=True)
class Trajectory:
    query: MathQuery
    steps: tuple[TrajectoryStep, ...]
    statements: tuple[FormalStatement, ...]
    status: Status
    revision_count: int = 0
    sample_index: int = 0
    revision_budget: int | None = None
    note: str = ""

    def __post_init__(self) -> None:
        object.__setattr__(self, "steps", tuple(self.steps))
        object.__setattr__(self, "statements", tuple(self.statements))
        object.__setattr__(self, "status", Status(self.status))
        if self.revision_count < 0:
            raise ValueError("revision_count must be non-negative")
        if self.statements and self.revision_count != len(self.statements) - 1:
            raise ValueError("revision_count must equal len(statements) - 1")
        versions = [s.statement_version for s in self.steps if s.statement_version is not None]
        if versions != list(range(len(versions))):
            raise ValueError(f"statement versions must be 0, 1, 2, ...; got {versions}")

    @property
    def tool_results(self) -> list[ToolResult]:
        return [s.result for s in self.steps if s.result is not None]

    @property
    def invocations(self) -> list[ToolInvocation]:
        return [s.invocation for s in self.steps if s.invocation is not None]

    @property
    def final_statement(self) -> FormalStatement | None:
        return self.statements[-1] if self.statements else None

    def to_dict(self) -> dict[str, Any]:
        return {
            "query": self.query.to_dict(),
            "sample_index": self.sample_index,
            "status": self.status.value,
            "revision_count": self.revision_count,
            "revision_budget": self.revision_budget,
            "note": self.note,
            "statements": [s.to_dict() for s in self.statements],
            "steps": [s.to_dict() for s in self.steps],
        }

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> Trajectory:
        return cls(
            query=MathQuery.from_dict(data["query"]),
            steps=tuple(TrajectoryStep.from_dict(s) for s in data["steps"]),
            statements=tuple(FormalStatement.from_dict(s) for s in data["statements"]),
            status=Status(data["status"]),
            revision_count=int(data.get("revision_count", 0)),
            sample_index=int(data.get("sample_index", 0)),
            revision_budget=data.get("revision_budget"),
            note=data.get("note", ""),
        )


@dataclass(frozen=True)
class RunConfig:
    """Run-wide knobs.

    ``max_revisions`` is an exclusive bound: a run may revise at most
    ``max_revisions - 1`` times (see :attr:`revision_budget`).
    """

    max_revisions: int = 4
    samples_per_query: int = 16
    temperature: float = 0.6
    batch_size: int = 20
    compile_timeout_s: float = 300.0
    judge_order: tuple[str, ...] = ("qwq-32b", "qwen3-32b")
    decontamination_threshold: float = 0.8
    required_imports: tuple[str, ...] = DEFAULT_IMPORTS
    max_tokens: int = 8192
    workers: int = 4

    def __post_init__(self) -> None:
        object.__setattr__(self, "judge_order", tuple(self.judge_order))
        object.__setattr__(self, "required_imports", tuple(self.required_imports))
        if self.max_revisions < 0:
            raise ValueError("max_revisions must be >= 0")
        if self.samples_per_query < 1 or self.batch_size < 1 or self.workers < 1:
            raise ValueError("samples_per_query, batch_size and workers must be positive")
        if self.temperature < 0 or self.compile_timeout_s <= 0:
            raise ValueError("temperature must be >= 0 and compile_timeout_s > 0")
        if not 0.0 <= self.decontamination_threshold <= 1.0:
            raise ValueError("decontamination_threshold must lie in [0, 1]")

    @property
    def revision_budget(self) -> int:
        return max(self.max_revisions - 1, 0)

    def to_dict(self) -> dict[str, Any]:
        out = {}
        for f in fields(self):
            value = getattr(self, f.name)
            out[f.name] = list(value) if isinstance(value, tuple) else value
        return out

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> RunConfig:
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ValueError(f"unknown RunConfig keys: {sorted(unknown)}")
        return cls(**data)


def count_revisions(trajectory: Trajectory) -> int:
    if not trajectory.statements:
        raise EmptyTrajectory(f"trajectory for {trajectory.query.id!r} has no statement version")
    return len(trajectory.statements) - 1


# -- line-delimited interchange ------------------------------------------------


def dumps_line(record: dict[str, Any]) -> str:
    return json.dumps(record, ensure_ascii=False, separators=(",", ":"))


def read_jsonl(path: str | Path) -> Iterator[dict[str, Any]]:
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if line.strip():
                try:
                    yield json.loads(line)
                except json.JSONDecodeError as exc:
                    raise ValueError(f"{path}:{lineno}: {exc}") from exc


def write_jsonl(path: str | Path, records: Iterable[dict[str, Any]]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for rec in records:
            fh.write(dumps_line(rec) + "\n")


def load_trajectories(path: str | Path) -> list[Trajectory]:
    return [Trajectory.from_dict(r) for r in read_jsonl(path)]


def save_trajectories(path: str | Path, trajectories: Iterable[Trajectory]) -> None:
    write_jsonl(path, (t.to_dict() for t in trajectories))


def load_queries(path: str | Path) -> list[MathQuery]:
    queries = [MathQuery.from_dict(r) for r in read_jsonl(path)]
    seen: set[str] = set()
    for q in queries:
        if q.id in seen:
            raise ValueError(f"duplicate query id {q.id!r} in {path}")
        seen.add(q.id)
    return queries


__all__ = [
    "ConsistencyReport",
    "DEFAULT_IMPORTS",
    "Diagnostic",
    "FormalStatement",
    "JudgeVerdict",
    "MathQuery",
    "Report",
    "Ruling",
    "RunConfig",
    "Severity",
    "Stage",
    "Status",
    "StepKind",
    "SyntaxReport",
    "ToolInvocation",
    "ToolName",
    "ToolResult",
    "Trajectory",
    "TrajectoryStep",
    "count_revisions",
    "load_queries",
    "load_trajectories",
    "read_jsonl",
    "save_trajectories",
    "write_jsonl",
]
