from __future__ import annotations

import json
import random
from pathlib import Path
from typing import Sequence

import pytest

from autoformal.backends import FunctionChatClient, MockLeanCompiler, ScriptedChatClient
from autoformal.consistency_tool import ConsistencyChecker, Judge
from autoformal.core import (
    ConsistencyReport,
    Diagnostic,
    FormalStatement,
    MathQuery,
    RunConfig,
    Severity,
    Stage,
    SyntaxReport,
)
from autoformal.mocks import SimulatedFormalizer, keyword_panel
from autoformal.orchestrator import Toolbox, formalize, render_tool_call
from autoformal.syntax_tool import SyntaxChecker

FIXTURES = Path(__file__).parent / "fixtures"


def load_fixture(name: str):
    path = FIXTURES / name
    if path.suffix == ".jsonl":
        return [json.loads(line) for line in path.read_text(encoding="utf-8").splitlines() if line.strip()]
    return json.loads(path.read_text(encoding="utf-8"))


def lean(body: str, imports: Sequence[str] = ("Mathlib", "Aesop")) -> str:
    """A statement with the standard header."""
    return "".join(f"import {i}\n" for i in imports) + "\n" + body


def model_turn(prose: str, code: str | None, tool: str | None, tool_code: str | None = None) -> str:
    parts = [prose]
    if code is not None:
        parts.append(f"```lean\n{code}\n```")
    if tool is not None:
        parts.append(render_tool_call(tool, code if tool_code is None else tool_code))
    return "\n\n".join(parts)


def judge_reply(correct: bool, reason: str = "checked") -> str:
    label = "Correct" if correct else "Incorrect"
    return "```json\n" + json.dumps({"reasons": reason, "is_assistant_correct": label}) + "\n```"


def constant_judge(judge_id: str, correct: bool, reason: str = "checked") -> Judge:
    return Judge(judge_id, FunctionChatClient(lambda _m: judge_reply(correct, reason)))


def mock_toolbox(judges: Sequence[Judge] | None = None, seed: int = 0) -> Toolbox:
    syntax = SyntaxChecker(MockLeanCompiler(), RunConfig(), workers=1, nonce=f"s{seed}")
    return Toolbox(syntax, ConsistencyChecker(list(judges) if judges is not None else keyword_panel()))


class StubTools:
    """Tool stub answering from queued pass/fail outcomes (default: pass)."""

    def __init__(self, syntax: Sequence[bool] = (), consistency: Sequence[bool] = ()):
        self.syntax = list(syntax)
        self.consistency = list(consistency)
        self.calls: list[str] = []

    def syntax_check(self, statement: FormalStatement) -> SyntaxReport:
        self.calls.append("syntax")
        ok = self.syntax.pop(0) if self.syntax else True
        if ok:
            return SyntaxReport(True, (), Stage.BATCH)
        return SyntaxReport(False, (Diagnostic(Severity.ERROR, 1, 0, 1, 1, "bad"),), Stage.BATCH)

    def consistency_check(self, statement: FormalStatement, syntax_report: SyntaxReport) -> ConsistencyReport:
        self.calls.append("consistency")
        ok = self.consistency.pop(0) if self.consistency else True
        return ConsistencyReport(ok, "fine" if ok else "drift")


def simulated_trajectories(n_queries: int, samples: int, seed: int = 0, config: RunConfig | None = None, **probs):
    config = config or RunConfig()
    toolbox = mock_toolbox(seed=seed)
    out = []
    for qi in range(n_queries):
        q = MathQuery(f"q{qi}", f"problem number {qi}", "sim")
        for s in range(samples):
            model = SimulatedFormalizer(q, seed, s, **probs)
            out.append(formalize(q, model, toolbox, config, sample_index=s))
    return out


@pytest.fixture
def rng() -> random.Random:
    return random.Random(1234)


@pytest.fixture
def case_study():
    return load_fixture("case_study.json")


@pytest.fixture
def scripted_model():
    return ScriptedChatClient


# -- acceptance summary --------------------------------------------------------------

_ACCEPTANCE: list[tuple[str, str, float]] = []


def pytest_runtest_logreport(report):
    if report.when != "call" and not (report.when == "setup" and report.outcome != "passed"):
        return
    if "acceptance" not in report.keywords:
        return
    _ACCEPTANCE.append((report.nodeid.split("::")[-1], "PASS" if report.passed else "FAIL", report.duration))


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for name, outcome, duration in _ACCEPTANCE:
        terminalreporter.write_line(f"{outcome}  {name}  ({duration:.2f}s)")
