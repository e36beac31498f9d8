"""The revision loop.

A chat model writes a statement, calls ``syntax_check`` and, once that passes,
``consistency_check``; failures send it back to revise. Three rules govern the
loop: consistency may only be checked after syntax passed, every new statement
version is syntax-checked first, and the loop ends exactly when both checks
pass on the same version. :func:`step` is the pure transition function;
:func:`formalize` drives it against a model, and :func:`validate_trajectory`
replays a recorded trajectory through the same transitions.
"""

from __future__ import annotations

import json
import logging
import re
from dataclasses import dataclass, replace
from enum import Enum
from typing import Callable, Protocol, Sequence

from .backends import ChatClient, Message, call_with_retries
from .consistency_tool import ConsistencyChecker
from .core import (
    DEFAULT_IMPORTS,
    ConsistencyReport,
    FormalStatement,
    MathQuery,
    RunConfig,
    Status,
    StepKind,
    SyntaxReport,
    ToolInvocation,
    ToolName,
    ToolResult,
    Trajectory,
    TrajectoryStep,
    count_revisions,
)
from .errors import BackendError, EmptyTrajectory, MalformedToolCall, TerminalState, UnknownTool
from .prompts import INFERENCE_SYSTEM_PROMPT, REPROMPT_MESSAGE
from .syntax_tool import SyntaxChecker

log = logging.getLogger(__name__)

_TOOL_CALL = re.compile(r"<(tool_calls?)>(.*?)</\1>", re.DOTALL)
_TOOL_CALL_OPEN = re.compile(r"<tool_calls?>")
_CODE_BLOCK = re.compile(r"```[ \t]*(?:lean4?|Lean4?)?[ \t]*\n(.*?)```", re.DOTALL)
_DECODER = json.JSONDecoder(strict=False)

MAX_REPROMPTS = 1


class Phase(str, Enum):
    AWAITING_FIRST_STATEMENT = "awaiting_first_statement"
    AWAITING_SYNTAX = "awaiting_syntax"
    SYNTAX_PASSED = "syntax_passed"
    DONE_SUCCESS = "done_success"
    DONE_FAILED = "done_failed"


@dataclass(frozen=True)
class ModelTurn:
    reasoning: str
    invocation: ToolInvocation | None = None
    statement: FormalStatement | None = None
    raw: str = ""

    @property
    def action(self) -> str:
        if self.invocation is not None:
            return "invoke"
        if self.statement is not None:
            return "final_statement"
        return "none"


@dataclass(frozen=True)
class LoopState:
    phase: Phase
    budget: int
    current_version: int = -1
    revisions_used: int = 0
    statements: tuple[FormalStatement, ...] = ()
    needs_new_version: bool = False
    reprompts: int = 0
    status: Status | None = None
    reason: str = ""
    required_imports: tuple[str, ...] = DEFAULT_IMPORTS
    last_syntax: SyntaxReport | None = None

    @property
    def terminal(self) -> bool:
        return self.phase in (Phase.DONE_SUCCESS, Phase.DONE_FAILED)

    @property
    def latest(self) -> FormalStatement | None:
        return self.statements[-1] if self.statements else None


def initial_state(budget: int, required_imports: Sequence[str] = DEFAULT_IMPORTS) -> LoopState:
    return LoopState(Phase.AWAITING_FIRST_STATEMENT, budget, required_imports=tuple(required_imports))


class QueryTools(Protocol):
    def syntax_check(self, statement: FormalStatement) -> SyntaxReport: ...

    def consistency_check(self, statement: FormalStatement, syntax_report: SyntaxReport) -> ConsistencyReport: ...


class Toolbox:
    """Both tools, shared across loops; :meth:`bind` fixes the query."""

    def __init__(self, syntax: SyntaxChecker, consistency: ConsistencyChecker):
        self.syntax = syntax
        self.consistency = consistency

    def bind(self, query: MathQuery) -> _BoundTools:
        return _BoundTools(self, query)


@dataclass
class _BoundTools:
    toolbox: Toolbox
    query: MathQuery

    def syntax_check(self, statement: FormalStatement) -> SyntaxReport:
        return self.toolbox.syntax.check([statement])[0]

    def consistency_check(self, statement: FormalStatement, syntax_report: SyntaxReport) -> ConsistencyReport:
        return self.toolbox.consistency.check(self.query, statement, syntax_report)


# -- wire format ----------------------------------------------------------------


def parse_model_turn(raw: str, required_imports: Sequence[str] = DEFAULT_IMPORTS) -> ModelTurn:
    calls = list(_TOOL_CALL.finditer(raw))
    if not calls and _TOOL_CALL_OPEN.search(raw):
        raise MalformedToolCall("tool call tag is never closed")
    invocation = None
    cut = len(raw)
    if calls:
        m = calls[-1]
        cut = m.start()
        body = m.group(2).strip()
        try:
            payload, _ = _DECODER.raw_decode(body)
        except json.JSONDecodeError as exc:
            raise MalformedToolCall(f"tool call payload is not JSON: {exc}") from exc
        if (
            not isinstance(payload, dict)
            or not isinstance(payload.get("name"), str)
            or not isinstance(payload.get("arguments"), dict)
        ):
            raise MalformedToolCall("tool call payload must be {name, arguments}")
        try:
            tool = ToolName(payload["name"])
        except ValueError:
            raise UnknownTool(f"unknown tool {payload['name']!r}") from None
        invocation = ToolInvocation(tool, payload["arguments"], raw=m.group(0))
    blocks = list(_CODE_BLOCK.finditer(raw, 0, cut))
    statement = None
    if blocks:
        code = blocks[-1].group(1).rstrip()
        if code.strip():
            statement = FormalStatement(code, tuple(required_imports))
    reasoning = raw[: blocks[-1].start() if blocks else cut].strip()
    return ModelTurn(reasoning, invocation, statement, raw)


def render_tool_call(tool: ToolName | str, code: str) -> str:
    payload = {"name": ToolName(tool).value, "arguments": {"lean4_code": code}}
    return "<tool_call>\n" + json.dumps(payload, indent=2, ensure_ascii=False) + "\n</tool_call>"


def render_tool_result(result: ToolResult | tuple[ToolName, SyntaxReport | ConsistencyReport]) -> str:
    tool, report = (result.tool, result.payload) if isinstance(result, ToolResult) else result
    body = json.dumps(report.payload(), indent=2, ensure_ascii=False)
    return f"<tool_result>\nFunction: {ToolName(tool).value}\nOutput: {body}\n</tool_result>"


def make_result(tool: ToolName, report: SyntaxReport | ConsistencyReport) -> ToolResult:
    return ToolResult(tool, report, raw=render_tool_result((tool, report)))


# -- transitions ----------------------------------------------------------------


def next_allowed_tools(state: LoopState) -> frozenset[ToolName]:
    if state.phase in (Phase.AWAITING_FIRST_STATEMENT, Phase.AWAITING_SYNTAX):
        return frozenset({ToolName.SYNTAX_CHECK})
    if state.phase is Phase.SYNTAX_PASSED:
        return frozenset({ToolName.CONSISTENCY_CHECK})
    return frozenset()


def _fail(state: LoopState, status: Status, reason: str) -> LoopState:
    return replace(state, phase=Phase.DONE_FAILED, status=status, reason=reason)


def _same_code(a: str, b: str) -> bool:
    return a.strip() == b.strip()


def step(state: LoopState, turn: ModelTurn, tools: QueryTools) -> tuple[LoopState, ToolResult | None]:
    if state.terminal:
        raise TerminalState(f"loop already finished ({state.phase.value})")
    inv = turn.invocation
    if inv is None:
        if turn.statement is not None:
            return _fail(state, Status.FAILED_RULE, "final statement presented before both checks passed"), None
        if state.reprompts >= MAX_REPROMPTS:
            return _fail(state, Status.FAILED_RULE, "turn without tool call or code after re-prompt"), None
        return replace(state, reprompts=state.reprompts + 1), None

    state = replace(state, reprompts=0)
    code = inv.code
    if not code.strip():
        return _fail(state, Status.FAILED_RULE, "tool call without lean4_code argument"), None
    if turn.statement is not None and not _same_code(turn.statement.code, code):
        return _fail(state, Status.FAILED_RULE, "checked code differs from the statement written in the turn"), None

    latest = state.latest
    if latest is None or state.needs_new_version or not _same_code(latest.code, code):
        version = state.current_version + 1
        revisions = state.revisions_used + (1 if version > 0 else 0)
        if revisions > state.budget:
            return _fail(state, Status.FAILED_BUDGET, f"revision budget {state.budget} exhausted"), None
        state = replace(
            state,
            phase=Phase.AWAITING_SYNTAX,
            current_version=version,
            revisions_used=revisions,
            statements=state.statements + (FormalStatement(code, state.required_imports),),
            needs_new_version=False,
            last_syntax=None,
        )

    if inv.tool not in next_allowed_tools(state):
        return _fail(state, Status.FAILED_RULE, f"{inv.tool.value} not allowed in phase {state.phase.value}"), None

    statement = state.statements[-1]
    if inv.tool is ToolName.SYNTAX_CHECK:
        report = tools.syntax_check(statement)
        if report.passed:
            state = replace(state, phase=Phase.SYNTAX_PASSED, last_syntax=report)
        else:
            state = replace(state, phase=Phase.AWAITING_SYNTAX, needs_new_version=True, last_syntax=None)
        return state, make_result(ToolName.SYNTAX_CHECK, report)

    assert state.last_syntax is not None and state.last_syntax.passed
    report = tools.consistency_check(statement, state.last_syntax)
    if report.passed:
        state = replace(state, phase=Phase.DONE_SUCCESS, status=Status.SUCCESS, reason="")
    else:
        state = replace(state, phase=Phase.AWAITING_SYNTAX, needs_new_version=True)
    return state, make_result(ToolName.CONSISTENCY_CHECK, report)


# -- driving a model ------------------------------------------------------------


def _model_step(turn_text: str, turn: ModelTurn | None, version: int | None) -> TrajectoryStep:
    return TrajectoryStep(
        StepKind.MODEL_TURN,
        turn_text,
        invocation=turn.invocation if turn is not None else None,
        statement_version=version,
    )


def formalize(
    query: MathQuery,
    model: ChatClient,
    tools: QueryTools | Toolbox,
    config: RunConfig | None = None,
    *,
    sample_index: int = 0,
    system_prompt: str = INFERENCE_SYSTEM_PROMPT,
    closing_turn: bool = True,
    model_retries: int = 2,
    sleep: Callable[[float], None] | None = None,
) -> Trajectory:
    """Run one revision loop for ``query`` and return its trajectory.

    After a success the model is asked for one closing turn (its final
    statement); the loop outcome does not depend on it.
    """
    config = config or RunConfig()
    bound = tools.bind(query) if isinstance(tools, Toolbox) else tools
    messages: list[Message] = [
        {"role": "system", "content": system_prompt},
        {"role": "user", "content": query.text},
    ]
    state = initial_state(config.revision_budget, config.required_imports)
    steps: list[TrajectoryStep] = []
    status: Status | None = None
    note = ""
    retry_kwargs = {"sleep": sleep} if sleep is not None else {}

    def ask() -> str:
        return call_with_retries(
            lambda: model.chat(messages, temperature=config.temperature, max_tokens=config.max_tokens),
            model_retries,
            **retry_kwargs,
        )

    while not state.terminal:
        try:
            text = ask()
        except BackendError as exc:
            status, note = Status.ABORTED, f"ModelUnavailable: {exc}"
            log.warning("query %s sample %d aborted: %s", query.id, sample_index, exc)
            break
        messages.append({"role": "assistant", "content": text})
        try:
            turn = parse_model_turn(text, config.required_imports)
        except (MalformedToolCall, UnknownTool) as exc:
            steps.append(_model_step(text, None, None))
            state = _fail(state, Status.FAILED_RULE, f"{type(exc).__name__}: {exc}")
            break
        before = state.current_version
        state, result = step(state, turn, bound)
        introduced = state.current_version if state.current_version != before else None
        steps.append(_model_step(text, turn, introduced))
        if result is not None:
            steps.append(TrajectoryStep(StepKind.TOOL_RESULT, result.raw, result=result))
            messages.append({"role": "user", "content": result.raw})
        elif not state.terminal:
            messages.append({"role": "user", "content": REPROMPT_MESSAGE})

    if state.phase is Phase.DONE_SUCCESS and closing_turn:
        try:
            text = ask()
            closing = parse_model_turn(text, config.required_imports)
        except (BackendError, MalformedToolCall, UnknownTool):
            closing = None
        if closing is not None and closing.invocation is None:
            steps.append(_model_step(text, None, None))

    if status is None:
        status = state.status
        note = state.reason
    return Trajectory(
        query=query,
        steps=tuple(steps),
        statements=state.statements,
        status=status,
        revision_count=max(len(state.statements) - 1, 0),
        sample_index=sample_index,
        revision_budget=state.budget,
        note=note,
    )


# -- replay validation -----------------------------------------------------------


@dataclass(frozen=True)
class Compliance:
    compliant: bool
    reason: str = ""

    def __bool__(self) -> bool:
        return self.compliant


class _ReplayMismatch(Exception):
    pass


class _ReplayTools:
    """Answers tool calls from the recorded trajectory instead of executing them."""

    def __init__(self, steps: Sequence[TrajectoryStep]):
        self.steps = steps
        self.pos = 0
        self.pending: ToolResult | None = None

    def _take(self, tool: ToolName):
        if self.pos >= len(self.steps) or self.steps[self.pos].kind is not StepKind.TOOL_RESULT:
            raise _ReplayMismatch(f"{tool.value} executed but no tool result was recorded")
        result = self.steps[self.pos].result
        assert result is not None
        if result.tool is not tool:
            raise _ReplayMismatch(f"recorded {result.tool.value} result answers a {tool.value} call")
        self.pos += 1
        return result.payload

    def syntax_check(self, statement: FormalStatement) -> SyntaxReport:
        return self._take(ToolName.SYNTAX_CHECK)

    def consistency_check(self, statement: FormalStatement, syntax_report: SyntaxReport) -> ConsistencyReport:
        return self._take(ToolName.CONSISTENCY_CHECK)


def validate_trajectory(trajectory: Trajectory) -> Compliance:
    """Replay the recorded turns through :func:`step` and compare outcomes."""
    budget = trajectory.revision_budget if trajectory.revision_budget is not None else 10**9
    imports = trajectory.statements[0].required_imports if trajectory.statements else DEFAULT_IMPORTS
    state = initial_state(budget, imports)
    replay = _ReplayTools(trajectory.steps)
    tool_sequence: list[ToolResult] = []
    while replay.pos < len(trajectory.steps):
        rec = trajectory.steps[replay.pos]
        replay.pos += 1
        if rec.kind is StepKind.TOOL_RESULT:
            return Compliance(False, f"tool result at step {replay.pos - 1} answers no call")
        if state.terminal:
            if state.phase is Phase.DONE_SUCCESS and rec.invocation is None and not _TOOL_CALL_OPEN.search(rec.text):
                continue
            return Compliance(False, "activity after the loop terminated")
        try:
            turn = parse_model_turn(rec.text, imports)
        except (MalformedToolCall, UnknownTool) as exc:
            return Compliance(False, f"unparseable tool call: {exc}")
        if (turn.invocation is None) != (rec.invocation is None) or (
            turn.invocation is not None
            and rec.invocation is not None
            and (turn.invocation.tool, turn.invocation.arguments) != (rec.invocation.tool, rec.invocation.arguments)
        ):
            return Compliance(False, f"recorded invocation at step {replay.pos - 1} does not match its text")
        before = state.current_version
        start = replay.pos
        try:
            state, result = step(state, turn, replay)
        except _ReplayMismatch as exc:
            return Compliance(False, str(exc))
        introduced = state.current_version if state.current_version != before else None
        if introduced != rec.statement_version:
            return Compliance(False, f"statement version bookkeeping differs at step {start - 1}")
        if result is not None:
            tool_sequence.append(trajectory.steps[replay.pos - 1].result)  # type: ignore[arg-type]
        if state.status is Status.FAILED_RULE:
            return Compliance(False, f"rule violation: {state.reason}")

    if [s.code for s in state.statements] != [s.code for s in trajectory.statements]:
        return Compliance(False, "statement versions do not match the replay")
    try:
        revisions = count_revisions(trajectory)
    except EmptyTrajectory:
        revisions = 0
    if revisions != trajectory.revision_count or revisions != state.revisions_used:
        return Compliance(False, "revision count does not match the replay")

    status = trajectory.status
    if status is Status.SUCCESS:
        if state.phase is not Phase.DONE_SUCCESS:
            return Compliance(False, "labeled success but both checks never passed on one version")
        if len(tool_sequence) < 2 or not (
            tool_sequence[-2].tool is ToolName.SYNTAX_CHECK
            and tool_sequence[-2].passed
            and tool_sequence[-1].tool is ToolName.CONSISTENCY_CHECK
            and tool_sequence[-1].passed
        ):
            return Compliance(False, "success must end with a passing syntax then consistency result")
    elif state.phase is Phase.DONE_SUCCESS:
        return Compliance(False, f"labeled {status.value} but both checks passed")
    elif status is Status.FAILED_BUDGET and state.status is not Status.FAILED_BUDGET:
        return Compliance(False, "labeled failed_budget but the budget was never exceeded")
    elif status is Status.FAILED_RULE:
        return Compliance(False, "labeled failed_rule")
    return Compliance(True)
