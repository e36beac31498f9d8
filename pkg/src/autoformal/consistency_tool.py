"""Semantic consistency checking with an ordered panel of LLM judges."""

from __future__ import annotations

import json
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Sequence

from .backends import CallCounter, ChatClient, call_with_retries
from .core import (
    ConsistencyReport,
    FormalStatement,
    JudgeVerdict,
    MathQuery,
    Ruling,
    SyntaxReport,
)
from .errors import BackendError, EmptyPanel, PreconditionError
from .prompts import CONSISTENCY_CHECK_TEMPLATE, fill

log = logging.getLogger(__name__)

_DECODER = json.JSONDecoder(strict=False)


@dataclass(frozen=True)
class Judge:
    judge_id: str
    client: ChatClient
    temperature: float = 0.0
    max_tokens: int = 4096
    max_retries: int = 1


def render_judge_prompt(query: MathQuery, statement: FormalStatement) -> str:
    return fill(CONSISTENCY_CHECK_TEMPLATE, mathematical_text=query.text, lean4_code=statement.code)


def _json_objects(text: str) -> list[dict]:
    """Top-level JSON objects embedded in free text, in order of appearance."""
    found = []
    i = text.find("{")
    while i >= 0:
        try:
            obj, end = _DECODER.raw_decode(text, i)
        except json.JSONDecodeError:
            i = text.find("{", i + 1)
            continue
        if isinstance(obj, dict):
            found.append(obj)
        i = text.find("{", end)
    return found


def _normalize_label(value: object) -> str:
    if isinstance(value, list) and len(value) == 1:
        value = value[0]
    if not isinstance(value, str):
        return ""
    return value.strip().strip("[]").strip().casefold()


def parse_judge_response(raw: str, judge_id: str = "") -> JudgeVerdict:
    objects = _json_objects(raw)
    if not objects:
        return JudgeVerdict(judge_id, Ruling.UNPARSEABLE, raw=raw)
    obj = objects[-1]
    label = _normalize_label(obj.get("is_assistant_correct"))
    if label == "correct":
        ruling = Ruling.CONSISTENT
    elif label == "incorrect":
        ruling = Ruling.INCONSISTENT
    else:
        return JudgeVerdict(judge_id, Ruling.UNPARSEABLE, raw=raw)
    reasons = obj.get("reasons", "")
    return JudgeVerdict(judge_id, ruling, explanation=reasons if isinstance(reasons, str) else json.dumps(reasons), raw=raw)


def ensemble_vote(verdicts: Sequence[JudgeVerdict]) -> ConsistencyReport:
    """Fold priority-ordered verdicts into one report.

    Passes only when every judge rules consistent (unparseable counts against).
    On failure the explanation comes from the highest-priority judge that did
    not confirm consistency.
    """
    if not verdicts:
        raise EmptyPanel("ensemble vote needs at least one verdict")
    dissent = [v for v in verdicts if v.ruling is not Ruling.CONSISTENT]
    if not dissent:
        return ConsistencyReport(True, verdicts[0].explanation, tuple(verdicts))
    explaining = next((v for v in dissent if v.ruling is Ruling.INCONSISTENT), dissent[0])
    explanation = explaining.explanation or "judge output could not be parsed"
    return ConsistencyReport(False, explanation, tuple(verdicts))


class ConsistencyChecker:
    def __init__(self, judges: Sequence[Judge], *, counters: CallCounter | None = None, sleep=None):
        if not judges:
            raise EmptyPanel("a consistency panel needs at least one judge")
        self.judges = list(judges)
        self.counters = counters or CallCounter()
        self._sleep = sleep

    def _ask(self, judge: Judge, prompt: str) -> JudgeVerdict:
        messages = [{"role": "user", "content": prompt}]

        def call() -> str:
            self.counters.add("judge_calls")
            return judge.client.chat(messages, temperature=judge.temperature, max_tokens=judge.max_tokens)

        kwargs = {"sleep": self._sleep} if self._sleep is not None else {}
        try:
            raw = call_with_retries(call, judge.max_retries, **kwargs)
        except BackendError as exc:
            log.warning("judge %s unavailable: %s", judge.judge_id, exc)
            self.counters.add("judge_unavailable")
            return JudgeVerdict(judge.judge_id, Ruling.UNPARSEABLE, error=f"JudgeUnavailable: {exc}")
        return parse_judge_response(raw, judge.judge_id)

    def check(
        self,
        query: MathQuery,
        statement: FormalStatement,
        syntax_report: SyntaxReport | None = None,
    ) -> ConsistencyReport:
        if syntax_report is not None and not syntax_report.passed:
            raise PreconditionError("consistency check requires a statement that passed syntax check")
        prompt = render_judge_prompt(query, statement)
        if len(self.judges) == 1:
            verdicts = [self._ask(self.judges[0], prompt)]
        else:
            with ThreadPoolExecutor(max_workers=len(self.judges)) as pool:
                verdicts = list(pool.map(lambda j: self._ask(j, prompt), self.judges))
        return ensemble_vote(verdicts)


def run_consistency_check(
    query: MathQuery,
    statement: FormalStatement,
    judges: Sequence[Judge],
    syntax_report: SyntaxReport | None = None,
) -> ConsistencyReport:
    return ConsistencyChecker(judges).check(query, statement, syntax_report)
