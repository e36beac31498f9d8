"""Deterministic protocol-following stand-ins for the formalizer and judges.

Used by the offline CLI mode and the test suite. The simulated formalizer
writes a statement that may carry a parse error (a binder the mock compiler
rejects) and/or a semantic slip (a marker type the keyword judges reject),
and fixes each with a seeded probability when told it failed.
"""

from __future__ import annotations

import json
import random
import re
from typing import Sequence

from .backends import FunctionChatClient, Message
from .consistency_tool import Judge
from .core import MathQuery, ToolName
from .orchestrator import render_tool_call

_RESULT_HEAD = re.compile(r"<tool_results?>\s*Function:\s*(\w+)\s*Output:\s*(\{.*\})\s*</tool_results?>", re.DOTALL)
_LEAN_SECTION = re.compile(r"— Start of Lean4Code —\n(.*?)\n— End of Lean4Code —", re.DOTALL)

BAD_BINDER = "∀ u v ∈ S, u + v = v + u"
GOOD_BINDER = "∀ u ∈ S, ∀ v ∈ S, u + v = v + u"
DRIFT_TYPE = "ℤ"
FAITHFUL_TYPE = "ℕ"


def _slug(text: str) -> str:
    return re.sub(r"\W", "_", text) or "q"


def simulated_statement(query_id: str, syntax_ok: bool, consistent: bool) -> str:
    binder = GOOD_BINDER if syntax_ok else BAD_BINDER
    ty = FAITHFUL_TYPE if consistent else DRIFT_TYPE
    return (
        "import Mathlib\nimport Aesop\n\n"
        f"theorem q_{_slug(query_id)} (S : Finset {ty}) (h : S.card = 3) :\n"
        f"  {binder} := by sorry"
    )


class SimulatedFormalizer:
    """A chat model that follows the tool protocol with seeded randomness.

    One instance serves one (query, sample) stream.
    """

    def __init__(
        self,
        query: MathQuery,
        seed: int = 0,
        sample_index: int = 0,
        *,
        p_syntax_error: float = 0.4,
        p_inconsistent: float = 0.5,
        p_fix: float = 0.5,
    ):
        self.query = query
        self.rng = random.Random(f"{seed}:{query.id}:{sample_index}")
        self.p_fix = p_fix
        self.syntax_ok = self.rng.random() >= p_syntax_error
        self.consistent = self.rng.random() >= p_inconsistent
        self.turns = 0

    @property
    def code(self) -> str:
        return simulated_statement(self.query.id, self.syntax_ok, self.consistent)

    def _write_and_check(self, preface: str) -> str:
        return f"{preface}\n\n```lean\n{self.code}\n```\n\n{render_tool_call(ToolName.SYNTAX_CHECK, self.code)}"

    def chat(self, messages: Sequence[Message], *, temperature: float, max_tokens: int) -> str:
        self.turns += 1
        last = messages[-1]["content"]
        m = _RESULT_HEAD.search(last)
        if m is None:
            return self._write_and_check(f"Formalizing problem {self.query.id}. Initial statement:")
        tool, payload = m.group(1), json.loads(m.group(2))
        if tool == ToolName.SYNTAX_CHECK.value:
            if payload["pass"]:
                return "Syntax passes; checking consistency.\n\n" + render_tool_call(
                    ToolName.CONSISTENCY_CHECK, self.code
                )
            if self.rng.random() < self.p_fix:
                self.syntax_ok = True
            return self._write_and_check("The syntax check failed on the binder. Revised statement:")
        if payload["pass"]:
            return f"Both checks pass.\n\n**Final Statement**\n```lean\n{self.code}\n```"
        if self.rng.random() < self.p_fix:
            self.consistent = True
        return self._write_and_check("The judges found a mismatch. Revised statement:")


def keyword_judge_client(judge_id: str, markers: Sequence[str]) -> FunctionChatClient:
    """A judge that rules Incorrect iff the Lean section contains a marker."""

    def respond(messages: Sequence[Message]) -> str:
        prompt = messages[-1]["content"]
        m = _LEAN_SECTION.search(prompt)
        code = m.group(1) if m else ""
        hits = [mk for mk in markers if mk in code]
        if hits:
            verdict = {"reasons": f"{judge_id}: statement uses {', '.join(hits)}, which drifts from the problem.",
                       "is_assistant_correct": "Incorrect"}
        else:
            verdict = {"reasons": f"{judge_id}: all components of the problem are preserved.",
                       "is_assistant_correct": "Correct"}
        return "```json\n" + json.dumps(verdict, ensure_ascii=False) + "\n```"

    return FunctionChatClient(respond)


def keyword_panel(judge_ids: Sequence[str] = ("qwq-32b", "qwen3-32b")) -> list[Judge]:
    marker_sets = [(DRIFT_TYPE,), (DRIFT_TYPE, "ℚ")]
    return [
        Judge(jid, keyword_judge_client(jid, marker_sets[i % len(marker_sets)]))
        for i, jid in enumerate(judge_ids)
    ]
