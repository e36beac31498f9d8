from __future__ import annotations

import functools
import random

import pytest
from hypothesis import given, settings, strategies as st

from conftest import StubTools, simulated_trajectories
from autoformal.backends import ScriptedChatClient
from autoformal.core import (
    Diagnostic,
    FormalStatement,
    MathQuery,
    RunConfig,
    Severity,
    Stage,
    Status,
    StepKind,
    SyntaxReport,
)
from autoformal.errors import InsufficientCandidates, SerializationMismatch
from autoformal.orchestrator import formalize, render_tool_call
from autoformal.pipeline import (
    STEP_SEPARATOR,
    BandMode,
    DpoPair,
    MaskKind,
    annotate_loss_masks,
    dpo_records,
    edit_distance,
    excise,
    filter_expert_iteration,
    filter_perturbations,
    group_by_query,
    masked_record,
    mine_dpo_pairs,
    normalized_levenshtein,
    sample_cold_start_queries,
    serialize_trajectory,
    upsample_cold_start,
)

PASS = SyntaxReport(True, ())
FAIL = SyntaxReport(False, (Diagnostic(Severity.ERROR, 1, 0, 1, 1, "x"),), Stage.BATCH)


@functools.lru_cache(maxsize=None)
def _naive_distance(a: str, b: str) -> int:
    """Textbook recursive definition, used as an independent oracle."""
    if not a:
        return len(b)
    if not b:
        return len(a)
    return min(
        _naive_distance(a[1:], b) + 1,
        _naive_distance(a, b[1:]) + 1,
        _naive_distance(a[1:], b[1:]) + (a[0] != b[0]),
    )


def run(query_id: str, revisions: int, sample: int = 0, status_ok: bool = True):
    """A compliant trajectory with exactly ``revisions`` revisions."""
    q = MathQuery(query_id, f"text of {query_id}", "b")
    codes = [f"theorem v{i} : True := by sorry" for i in range(revisions + 1)]
    turns = [f"try\n```lean\n{c}\n```\n" + render_tool_call("syntax_check", c) for c in codes]
    if status_ok:
        turns.append(render_tool_call("consistency_check", codes[-1]))
        tools = StubTools([False] * revisions + [True], [True])
        budget = 100
    else:
        # One submission past the budget ends the run.
        turns.append(render_tool_call("syntax_check", "theorem over : True := by sorry"))
        tools = StubTools([False] * (revisions + 1))
        budget = revisions + 1
    return formalize(q, ScriptedChatClient(turns), tools, RunConfig(max_revisions=budget), sample_index=sample,
                     closing_turn=False)


# -- similarity ----------------------------------------------------------------------


@pytest.mark.parametrize("a,b,expected", [("abc", "abc", 1.0), ("", "abc", 0.0), ("", "", 1.0)])
def test_normalized_levenshtein_examples(a, b, expected):
    assert normalized_levenshtein(a, b) == expected


def test_kitten_sitting():
    assert edit_distance("kitten", "sitting") == 3
    assert normalized_levenshtein("kitten", "sitting") == pytest.approx(1 - 3 / 7, abs=1e-12)


@given(st.text(alphabet="abc∀", max_size=8), st.text(alphabet="abc∀", max_size=8))
@settings(max_examples=300, deadline=None)
def test_edit_distance_matches_recursive_oracle(a, b):
    assert edit_distance(a, b) == _naive_distance(a, b)
    sim = normalized_levenshtein(a, b)
    assert sim == normalized_levenshtein(b, a)
    assert 0.0 <= sim <= 1.0
    assert (sim == 1.0) == (a == b)


# -- perturbations -------------------------------------------------------------------


def _variants(base: str, n: int) -> list[FormalStatement]:
    return [FormalStatement(base[:-1] + chr(ord("a") + i)) for i in range(n)]


def test_filter_perturbations_selects_top_in_band():
    base = "x" * 99 + "z"
    positive = FormalStatement(base)
    cands = _variants(base, 6)
    out = filter_perturbations(positive, cands, [PASS] * 6, count=4)
    assert len(out) == 4
    assert all(0.95 < c.similarity < 1.0 and c.syntax_valid for c in out)
    assert [c.similarity for c in out] == sorted((c.similarity for c in out), reverse=True)


def test_filter_perturbations_exclusions():
    base = "x" * 99 + "z"
    positive = FormalStatement(base)
    far = FormalStatement("y" * 100)
    cands = [positive, _variants(base, 1)[0], _variants(base, 1)[0], far, _variants(base, 3)[2]]
    reports = [PASS, PASS, PASS, PASS, FAIL]
    with pytest.raises(InsufficientCandidates) as info:
        filter_perturbations(positive, cands, reports, count=4)
    survivors = info.value.survivors
    assert [s.candidate for s in survivors] == [cands[1]]


def test_filter_perturbations_reject_above_mode():
    positive = FormalStatement("a" * 100)
    near = FormalStatement("a" * 99 + "b")  # similarity 0.99
    far = FormalStatement("a" * 90 + "b" * 10)  # similarity 0.90
    (picked,) = filter_perturbations(positive, [near, far], [PASS, PASS], (0.95, 1.0), count=1, mode=BandMode.REJECT_ABOVE)
    assert picked.candidate == far
    (picked,) = filter_perturbations(positive, [near, far], [PASS, PASS], (0.95, 1.0), count=1)
    assert picked.candidate == near
    with pytest.raises(ValueError):
        filter_perturbations(positive, [near], [], count=1)


# -- cold start / expert iteration ---------------------------------------------------


def test_upsample_multiplicities():
    ts = [run("a", 0), run("b", 1), run("c", 2)]
    out = upsample_cold_start(ts, 2)
    assert [t.query.id for t in out] == ["a", "b", "c", "c"]
    assert upsample_cold_start(ts, 1) == ts
    assert upsample_cold_start([], 3) == []
    with pytest.raises(ValueError):
        upsample_cold_start(ts, 0)


def test_sample_cold_start_queries_is_seeded():
    qs = [MathQuery(str(i), f"t{i}") for i in range(200)]
    a = sample_cold_start_queries(qs, 0.1, seed=1)
    assert len(a) == 20 and a == sample_cold_start_queries(qs, 0.1, seed=1)
    assert [q.id for q in a] == sorted((q.id for q in a), key=int)
    assert a != sample_cold_start_queries(qs, 0.1, seed=2)


def test_expert_iteration_filter_examples():
    seven, eight, failed = run("a", 7), run("b", 8, 1), run("c", 2, 2, status_ok=False)
    assert failed.status is Status.FAILED_BUDGET
    kept, retry = filter_expert_iteration([seven, eight, failed])
    assert kept == [seven]
    assert retry == ["b", "c"]
    # Idempotent on its own output.
    assert filter_expert_iteration(kept) == (kept, [])


# -- DPO -----------------------------------------------------------------------------


def test_mine_dpo_examples():
    pairs = mine_dpo_pairs({"q": [run("q", 1, 0), run("q", 5, 1)]})
    assert len(pairs) == 1 and pairs[0].attempt_gap == 4
    assert pairs[0].chosen.revision_count == 1 and pairs[0].rejected.revision_count == 5
    assert mine_dpo_pairs({"q": [run("q", 1, 0), run("q", 3, 1)]}) == []
    assert mine_dpo_pairs({"q": [run("q", 1, 0)]}) == []


def test_mine_dpo_tie_breaks_and_skips_failures():
    group = [run("q", 4, 3), run("q", 0, 2), run("q", 0, 1), run("q", 4, 0), run("q", 9, 4, status_ok=False)]
    (pair,) = mine_dpo_pairs({"q": group})
    assert pair.chosen.sample_index == 1 and pair.rejected.sample_index == 0
    assert pair.attempt_gap == 4


def test_dpo_pair_invariants():
    with pytest.raises(ValueError):
        DpoPair("q", run("q", 1), run("q", 4), 2)
    with pytest.raises(ValueError):
        DpoPair("q", run("q", 4), run("q", 1), -3)
    with pytest.raises(ValueError):
        DpoPair("q", run("q", 0), run("q", 3, status_ok=False), 3)


def test_mining_randomized_sets_satisfies_invariants():
    rng = random.Random(8)
    trajectories = [run(f"q{rng.randint(0, 9)}", rng.randint(0, 7), i) for i in range(60)]
    groups = group_by_query(trajectories)
    pairs = mine_dpo_pairs(groups, 3)
    for p in pairs:
        revs = [t.revision_count for t in groups[p.query_id]]
        assert p.chosen.revision_count == min(revs) and p.rejected.revision_count == max(revs)
        assert p.attempt_gap >= 3
    assert {p.query_id for p in pairs} == {q for q, g in groups.items()
                                          if max(t.revision_count for t in g) - min(t.revision_count for t in g) >= 3}
    assert mine_dpo_pairs(groups, 3) == pairs


# -- masks ---------------------------------------------------------------------------


def test_mask_counts_by_mode():
    t = run("q", 1)
    n_results = sum(s.kind is StepKind.TOOL_RESULT for s in t.steps)
    n_calls = len(t.invocations)
    sft = annotate_loss_masks(t, "sft")
    dpo = annotate_loss_masks(t, "dpo")
    assert len(sft) == n_results == 3 and all(s.kind is MaskKind.TOOL_RESULT for s in sft)
    assert len(dpo) == n_results + n_calls


def test_mask_spans_are_tag_exact():
    t = run("q", 2)
    text, _ = serialize_trajectory(t)
    for span in annotate_loss_masks(t, "dpo"):
        chunk = text[span.start : span.end]
        if span.kind is MaskKind.TOOL_RESULT:
            assert chunk.startswith("<tool_result>") and chunk.endswith("</tool_result>")
        else:
            assert chunk.startswith("<tool_call>") and chunk.endswith("</tool_call>")


def test_excising_sft_masks_leaves_model_text():
    for t in simulated_trajectories(5, 3, seed=4):
        text, _ = serialize_trajectory(t)
        remaining = excise(text, annotate_loss_masks(t, "sft"))
        expected = STEP_SEPARATOR.join(s.text if s.kind is StepKind.MODEL_TURN else "" for s in t.steps)
        assert remaining == expected


def test_no_tool_use_gives_no_masks():
    q = MathQuery("q", "t")
    t = formalize(q, ScriptedChatClient(["hm", "still nothing"]), StubTools(), RunConfig())
    assert t.status is Status.FAILED_RULE
    assert annotate_loss_masks(t, "dpo") == []


def test_mask_serialization_mismatch():
    from dataclasses import replace

    t = run("q", 0)
    step = t.steps[0]
    broken = replace(t, steps=(replace(step, text="no call here"),) + t.steps[1:])
    with pytest.raises(SerializationMismatch):
        annotate_loss_masks(broken, "dpo")
    assert annotate_loss_masks(broken, "sft")


def test_records_schema():
    pair = DpoPair("q", run("q", 0, 0), run("q", 3, 1), 3)
    rows = dpo_records([pair])
    assert [r["role"] for r in rows] == ["chosen", "rejected"]
    assert set(rows[0]) == {"query_id", "sample_index", "serialized_text", "mask_spans", "role", "attempt_gap"}
    rec = masked_record(pair.chosen, "sft")
    assert "role" not in rec and rec["mask_spans"][0]["kind"] == "tool_result"
