"""Training-data operations over trajectories.

Cold-start upsampling, the expert-iteration filter, DPO pair mining,
character-span loss masks, and the perturbation filter used to build the
consistency benchmark.
"""

from __future__ import annotations

import random
from collections import OrderedDict
from dataclasses import dataclass
from enum import Enum
from typing import Any, Iterable, Mapping, Sequence

from .core import FormalStatement, MathQuery, Status, StepKind, SyntaxReport, Trajectory
from .errors import InsufficientCandidates, SerializationMismatch
from .orchestrator import validate_trajectory

# -- similarity ----------------------------------------------------------------


def edit_distance(a: str, b: str) -> int:
    """Levenshtein distance with unit costs, two-row dynamic programme."""
    if len(a) < len(b):
        a, b = b, a
    prev = list(range(len(b) + 1))
    for i, ca in enumerate(a, 1):
        cur = [i]
        for j, cb in enumerate(b, 1):
            cur.append(min(prev[j] + 1, cur[j - 1] + 1, prev[j - 1] + (ca != cb)))
        prev = cur
    return prev[-1]


def normalized_levenshtein(a: str, b: str) -> float:
    longest = max(len(a), len(b))
    if longest == 0:
        return 1.0
    return 1.0 - edit_distance(a, b) / longest


# -- perturbation benchmark -----------------------------------------------------


class BandMode(str, Enum):
    # keep low < similarity < high
    BAND = "band"
    # keep similarity <= threshold; the stricter rejection reading
    REJECT_ABOVE = "reject_above"


@dataclass(frozen=True)
class PerturbationCandidate:
    positive: FormalStatement
    candidate: FormalStatement
    similarity: float
    syntax_valid: bool
    label_consistent: bool = False


def filter_perturbations(
    positive: FormalStatement,
    candidates: Sequence[FormalStatement],
    syntax_reports: Sequence[SyntaxReport],
    band: tuple[float, float] = (0.95, 1.0),
    *,
    count: int = 4,
    mode: BandMode = BandMode.BAND,
    labels: Sequence[bool] | None = None,
) -> list[PerturbationCandidate]:
    """Select ``count`` negatives, most similar first.

    Raises :class:`InsufficientCandidates` (carrying the survivors) when fewer
    remain, so the caller can regenerate.
    """
    if len(candidates) != len(syntax_reports):
        raise ValueError("syntax_reports must align with candidates")
    low, high = band
    seen: set[str] = set()
    survivors: list[PerturbationCandidate] = []
    for i, (cand, report) in enumerate(zip(candidates, syntax_reports)):
        if not report.passed or cand.code in seen:
            continue
        seen.add(cand.code)
        sim = normalized_levenshtein(positive.code, cand.code)
        if cand.code == positive.code:
            continue
        if mode is BandMode.BAND and not (low < sim < high):
            continue
        if mode is BandMode.REJECT_ABOVE and sim > low:
            continue
        label = labels[i] if labels is not None else False
        survivors.append(PerturbationCandidate(positive, cand, sim, True, label))
    survivors.sort(key=lambda c: -c.similarity)
    if len(survivors) < count:
        raise InsufficientCandidates(f"{len(survivors)} of {count} perturbations survived", survivors)
    return survivors[:count]


# -- cold start and expert iteration ------------------------------------------------


def sample_cold_start_queries(queries: Sequence[MathQuery], fraction: float = 0.1, seed: int = 0) -> list[MathQuery]:
    """Seeded uniform sample, returned in input order."""
    if not 0.0 <= fraction <= 1.0:
        raise ValueError("fraction must lie in [0, 1]")
    k = round(len(queries) * fraction)
    chosen = set(random.Random(seed).sample(range(len(queries)), k))
    return [q for i, q in enumerate(queries) if i in chosen]


def upsample_cold_start(trajectories: Sequence[Trajectory], factor: int = 2) -> list[Trajectory]:
    """Repeat trajectories with two or more revisions ``factor`` times, in place."""
    if factor < 1:
        raise ValueError("factor must be >= 1")
    out: list[Trajectory] = []
    for t in trajectories:
        out.extend([t] * (factor if t.revision_count >= 2 else 1))
    return out


def filter_expert_iteration(
    trajectories: Sequence[Trajectory], max_revisions: int = 8
) -> tuple[list[Trajectory], list[str]]:
    """Keep compliant successes with fewer than ``max_revisions`` revisions.

    The retry pool lists the query ids of every trajectory not kept, once each,
    in first-seen order.
    """
    kept: list[Trajectory] = []
    dropped: list[str] = []
    for t in trajectories:
        if _compliant_success(t) and t.revision_count < max_revisions:
            kept.append(t)
        else:
            dropped.append(t.query.id)
    return kept, list(OrderedDict.fromkeys(dropped))


def _compliant_success(t: Trajectory) -> bool:
    return t.status is Status.SUCCESS and bool(validate_trajectory(t))


# -- DPO pairs -------------------------------------------------------------------


@dataclass(frozen=True)
class DpoPair:
    query_id: str
    chosen: Trajectory
    rejected: Trajectory
    attempt_gap: int

    def __post_init__(self) -> None:
        if self.attempt_gap != self.rejected.revision_count - self.chosen.revision_count:
            raise ValueError("attempt_gap must equal the revision difference")
        if self.attempt_gap < 1:
            raise ValueError("attempt_gap must be positive")
        if self.chosen.status is not Status.SUCCESS or self.rejected.status is not Status.SUCCESS:
            raise ValueError("both sides of a DPO pair must be successful trajectories")


def mine_dpo_pairs(trajectory_groups: Mapping[str, Sequence[Trajectory]], min_gap: int = 3) -> list[DpoPair]:
    """One pair per query: fewest revisions (chosen) vs most (rejected).

    Only compliant successes take part. Ties go to the lowest sample index on
    both ends.
    """
    pairs = []
    for query_id, members in trajectory_groups.items():
        group = [t for t in members if _compliant_success(t)]
        if len(group) < 2:
            continue
        ordered = sorted(group, key=lambda t: (t.revision_count, t.sample_index))
        chosen = ordered[0]
        top = ordered[-1].revision_count
        rejected = min((t for t in group if t.revision_count == top), key=lambda t: t.sample_index)
        gap = rejected.revision_count - chosen.revision_count
        if gap >= min_gap:
            pairs.append(DpoPair(query_id, chosen, rejected, gap))
    return pairs


def group_by_query(trajectories: Iterable[Trajectory]) -> dict[str, list[Trajectory]]:
    groups: dict[str, list[Trajectory]] = {}
    for t in trajectories:
        groups.setdefault(t.query.id, []).append(t)
    return groups


# -- loss masks ------------------------------------------------------------------


class MaskKind(str, Enum):
    TOOL_RESULT = "tool_result"
    TOOL_INVOCATION = "tool_invocation"


class MaskMode(str, Enum):
    SFT = "sft"
    DPO = "dpo"


@dataclass(frozen=True)
class MaskSpan:
    start: int
    end: int
    kind: MaskKind

    def to_dict(self) -> dict[str, Any]:
        return {"start": self.start, "end": self.end, "kind": self.kind.value}


STEP_SEPARATOR = "\n"


def serialize_trajectory(trajectory: Trajectory) -> tuple[str, list[int]]:
    """Concatenate step texts; also return each step's start offset."""
    offsets = []
    pos = 0
    parts = []
    for i, s in enumerate(trajectory.steps):
        if i:
            parts.append(STEP_SEPARATOR)
            pos += len(STEP_SEPARATOR)
        offsets.append(pos)
        parts.append(s.text)
        pos += len(s.text)
    return "".join(parts), offsets


def annotate_loss_masks(trajectory: Trajectory, mode: MaskMode | str) -> list[MaskSpan]:
    mode = MaskMode(mode)
    text, offsets = serialize_trajectory(trajectory)
    spans: list[MaskSpan] = []
    for step, start in zip(trajectory.steps, offsets):
        if step.kind is StepKind.TOOL_RESULT:
            body = step.text
            if not (body.startswith("<tool_result") and body.rstrip().endswith("result>")):
                raise SerializationMismatch(f"tool result at offset {start} is not tag-delimited")
            spans.append(MaskSpan(start, start + len(body), MaskKind.TOOL_RESULT))
        elif mode is MaskMode.DPO and step.invocation is not None:
            raw = step.invocation.raw
            local = step.text.rfind(raw) if raw else -1
            if local < 0:
                raise SerializationMismatch(f"tool call not found in model turn at offset {start}")
            spans.append(MaskSpan(start + local, start + local + len(raw), MaskKind.TOOL_INVOCATION))
    for span in spans:
        if not 0 <= span.start < span.end <= len(text):
            raise SerializationMismatch(f"span {span} falls outside the serialization")
    return sorted(spans, key=lambda s: s.start)


def excise(text: str, spans: Sequence[MaskSpan]) -> str:
    out, pos = [], 0
    for s in sorted(spans, key=lambda s: s.start):
        out.append(text[pos : s.start])
        pos = s.end
    out.append(text[pos:])
    return "".join(out)


def masked_record(trajectory: Trajectory, mode: MaskMode | str, role: str | None = None) -> dict[str, Any]:
    text, _ = serialize_trajectory(trajectory)
    rec: dict[str, Any] = {
        "query_id": trajectory.query.id,
        "sample_index": trajectory.sample_index,
        "serialized_text": text,
        "mask_spans": [s.to_dict() for s in annotate_loss_masks(trajectory, mode)],
    }
    if role is not None:
        rec["role"] = role
    return rec


def dpo_records(pairs: Sequence[DpoPair]) -> list[dict[str, Any]]:
    rows = []
    for p in pairs:
        for role, t in (("chosen", p.chosen), ("rejected", p.rejected)):
            row = masked_record(t, MaskMode.DPO, role)
            row["attempt_gap"] = p.attempt_gap
            rows.append(row)
    return rows
