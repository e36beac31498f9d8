"""Evaluation harness: pass@k, SC/CC tables, judge metrics, correlation,
benchmark preprocessing, decontamination, tool-usage analytics and a scalar
reference for the DPO + NLL objective."""

from __future__ import annotations

import math
import re
import statistics
from collections import Counter, OrderedDict, defaultdict
from dataclasses import dataclass
from typing import Any, Sequence

import numpy as np

from .backends import EmbeddingProvider
from .core import MathQuery, StepKind, ToolName, Trajectory
from .errors import DegenerateInput, DomainError, ProviderFailure, RaggedSamples, UndefinedMetric

# Reference constants for the preference-training objective.
DPO_BETA = 0.1
NLL_ALPHA = 0.3


def pass_at_k(n: int, c: int, k: int) -> float:
    """Unbiased pass@k: ``1 - C(n-c, k) / C(n, k)`` in product form."""
    if not (0 <= c <= n and 1 <= k <= n):
        raise DomainError(f"pass_at_k needs 0 <= c <= n and 1 <= k <= n, got n={n} c={c} k={k}")
    if n - c < k:
        return 1.0
    prob_all_fail = 1.0
    for i in range(k):
        prob_all_fail *= (n - c - i) / (n - i)
    return 1.0 - prob_all_fail


@dataclass(frozen=True)
class SampleOutcome:
    query_id: str
    sample_index: int
    syntax_pass: bool
    consistency_pass: bool
    tool_calls: int = 0
    revisions: int = 0
    benchmark: str = ""

    def __post_init__(self) -> None:
        if self.consistency_pass and not self.syntax_pass:
            raise ValueError(f"{self.query_id}#{self.sample_index}: consistency pass without syntax pass")
        if self.tool_calls < 0 or self.revisions < 0:
            raise ValueError("tool_calls and revisions must be non-negative")

    def to_dict(self) -> dict[str, Any]:
        return {
            "query_id": self.query_id,
            "sample_index": self.sample_index,
            "syntax_pass": self.syntax_pass,
            "consistency_pass": self.consistency_pass,
            "tool_calls": self.tool_calls,
            "revisions": self.revisions,
            "benchmark": self.benchmark,
        }

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> SampleOutcome:
        return cls(
            query_id=str(data["query_id"]),
            sample_index=int(data["sample_index"]),
            syntax_pass=bool(data["syntax_pass"]),
            consistency_pass=bool(data["consistency_pass"]),
            tool_calls=int(data.get("tool_calls", 0)),
            revisions=int(data.get("revisions", 0)),
            benchmark=data.get("benchmark", ""),
        )


def outcome_from_trajectory(t: Trajectory, benchmark: str = "") -> SampleOutcome:
    """One orchestrator run counts as one sample.

    The final statement's last syntax and consistency results decide the
    sample; a run that never reached consistency gets no CC credit.
    """
    results = t.tool_results
    last_version = len(t.statements) - 1
    syntax_ok = consistency_ok = False
    # Results after the last version was introduced belong to it.
    version = -1
    for s in t.steps:
        if s.statement_version is not None:
            version = s.statement_version
            syntax_ok = consistency_ok = False
        if s.result is not None and version == last_version:
            if s.result.tool is ToolName.SYNTAX_CHECK:
                syntax_ok = s.result.passed
            else:
                consistency_ok = s.result.passed and syntax_ok
    return SampleOutcome(
        query_id=t.query.id,
        sample_index=t.sample_index,
        syntax_pass=syntax_ok,
        consistency_pass=consistency_ok,
        tool_calls=len(results),
        revisions=t.revision_count,
        benchmark=benchmark or t.query.source,
    )


@dataclass(frozen=True)
class RateRow:
    benchmark: str
    k: int
    sc: float
    cc: float
    queries: int

    def to_dict(self) -> dict[str, Any]:
        return {"benchmark": self.benchmark, "k": self.k, "sc": self.sc, "cc": self.cc, "queries": self.queries}


def aggregate_rates(outcomes: Sequence[SampleOutcome], k_values: Sequence[int]) -> list[RateRow]:
    """Mean per-query pass@k for syntax (SC) and consistency (CC), per benchmark."""
    by_bench: dict[str, dict[str, list[SampleOutcome]]] = OrderedDict()
    for o in outcomes:
        by_bench.setdefault(o.benchmark, OrderedDict()).setdefault(o.query_id, []).append(o)
    rows = []
    for bench, queries in by_bench.items():
        sizes = {len(v) for v in queries.values()}
        if len(sizes) != 1:
            raise RaggedSamples(f"benchmark {bench!r} has uneven sample counts {sorted(sizes)}")
        n = sizes.pop()
        for k in k_values:
            sc = [pass_at_k(n, sum(o.syntax_pass for o in v), k) for v in queries.values()]
            cc = [pass_at_k(n, sum(o.consistency_pass for o in v), k) for v in queries.values()]
            rows.append(RateRow(bench, k, math.fsum(sc) / len(sc), math.fsum(cc) / len(cc), len(queries)))
    return rows


def format_rate_table(rows: Sequence[RateRow]) -> str:
    header = f"{'benchmark':<20} {'k':>4} {'SC (%)':>8} {'CC (%)':>8} {'queries':>8}"
    lines = [header, "-" * len(header)]
    for r in rows:
        lines.append(f"{r.benchmark or '-':<20} {r.k:>4} {100 * r.sc:>8.2f} {100 * r.cc:>8.2f} {r.queries:>8}")
    return "\n".join(lines)


# -- judge metrics -----------------------------------------------------------------


@dataclass(frozen=True)
class ConfusionCounts:
    tp: int
    fp: int
    tn: int
    fn: int

    def __post_init__(self) -> None:
        if min(self.tp, self.fp, self.tn, self.fn) < 0:
            raise ValueError("confusion counts must be non-negative")

    @classmethod
    def from_labels(cls, predicted: Sequence[bool], actual: Sequence[bool]) -> ConfusionCounts:
        """``True`` means "consistent" (the positive class)."""
        if len(predicted) != len(actual):
            raise ValueError("predicted and actual must align")
        pairs = Counter(zip(predicted, actual))
        return cls(pairs[(True, True)], pairs[(True, False)], pairs[(False, False)], pairs[(False, True)])


@dataclass(frozen=True)
class ConfusionMetrics:
    """Each metric is ``None`` when its denominator is zero."""

    precision: float | None
    recall: float | None
    fnr: float | None
    tnr: float | None
    fpr: float | None

    def require(self, name: str) -> float:
        value = getattr(self, name)
        if value is None:
            raise UndefinedMetric(f"{name} is undefined (zero denominator)")
        return value

    def to_dict(self) -> dict[str, float | None]:
        return {k: getattr(self, k) for k in ("precision", "recall", "fnr", "tnr", "fpr")}


def confusion_metrics(counts: ConfusionCounts) -> ConfusionMetrics:
    def ratio(num: int, den: int) -> float | None:
        return num / den if den else None

    recall = ratio(counts.tp, counts.tp + counts.fn)
    tnr = ratio(counts.tn, counts.tn + counts.fp)
    return ConfusionMetrics(
        precision=ratio(counts.tp, counts.tp + counts.fp),
        recall=recall,
        fnr=None if recall is None else 1.0 - recall,
        tnr=tnr,
        fpr=None if tnr is None else 1.0 - tnr,
    )


def pearson(x: Sequence[float], y: Sequence[float]) -> float:
    if len(x) != len(y):
        raise DegenerateInput("pearson needs equal-length inputs")
    if len(x) < 2:
        raise DegenerateInput("pearson needs at least two points")
    try:
        return statistics.correlation(list(map(float, x)), list(map(float, y)))
    except statistics.StatisticsError as exc:
        raise DegenerateInput(str(exc)) from exc


def majority_label(labels: Sequence[bool]) -> bool:
    """Majority vote over an odd number of annotator labels."""
    if not labels or len(labels) % 2 == 0:
        raise ValueError("majority vote needs an odd, nonzero number of labels")
    return sum(labels) * 2 > len(labels)


def human_agreement(tool_verdicts: Sequence[bool], annotations: Sequence[Sequence[bool]]) -> dict[str, float]:
    """Agreement rate and Pearson coefficient between tool and human majority."""
    human = [majority_label(a) for a in annotations]
    if len(human) != len(tool_verdicts):
        raise ValueError("tool verdicts and annotations must align")
    agree = sum(t == h for t, h in zip(tool_verdicts, human)) / len(human)
    return {"agreement": agree, "pearson": pearson([float(t) for t in tool_verdicts], [float(h) for h in human])}


# -- benchmark preprocessing --------------------------------------------------------

_WS = re.compile(r"\s+")


def normalize_query_text(text: str) -> str:
    return _WS.sub(" ", text).strip()


def dedup_queries(benchmark: Sequence[MathQuery]) -> list[MathQuery]:
    seen: set[str] = set()
    out = []
    for q in benchmark:
        key = normalize_query_text(q.text)
        if key not in seen:
            seen.add(key)
            out.append(q)
    return out


@dataclass(frozen=True)
class DecontaminationResult:
    kept: list[MathQuery]
    removed: list[tuple[MathQuery, float]]


def _unit_rows(vectors: list[list[float]]) -> np.ndarray:
    arr = np.asarray(vectors, dtype=np.float64)
    if arr.ndim != 2:
        raise ProviderFailure("embedding provider returned ragged vectors")
    norms = np.linalg.norm(arr, axis=1, keepdims=True)
    norms[norms == 0.0] = 1.0
    return arr / norms


def decontaminate(
    train: Sequence[MathQuery],
    bench: Sequence[MathQuery],
    embed: EmbeddingProvider,
    threshold: float = 0.8,
) -> DecontaminationResult:
    """Drop training items whose best cosine similarity to the benchmark
    strictly exceeds ``threshold``."""
    if not train:
        return DecontaminationResult([], [])
    if not bench:
        return DecontaminationResult(list(train), [])
    train_vecs = _embed_checked(embed, train)
    bench_vecs = _embed_checked(embed, bench)
    if train_vecs.shape[1] != bench_vecs.shape[1]:
        raise ProviderFailure("embedding dimensions differ between corpora")
    best = (train_vecs @ bench_vecs.T).max(axis=1)
    kept, removed = [], []
    for q, sim in zip(train, best):
        # Rounding absorbs float noise so an exact-threshold score is never removed.
        if round(float(sim), 12) > threshold:
            removed.append((q, float(sim)))
        else:
            kept.append(q)
    return DecontaminationResult(kept, removed)


def _embed_checked(embed: EmbeddingProvider, items: Sequence[MathQuery]) -> np.ndarray:
    try:
        vectors = embed.embed([q.text for q in items])
    except ProviderFailure as exc:
        ids = [items[i].id for i in exc.indices if 0 <= i < len(items)]
        raise ProviderFailure(f"{exc} (items: {ids})", indices=exc.indices, item_id=ids[0] if ids else None) from exc
    if len(vectors) != len(items):
        raise ProviderFailure("embedding provider returned the wrong number of vectors")
    return _unit_rows(vectors)


# -- tool usage ------------------------------------------------------------------


def tool_usage_stats(trajectories: Sequence[Trajectory]) -> dict[str, Any]:
    """Average tool calls, per-tool success rates, and consistency success
    keyed by the statement version (0 = first attempt) it ran on."""
    if not trajectories:
        return {}
    total_calls = 0
    passed: Counter[str] = Counter()
    calls: Counter[str] = Counter()
    by_attempt: dict[int, list[bool]] = defaultdict(list)
    for t in trajectories:
        version = -1
        for s in t.steps:
            if s.statement_version is not None:
                version = s.statement_version
            if s.kind is not StepKind.TOOL_RESULT or s.result is None:
                continue
            total_calls += 1
            name = s.result.tool.value
            calls[name] += 1
            passed[name] += s.result.passed
            if s.result.tool is ToolName.CONSISTENCY_CHECK:
                by_attempt[version].append(s.result.passed)

    def rate(name: str) -> float | None:
        return passed[name] / calls[name] if calls[name] else None

    return {
        "trajectories": len(trajectories),
        "avg_tool_calls": total_calls / len(trajectories),
        "syntax_success_rate": rate(ToolName.SYNTAX_CHECK.value),
        "consistency_success_rate": rate(ToolName.CONSISTENCY_CHECK.value),
        "consistency_success_by_attempt": {k: sum(v) / len(v) for k, v in sorted(by_attempt.items())},
    }


# -- preference objective ----------------------------------------------------------


def softplus(x: float) -> float:
    """``log(1 + e^x)`` without overflow."""
    return max(x, 0.0) + math.log1p(math.exp(-abs(x)))


def dpo_nll_loss(
    chosen_logratio: float,
    rejected_logratio: float,
    chosen_policy_logp: float,
    beta: float = DPO_BETA,
    alpha: float = NLL_ALPHA,
) -> float:
    """``-log sigmoid(beta * (chosen - rejected)) - alpha * chosen_policy_logp``.

    Log-ratios are summed per-sequence ``log pi_theta - log pi_ref`` over
    unmasked positions.
    """
    if beta <= 0:
        raise DomainError("beta must be positive")
    if alpha < 0:
        raise DomainError("alpha must be non-negative")
    margin = beta * (chosen_logratio - rejected_logratio)
    return softplus(-margin) - alpha * chosen_policy_logp
