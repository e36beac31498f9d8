"""Syntax checking for formal statements.

Pipeline: a static pre-check rejects statements that would only waste (or
hang) compiler time; survivors are grouped by import set, concatenated into a
single file with each statement wrapped in its own namespace, compiled once per
group, and the compiler's diagnostics are mapped back to statement-local line
numbers. A group whose compilation raises or times out is re-run one statement
at a time.
"""

from __future__ import annotations

import logging
import re
import uuid
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, replace
from enum import Enum
from typing import Sequence

from .backends import CallCounter, LeanClient
from .core import Diagnostic, FormalStatement, RunConfig, Severity, Stage, SyntaxReport
from .errors import BackendError, BackendUnavailable, UnmappableDiagnostic

log = logging.getLogger(__name__)


class PrecheckFailure(str, Enum):
    MISSING_REQUIRED_IMPORT = "missing_required_import"
    MISSING_TERMINAL_SORRY = "missing_terminal_sorry"
    UNMATCHED_BRACKETS = "unmatched_brackets"


@dataclass(frozen=True)
class PrecheckResult:
    failures: tuple[PrecheckFailure, ...] = ()
    detail: tuple[str, ...] = ()

    @property
    def passed(self) -> bool:
        return not self.failures


DEFAULT_BRACKETS = {"(": ")", "[": "]", "{": "}"}
EXTENDED_BRACKETS = {**DEFAULT_BRACKETS, "⟨": "⟩", "«": "»"}

_IMPORT_LINE = re.compile(r"^\s*import\s+(.*)$")
_TERMINAL_SORRY = re.compile(r"(?<![\w.'])by\s+sorry$")


def declared_imports(code: str) -> list[str]:
    """Module names from ``import`` lines, in order of appearance, deduplicated."""
    names: list[str] = []
    for line in code.split("\n"):
        m = _IMPORT_LINE.match(line)
        if m:
            for name in m.group(1).split("--")[0].split():
                if name not in names:
                    names.append(name)
    return names


def find_unbalanced(code: str, pairs: dict[str, str] = DEFAULT_BRACKETS) -> str | None:
    """Return a description of the first bracket problem, or None if balanced.

    String literals, ``--`` line comments and (nested) ``/- -/`` block comments
    are skipped.
    """
    closers = {v: k for k, v in pairs.items()}
    stack: list[tuple[str, int]] = []
    i, n = 0, len(code)
    comment_depth = 0
    while i < n:
        ch = code[i]
        two = code[i : i + 2]
        if comment_depth:
            if two == "/-":
                comment_depth += 1
                i += 2
            elif two == "-/":
                comment_depth -= 1
                i += 2
            else:
                i += 1
            continue
        if two == "/-":
            comment_depth = 1
            i += 2
            continue
        if two == "--":
            nl = code.find("\n", i)
            i = n if nl < 0 else nl + 1
            continue
        if ch == '"':
            i += 1
            while i < n and code[i] != '"':
                i += 2 if code[i] == "\\" else 1
            i += 1
            continue
        if ch in pairs:
            stack.append((ch, i))
        elif ch in closers:
            if not stack or stack[-1][0] != closers[ch]:
                return f"unexpected {ch!r} at offset {i}"
            stack.pop()
        i += 1
    if comment_depth:
        return "unterminated block comment"
    if stack:
        opener, pos = stack[-1]
        return f"unclosed {opener!r} at offset {pos}"
    return None


def precheck(statement: FormalStatement, *, brackets: dict[str, str] = DEFAULT_BRACKETS) -> PrecheckResult:
    failures: list[PrecheckFailure] = []
    detail: list[str] = []
    present = set(declared_imports(statement.code))
    missing = [imp for imp in statement.required_imports if imp not in present]
    if missing:
        failures.append(PrecheckFailure.MISSING_REQUIRED_IMPORT)
        detail.append("missing required import(s): " + ", ".join(missing))
    if not _TERMINAL_SORRY.search(statement.code.rstrip()):
        failures.append(PrecheckFailure.MISSING_TERMINAL_SORRY)
        detail.append("statement must end with `by sorry`")
    problem = find_unbalanced(statement.code, brackets)
    if problem:
        failures.append(PrecheckFailure.UNMATCHED_BRACKETS)
        detail.append("unmatched brackets: " + problem)
    return PrecheckResult(tuple(failures), tuple(detail))


def precheck_report(statement: FormalStatement, result: PrecheckResult) -> SyntaxReport:
    last_line = statement.code.count("\n") + 1
    diags = [Diagnostic(Severity.ERROR, 1, 0, last_line, 0, "pre-check: " + d) for d in result.detail]
    return SyntaxReport(passed=False, errors=tuple(diags), stage=Stage.PRECHECK)


# -- grouping and assembly -------------------------------------------------------


@dataclass(frozen=True)
class StatementGroup:
    import_key: tuple[str, ...]
    members: tuple[tuple[int, FormalStatement], ...]
    group_id: int = 0


@dataclass(frozen=True)
class LineRange:
    statement_index: int
    first_line: int
    last_line: int
    # local line = global line - first_line + local_offset
    local_offset: int
    local_line_count: int

    def to_local(self, line: int) -> int:
        return min(max(line - self.first_line + self.local_offset, 1), self.local_line_count)


@dataclass(frozen=True)
class AssembledFile:
    source: str
    header_lines: int
    line_map: tuple[LineRange, ...]

    @property
    def members(self) -> list[int]:
        return [r.statement_index for r in self.line_map]


def import_key(statement: FormalStatement) -> tuple[str, ...]:
    return tuple(sorted(declared_imports(statement.code)))


def group_statements(
    statements: Sequence[tuple[int, FormalStatement]] | Sequence[FormalStatement],
    batch_size: int,
) -> list[StatementGroup]:
    """Partition statements by import set, in chunks of at most ``batch_size``.

    Keys are ordered by first appearance and members keep input order.
    """
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    indexed = [
        item if isinstance(item, tuple) else (i, item)  # type: ignore[misc]
        for i, item in enumerate(statements)
    ]
    by_key: dict[tuple[str, ...], list[tuple[int, FormalStatement]]] = {}
    for idx, stmt in indexed:
        by_key.setdefault(import_key(stmt), []).append((idx, stmt))
    groups: list[StatementGroup] = []
    for key, members in by_key.items():
        for start in range(0, len(members), batch_size):
            groups.append(StatementGroup(key, tuple(members[start : start + batch_size]), len(groups)))
    return groups


def _split_header(code: str) -> tuple[list[str], int]:
    """Drop the leading import/blank lines; return (body lines, lines dropped)."""
    lines = code.split("\n")
    skip = 0
    while skip < len(lines) and (not lines[skip].strip() or _IMPORT_LINE.match(lines[skip])):
        skip += 1
    return lines[skip:], skip


def namespace_name(group_id: int, member: int, nonce: str) -> str:
    suffix = f"_{nonce}" if nonce else ""
    return f"ATF_batch_{group_id}_{member}{suffix}"


def assemble_group(group: StatementGroup, nonce: str = "") -> AssembledFile:
    if not group.members:
        raise ValueError("cannot assemble an empty group")
    out = [f"import {name}" for name in group.import_key]
    out.append("")
    header_lines = len(out)
    ranges: list[LineRange] = []
    for pos, (idx, stmt) in enumerate(group.members):
        body, skipped = _split_header(stmt.code)
        name = namespace_name(group.group_id, pos, nonce)
        first = len(out) + 1
        out.append(f"namespace {name}")
        out.extend(body)
        out.append(f"end {name}")
        ranges.append(
            LineRange(
                statement_index=idx,
                first_line=first,
                last_line=len(out),
                local_offset=skipped,
                local_line_count=stmt.code.count("\n") + 1,
            )
        )
    return AssembledFile("\n".join(out) + "\n", header_lines, tuple(ranges))


def map_diagnostics(
    file_diags: Sequence[Diagnostic], assembled: AssembledFile
) -> dict[int, list[Diagnostic]]:
    """Reassign file-level diagnostics to the statements that own their lines.

    Header diagnostics are copied to every member: a broken shared header makes
    all of their results unreliable.
    """
    result: dict[int, list[Diagnostic]] = {r.statement_index: [] for r in assembled.line_map}
    for diag in file_diags:
        if diag.start_line <= assembled.header_lines:
            for r in assembled.line_map:
                result[r.statement_index].append(diag)
            continue
        owner = _owner(diag.start_line, assembled.line_map)
        if owner is None:
            raise UnmappableDiagnostic(f"diagnostic at line {diag.start_line} lies outside every member")
        start = owner.to_local(diag.start_line)
        end = owner.to_local(min(diag.end_line, owner.last_line))
        end_col = diag.end_col if diag.end_line <= owner.last_line else diag.start_col
        if (end, end_col) < (start, diag.start_col):
            end, end_col = start, diag.start_col
        result[owner.statement_index].append(
            replace(diag, start_line=start, end_line=end, end_col=end_col)
        )
    return result


def _owner(line: int, ranges: Sequence[LineRange]) -> LineRange | None:
    lo, hi = 0, len(ranges) - 1
    while lo <= hi:
        mid = (lo + hi) // 2
        r = ranges[mid]
        if line < r.first_line:
            hi = mid - 1
        elif line > r.last_line:
            lo = mid + 1
        else:
            return r
    return None


# -- dispatch --------------------------------------------------------------------


class SyntaxChecker:
    """Runs pre-check, grouped compilation and per-statement fallback.

    ``counters`` records ``groups_compiled``, ``fallbacks``, ``compiler_calls``
    and ``precheck_rejections`` for run manifests.
    """

    def __init__(
        self,
        client: LeanClient,
        config: RunConfig | None = None,
        *,
        workers: int | None = None,
        nonce: str | None = None,
        brackets: dict[str, str] = DEFAULT_BRACKETS,
        counters: CallCounter | None = None,
    ):
        self.client = client
        self.config = config or RunConfig()
        self.workers = workers or self.config.workers
        self.nonce = uuid.uuid4().hex[:8] if nonce is None else nonce
        self.brackets = brackets
        self.counters = counters or CallCounter()

    def check(self, statements: Sequence[FormalStatement]) -> list[SyntaxReport]:
        reports: list[SyntaxReport | None] = [None] * len(statements)
        survivors: list[tuple[int, FormalStatement]] = []
        for i, stmt in enumerate(statements):
            pre = precheck(stmt, brackets=self.brackets)
            if pre.passed:
                survivors.append((i, stmt))
            else:
                self.counters.add("precheck_rejections")
                reports[i] = precheck_report(stmt, pre)

        groups = group_statements(survivors, self.config.batch_size)
        if len(groups) <= 1 or self.workers <= 1:
            results = [self._run_group(g) for g in groups]
        else:
            with ThreadPoolExecutor(max_workers=self.workers) as pool:
                results = list(pool.map(self._run_group, groups))
        for group_result in results:
            for idx, report in group_result.items():
                reports[idx] = report
        assert all(r is not None for r in reports)
        return reports  # type: ignore[return-value]

    def _compile(self, code: str) -> list[Diagnostic]:
        self.counters.add("compiler_calls")
        return self.client.execute(code, self.config.compile_timeout_s)

    def _run_group(self, group: StatementGroup) -> dict[int, SyntaxReport]:
        assembled = assemble_group(group, self.nonce)
        self.counters.add("groups_compiled")
        try:
            per_member = map_diagnostics(self._compile(assembled.source), assembled)
        except (BackendError, UnmappableDiagnostic) as exc:
            log.warning("group %d failed (%s); falling back to individual calls", group.group_id, exc)
            self.counters.add("fallbacks")
            return {idx: self._run_individual(stmt) for idx, stmt in group.members}
        return {idx: SyntaxReport.from_diagnostics(per_member[idx], Stage.BATCH) for idx, _ in group.members}

    def _run_individual(self, stmt: FormalStatement) -> SyntaxReport:
        try:
            diags = self._compile(stmt.code)
        except BackendError as exc:
            self.counters.add("backend_unavailable")
            msg = f"backend unavailable: {type(exc).__name__}: {exc}"
            return SyntaxReport(
                passed=False,
                errors=(Diagnostic(Severity.ERROR, 1, 0, 1, 0, msg),),
                stage=Stage.INDIVIDUAL_FALLBACK,
                backend_error=BackendUnavailable.__name__,
            )
        return SyntaxReport.from_diagnostics(diags, Stage.INDIVIDUAL_FALLBACK)


def run_syntax_check(
    statements: Sequence[FormalStatement],
    client: LeanClient,
    config: RunConfig | None = None,
    **kwargs,
) -> list[SyntaxReport]:
    return SyntaxChecker(client, config, **kwargs).check(statements)
