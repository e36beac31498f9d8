from __future__ import annotations

import json

import pytest

from conftest import simulated_trajectories
from autoformal.core import (
    ConsistencyReport,
    Diagnostic,
    FormalStatement,
    JudgeVerdict,
    MathQuery,
    Ruling,
    RunConfig,
    Severity,
    Stage,
    Status,
    StepKind,
    SyntaxReport,
    ToolInvocation,
    ToolName,
    Trajectory,
    TrajectoryStep,
    count_revisions,
    load_queries,
    load_trajectories,
    save_trajectories,
)
from autoformal.errors import EmptyTrajectory


def test_diagnostic_wire_round_trip():
    d = Diagnostic(Severity.ERROR, 7, 48, 7, 50, "unexpected token")
    wire = d.to_wire()
    assert wire == {
        "severity": "error",
        "pos": {"line": 7, "column": 48},
        "endPos": {"line": 7, "column": 50},
        "data": "unexpected token",
    }
    assert Diagnostic.from_wire(wire) == d
    assert d.shifted(-3).start_line == 4


def test_diagnostic_missing_end_position_defaults_to_start():
    d = Diagnostic.from_wire({"severity": "warning", "pos": {"line": 2, "column": 3}, "data": "w"})
    assert (d.end_line, d.end_col) == (2, 3)
    assert d.severity is Severity.WARNING


@pytest.mark.parametrize("args", [(0, 0, 1, 0), (2, 0, 1, 0), (1, 5, 1, 4), (1, -1, 1, 0)])
def test_diagnostic_rejects_bad_positions(args):
    with pytest.raises(ValueError):
        Diagnostic(Severity.ERROR, *args, "m")


def test_syntax_report_pass_iff_no_errors():
    err = Diagnostic(Severity.ERROR, 1, 0, 1, 1, "e")
    warn = Diagnostic(Severity.WARNING, 1, 0, 1, 1, "w")
    assert SyntaxReport.from_diagnostics([warn], Stage.BATCH).passed
    assert not SyntaxReport.from_diagnostics([warn, err], Stage.BATCH).passed
    with pytest.raises(ValueError):
        SyntaxReport(True, (err,))
    with pytest.raises(ValueError):
        SyntaxReport(False, ())
    with pytest.raises(ValueError):
        SyntaxReport(True, (), backend_error="BackendTimeout")


def test_syntax_report_payload_key_order():
    report = SyntaxReport(True, ())
    assert json.dumps(report.payload()) == '{"pass": true, "errors": []}'
    assert SyntaxReport.from_dict(report.to_dict()) == report


def test_consistency_report_payload_and_round_trip():
    v = JudgeVerdict("a", Ruling.CONSISTENT, "ok")
    report = ConsistencyReport(True, "ok", (v,))
    assert list(report.payload()) == ["pass", "explanations"]
    assert ConsistencyReport.from_dict(report.to_dict()) == report


def test_math_query_requires_id_and_text():
    with pytest.raises(ValueError):
        MathQuery("", "text")
    with pytest.raises(ValueError):
        MathQuery("id", "  ")


def test_formal_statement_default_imports():
    s = FormalStatement("theorem x : True := by sorry")
    assert s.required_imports == ("Mathlib", "Aesop")
    assert FormalStatement.from_dict(s.to_dict()) == s


def test_tool_invocation_code_property():
    inv = ToolInvocation(ToolName.SYNTAX_CHECK, {"lean4_code": "x"})
    assert inv.code == "x"
    assert ToolInvocation(ToolName.SYNTAX_CHECK, {}).code == ""


def test_run_config_budget_is_exclusive_bound():
    assert RunConfig().revision_budget == 3
    assert RunConfig(max_revisions=8).revision_budget == 7
    assert RunConfig(max_revisions=0).revision_budget == 0
    with pytest.raises(ValueError):
        RunConfig.from_dict({"max_revision": 3})
    assert RunConfig.from_dict(RunConfig().to_dict()) == RunConfig()


@pytest.mark.parametrize("bad", [{"samples_per_query": 0}, {"temperature": -1}, {"decontamination_threshold": 1.5}])
def test_run_config_validation(bad):
    with pytest.raises(ValueError):
        RunConfig(**bad)


def test_trajectory_version_and_revision_invariants():
    q = MathQuery("q", "t")
    s = FormalStatement("a := by sorry")
    step0 = TrajectoryStep(StepKind.MODEL_TURN, "x", statement_version=0)
    step2 = TrajectoryStep(StepKind.MODEL_TURN, "y", statement_version=2)
    Trajectory(q, (step0,), (s,), Status.FAILED_RULE)
    with pytest.raises(ValueError):
        Trajectory(q, (step0, step2), (s, s), Status.FAILED_RULE, revision_count=1)
    with pytest.raises(ValueError):
        Trajectory(q, (step0,), (s,), Status.FAILED_RULE, revision_count=1)


def test_count_revisions_empty_trajectory():
    t = Trajectory(MathQuery("q", "t"), (), (), Status.ABORTED)
    with pytest.raises(EmptyTrajectory):
        count_revisions(t)


def test_trajectory_jsonl_round_trip(tmp_path):
    trajectories = simulated_trajectories(4, 3, seed=11)
    path = tmp_path / "t.jsonl"
    save_trajectories(path, trajectories)
    assert load_trajectories(path) == trajectories
    # Unicode stays readable in the file.
    assert "∀" in path.read_text(encoding="utf-8")


def test_load_queries_rejects_duplicate_ids(tmp_path):
    path = tmp_path / "q.jsonl"
    path.write_text('{"id": "a", "text": "x"}\n\n{"id": "a", "text": "y"}\n', encoding="utf-8")
    with pytest.raises(ValueError, match="duplicate"):
        load_queries(path)
