from __future__ import annotations

import json
import logging
from pathlib import Path

import pytest

from conftest import StubTools, lean
from autoformal.backends import ScriptedChatClient
from autoformal.cli import VOLATILE_MANIFEST_KEYS, JsonLogFormatter, main
from autoformal.core import MathQuery, RunConfig, load_trajectories, read_jsonl, save_trajectories, write_jsonl
from autoformal.orchestrator import formalize


@pytest.fixture
def queries(tmp_path: Path) -> Path:
    path = tmp_path / "queries.jsonl"
    write_jsonl(path, [{"id": f"q{i}", "text": f"Show that {i} + 0 = {i}.", "source": "toy"} for i in range(3)])
    return path


@pytest.fixture
def trajectories(tmp_path: Path, queries: Path) -> Path:
    out = tmp_path / "traj.jsonl"
    assert main(["formalize", "--queries", str(queries), "--samples", "4", "--out", str(out), "--workers", "2"]) == 0
    return out


def _manifest(path: Path) -> dict:
    return json.loads(Path(str(path) + ".manifest.json").read_text())


def test_formalize_writes_trajectories_and_manifest(trajectories: Path, queries: Path):
    ts = load_trajectories(trajectories)
    assert len(ts) == 12
    assert [(t.query.id, t.sample_index) for t in ts] == [(f"q{i}", s) for i in range(3) for s in range(4)]
    m = _manifest(trajectories)
    for key in ("run_id", "tool_version", "command", "arguments", "config", "inputs", "outputs", "counters",
                "started_at", "wall_clock_s"):
        assert key in m
    assert m["command"] == "formalize"
    assert m["config"]["samples_per_query"] == 4
    assert list(m["inputs"]) == [str(queries)] and len(m["outputs"][str(trajectories)]) == 64
    assert sum(v for k, v in m["counters"].items() if k.startswith("status_")) == 12


def test_formalize_is_deterministic_under_seed(tmp_path: Path, queries: Path):
    a, b = tmp_path / "a.jsonl", tmp_path / "b.jsonl"
    for out in (a, b):
        assert main(["formalize", "--queries", str(queries), "--samples", "3", "--seed", "7", "--out", str(out)]) == 0
    assert a.read_bytes() == b.read_bytes()
    ma, mb = _manifest(a), _manifest(b)
    for m in (ma, mb):
        for key in VOLATILE_MANIFEST_KEYS:
            m.pop(key)
        m.pop("arguments"), m.pop("outputs")
    assert ma == mb


def test_config_file_and_flag_precedence(tmp_path: Path, queries: Path):
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({"run": {"samples_per_query": 2, "max_revisions": 3}}))
    out = tmp_path / "o.jsonl"
    assert main(["formalize", "--config", str(cfg), "--queries", str(queries), "--max-revisions", "5",
                 "--out", str(out)]) == 0
    m = _manifest(out)
    assert m["config"]["samples_per_query"] == 2 and m["config"]["max_revisions"] == 5


def test_bad_config_exits_2(tmp_path: Path, queries: Path, capsys):
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({"run": {"max_revisions": -1}}))
    assert main(["formalize", "--config", str(cfg), "--queries", str(queries), "--out", str(tmp_path / "o")]) == 2
    assert "configuration error" in capsys.readouterr().err
    assert main(["formalize", "--config", str(tmp_path / "missing.json"), "--queries", str(queries),
                 "--out", str(tmp_path / "o")]) == 2


def test_usage_errors_exit_2(capsys):
    assert main(["no-such-command"]) == 2
    assert main(["formalize"]) == 2
    assert main(["eval", "--outcomes", "x", "--k", "0"]) == 2


def test_missing_input_exits_1(tmp_path: Path):
    assert main(["filter-ei", "--trajectories", str(tmp_path / "nope.jsonl"), "--out", str(tmp_path / "o")]) == 1


def test_precheck_and_syntax_check(tmp_path: Path):
    stmts = tmp_path / "stmts.jsonl"
    write_jsonl(stmts, [
        {"id": "good", "code": lean("theorem t (x : ℕ) : x + 0 = x := by sorry")},
        {"id": "binder", "code": lean("theorem t (S : Finset ℕ) : ∀ u v ∈ S, u = v := by sorry")},
        {"id": "rfl", "code": lean("theorem t : 1 = 1 := by rfl")},
    ])
    pre = tmp_path / "pre.jsonl"
    assert main(["precheck", "--statements", str(stmts), "--out", str(pre)]) == 0
    assert [r["pass"] for r in read_jsonl(pre)] == [True, True, False]
    syn = tmp_path / "syn.jsonl"
    assert main(["syntax-check", "--statements", str(stmts), "--out", str(syn), "--batch-size", "2"]) == 0
    rows = list(read_jsonl(syn))
    assert [r["id"] for r in rows] == ["good", "binder", "rfl"]
    assert [r["pass"] for r in rows] == [True, False, False]
    assert _manifest(syn)["counters"]["compiler_calls"] == 1


def test_syntax_check_backend_failure_is_strict(tmp_path: Path):
    stmts = tmp_path / "stmts.jsonl"
    write_jsonl(stmts, [{"id": "good", "code": lean("theorem t : True := by sorry")}])
    lean_cfg = tmp_path / "lean.json"
    lean_cfg.write_text(json.dumps({"base_url": "http://127.0.0.1:9", "timeout_s": 2, "max_retries": 0}))
    out = tmp_path / "syn.jsonl"
    args = ["syntax-check", "--statements", str(stmts), "--lean", str(lean_cfg), "--out", str(out)]
    assert main(args) == 1
    (row,) = read_jsonl(out)
    assert row["backend_error"] == "BackendUnavailable"
    assert main(args + ["--no-strict"]) == 0


def test_consistency_check(tmp_path: Path):
    pairs = tmp_path / "pairs.jsonl"
    q = {"id": "q", "text": "Show 1 + 1 = 2.", "source": "t"}
    write_jsonl(pairs, [{"query": q, "statement": {"code": lean("theorem q : (1 : ℕ) + 1 = 2 := by sorry")}}])
    out = tmp_path / "cc.jsonl"
    assert main(["consistency-check", "--pairs", str(pairs), "--out", str(out)]) == 0
    (row,) = read_jsonl(out)
    assert row["id"] == "q" and set(row) >= {"pass", "explanations"}


def test_validate_flags_violations(tmp_path: Path, trajectories: Path):
    assert main(["validate", "--trajectories", str(trajectories), "--out", str(tmp_path / "v.jsonl")]) == 0
    assert all(r["compliant"] for r in read_jsonl(tmp_path / "v.jsonl"))
    bad = formalize(MathQuery("x", "t"), ScriptedChatClient(["hm", "still nothing"]), StubTools(), RunConfig())
    mixed = tmp_path / "mixed.jsonl"
    save_trajectories(mixed, load_trajectories(trajectories) + [bad])
    assert main(["validate", "--trajectories", str(mixed), "--out", str(tmp_path / "v2.jsonl")]) == 1
    assert main(["validate", "--trajectories", str(mixed), "--out", str(tmp_path / "v3.jsonl"), "--no-strict"]) == 0
    assert sum(not r["compliant"] for r in read_jsonl(tmp_path / "v3.jsonl")) == 1


def test_training_data_commands(tmp_path: Path, trajectories: Path):
    ts = load_trajectories(trajectories)
    up = tmp_path / "up.jsonl"
    assert main(["upsample", "--trajectories", str(trajectories), "--out", str(up)]) == 0
    assert len(load_trajectories(up)) == len(ts) + sum(t.revision_count >= 2 for t in ts)

    ei = tmp_path / "ei.jsonl"
    assert main(["filter-ei", "--trajectories", str(trajectories), "--out", str(ei)]) == 0
    kept = load_trajectories(ei)
    retry = [r["query_id"] for r in read_jsonl(str(ei) + ".retry.jsonl")]
    assert len(retry) == len(set(retry))
    assert all(t.status.value == "success" for t in kept)

    dpo = tmp_path / "dpo.jsonl"
    assert main(["mine-dpo", "--trajectories", str(trajectories), "--min-gap", "1", "--out", str(dpo)]) == 0
    rows = list(read_jsonl(dpo))
    assert len(rows) % 2 == 0 and all(r["role"] in ("chosen", "rejected") for r in rows)

    for mode in ("sft", "dpo"):
        out = tmp_path / f"mask_{mode}.jsonl"
        assert main(["mask", "--trajectories", str(trajectories), "--mode", mode, "--out", str(out)]) == 0
        for row in read_jsonl(out):
            for span in row["mask_spans"]:
                assert 0 <= span["start"] < span["end"] <= len(row["serialized_text"])


def test_dedup_and_decontaminate(tmp_path: Path):
    train = tmp_path / "train.jsonl"
    bench = tmp_path / "bench.jsonl"
    write_jsonl(train, [
        {"id": "t1", "text": "Prove that the sum of two even numbers is even."},
        {"id": "t2", "text": "Prove that  the sum of two even numbers is even."},
        {"id": "t3", "text": "Compute the derivative of sin."},
    ])
    write_jsonl(bench, [{"id": "b1", "text": "Prove that the sum of two even numbers is even."}])
    deduped = tmp_path / "dedup.jsonl"
    assert main(["dedup", "--queries", str(train), "--out", str(deduped)]) == 0
    assert [r["id"] for r in read_jsonl(deduped)] == ["t1", "t3"]
    kept = tmp_path / "kept.jsonl"
    assert main(["decontaminate", "--train", str(deduped), "--bench", str(bench), "--out", str(kept)]) == 0
    assert [r["id"] for r in read_jsonl(kept)] == ["t3"]
    (removed,) = read_jsonl(str(kept) + ".removed.jsonl")
    assert removed["id"] == "t1" and removed["max_similarity"] == pytest.approx(1.0)


def test_eval_and_stats(tmp_path: Path, trajectories: Path, capsys):
    out = tmp_path / "rates.jsonl"
    assert main(["eval", "--trajectories", str(trajectories), "--k", "1,4", "--out", str(out)]) == 0
    assert "SC (%)" in capsys.readouterr().out
    rows = list(read_jsonl(out))
    assert [r["k"] for r in rows] == [1, 4] and all(0 <= r["cc"] <= r["sc"] <= 1 for r in rows)

    outcomes = tmp_path / "outcomes.jsonl"
    write_jsonl(outcomes, [
        {"query_id": "a", "sample_index": 0, "syntax_pass": True, "consistency_pass": False},
        {"query_id": "a", "sample_index": 1, "syntax_pass": False, "consistency_pass": False},
    ])
    assert main(["eval", "--outcomes", str(outcomes), "--k", "1", "--out", str(out)]) == 0
    (row,) = read_jsonl(out)
    assert row["sc"] == 0.5 and row["cc"] == 0.0

    stats = tmp_path / "stats.json"
    assert main(["stats", "--trajectories", str(trajectories), "--out", str(stats)]) == 0
    data = json.loads(stats.read_text())
    assert data["trajectories"] == 12 and data["avg_tool_calls"] > 0


def test_json_log_formatter():
    record = logging.LogRecord("autoformal", logging.WARNING, __file__, 1, "hello %s", ("∀",), None)
    assert json.loads(JsonLogFormatter().format(record)) == {"level": "warning", "logger": "autoformal", "msg": "hello ∀"}


def test_backend_selection_from_config_file(tmp_path: Path):
    train, bench = tmp_path / "train.jsonl", tmp_path / "bench.jsonl"
    write_jsonl(train, [{"id": "t", "text": "alpha"}])
    write_jsonl(bench, [{"id": "b", "text": "alpha"}])
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({"embedder": {"kind": "mock"}, "run": {"decontamination_threshold": 0.5}}))
    out = tmp_path / "kept.jsonl"
    assert main(["decontaminate", "--config", str(cfg), "--train", str(train), "--bench", str(bench),
                 "--out", str(out)]) == 0
    assert list(read_jsonl(out)) == []
    assert _manifest(out)["config"]["decontamination_threshold"] == 0.5
