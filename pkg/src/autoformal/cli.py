"""Command-line entry point.

Every subcommand reads and writes line-delimited JSON and leaves a run
manifest (``<out>.manifest.json``) beside its primary output. Exit status: 0 on
success, 1 when strict mode saw an item-level failure, 2 on usage or
configuration errors.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import os
import sys
import tempfile
import time
import uuid
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path
from typing import Any, Callable, Sequence

from . import __version__
from .backends import (
    CallCounter,
    EndpointConfig,
    HashingEmbedder,
    HttpChatClient,
    HttpEmbedder,
    HttpLeanClient,
    MockLeanCompiler,
)
from .consistency_tool import ConsistencyChecker, Judge
from .core import (
    FormalStatement,
    MathQuery,
    RunConfig,
    Status,
    load_queries,
    load_trajectories,
    read_jsonl,
    save_trajectories,
    write_jsonl,
)
from .errors import AutoformalError, ConfigError, SerializationMismatch
from .evaluation import (
    SampleOutcome,
    aggregate_rates,
    decontaminate,
    dedup_queries,
    format_rate_table,
    outcome_from_trajectory,
    tool_usage_stats,
)
from .mocks import SimulatedFormalizer, keyword_panel
from .orchestrator import Toolbox, formalize, validate_trajectory
from .pipeline import (
    dpo_records,
    filter_expert_iteration,
    group_by_query,
    masked_record,
    mine_dpo_pairs,
    upsample_cold_start,
)
from .syntax_tool import SyntaxChecker, precheck

log = logging.getLogger("autoformal")

VOLATILE_MANIFEST_KEYS = ("run_id", "started_at", "wall_clock_s")


class JsonLogFormatter(logging.Formatter):
    def format(self, record: logging.LogRecord) -> str:
        return json.dumps(
            {"level": record.levelname.lower(), "logger": record.name, "msg": record.getMessage()},
            ensure_ascii=False,
        )


def _setup_logging(verbose: bool) -> None:
    handler = logging.StreamHandler(sys.stderr)
    handler.setFormatter(JsonLogFormatter())
    root = logging.getLogger()
    root.handlers[:] = [handler]
    root.setLevel(logging.INFO if verbose else logging.WARNING)


# -- run context and manifest ------------------------------------------------------


def sha256_file(path: str | Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 16), b""):
            h.update(chunk)
    return h.hexdigest()


def _atomic_write_text(path: Path, text: str) -> None:
    fd, tmp = tempfile.mkstemp(dir=path.parent or ".", prefix=path.name, suffix=".tmp")
    with os.fdopen(fd, "w", encoding="utf-8") as fh:
        fh.write(text)
    os.replace(tmp, path)


class Run:
    def __init__(self, command: str, args: argparse.Namespace):
        self.command = command
        self.args = args
        self.counters = CallCounter()
        self.inputs: list[str] = []
        self.outputs: list[str] = []
        self.item_failures = 0
        self.started = time.time()
        self.run_id = uuid.uuid4().hex

    def manifest(self, config: RunConfig | None) -> dict[str, Any]:
        snapshot = {k: v for k, v in sorted(vars(self.args).items()) if k != "func"}
        return {
            "run_id": self.run_id,
            "tool_version": __version__,
            "command": self.command,
            "arguments": snapshot,
            "config": config.to_dict() if config else None,
            "inputs": {p: sha256_file(p) for p in self.inputs},
            "outputs": {p: sha256_file(p) for p in self.outputs},
            "counters": self.counters.snapshot(),
            "item_failures": self.item_failures,
            "started_at": self.started,
            "wall_clock_s": round(time.time() - self.started, 3),
        }

    def write_manifest(self, config: RunConfig | None) -> Path | None:
        target = getattr(self.args, "manifest", None)
        if target is None and self.outputs:
            target = self.outputs[0] + ".manifest.json"
        if target is None:
            return None
        path = Path(target)
        _atomic_write_text(path, json.dumps(self.manifest(config), indent=2, sort_keys=True, ensure_ascii=False) + "\n")
        return path


# -- configuration ---------------------------------------------------------------


def _load_json(path: str) -> Any:
    try:
        with open(path, encoding="utf-8") as fh:
            return json.load(fh)
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc


def build_run_config(args: argparse.Namespace) -> RunConfig:
    base: dict[str, Any] = {}
    if getattr(args, "config", None):
        data = _load_json(args.config)
        base.update(data.get("run", {}))
    overrides = {
        "max_revisions": getattr(args, "max_revisions", None),
        "samples_per_query": getattr(args, "samples", None),
        "temperature": getattr(args, "temperature", None),
        "batch_size": getattr(args, "batch_size", None),
        "compile_timeout_s": getattr(args, "timeout", None),
        "decontamination_threshold": getattr(args, "threshold", None),
        "workers": getattr(args, "workers", None),
    }
    base.update({k: v for k, v in overrides.items() if v is not None})
    try:
        return RunConfig.from_dict(base)
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from exc


def _endpoint_spec(args: argparse.Namespace, name: str) -> Any:
    value = getattr(args, name, None)
    if value is None and getattr(args, "config", None):
        value = _load_json(args.config).get(name)
    if value is None:
        value = "mock"
    if isinstance(value, str) and value != "mock":
        value = _load_json(value)
    return value


def make_lean_client(args: argparse.Namespace):
    spec = _endpoint_spec(args, "lean")
    if spec == "mock" or (isinstance(spec, dict) and spec.get("kind") == "mock"):
        return MockLeanCompiler()
    spec = dict(spec)
    spec.pop("kind", None)
    return HttpLeanClient(EndpointConfig.from_dict(spec))


def make_judges(args: argparse.Namespace, config: RunConfig) -> list[Judge]:
    spec = _endpoint_spec(args, "judges")
    if spec == "mock":
        return keyword_panel(config.judge_order)
    if not isinstance(spec, list) or not spec:
        raise ConfigError("judges config must be a nonempty list")
    judges = []
    for entry in spec:
        entry = dict(entry)
        kind = entry.pop("kind", "http")
        jid = entry.pop("id", entry.get("model_name", f"judge{len(judges)}"))
        if kind == "mock":
            judges.extend(keyword_panel([jid]))
            continue
        cfg = EndpointConfig.from_dict(entry)
        judges.append(Judge(jid, HttpChatClient(cfg), temperature=cfg.temperature or 0.0, max_retries=cfg.max_retries))
    order = {jid: i for i, jid in enumerate(config.judge_order)}
    return sorted(judges, key=lambda j: order.get(j.judge_id, len(order)))


def make_model_factory(args: argparse.Namespace) -> Callable[[MathQuery, int], Any]:
    spec = _endpoint_spec(args, "model")
    seed = args.seed
    if spec == "mock" or (isinstance(spec, dict) and spec.get("kind") == "mock"):
        return lambda q, i: SimulatedFormalizer(q, seed, i)
    spec = dict(spec)
    spec.pop("kind", None)
    client = HttpChatClient(EndpointConfig.from_dict(spec))
    return lambda q, i: client


def _read_statements(path: str) -> list[tuple[str, FormalStatement]]:
    out = []
    for i, rec in enumerate(read_jsonl(path)):
        out.append((str(rec.get("id", i)), FormalStatement.from_dict(rec)))
    return out


# -- subcommands -------------------------------------------------------------------


def cmd_formalize(run: Run, args: argparse.Namespace, config: RunConfig) -> None:
    queries = load_queries(args.queries)
    run.inputs.append(args.queries)
    factory = make_model_factory(args)
    syntax = SyntaxChecker(make_lean_client(args), config, workers=1, nonce=f"s{args.seed}", counters=run.counters)
    consistency = ConsistencyChecker(make_judges(args, config), counters=run.counters)
    toolbox = Toolbox(syntax, consistency)
    jobs = [(q, i) for q in queries for i in range(config.samples_per_query)]

    def work(job: tuple[MathQuery, int]):
        q, i = job
        return formalize(q, factory(q, i), toolbox, config, sample_index=i)

    with ThreadPoolExecutor(max_workers=config.workers) as pool:
        trajectories = list(pool.map(work, jobs))
    for t in trajectories:
        run.counters.add(f"status_{t.status.value}")
        if t.status is Status.FAILED_RULE:
            run.counters.add("rule_violations")
        if t.status is Status.ABORTED:
            run.item_failures += 1
    save_trajectories(args.out, trajectories)
    run.outputs.append(args.out)


def cmd_precheck(run: Run, args: argparse.Namespace, config: RunConfig) -> None:
    items = _read_statements(args.statements)
    run.inputs.append(args.statements)
    rows = []
    for sid, stmt in items:
        res = precheck(stmt)
        rows.append({"id": sid, "pass": res.passed, "failures": [f.value for f in res.failures], "detail": list(res.detail)})
        run.counters.add("passed" if res.passed else "rejected")
    write_jsonl(args.out, rows)
    run.outputs.append(args.out)


def cmd_syntax_check(run: Run, args: argparse.Namespace, config: RunConfig) -> None:
    items = _read_statements(args.statements)
    run.inputs.append(args.statements)
    checker = SyntaxChecker(make_lean_client(args), config, nonce=f"s{args.seed}", counters=run.counters)
    reports = checker.check([s for _, s in items])
    rows = []
    for (sid, _), rep in zip(items, reports):
        rows.append({"id": sid, **rep.to_dict()})
        if rep.backend_error:
            run.item_failures += 1
    write_jsonl(args.out, rows)
    run.outputs.append(args.out)


def cmd_consistency_check(run: Run, args: argparse.Namespace, config: RunConfig) -> None:
    run.inputs.append(args.pairs)
    checker = ConsistencyChecker(make_judges(args, config), counters=run.counters)
    rows = []
    for rec in read_jsonl(args.pairs):
        query = MathQuery.from_dict(rec["query"])
        stmt = FormalStatement.from_dict(rec["statement"])
        report = checker.check(query, stmt)
        if any(v.error for v in report.per_judge):
            run.item_failures += 1
        rows.append({"id": query.id, **report.to_dict()})
    write_jsonl(args.out, rows)
    run.outputs.append(args.out)


def cmd_validate(run: Run, args: argparse.Namespace, config: RunConfig) -> None:
    trajectories = load_trajectories(args.trajectories)
    run.inputs.append(args.trajectories)
    rows = []
    for t in trajectories:
        verdict = validate_trajectory(t)
        if not verdict:
            run.item_failures += 1
        rows.append({"query_id": t.query.id, "sample_index": t.sample_index,
                     "compliant": verdict.compliant, "reason": verdict.reason})
    run.counters.add("violations", run.item_failures)
    if args.out:
        write_jsonl(args.out, rows)
        run.outputs.append(args.out)
    else:
        print(f"{len(rows) - run.item_failures}/{len(rows)} trajectories compliant")


def cmd_upsample(run: Run, args: argparse.Namespace, config: RunConfig) -> None:
    trajectories = load_trajectories(args.trajectories)
    run.inputs.append(args.trajectories)
    out = upsample_cold_start(trajectories, args.factor)
    run.counters.add("input", len(trajectories))
    run.counters.add("output", len(out))
    save_trajectories(args.out, out)
    run.outputs.append(args.out)


def cmd_filter_ei(run: Run, args: argparse.Namespace, config: RunConfig) -> None:
    trajectories = load_trajectories(args.trajectories)
    run.inputs.append(args.trajectories)
    kept, retry = filter_expert_iteration(trajectories, args.max_revisions)
    run.counters.add("kept", len(kept))
    run.counters.add("retry_queries", len(retry))
    save_trajectories(args.out, kept)
    run.outputs.append(args.out)
    retry_path = args.retry_out or args.out + ".retry.jsonl"
    write_jsonl(retry_path, ({"query_id": q} for q in retry))
    run.outputs.append(retry_path)


def cmd_mine_dpo(run: Run, args: argparse.Namespace, config: RunConfig) -> None:
    trajectories = load_trajectories(args.trajectories)
    run.inputs.append(args.trajectories)
    pairs = mine_dpo_pairs(group_by_query(trajectories), args.min_gap)
    run.counters.add("pairs", len(pairs))
    write_jsonl(args.out, dpo_records(pairs))
    run.outputs.append(args.out)


def cmd_mask(run: Run, args: argparse.Namespace, config: RunConfig) -> None:
    trajectories = load_trajectories(args.trajectories)
    run.inputs.append(args.trajectories)
    rows = []
    for t in trajectories:
        try:
            rows.append(masked_record(t, args.mode))
        except SerializationMismatch as exc:
            log.error("cannot mask %s#%d: %s", t.query.id, t.sample_index, exc)
            run.item_failures += 1
    write_jsonl(args.out, rows)
    run.outputs.append(args.out)


def cmd_dedup(run: Run, args: argparse.Namespace, config: RunConfig) -> None:
    queries = [MathQuery.from_dict(r) for r in read_jsonl(args.queries)]
    run.inputs.append(args.queries)
    out = dedup_queries(queries)
    run.counters.add("dropped", len(queries) - len(out))
    write_jsonl(args.out, (q.to_dict() for q in out))
    run.outputs.append(args.out)


def cmd_decontaminate(run: Run, args: argparse.Namespace, config: RunConfig) -> None:
    train = [MathQuery.from_dict(r) for r in read_jsonl(args.train)]
    bench = [MathQuery.from_dict(r) for r in read_jsonl(args.bench)]
    run.inputs.extend([args.train, args.bench])
    spec = _endpoint_spec(args, "embedder")
    if spec == "mock" or (isinstance(spec, dict) and spec.get("kind") == "mock"):
        provider = HashingEmbedder()
    else:
        spec = dict(spec)
        spec.pop("kind", None)
        provider = HttpEmbedder(EndpointConfig.from_dict(spec))
    result = decontaminate(train, bench, provider, config.decontamination_threshold)
    run.counters.add("removed", len(result.removed))
    write_jsonl(args.out, (q.to_dict() for q in result.kept))
    removed_path = args.removed_out or args.out + ".removed.jsonl"
    write_jsonl(removed_path, ({**q.to_dict(), "max_similarity": s} for q, s in result.removed))
    run.outputs.extend([args.out, removed_path])


def _parse_k(text: str) -> list[int]:
    try:
        ks = [int(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"invalid k list {text!r}") from None
    if not ks or min(ks) < 1:
        raise argparse.ArgumentTypeError("k values must be positive integers")
    return ks


def cmd_eval(run: Run, args: argparse.Namespace, config: RunConfig) -> None:
    if args.outcomes:
        run.inputs.append(args.outcomes)
        outcomes = [SampleOutcome.from_dict(r) for r in read_jsonl(args.outcomes)]
    else:
        run.inputs.append(args.trajectories)
        outcomes = [outcome_from_trajectory(t) for t in load_trajectories(args.trajectories)]
    rows = aggregate_rates(outcomes, args.k)
    print(format_rate_table(rows))
    if args.out:
        write_jsonl(args.out, (r.to_dict() for r in rows))
        run.outputs.append(args.out)


def cmd_stats(run: Run, args: argparse.Namespace, config: RunConfig) -> None:
    trajectories = load_trajectories(args.trajectories)
    run.inputs.append(args.trajectories)
    stats = tool_usage_stats(trajectories)
    text = json.dumps(stats, indent=2, sort_keys=True)
    print(text)
    if args.out:
        Path(args.out).write_text(text + "\n", encoding="utf-8")
        run.outputs.append(args.out)


# -- parser ----------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="autoformal", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True, metavar="COMMAND")

    def add(name: str, func, help_: str, *, strict_default: bool = True) -> argparse.ArgumentParser:
        p = sub.add_parser(name, help=help_, description=help_)
        p.set_defaults(func=func, strict=strict_default)
        p.add_argument("--config", help="JSON config file supplying defaults (flags override it)")
        p.add_argument("--manifest", help="manifest path (default: <out>.manifest.json)")
        p.add_argument("--workers", type=int, help="worker pool size (default: logical cores)")
        p.add_argument("--seed", type=int, default=0, help="seed for mock backends and namespace nonces")
        p.add_argument("-v", "--verbose", action="store_true", help="log progress at info level")
        if strict_default:
            p.add_argument("--no-strict", dest="strict", action="store_false", help="exit 0 despite item failures")
        else:
            p.add_argument("--strict", dest="strict", action="store_true", help="exit 1 on item failures")
        return p

    p = add("formalize", cmd_formalize, "run the revision loop over a query file", strict_default=False)
    p.add_argument("--queries", required=True, help="JSONL of {id, text, source}")
    p.add_argument("--samples", type=int, help="samples per query (default 16)")
    p.add_argument("--temperature", type=float, help="sampling temperature (default 0.6)")
    p.add_argument("--max-revisions", type=int, help="exclusive revision bound (default 4)")
    p.add_argument("--model", help="'mock' or JSON endpoint config for the formalizer")
    p.add_argument("--lean", help="'mock' or JSON endpoint config for the Lean server")
    p.add_argument("--judges", help="'mock' or JSON list of judge endpoint configs")
    p.add_argument("--out", required=True, help="trajectory JSONL output")

    p = add("precheck", cmd_precheck, "static pre-check of statements")
    p.add_argument("--statements", required=True, help="JSONL of {id, code, required_imports}")
    p.add_argument("--out", required=True)

    p = add("syntax-check", cmd_syntax_check, "grouped compilation of statements")
    p.add_argument("--statements", required=True, help="JSONL of {id, code, required_imports}")
    p.add_argument("--lean", help="'mock' or JSON endpoint config for the Lean server")
    p.add_argument("--batch-size", type=int, help="statements per compiled file (default 20)")
    p.add_argument("--timeout", type=float, help="seconds per compilation (default 300)")
    p.add_argument("--out", required=True)

    p = add("consistency-check", cmd_consistency_check, "judge-panel consistency check")
    p.add_argument("--pairs", required=True, help="JSONL of {query: {...}, statement: {...}}")
    p.add_argument("--judges", help="'mock' or JSON list of judge endpoint configs")
    p.add_argument("--out", required=True)

    p = add("validate", cmd_validate, "replay trajectories against the tool rules")
    p.add_argument("--trajectories", required=True)
    p.add_argument("--out")

    p = add("upsample", cmd_upsample, "repeat multi-revision trajectories")
    p.add_argument("--trajectories", required=True)
    p.add_argument("--factor", type=int, default=2)
    p.add_argument("--out", required=True)

    p = add("filter-ei", cmd_filter_ei, "expert-iteration filter")
    p.add_argument("--trajectories", required=True)
    p.add_argument("--max-revisions", type=int, default=8, help="keep revision_count < this (default 8)")
    p.add_argument("--out", required=True)
    p.add_argument("--retry-out", help="retry-pool JSONL (default: <out>.retry.jsonl)")

    p = add("mine-dpo", cmd_mine_dpo, "mine preference pairs by revision gap")
    p.add_argument("--trajectories", required=True)
    p.add_argument("--min-gap", type=int, default=3)
    p.add_argument("--out", required=True)

    p = add("mask", cmd_mask, "annotate loss-mask spans")
    p.add_argument("--trajectories", required=True)
    p.add_argument("--mode", choices=["sft", "dpo"], default="sft")
    p.add_argument("--out", required=True)

    p = add("dedup", cmd_dedup, "drop duplicate benchmark queries")
    p.add_argument("--queries", required=True)
    p.add_argument("--out", required=True)

    p = add("decontaminate", cmd_decontaminate, "remove training items too similar to a benchmark")
    p.add_argument("--train", required=True)
    p.add_argument("--bench", required=True)
    p.add_argument("--embedder", help="'mock' or JSON endpoint config (default mock)")
    p.add_argument("--threshold", type=float, help="cosine threshold, strict > (default 0.8)")
    p.add_argument("--out", required=True)
    p.add_argument("--removed-out")

    p = add("eval", cmd_eval, "SC/CC pass@k tables")
    src = p.add_mutually_exclusive_group(required=True)
    src.add_argument("--outcomes", help="JSONL of sample outcomes")
    src.add_argument("--trajectories", help="trajectory JSONL (one run = one sample)")
    p.add_argument("--k", type=_parse_k, default=[1, 8, 16], help="comma-separated k values")
    p.add_argument("--out")

    p = add("stats", cmd_stats, "tool-usage report")
    p.add_argument("--trajectories", required=True)
    p.add_argument("--out")
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    _setup_logging(args.verbose)
    if args.workers is None:
        args.workers = os.cpu_count() or 1
    run = Run(args.command, args)
    try:
        config = build_run_config(args)
        args.func(run, args, config)
    except ConfigError as exc:
        print(f"autoformal: configuration error: {exc}", file=sys.stderr)
        return 2
    except (AutoformalError, ValueError, KeyError, OSError) as exc:
        print(f"autoformal {args.command}: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1
    run.write_manifest(config)
    if run.item_failures and args.strict:
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
