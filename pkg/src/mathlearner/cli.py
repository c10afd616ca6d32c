"""Command-line entry point: ingest, learn, solve, eval, report.

Configuration precedence is flags over config file over defaults; the
config file uses ``key=value`` lines (``#`` comments allowed) with the same
names as the ``PipelineConfig`` fields plus ``parallelism``. Credentials
come only from the ``MATHLEARNER_API_KEY`` environment variable.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from contextlib import contextmanager
from dataclasses import fields as dataclass_fields
from pathlib import Path

from . import dataset, evaluator, solver, store as store_mod
from .core import PipelineConfig, PipelineError
from .executor import PoolExecutor, StubExecutor
from .gateway import (
    Gateway,
    HashEmbedder,
    LiveBackend,
    LiveEmbedder,
    NullBackend,
    ScriptedBackend,
    load_templates,
)
from .learner import LearnerSession
from .solver import SolverSession

log = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_ERROR = 1
EXIT_DEGENERATE = 3

_CONFIG_FIELD_TYPES = {f.name: f.type for f in dataclass_fields(PipelineConfig)}


class CliError(PipelineError):
    pass


def _parse_config_file(path: str | Path) -> dict:
    values: dict = {}
    for n, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), start=1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise CliError(f"{path}:{n}: expected key=value")
        key, _, value = line.partition("=")
        values[key.strip()] = value.strip()
    return values


def _coerce(name: str, value: str):
    kind = _CONFIG_FIELD_TYPES.get(name, "str")
    if kind == "int":
        return int(value)
    if kind == "float":
        return float(value)
    return value


def build_config(args: argparse.Namespace) -> PipelineConfig:
    values: dict = {}
    if getattr(args, "config", None):
        for key, raw in _parse_config_file(args.config).items():
            if key == "parallelism":
                continue
            if key not in _CONFIG_FIELD_TYPES:
                raise CliError(f"unknown config key {key!r}")
            values[key] = _coerce(key, raw)
    for name in _CONFIG_FIELD_TYPES:
        flag = getattr(args, name, None)
        if flag is not None:
            values[name] = flag
    return PipelineConfig(**values)


def _resolve_parallelism(args: argparse.Namespace) -> int:
    if getattr(args, "parallelism", None) is not None:
        return args.parallelism
    if getattr(args, "config", None):
        raw = _parse_config_file(args.config).get("parallelism")
        if raw is not None:
            return int(raw)
    return 1


@contextmanager
def store_lock(directory: str | Path):
    """One command instance per store directory, via an exclusive lock file."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    lock_path = directory / ".lock"
    try:
        fd = os.open(lock_path, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
    except FileExistsError:
        raise CliError(
            f"store {directory} is locked by another command (remove {lock_path} if stale)"
        ) from None
    try:
        os.write(fd, str(os.getpid()).encode("ascii"))
        os.close(fd)
        yield
    finally:
        try:
            lock_path.unlink()
        except OSError:
            pass


def _build_backends(args: argparse.Namespace, config: PipelineConfig):
    """(gateway, executor) per the backend selection flag."""
    selection = args.backend
    embedder = HashEmbedder(config.embed_dimension)
    if selection == "hash-only":
        return Gateway(backend=NullBackend(), embedder=embedder), StubExecutor()
    if selection.startswith("scripted:"):
        script_path = selection.split(":", 1)[1]
        backend = ScriptedBackend.from_file(script_path)
        executor = _load_stub_executor(args)
        return Gateway(backend=backend, embedder=embedder), executor
    if selection == "live":
        backend = LiveBackend(
            base_url=args.base_url,
            completion_model=args.model,
            embedding_model=args.embedding_model,
        )
        if args.embedding_model:
            embedder = LiveEmbedder(backend)
        executor = PoolExecutor(
            worker_cmd=[part for part in args.runner_cmd.split(" ") if part],
            pool_size=_resolve_parallelism(args),
            memory_limit=config.exec_memory_limit,
        )
        return Gateway(backend=backend, embedder=embedder), executor
    raise CliError(f"unknown backend selection {selection!r}")


def _load_stub_executor(args: argparse.Namespace) -> StubExecutor:
    """Stub outcomes from a JSON file: {"<sha256 of source>": {"status": ...,
    "answer": ..., "stderr": ...}, ...}; sources hash exactly as written by
    the scripted completions."""
    from .executor import ExecutionOutcome, STATUS_OK

    script: dict = {}
    if getattr(args, "exec_script", None):
        data = json.loads(Path(args.exec_script).read_text(encoding="utf-8"))
        for key, spec in data.items():
            script[key] = ExecutionOutcome(
                request_id="",
                status=spec["status"],
                answer_text=spec.get("answer") if spec["status"] == STATUS_OK else None,
                stderr_excerpt=spec.get("stderr", ""),
            )
    return StubExecutor(script)


def _load_split(data_dir: str, manifest_path: str) -> tuple[dataset.Corpus, list[str], list[str]]:
    corpus = dataset.load_corpus(data_dir)
    manifest = json.loads(Path(manifest_path).read_text(encoding="utf-8"))
    return corpus, manifest["train_ids"], manifest["test_ids"]


def _subset(corpus: dataset.Corpus, ids: list[str]) -> dataset.Corpus:
    by_id = corpus.by_id()
    missing = [i for i in ids if i not in by_id]
    if missing:
        raise CliError(f"{len(missing)} manifest ids not found in dataset, first: {missing[0]}")
    return dataset.Corpus(problems=tuple(by_id[i] for i in ids))


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------

def cmd_ingest(args: argparse.Namespace) -> int:
    corpus = dataset.load_corpus(args.data)
    train, test = dataset.select_split(corpus, args.category, args.n_train, args.n_test, args.seed)
    manifest = {
        "schema_version": 1,
        "category": args.category,
        "seed": args.seed,
        "n_train": args.n_train,
        "n_test": args.n_test,
        "train_ids": [p.id for p, _ in train.problems],
        "test_ids": [p.id for p, _ in test.problems],
        "source_counts": corpus.manifest,
    }
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(json.dumps(manifest, sort_keys=True, indent=2) + "\n", encoding="utf-8")
    print(f"wrote {out}: {len(manifest['train_ids'])} train ids, {len(manifest['test_ids'])} test ids")
    return EXIT_OK


def cmd_learn(args: argparse.Namespace) -> int:
    config = build_config(args)
    corpus, train_ids, _ = _load_split(args.data, args.manifest)
    train = _subset(corpus, train_ids)
    gateway, executor = _build_backends(args, config)
    templates = load_templates(args.templates)
    session = LearnerSession(gateway, templates, executor, config)
    with store_lock(args.store):
        feature_store = store_mod.FeatureStore.create(gateway.embedder, directory=args.store)
        try:
            outcomes = session.learn_corpus(train, feature_store, parallelism=_resolve_parallelism(args))
        finally:
            feature_store.close()
            executor.close()
    tallies: dict[str, int] = {}
    for outcome in outcomes:
        tallies[outcome.status] = tallies.get(outcome.status, 0) + 1
    report = {
        "outcomes": [
            {
                "problem_id": o.problem_id,
                "status": o.status,
                "attempts": o.attempts,
                "record_id": o.record_id,
                "detail": o.detail,
            }
            for o in outcomes
        ],
        "tallies": tallies,
    }
    report_path = Path(args.store) / "learn_report.json"
    report_path.write_text(json.dumps(report, sort_keys=True, indent=2) + "\n", encoding="utf-8")
    stored = tallies.get("stored", 0)
    print(f"learned {stored}/{len(outcomes)} problems into {args.store} " f"(tallies: {tallies})")
    if outcomes and stored == 0:
        print("error: no records stored from a non-empty training set", file=sys.stderr)
        return EXIT_ERROR
    return EXIT_OK


def cmd_solve(args: argparse.Namespace) -> int:
    config = build_config(args)
    corpus, _, test_ids = _load_split(args.data, args.manifest)
    test = _subset(corpus, test_ids)
    gateway, executor = _build_backends(args, config)
    templates = load_templates(args.templates)
    session = SolverSession(gateway, templates, executor, config)

    feature_store = None
    if not args.baseline:
        feature_store = store_mod.load(args.store, embedder=gateway.embedder)

    traces_path = Path(args.traces)
    done: set[str] = set()
    if args.resume and traces_path.is_file():
        done = {t.problem_id for t in solver.read_traces(traces_path)}
    todo = [p for p, _ in test.problems if p.id not in done]
    try:
        traces = session.solve_batch(
            todo, feature_store, baseline=args.baseline, parallelism=_resolve_parallelism(args)
        )
    finally:
        executor.close()
    traces_path.parent.mkdir(parents=True, exist_ok=True)
    solver.write_traces(traces, traces_path, append=bool(done))
    skipped = f", {len(done)} already traced" if done else ""
    print(f"wrote {len(traces)} traces to {traces_path}{skipped}")
    return EXIT_OK


def cmd_eval(args: argparse.Namespace) -> int:
    config = build_config(args)
    corpus, _, test_ids = _load_split(args.data, args.manifest)
    test = _subset(corpus, test_ids)
    truth = {p.id: s.final_answer for p, s in test.problems}

    traces = solver.read_traces(args.traces)
    if {t.problem_id for t in traces} != set(test_ids):
        raise evaluator.MismatchedUniverse("trace ids do not match the manifest's test ids")
    counts, _ = evaluator.tally_traces(traces, truth, config.numeric_tolerance)

    cot_counts = None
    if args.baseline_traces:
        baseline_traces = solver.read_traces(args.baseline_traces)
        if {t.problem_id for t in baseline_traces} != set(test_ids):
            raise evaluator.MismatchedUniverse("baseline trace ids do not match the manifest's test ids")
        cot_counts, _ = evaluator.tally_traces(baseline_traces, truth, config.numeric_tolerance)

    report = evaluator.compute_metrics(counts, cot_counts)
    rendered = evaluator.render_report(report, format=args.format)
    if args.out:
        out = Path(args.out)
        out.parent.mkdir(parents=True, exist_ok=True)
        out.write_text(rendered if rendered.endswith("\n") else rendered + "\n", encoding="utf-8")
        print(f"wrote {out}")
    else:
        print(rendered, end="")
    if args.strict and report.degenerate:
        for flag in report.degenerate:
            print(f"degenerate: {flag}", file=sys.stderr)
        return EXIT_DEGENERATE
    return EXIT_OK


def cmd_report(args: argparse.Namespace) -> int:
    report = evaluator.MetricsReport.from_json(Path(args.metrics).read_text(encoding="utf-8"))
    print(evaluator.render_report(report, format=args.format), end="")
    return EXIT_OK


# ---------------------------------------------------------------------------
# Argument parsing
# ---------------------------------------------------------------------------

def _add_config_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="key=value config file")
    p.add_argument("--similarity-threshold", dest="similarity_threshold", type=float)
    p.add_argument("--top-k", dest="top_k", type=int)
    p.add_argument("--max-repair-attempts", dest="max_repair_attempts", type=int)
    p.add_argument("--category-weight", dest="category_weight", type=float)
    p.add_argument("--embed-dimension", dest="embed_dimension", type=int)
    p.add_argument("--exec-timeout", dest="exec_timeout", type=float)
    p.add_argument("--exec-memory-limit", dest="exec_memory_limit", type=int)
    p.add_argument("--numeric-tolerance", dest="numeric_tolerance", type=float)
    p.add_argument("--parallelism", type=int)


def _add_backend_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument(
        "--backend",
        default="hash-only",
        help="live, scripted:<script.json>, or hash-only",
    )
    p.add_argument("--exec-script", help="stub executor outcomes (JSON), for scripted runs")
    p.add_argument("--templates", help="prompt template directory (defaults to packaged templates)")
    p.add_argument("--base-url", default="https://api.openai.com/v1")
    p.add_argument("--model", default="gpt-4")
    p.add_argument("--embedding-model", default=None)
    p.add_argument("--runner-cmd", default=f"{sys.executable} -m sandbox_runner")


def make_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="mathlearner")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("ingest", help="select a train/test split and write its manifest")
    p.add_argument("--data", required=True)
    p.add_argument("--category", required=True)
    p.add_argument("--n-train", type=int, required=True)
    p.add_argument("--n-test", type=int, required=True)
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_ingest)

    p = sub.add_parser("learn", help="learn the training split into a store")
    p.add_argument("--data", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--store", required=True)
    _add_backend_flags(p)
    _add_config_flags(p)
    p.set_defaults(func=cmd_learn)

    p = sub.add_parser("solve", help="solve the test split, writing traces")
    p.add_argument("--data", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--store", required=False, default=None)
    p.add_argument("--traces", required=True)
    p.add_argument("--baseline", action="store_true", help="direct generation only")
    p.add_argument("--resume", action="store_true", help="skip problems already traced")
    _add_backend_flags(p)
    _add_config_flags(p)
    p.set_defaults(func=cmd_solve)

    p = sub.add_parser("eval", help="judge traces and report metrics")
    p.add_argument("--data", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--traces", required=True)
    p.add_argument("--baseline-traces", default=None)
    p.add_argument("--format", default="table-text", choices=["table-text", "json", "markdown"])
    p.add_argument("--strict", action="store_true")
    p.add_argument("--out", default=None)
    _add_config_flags(p)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("report", help="re-render a saved metrics report")
    p.add_argument("--metrics", required=True)
    p.add_argument("--format", default="table-text", choices=["table-text", "markdown"])
    p.set_defaults(func=cmd_report)

    return parser


def main(argv: list[str] | None = None) -> int:
    args = make_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING)
    if getattr(args, "command", None) == "solve" and not args.baseline and not args.store:
        print("error: --store is required unless --baseline is set", file=sys.stderr)
        return EXIT_ERROR
    try:
        return args.func(args)
    except PipelineError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())
