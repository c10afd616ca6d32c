"""CLI commands over the scripted offline world."""
from __future__ import annotations

import json
from pathlib import Path

import pytest

from mathlearner import cli, evaluator, solver
from mathlearner.core import canonicalize_answer
from mathlearner.evaluator import QuadrantCounts
from mathlearner.solver import ExecutionSummary, MODE_AUGMENTED, MODE_DIRECT, SolveTrace

from pipeline_fixtures import BASELINE_CORRECT, build_world


@pytest.fixture()
def world(tmp_path):
    return build_world(tmp_path) | {"root": tmp_path}


def _dataset_dir(tmp_path, n=12, category="Algebra"):
    data = tmp_path / "plain_data"
    data.mkdir()
    for i in range(n):
        record = {
            "problem": f"Trivial case {i}?",
            "level": "Level 1",
            "type": category,
            "solution": rf"So \boxed{{{i}}}.",
        }
        (data / f"{i}.json").write_text(json.dumps(record), encoding="utf-8")
    return data


# ---------------------------------------------------------------------------
# ingest
# ---------------------------------------------------------------------------

def test_ingest_writes_manifest(tmp_path):
    data = _dataset_dir(tmp_path)
    out = tmp_path / "m.json"
    code = cli.main([
        "ingest", "--data", str(data), "--category", "Algebra",
        "--n-train", "4", "--n-test", "6", "--seed", "9", "--out", str(out),
    ])
    assert code == 0
    manifest = json.loads(out.read_text(encoding="utf-8"))
    assert len(manifest["train_ids"]) == 4
    assert len(manifest["test_ids"]) == 6
    assert not set(manifest["train_ids"]) & set(manifest["test_ids"])


def test_ingest_deterministic_bytes(tmp_path):
    data = _dataset_dir(tmp_path)
    out1, out2 = tmp_path / "m1.json", tmp_path / "m2.json"
    for out in (out1, out2):
        assert cli.main([
            "ingest", "--data", str(data), "--category", "Algebra",
            "--n-train", "3", "--n-test", "5", "--seed", "42", "--out", str(out),
        ]) == 0
    assert out1.read_bytes() == out2.read_bytes()


def test_ingest_not_enough_problems(tmp_path, capsys):
    data = _dataset_dir(tmp_path, n=3)
    code = cli.main([
        "ingest", "--data", str(data), "--category", "Algebra",
        "--n-train", "2", "--n-test", "5", "--seed", "1", "--out", str(tmp_path / "m.json"),
    ])
    assert code == 1
    assert "error" in capsys.readouterr().err


# ---------------------------------------------------------------------------
# learn
# ---------------------------------------------------------------------------

def _learn(world, store_name="store"):
    store_dir = world["root"] / store_name
    code = cli.main([
        "learn",
        "--data", str(world["data_dir"]),
        "--manifest", str(world["manifest_path"]),
        "--store", str(store_dir),
        "--backend", f"scripted:{world['script_path']}",
        "--exec-script", str(world["exec_path"]),
        "--embed-dimension", "64",
    ])
    return code, store_dir


def test_learn_stores_all_fixtures(world, capsys):
    code, store_dir = _learn(world)
    assert code == 0
    out = capsys.readouterr().out
    assert "learned 6/6" in out
    report = json.loads((store_dir / "learn_report.json").read_text(encoding="utf-8"))
    assert report["tallies"] == {"stored": 6}
    manifest = json.loads((store_dir / "manifest.json").read_text(encoding="utf-8"))
    assert manifest["record_count"] == 6


def test_learn_empty_train_exits_zero(world, tmp_path):
    manifest = json.loads(world["manifest_path"].read_text(encoding="utf-8"))
    manifest["train_ids"] = []
    empty_manifest = tmp_path / "empty.json"
    empty_manifest.write_text(json.dumps(manifest), encoding="utf-8")
    code = cli.main([
        "learn",
        "--data", str(world["data_dir"]),
        "--manifest", str(empty_manifest),
        "--store", str(tmp_path / "empty_store"),
        "--backend", f"scripted:{world['script_path']}",
        "--exec-script", str(world["exec_path"]),
        "--embed-dimension", "64",
    ])
    assert code == 0


def test_learn_all_failing_exits_nonzero(world, tmp_path, capsys):
    # an empty exec script makes every verification fail
    empty_exec = tmp_path / "noexec.json"
    empty_exec.write_text("{}", encoding="utf-8")
    code = cli.main([
        "learn",
        "--data", str(world["data_dir"]),
        "--manifest", str(world["manifest_path"]),
        "--store", str(tmp_path / "failing_store"),
        "--backend", f"scripted:{world['script_path']}",
        "--exec-script", str(empty_exec),
        "--embed-dimension", "64",
    ])
    assert code == 1


def test_learn_respects_store_lock(world, tmp_path):
    store_dir = world["root"] / "locked_store"
    store_dir.mkdir()
    (store_dir / ".lock").write_text("12345", encoding="utf-8")
    code = cli.main([
        "learn",
        "--data", str(world["data_dir"]),
        "--manifest", str(world["manifest_path"]),
        "--store", str(store_dir),
        "--backend", f"scripted:{world['script_path']}",
        "--exec-script", str(world["exec_path"]),
        "--embed-dimension", "64",
    ])
    assert code == 1


# ---------------------------------------------------------------------------
# solve
# ---------------------------------------------------------------------------

def _solve(world, store_dir, traces_name="traces.jsonl", baseline=False, resume=False):
    traces = world["root"] / traces_name
    script = world["baseline_script_path"] if baseline else world["script_path"]
    argv = [
        "solve",
        "--data", str(world["data_dir"]),
        "--manifest", str(world["manifest_path"]),
        "--traces", str(traces),
        "--backend", f"scripted:{script}",
        "--exec-script", str(world["exec_path"]),
        "--embed-dimension", "64",
    ]
    if baseline:
        argv.append("--baseline")
    else:
        argv += ["--store", str(store_dir)]
    if resume:
        argv.append("--resume")
    return cli.main(argv), traces


def test_solve_traces_in_manifest_order(world):
    _, store_dir = _learn(world)
    code, traces_path = _solve(world, store_dir)
    assert code == 0
    traces = solver.read_traces(traces_path)
    manifest = json.loads(world["manifest_path"].read_text(encoding="utf-8"))
    assert [t.problem_id for t in traces] == manifest["test_ids"]
    by_name = {world["id_by_name"][n]: n for n in world["id_by_name"]}
    modes = {by_name[t.problem_id]: t.mode for t in traces}
    assert all(modes[f"q{i}"] == MODE_AUGMENTED for i in range(6))
    assert all(modes[f"q{i}"] == MODE_DIRECT for i in range(6, 10))


def test_solve_baseline_all_direct(world):
    code, traces_path = _solve(world, None, "baseline.jsonl", baseline=True)
    assert code == 0
    traces = solver.read_traces(traces_path)
    assert len(traces) == 10
    assert all(t.mode == MODE_DIRECT for t in traces)


def test_solve_resume_skips_done(world, capsys):
    _, store_dir = _learn(world)
    _, traces_path = _solve(world, store_dir)
    before = traces_path.read_bytes()
    code, _ = _solve(world, store_dir, resume=True)
    assert code == 0
    assert "10 already traced" in capsys.readouterr().out
    assert traces_path.read_bytes() == before  # nothing re-solved


def test_solve_requires_store_unless_baseline(world, capsys):
    code = cli.main([
        "solve",
        "--data", str(world["data_dir"]),
        "--manifest", str(world["manifest_path"]),
        "--traces", str(world["root"] / "t.jsonl"),
        "--backend", f"scripted:{world['script_path']}",
    ])
    assert code == 1
    assert "--store" in capsys.readouterr().err


# ---------------------------------------------------------------------------
# eval + report
# ---------------------------------------------------------------------------

def test_eval_end_to_end(world, capsys):
    _, store_dir = _learn(world)
    _, traces_path = _solve(world, store_dir)
    _, baseline_path = _solve(world, None, "baseline.jsonl", baseline=True)
    out_path = world["root"] / "metrics.json"
    code = cli.main([
        "eval",
        "--data", str(world["data_dir"]),
        "--manifest", str(world["manifest_path"]),
        "--traces", str(traces_path),
        "--baseline-traces", str(baseline_path),
        "--format", "json",
        "--out", str(out_path),
    ])
    assert code == 0
    report = evaluator.MetricsReport.from_json(out_path.read_text(encoding="utf-8"))
    assert report.counts == QuadrantCounts(c_r=4, c_nr=2, nc_r=2, nc_nr=2)
    assert report.cot_counts.correct == len(BASELINE_CORRECT)
    assert report.global_accuracy == pytest.approx(0.6)


def test_eval_missing_baseline_flags(world, capsys):
    _, store_dir = _learn(world)
    _, traces_path = _solve(world, store_dir)
    code = cli.main([
        "eval",
        "--data", str(world["data_dir"]),
        "--manifest", str(world["manifest_path"]),
        "--traces", str(traces_path),
    ])
    assert code == 0
    out = capsys.readouterr().out
    assert "no baseline" in out
    assert "Profitability" not in out


def test_eval_strict_degenerate_exit(world):
    _, store_dir = _learn(world)
    _, traces_path = _solve(world, store_dir)
    code = cli.main([
        "eval",
        "--data", str(world["data_dir"]),
        "--manifest", str(world["manifest_path"]),
        "--traces", str(traces_path),
        "--strict",
    ])
    assert code == cli.EXIT_DEGENERATE


def test_eval_mismatched_trace_ids(world, tmp_path):
    _, store_dir = _learn(world)
    _, traces_path = _solve(world, store_dir)
    traces = solver.read_traces(traces_path)
    short = tmp_path / "short.jsonl"
    solver.write_traces(traces[:-1], short)
    code = cli.main([
        "eval",
        "--data", str(world["data_dir"]),
        "--manifest", str(world["manifest_path"]),
        "--traces", str(short),
    ])
    assert code == 1


def _paper_shaped_world(tmp_path):
    """150 synthetic problems with traces matching the reference tallies."""
    data = tmp_path / "paper_data"
    data.mkdir()
    ids = []
    for i in range(150):
        record = {
            "problem": f"Synthetic question {i}?",
            "level": "Level 5",
            "type": "Precalculus",
            "solution": r"Therefore \boxed{4}.",
        }
        (data / f"{i:03d}.json").write_text(json.dumps(record), encoding="utf-8")
    from mathlearner.dataset import load_corpus

    corpus = load_corpus(data)
    ids = [p.id for p, _ in corpus.problems]
    manifest = {"schema_version": 1, "train_ids": [], "test_ids": ids}
    manifest_path = tmp_path / "paper_manifest.json"
    manifest_path.write_text(json.dumps(manifest), encoding="utf-8")

    def trace(pid, mode, answer):
        ok = answer is not None
        return SolveTrace(
            problem_id=pid,
            mode=mode,
            query_features=None,
            retrieved=("rec", 0.9) if mode == MODE_AUGMENTED else None,
            extra_hits=(),
            program_source="def solve(): ...\n" if ok else None,
            execution=ExecutionSummary(status="ok" if ok else "exception", answer_text=answer),
            answer=canonicalize_answer(answer) if ok else None,
            attempts=1,
        )

    # quadrants (50, 25, 47, 28); baseline 62 correct
    traces = []
    for i, pid in enumerate(ids):
        if i < 50:
            traces.append(trace(pid, MODE_AUGMENTED, "4"))
        elif i < 75:
            traces.append(trace(pid, MODE_DIRECT, "4"))
        elif i < 122:
            traces.append(trace(pid, MODE_AUGMENTED, "5"))
        else:
            traces.append(trace(pid, MODE_DIRECT, None))
    baseline = [trace(pid, MODE_DIRECT, "4" if i < 62 else "5") for i, pid in enumerate(ids)]
    traces_path = tmp_path / "paper_traces.jsonl"
    baseline_path = tmp_path / "paper_baseline.jsonl"
    solver.write_traces(traces, traces_path)
    solver.write_traces(baseline, baseline_path)
    return data, manifest_path, traces_path, baseline_path


def test_eval_paper_shaped_traces(tmp_path, capsys):
    data, manifest_path, traces_path, baseline_path = _paper_shaped_world(tmp_path)
    code = cli.main([
        "eval",
        "--data", str(data),
        "--manifest", str(manifest_path),
        "--traces", str(traces_path),
        "--baseline-traces", str(baseline_path),
    ])
    assert code == 0
    out = capsys.readouterr().out
    assert "50.00%" in out
    assert "51.55%" in out
    assert "20.97%" in out
    assert "14.77%" in out


def test_report_rerenders_saved_metrics(world, tmp_path, capsys):
    _, store_dir = _learn(world)
    _, traces_path = _solve(world, store_dir)
    _, baseline_path = _solve(world, None, "baseline.jsonl", baseline=True)
    out_path = world["root"] / "metrics.json"
    cli.main([
        "eval",
        "--data", str(world["data_dir"]),
        "--manifest", str(world["manifest_path"]),
        "--traces", str(traces_path),
        "--baseline-traces", str(baseline_path),
        "--format", "json",
        "--out", str(out_path),
    ])
    capsys.readouterr()
    code = cli.main(["report", "--metrics", str(out_path), "--format", "markdown"])
    assert code == 0
    assert "| Metric | Value | Formula |" in capsys.readouterr().out


# ---------------------------------------------------------------------------
# config precedence
# ---------------------------------------------------------------------------

def test_config_precedence_flags_over_file(tmp_path):
    config_file = tmp_path / "run.cfg"
    config_file.write_text(
        "# comment\nsimilarity_threshold=0.5\ntop_k=3\nparallelism=2\n", encoding="utf-8"
    )
    args = cli.make_parser().parse_args([
        "learn", "--data", "d", "--manifest", "m", "--store", "s",
        "--config", str(config_file), "--similarity-threshold", "0.9",
    ])
    config = cli.build_config(args)
    assert config.similarity_threshold == 0.9  # flag wins
    assert config.top_k == 3  # file beats default
    assert config.max_repair_attempts == 3  # default
    assert cli._resolve_parallelism(args) == 2


def test_config_unknown_key(tmp_path):
    config_file = tmp_path / "run.cfg"
    config_file.write_text("mystery_knob=1\n", encoding="utf-8")
    args = cli.make_parser().parse_args([
        "learn", "--data", "d", "--manifest", "m", "--store", "s", "--config", str(config_file),
    ])
    with pytest.raises(cli.CliError):
        cli.build_config(args)
