"""Deterministic offline world for end-to-end runs.

Builds a small dataset plus the completion script and stub-executor script
that drive it: six training problems, six test twins whose scripted query
features exactly match a learned record (augmented path), and four novel
test problems with token-disjoint features (direct path). Correctness per
problem is fixed by the scripts:

    twins   q0..q3 correct, q4..q5 wrong
    novel   q6..q7 correct, q8 wrong, q9 times out (no answer)
    baseline: q0, q2, q6, q8 correct, everything else wrong

so the solve run tallies to quadrants (4, 2, 2, 2).
"""
from __future__ import annotations

import json
from pathlib import Path

from mathlearner.dataset import load_corpus
from mathlearner.executor import source_hash

TRAIN_ANSWERS = {f"t{i}": 10 + i for i in range(6)}
TWIN_ANSWERS = {f"q{i}": 10 + i for i in range(6)}
NOVEL_ANSWERS = {f"q{i}": 50 + i for i in range(6, 10)}

CORRECT_TWINS = ("q0", "q1", "q2", "q3")
CORRECT_NOVEL = ("q6", "q7")
BASELINE_CORRECT = ("q0", "q2", "q6", "q8")


def _program(value) -> str:
    return f"def compute():\n    return {value}\n\ndef solve():\n    return compute()\n"


TIMEOUT_SOURCE = "def solve():\n    while True:\n        pass\n"


def _learned_features(i: int) -> str:
    return f"CATEGORY: algebra family{i} pattern{i}\nSTEP 1: operation alpha{i} beta{i}"


def _novel_features(i: int) -> str:
    return f"CATEGORY: zz{i} ww{i}\nSTEP 1: yy{i} xx{i}"


def _record(statement: str, answer) -> dict:
    return {
        "problem": statement,
        "level": "Level 1",
        "type": "Algebra",
        "solution": f"Work it out carefully. The result is $\\boxed{{{answer}}}$.",
    }


def build_world(root: Path) -> dict:
    """Write dataset + scripts under ``root``; returns paths and id maps."""
    data_dir = root / "data"
    data_dir.mkdir(parents=True, exist_ok=True)

    names = list(TRAIN_ANSWERS) + list(TWIN_ANSWERS) + list(NOVEL_ANSWERS)
    answers = {**TRAIN_ANSWERS, **TWIN_ANSWERS, **NOVEL_ANSWERS}
    for name in names:
        record = _record(f"Compute the special value for case {name}.", answers[name])
        (data_dir / f"{name}.json").write_text(json.dumps(record), encoding="utf-8")

    corpus = load_corpus(data_dir)
    id_by_name = {}
    for problem, _ in corpus.problems:
        case = problem.statement.rsplit(" ", 1)[-1].rstrip(".")
        id_by_name[case] = problem.id

    completions: dict[str, dict[str, list[str]]] = {
        "decompose": {},
        "sketch": {},
        "synthesize": {},
        "featurize": {},
        "augmented_solve": {},
        "direct_solve": {},
    }
    exec_script: dict[str, dict] = {}

    def script_ok(source: str, value) -> None:
        exec_script[source_hash(source)] = {"status": "ok", "answer": str(value)}

    # learning scripts for the six trained problems
    for i, name in enumerate(TRAIN_ANSWERS):
        pid = id_by_name[name]
        source = _program(TRAIN_ANSWERS[name])
        completions["decompose"][pid] = [f"1. Apply operation alpha{i} and beta{i}."]
        completions["sketch"][pid] = [
            f"FUNC | compute | run operation alpha{i} | inputs | value | none"
        ]
        completions["synthesize"][pid] = [f"```python\n{source}```"]
        completions["featurize"][pid] = [_learned_features(i)]
        script_ok(source, TRAIN_ANSWERS[name])

    # solving scripts: twins retrieve (identical features), novels go direct
    for i, name in enumerate(TWIN_ANSWERS):
        pid = id_by_name[name]
        completions["featurize"][pid] = [_learned_features(i)]
        value = TWIN_ANSWERS[name] if name in CORRECT_TWINS else 999
        source = _program(f"{value}  # case {name}")
        completions["augmented_solve"][pid] = [f"```python\n{source}```"]
        script_ok(source, value)

    for i, name in zip(range(6, 10), NOVEL_ANSWERS):
        pid = id_by_name[name]
        completions["featurize"][pid] = [_novel_features(i)]
        if name == "q9":
            completions["direct_solve"][pid] = [f"```python\n{TIMEOUT_SOURCE}```"] * 3
            exec_script[source_hash(TIMEOUT_SOURCE)] = {"status": "timeout", "stderr": "hard kill"}
        else:
            value = NOVEL_ANSWERS[name] if name in CORRECT_NOVEL else 888
            source = _program(f"{value}  # case {name}")
            completions["direct_solve"][pid] = [f"```python\n{source}```"]
            script_ok(source, value)

    # baseline scripts live in their own file: every command invocation
    # replays its script from the top, so solve and baseline must not share
    # direct_solve queues
    baseline_completions: dict[str, dict[str, list[str]]] = {"direct_solve": {}}
    for name in list(TWIN_ANSWERS) + list(NOVEL_ANSWERS):
        pid = id_by_name[name]
        value = answers[name] if name in BASELINE_CORRECT else 777
        source = _program(f"{value}  # baseline {name}")
        baseline_completions["direct_solve"][pid] = [f"```python\n{source}```"]
        script_ok(source, value)

    script_path = root / "completions.json"
    script_path.write_text(json.dumps(completions, indent=2, sort_keys=True), encoding="utf-8")
    baseline_script_path = root / "baseline_completions.json"
    baseline_script_path.write_text(
        json.dumps(baseline_completions, indent=2, sort_keys=True), encoding="utf-8"
    )
    exec_path = root / "exec_script.json"
    exec_path.write_text(json.dumps(exec_script, indent=2, sort_keys=True), encoding="utf-8")

    manifest = {
        "schema_version": 1,
        "category": "Algebra",
        "seed": 0,
        "n_train": 6,
        "n_test": 10,
        "train_ids": [id_by_name[n] for n in TRAIN_ANSWERS],
        "test_ids": [id_by_name[n] for n in list(TWIN_ANSWERS) + list(NOVEL_ANSWERS)],
    }
    manifest_path = root / "split.json"
    manifest_path.write_text(json.dumps(manifest, indent=2, sort_keys=True), encoding="utf-8")

    return {
        "data_dir": data_dir,
        "script_path": script_path,
        "baseline_script_path": baseline_script_path,
        "exec_path": exec_path,
        "manifest_path": manifest_path,
        "id_by_name": id_by_name,
    }
