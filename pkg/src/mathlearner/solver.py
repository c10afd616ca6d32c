"""Solving pipeline: featurize, retrieve, generate, execute, trace.

Every problem yields a trace: retrieval feeds an augmented prompt when a
stored solution scores at or above the threshold, otherwise generation is
direct. Regeneration is triggered only by execution errors, never by the
produced answer, so solving cannot peek at ground truth. Traces serialize
one JSON object per line with a pinned key order, making repeat runs with
deterministic backends byte-identical.
"""
from __future__ import annotations

import json
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path

from .core import (
    Answer,
    FeatureSet,
    PipelineConfig,
    PipelineError,
    Problem,
    canonicalize_answer,
)
from .executor import STATUS_OK, ExecutionRequest, ExecutorUnavailable, RunnerSpawnFailure
from .gateway import EmptyCompletion, Gateway
from .learner import UnparseableModelOutput, extract_code_block, parse_feature_lines
from .store import FeatureStore, LearnedRecord

log = logging.getLogger(__name__)

TRACE_SCHEMA_VERSION = 1

MODE_AUGMENTED = "augmented"
MODE_DIRECT = "direct"

STATUS_NO_PROGRAM = "no_program"


class StoreUnavailable(PipelineError):
    pass


@dataclass(frozen=True)
class ExecutionSummary:
    status: str  # executor status or "no_program"
    answer_text: str | None = None
    stderr_excerpt: str = ""
    duration: float = 0.0


@dataclass(frozen=True)
class SolveTrace:
    problem_id: str
    mode: str
    query_features: FeatureSet | None
    retrieved: tuple[str, float] | None
    extra_hits: tuple[tuple[str, float], ...]
    program_source: str | None
    execution: ExecutionSummary
    answer: Answer | None
    attempts: int
    correct: bool | None = None

    def __post_init__(self) -> None:
        if (self.mode == MODE_AUGMENTED) != (self.retrieved is not None):
            raise ValueError("augmented mode exactly when a retrieval hit is present")
        if (self.answer is not None) != (self.execution.status == STATUS_OK):
            raise ValueError("answer present exactly when execution succeeded")


def trace_to_json(trace: SolveTrace) -> str:
    obj = {
        "schema_version": TRACE_SCHEMA_VERSION,
        "problem_id": trace.problem_id,
        "mode": trace.mode,
        "query_features": (
            None
            if trace.query_features is None
            else {
                "category_feature": trace.query_features.category_feature,
                "step_features": list(trace.query_features.step_features),
            }
        ),
        "retrieved": (
            None if trace.retrieved is None else {"record_id": trace.retrieved[0], "score": trace.retrieved[1]}
        ),
        "extra_hits": [{"record_id": r, "score": s} for r, s in trace.extra_hits],
        "program_source": trace.program_source,
        "execution": {
            "status": trace.execution.status,
            "answer_text": trace.execution.answer_text,
            "stderr_excerpt": trace.execution.stderr_excerpt,
            "duration": trace.execution.duration,
        },
        "answer": None if trace.answer is None else {"raw": trace.answer.raw, "canonical": trace.answer.canonical},
        "attempts": trace.attempts,
        "correct": trace.correct,
    }
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), ensure_ascii=True)


def trace_from_json(line: str) -> SolveTrace:
    obj = json.loads(line)
    if obj.get("schema_version") != TRACE_SCHEMA_VERSION:
        raise PipelineError(f"unsupported trace schema version {obj.get('schema_version')}")
    qf = obj["query_features"]
    answer_obj = obj["answer"]
    return SolveTrace(
        problem_id=obj["problem_id"],
        mode=obj["mode"],
        query_features=(
            None
            if qf is None
            else FeatureSet(category_feature=qf["category_feature"], step_features=tuple(qf["step_features"]))
        ),
        retrieved=(None if obj["retrieved"] is None else (obj["retrieved"]["record_id"], obj["retrieved"]["score"])),
        extra_hits=tuple((h["record_id"], h["score"]) for h in obj["extra_hits"]),
        program_source=obj["program_source"],
        execution=ExecutionSummary(
            status=obj["execution"]["status"],
            answer_text=obj["execution"]["answer_text"],
            stderr_excerpt=obj["execution"]["stderr_excerpt"],
            duration=obj["execution"]["duration"],
        ),
        answer=None if answer_obj is None else canonicalize_answer(answer_obj["raw"]),
        attempts=obj["attempts"],
        correct=obj["correct"],
    )


def write_traces(traces: list[SolveTrace], path: str | Path, append: bool = False) -> None:
    mode = "a" if append else "w"
    with Path(path).open(mode, encoding="utf-8") as fh:
        for trace in traces:
            fh.write(trace_to_json(trace) + "\n")


def read_traces(path: str | Path) -> list[SolveTrace]:
    lines = Path(path).read_text(encoding="utf-8").splitlines()
    return [trace_from_json(line) for line in lines if line.strip()]


def _finalize_answer(summary: ExecutionSummary) -> tuple[Answer | None, ExecutionSummary]:
    """Canonicalize a successful run's answer; an ok outcome with empty
    answer text is demoted to a failure so traces keep answer <=> ok."""
    if summary.status != STATUS_OK:
        return None, summary
    if summary.answer_text:
        return canonicalize_answer(summary.answer_text), summary
    return None, ExecutionSummary(
        status=STATUS_NO_PROGRAM,
        stderr_excerpt="program returned an empty answer",
        duration=summary.duration,
    )


def build_augmented_prompt(problem: Problem, hit_record: LearnedRecord) -> dict[str, str]:
    """Bindings for the augmented template: the new problem, the retrieved
    solution's feature steps, and its program source, in that order."""
    return {
        "problem": problem.statement,
        "retrieved_steps": hit_record.feature_set.steps_text(),
        "retrieved_program": hit_record.program.source,
    }


class SolverSession:
    """Binds the gateway, templates, executor, and config for solving runs."""

    def __init__(self, gateway: Gateway, templates: dict, executor, config: PipelineConfig) -> None:
        self.gateway = gateway
        self.templates = templates
        self.executor = executor
        self.config = config

    def _complete(self, role: str, bindings: dict[str, str], key: str) -> str:
        return self.gateway.complete(self.templates[role], bindings, key).text

    def extract_query_features(self, problem: Problem) -> FeatureSet:
        """Features for an unseen problem; the step lines describe the
        model's own predicted solution steps."""
        bindings = {
            "problem": problem.statement,
            "steps_section": (
                "No worked solution is given. Predict the likely solution steps "
                "yourself and describe each one."
            ),
        }
        for _ in range(2):
            try:
                return parse_feature_lines(self._complete("featurize", bindings, problem.id), None)
            except (UnparseableModelOutput, EmptyCompletion) as exc:
                last = exc
        raise UnparseableModelOutput(f"query featurization failed after re-ask: {last}")

    def _execute(self, source: str, problem_id: str, round_no: int) -> ExecutionSummary:
        request = ExecutionRequest(
            request_id=f"solve-{problem_id}-{round_no}",
            source=source,
            timeout=self.config.exec_timeout,
            memory_limit=self.config.exec_memory_limit,
        )
        try:
            outcome = self.executor.execute(request)
        except (RunnerSpawnFailure, ExecutorUnavailable) as exc:
            return ExecutionSummary(status=STATUS_NO_PROGRAM, stderr_excerpt=f"executor unavailable: {exc}")
        return ExecutionSummary(
            status=outcome.status,
            answer_text=outcome.answer_text,
            stderr_excerpt=outcome.stderr_excerpt,
            duration=outcome.duration,
        )

    def _generate_and_run(
        self, problem: Problem, role: str, bindings: dict[str, str]
    ) -> tuple[str | None, ExecutionSummary, int]:
        """Up to R generate/execute rounds, retrying only on failure to run."""
        source: str | None = None
        summary = ExecutionSummary(status=STATUS_NO_PROGRAM, stderr_excerpt="no generation attempted")
        attempts = 0
        for round_no in range(1, self.config.max_repair_attempts + 1):
            attempts = round_no
            try:
                text = self._complete(role, bindings, problem.id)
                source = extract_code_block(text)
            except (UnparseableModelOutput, EmptyCompletion) as exc:
                summary = ExecutionSummary(status=STATUS_NO_PROGRAM, stderr_excerpt=str(exc)[:500])
                continue
            except PipelineError as exc:
                summary = ExecutionSummary(status=STATUS_NO_PROGRAM, stderr_excerpt=str(exc)[:500])
                break
            summary = self._execute(source, problem.id, round_no)
            if summary.status == STATUS_OK:
                break
        return source, summary, attempts

    def solve(self, problem: Problem, store: FeatureStore) -> SolveTrace:
        """Retrieval-augmented solve with direct fallback; always returns a
        trace, whatever the model or execution did."""
        if store is None:
            raise StoreUnavailable("no store loaded")
        features: FeatureSet | None
        try:
            features = self.extract_query_features(problem)
        except PipelineError as exc:
            log.warning("featurization for %s degraded to direct mode: %s", problem.id, exc)
            features = None

        hits = []
        if features is not None and len(store) > 0:
            hits = store.query(
                features,
                k=self.config.top_k,
                threshold=self.config.similarity_threshold,
                alpha=self.config.category_weight,
            )

        if hits:
            top = hits[0]
            record = store.get(top.record_id)
            bindings = build_augmented_prompt(problem, record)
            source, summary, attempts = self._generate_and_run(problem, "augmented_solve", bindings)
            retrieved = (top.record_id, top.score)
            extra = tuple((h.record_id, h.score) for h in hits[1:])
            mode = MODE_AUGMENTED
        else:
            source, summary, attempts = self._generate_and_run(
                problem, "direct_solve", {"problem": problem.statement}
            )
            retrieved = None
            extra = ()
            mode = MODE_DIRECT

        answer, summary = _finalize_answer(summary)
        return SolveTrace(
            problem_id=problem.id,
            mode=mode,
            query_features=features,
            retrieved=retrieved,
            extra_hits=extra,
            program_source=source,
            execution=summary,
            answer=answer,
            attempts=attempts,
        )

    def solve_direct_baseline(self, problem: Problem) -> SolveTrace:
        """Plain step-by-step program generation with retrieval disabled."""
        source, summary, attempts = self._generate_and_run(
            problem, "direct_solve", {"problem": problem.statement}
        )
        answer, summary = _finalize_answer(summary)
        return SolveTrace(
            problem_id=problem.id,
            mode=MODE_DIRECT,
            query_features=None,
            retrieved=None,
            extra_hits=(),
            program_source=source,
            execution=summary,
            answer=answer,
            attempts=attempts,
        )

    def solve_batch(
        self,
        problems: list[Problem],
        store: FeatureStore | None,
        baseline: bool = False,
        parallelism: int = 1,
    ) -> list[SolveTrace]:
        """Solve many problems; trace order matches input order."""
        if parallelism < 1:
            raise ValueError("parallelism must be at least 1")

        def job(problem: Problem) -> SolveTrace:
            if baseline:
                return self.solve_direct_baseline(problem)
            return self.solve(problem, store)

        if parallelism == 1 or len(problems) <= 1:
            return [job(p) for p in problems]
        with ThreadPoolExecutor(max_workers=parallelism) as pool:
            return list(pool.map(job, problems))
