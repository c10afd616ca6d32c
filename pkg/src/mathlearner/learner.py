"""Learning pipeline: worked solution -> verified program + features -> store.

Each stage parses a labeled model-output format and re-asks exactly once on
a parse failure; nothing unverified is ever stored, and a record is written
only after every stage has succeeded.
"""
from __future__ import annotations

import logging
import re
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from time import time as _wall_clock

from .core import (
    ENTRY_POINT,
    Answer,
    CyclicSketch,
    FeatureSet,
    FunctionSpec,
    PipelineConfig,
    PipelineError,
    Problem,
    ReferenceSolution,
    SolutionProgram,
    SolutionSketch,
    answers_equivalent,
    canonicalize_answer,
)
from .dataset import Corpus
from .executor import (
    STATUS_OK,
    ExecutionRequest,
    ExecutorUnavailable,
    RunnerSpawnFailure,
)
from .gateway import EmptyCompletion, Gateway
from .store import FeatureStore, build_record

log = logging.getLogger(__name__)


class UnparseableModelOutput(PipelineError):
    pass


class VerificationExhausted(PipelineError):
    def __init__(self, verdict: "Verdict") -> None:
        super().__init__(verdict.describe())
        self.verdict = verdict


VERDICT_PASS = "pass"
VERDICT_WRONG_ANSWER = "wrong_answer"
VERDICT_EXEC_ERROR = "exec_error"


@dataclass(frozen=True)
class Verdict:
    kind: str
    got: str | None = None
    error_kind: str | None = None
    detail: str = ""

    @property
    def passed(self) -> bool:
        return self.kind == VERDICT_PASS

    def describe(self) -> str:
        if self.kind == VERDICT_PASS:
            return "passed verification"
        if self.kind == VERDICT_WRONG_ANSWER:
            return f"the program ran but returned {self.got!r}, which is not the expected answer"
        return f"the program failed to run: {self.error_kind} ({self.detail})" if self.detail else (
            f"the program failed to run: {self.error_kind}"
        )


@dataclass(frozen=True)
class LearnOutcome:
    """Per-problem learning result; ``record_id`` is set iff a verified
    program with features was stored. ``skipped`` marks pre-synthesis
    failures (decompose or sketch)."""

    problem_id: str
    status: str  # stored | verification_failed | feature_failed | skipped
    attempts: int = 0
    record_id: str | None = None
    detail: str = ""


# ---------------------------------------------------------------------------
# Model-output parsers
# ---------------------------------------------------------------------------

_STEP_LINE_RE = re.compile(r"^\s*\d+[.):]\s+(.*\S)\s*$")
_FUNC_NAME_RE = re.compile(r"^[A-Za-z_][A-Za-z0-9_]*$")
_CATEGORY_RE = re.compile(r"^CATEGORY:\s*(.+?)\s*$", re.MULTILINE)
_FEATURE_STEP_RE = re.compile(r"^STEP\s+(\d+):\s*(.+?)\s*$", re.MULTILINE)
_CODE_BLOCK_RE = re.compile(r"```(?:python|py)?[ \t]*\n(.*?)```", re.DOTALL)


def parse_numbered_steps(text: str) -> list[str]:
    steps = [m.group(1) for line in text.splitlines() if (m := _STEP_LINE_RE.match(line))]
    if not steps:
        raise UnparseableModelOutput("no numbered step lines found")
    return steps


def _split_names(cell: str) -> tuple[str, ...]:
    cell = cell.strip()
    if not cell or cell.lower() == "none":
        return ()
    return tuple(part.strip() for part in cell.split(",") if part.strip())


def parse_function_lines(text: str, expected: int) -> list[FunctionSpec]:
    specs: list[FunctionSpec] = []
    for line in text.splitlines():
        if not line.strip().startswith("FUNC"):
            continue
        parts = [p.strip() for p in line.split("|")]
        if len(parts) != 6:
            raise UnparseableModelOutput(f"FUNC line needs 6 pipe-separated fields: {line!r}")
        _, name, purpose, inputs, output, deps = parts
        if not _FUNC_NAME_RE.match(name):
            raise UnparseableModelOutput(f"invalid function name {name!r}")
        specs.append(
            FunctionSpec(
                name=name,
                purpose=purpose,
                inputs=_split_names(inputs),
                output=output,
                dependencies=_split_names(deps),
            )
        )
    if len(specs) != expected:
        raise UnparseableModelOutput(f"expected {expected} FUNC lines, found {len(specs)}")
    names = [s.name for s in specs]
    if len(set(names)) != len(names):
        raise UnparseableModelOutput(f"duplicate function names: {names}")
    known = set(names)
    for spec in specs:
        unknown = [d for d in spec.dependencies if d not in known]
        if unknown:
            raise UnparseableModelOutput(f"function {spec.name!r} depends on unknown {unknown}")
    return specs


def parse_feature_lines(text: str, expected_steps: int | None) -> FeatureSet:
    """``CATEGORY:`` plus ordered ``STEP i:`` lines. When ``expected_steps``
    is given the count and numbering must match exactly."""
    m = _CATEGORY_RE.search(text)
    if not m:
        raise UnparseableModelOutput("missing CATEGORY line")
    category = m.group(1)
    steps: list[tuple[int, str]] = [(int(i), s) for i, s in _FEATURE_STEP_RE.findall(text)]
    steps.sort(key=lambda pair: pair[0])
    if expected_steps is not None:
        if [i for i, _ in steps] != list(range(1, expected_steps + 1)):
            raise UnparseableModelOutput(
                f"expected STEP lines 1..{expected_steps}, found {[i for i, _ in steps]}"
            )
    return FeatureSet(category_feature=category, step_features=tuple(s for _, s in steps))


def extract_code_block(text: str) -> str:
    m = _CODE_BLOCK_RE.search(text)
    if not m or not m.group(1).strip():
        raise UnparseableModelOutput("no fenced code block in model output")
    return m.group(1).strip() + "\n"


# ---------------------------------------------------------------------------
# Pipeline stages
# ---------------------------------------------------------------------------

class LearnerSession:
    """Binds the gateway, templates, executor, and config for learning runs."""

    def __init__(self, gateway: Gateway, templates: dict, executor, config: PipelineConfig) -> None:
        self.gateway = gateway
        self.templates = templates
        self.executor = executor
        self.config = config

    def _complete(self, role: str, bindings: dict[str, str], key: str) -> str:
        return self.gateway.complete(self.templates[role], bindings, key).text

    def decompose_solution(self, problem: Problem, solution: ReferenceSolution) -> list[str]:
        """Ordered solution steps from a numbered-list completion; a one-line
        solution is accepted verbatim when both parses fail."""
        bindings = {"problem": problem.statement, "solution": solution.solution_text}
        for _ in range(2):
            try:
                return parse_numbered_steps(self._complete("decompose", bindings, problem.id))
            except (UnparseableModelOutput, EmptyCompletion) as exc:
                last = exc
        single = solution.solution_text.strip()
        if single and "\n" not in single:
            return [single]
        raise UnparseableModelOutput(f"decompose failed after re-ask: {last}")

    def sketch_from_steps(self, problem: Problem, steps: list[str]) -> SolutionSketch:
        if not steps:
            raise ValueError("steps must be non-empty")
        numbered = "\n".join(f"{i}. {s}" for i, s in enumerate(steps, start=1))
        bindings = {"problem": problem.statement, "steps": numbered}
        specs: list[FunctionSpec] | None = None
        for _ in range(2):
            try:
                specs = parse_function_lines(self._complete("sketch", bindings, problem.id), len(steps))
                break
            except (UnparseableModelOutput, EmptyCompletion) as exc:
                last = exc
        if specs is None:
            raise UnparseableModelOutput(f"sketch failed after re-ask: {last}")
        root = FunctionSpec(
            name=ENTRY_POINT,
            purpose="combine the step results into the final answer",
            inputs=(),
            output="answer",
            dependencies=tuple(s.name for s in specs),
        )
        try:
            return SolutionSketch(steps=tuple(steps), functions=tuple(specs) + (root,))
        except CyclicSketch:
            raise
        except ValueError as exc:
            raise UnparseableModelOutput(str(exc)) from exc

    def synthesize_program(
        self,
        problem: Problem,
        sketch: SolutionSketch,
        solution: ReferenceSolution,
    ) -> SolutionProgram:
        text = self._complete(
            "synthesize",
            {
                "problem": problem.statement,
                "solution": solution.solution_text,
                "sketch": sketch.render(),
            },
            problem.id,
        )
        return SolutionProgram(source=extract_code_block(text), sketch=sketch)

    def _repair_program(
        self,
        problem: Problem,
        sketch: SolutionSketch,
        previous: SolutionProgram,
        verdict: Verdict,
    ) -> SolutionProgram:
        text = self._complete(
            "repair",
            {
                "problem": problem.statement,
                "sketch": sketch.render(),
                "previous_program": previous.source,
                "verdict": verdict.describe(),
            },
            problem.id,
        )
        return SolutionProgram(source=extract_code_block(text), sketch=sketch)

    def verify_program(self, program: SolutionProgram, expected: Answer) -> Verdict:
        request = ExecutionRequest(
            request_id=f"verify-{id(program):x}",
            source=program.source,
            timeout=self.config.exec_timeout,
            memory_limit=self.config.exec_memory_limit,
            entry_point=program.entry_point,
        )
        try:
            outcome = self.executor.execute(request)
        except RunnerSpawnFailure as exc:
            raise ExecutorUnavailable(str(exc)) from exc
        if outcome.status != STATUS_OK:
            return Verdict(
                kind=VERDICT_EXEC_ERROR,
                error_kind=outcome.status,
                detail=outcome.stderr_excerpt[:200],
            )
        got = canonicalize_answer(outcome.answer_text) if outcome.answer_text else None
        if got is not None and answers_equivalent(got, expected, self.config.numeric_tolerance):
            return Verdict(kind=VERDICT_PASS, got=got.canonical)
        return Verdict(kind=VERDICT_WRONG_ANSWER, got=got.canonical if got else "")

    def repair_loop(
        self,
        problem: Problem,
        sketch: SolutionSketch,
        solution: ReferenceSolution,
    ) -> SolutionProgram:
        """Up to R synthesize/verify rounds; repair prompts carry the failing
        source and its verdict. Raises VerificationExhausted when no round
        passes."""
        rounds = self.config.max_repair_attempts
        program: SolutionProgram | None = None
        verdict = Verdict(kind=VERDICT_EXEC_ERROR, error_kind="not_run")
        for attempt in range(1, rounds + 1):
            try:
                if program is None:
                    candidate = self.synthesize_program(problem, sketch, solution)
                else:
                    candidate = self._repair_program(problem, sketch, program, verdict)
            except (UnparseableModelOutput, EmptyCompletion) as exc:
                verdict = Verdict(kind=VERDICT_EXEC_ERROR, error_kind="unparseable", detail=str(exc))
                program = program or SolutionProgram(source="# no program produced\n", sketch=sketch)
                continue
            program = candidate
            verdict = self.verify_program(candidate, solution.final_answer)
            if verdict.passed:
                return SolutionProgram(
                    source=candidate.source,
                    sketch=sketch,
                    verified=True,
                    attempts=attempt,
                )
        raise VerificationExhausted(verdict)

    def extract_features(self, problem: Problem, steps: list[str]) -> FeatureSet:
        if not steps:
            raise ValueError("steps must be non-empty")
        numbered = "\n".join(f"{i}. {s}" for i, s in enumerate(steps, start=1))
        bindings = {
            "problem": problem.statement,
            "steps_section": "The solution proceeds in these steps:\n" + numbered,
        }
        for _ in range(2):
            try:
                return parse_feature_lines(self._complete("featurize", bindings, problem.id), len(steps))
            except (UnparseableModelOutput, EmptyCompletion) as exc:
                last = exc
        raise UnparseableModelOutput(f"featurize failed after re-ask: {last}")

    def learn_one(
        self,
        problem: Problem,
        solution: ReferenceSolution,
        store: FeatureStore,
        clock=_wall_clock,
    ) -> LearnOutcome:
        """Full chain for one problem; writes to the store only when every
        stage succeeded, so partial failures leave no trace."""
        try:
            steps = self.decompose_solution(problem, solution)
            sketch = self.sketch_from_steps(problem, steps)
        except (UnparseableModelOutput, CyclicSketch) as exc:
            return LearnOutcome(problem_id=problem.id, status="skipped", detail=str(exc))
        try:
            program = self.repair_loop(problem, sketch, solution)
        except VerificationExhausted as exc:
            return LearnOutcome(
                problem_id=problem.id,
                status="verification_failed",
                attempts=self.config.max_repair_attempts,
                detail=str(exc),
            )
        try:
            features = self.extract_features(problem, steps)
        except UnparseableModelOutput as exc:
            return LearnOutcome(
                problem_id=problem.id,
                status="feature_failed",
                attempts=program.attempts,
                detail=str(exc),
            )
        record = build_record(problem.id, features, program, store.embedder, clock=clock)
        store.put(record)
        return LearnOutcome(
            problem_id=problem.id,
            status="stored",
            attempts=program.attempts,
            record_id=record.record_id,
        )

    def learn_corpus(
        self,
        train: Corpus,
        store: FeatureStore,
        parallelism: int = 1,
        clock=_wall_clock,
    ) -> list[LearnOutcome]:
        """Learn every problem with bounded parallelism; outcome order matches
        corpus order and store contents are independent of scheduling."""
        if parallelism < 1:
            raise ValueError("parallelism must be at least 1")
        if not train.problems:
            return []

        def job(pair: tuple[Problem, ReferenceSolution]) -> LearnOutcome:
            problem, solution = pair
            try:
                return self.learn_one(problem, solution, store, clock=clock)
            except PipelineError as exc:
                log.warning("learning %s failed: %s", problem.id, exc)
                return LearnOutcome(problem_id=problem.id, status="skipped", detail=str(exc))

        if parallelism == 1:
            return [job(pair) for pair in train.problems]
        with ThreadPoolExecutor(max_workers=parallelism) as pool:
            return list(pool.map(job, train.problems))
