"""Problem-corpus ingestion: record parsing, boxed-answer extraction, splits.

Records are JSON objects with keys ``problem``, ``level``, ``type`` and
``solution``, one object per ``.json`` file or one per line in ``.jsonl``
files, optionally organized in per-category directory trees.
"""
from __future__ import annotations

import hashlib
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

from .core import Answer, PipelineError, Problem, ReferenceSolution, canonicalize_answer

log = logging.getLogger(__name__)

_REQUIRED_FIELDS = ("problem", "level", "type", "solution")


class MissingField(PipelineError):
    pass


class NoBoxedAnswer(PipelineError):
    pass


class NotEnoughProblems(PipelineError):
    pass


def extract_boxed_answer(solution_text: str) -> Answer:
    """Canonicalized content of the last complete ``\\boxed{...}`` group.

    Braces nest; an unterminated group is ignored in favor of the last
    complete one. Raises :class:`NoBoxedAnswer` when none exists.
    """
    if not solution_text:
        raise NoBoxedAnswer("empty solution text")
    marker = "\\boxed{"
    last: str | None = None
    idx = 0
    while True:
        start = solution_text.find(marker, idx)
        if start == -1:
            break
        i = start + len(marker)
        depth = 1
        while i < len(solution_text) and depth:
            c = solution_text[i]
            if c == "{":
                depth += 1
            elif c == "}":
                depth -= 1
            i += 1
        if depth == 0:
            last = solution_text[start + len(marker):i - 1]
            idx = i
        else:
            break
    if last is None or not last.strip():
        raise NoBoxedAnswer("no complete \\boxed{...} group found")
    return canonicalize_answer(last)


def load_problem_record(
    record: dict, *, problem_id: str | None = None, source_path: str | None = None
) -> tuple[Problem, ReferenceSolution]:
    """Build a (Problem, ReferenceSolution) pair from one dataset record.

    ``problem_id`` defaults to a digest of the statement and solution so that
    ids are stable across loads.
    """
    for key in _REQUIRED_FIELDS:
        if key not in record:
            raise MissingField(key)
    statement = record["problem"]
    solution = record["solution"]
    answer = extract_boxed_answer(solution)
    if problem_id is None:
        digest = hashlib.sha256((statement + "\n" + solution).encode("utf-8")).hexdigest()
        problem_id = digest[:16]
    problem = Problem(
        id=problem_id,
        statement=statement,
        category=record["type"],
        level=record["level"],
        source_path=source_path,
    )
    return problem, ReferenceSolution(problem_id=problem_id, solution_text=solution, final_answer=answer)


@dataclass(frozen=True)
class Corpus:
    """An immutable set of problems with their worked solutions."""

    problems: tuple[tuple[Problem, ReferenceSolution], ...]
    split_seed: int = 0
    manifest: dict = field(default_factory=dict)

    def __post_init__(self) -> None:
        ids = [p.id for p, _ in self.problems]
        if len(set(ids)) != len(ids):
            raise ValueError("duplicate problem ids in corpus")

    def __len__(self) -> int:
        return len(self.problems)

    def by_id(self) -> dict[str, tuple[Problem, ReferenceSolution]]:
        return {p.id: (p, s) for p, s in self.problems}

    def category(self, name: str) -> list[tuple[Problem, ReferenceSolution]]:
        return [(p, s) for p, s in self.problems if p.category == name]


def _build_manifest(
    entries: list[tuple[Problem, ReferenceSolution]], skipped_no_answer: int = 0, skipped_bad: int = 0
) -> dict:
    categories: dict[str, int] = {}
    levels: dict[str, int] = {}
    for p, _ in entries:
        categories[p.category] = categories.get(p.category, 0) + 1
        levels[p.level] = levels.get(p.level, 0) + 1
    return {
        "categories": categories,
        "levels": levels,
        "skipped_no_answer": skipped_no_answer,
        "skipped_bad_record": skipped_bad,
    }


def _iter_record_sources(root: Path):
    if root.is_file():
        paths = [root]
    else:
        paths = sorted(p for p in root.rglob("*") if p.suffix in (".json", ".jsonl") and p.is_file())
    for path in paths:
        if path.suffix == ".jsonl":
            with path.open("r", encoding="utf-8") as fh:
                for n, line in enumerate(fh, start=1):
                    if line.strip():
                        yield f"{path}:{n}", line
        else:
            yield str(path), path.read_text(encoding="utf-8")


def load_corpus(root: str | Path) -> Corpus:
    """Load every record under ``root``; records without an extractable boxed
    answer are skipped with a warning and counted in the manifest."""
    entries: list[tuple[Problem, ReferenceSolution]] = []
    seen: set[str] = set()
    skipped_no_answer = 0
    skipped_bad = 0
    for origin, text in _iter_record_sources(Path(root)):
        try:
            record = json.loads(text)
        except json.JSONDecodeError as exc:
            log.warning("skipping %s: invalid JSON (%s)", origin, exc)
            skipped_bad += 1
            continue
        try:
            pair = load_problem_record(record, source_path=origin)
        except NoBoxedAnswer:
            log.warning("skipping %s: no boxed answer", origin)
            skipped_no_answer += 1
            continue
        except (MissingField, ValueError) as exc:
            log.warning("skipping %s: %s", origin, exc)
            skipped_bad += 1
            continue
        if pair[0].id in seen:
            log.warning("skipping %s: duplicate problem id %s", origin, pair[0].id)
            skipped_bad += 1
            continue
        seen.add(pair[0].id)
        entries.append(pair)
    return Corpus(
        problems=tuple(entries),
        manifest=_build_manifest(entries, skipped_no_answer, skipped_bad),
    )


# ---------------------------------------------------------------------------
# Split RNG
# ---------------------------------------------------------------------------

_PCG_MULT = 6364136223846793005
_PCG_STREAM = 54  # fixed stream selector; the seed is the only moving part
_MASK64 = (1 << 64) - 1


class SplitRng:
    """PCG32 (XSH RR 64/32) with a fixed stream, per the published reference.

    Pinned exactly so that equal seeds produce identical splits in any
    conforming implementation: state init ``state=0; inc=(stream<<1)|1;
    step; state+=seed; step``; bounded draws use the usual rejection
    threshold ``(2^32 - bound) % bound``.
    """

    def __init__(self, seed: int) -> None:
        self._state = 0
        self._inc = ((_PCG_STREAM << 1) | 1) & _MASK64
        self.next32()
        self._state = (self._state + (seed & _MASK64)) & _MASK64
        self.next32()

    def next32(self) -> int:
        old = self._state
        self._state = (old * _PCG_MULT + self._inc) & _MASK64
        xorshifted = (((old >> 18) ^ old) >> 27) & 0xFFFFFFFF
        rot = old >> 59
        return ((xorshifted >> rot) | (xorshifted << ((-rot) & 31))) & 0xFFFFFFFF

    def bounded(self, bound: int) -> int:
        if bound <= 0:
            raise ValueError("bound must be positive")
        threshold = (0x100000000 - bound) % bound
        while True:
            r = self.next32()
            if r >= threshold:
                return r % bound


def _sample_prefix(n: int, k: int, rng: SplitRng) -> list[int]:
    # Partial Fisher-Yates: after k swap rounds the prefix is a uniform
    # k-sample without replacement, in draw order.
    idx = list(range(n))
    for i in range(k):
        j = i + rng.bounded(n - i)
        idx[i], idx[j] = idx[j], idx[i]
    return idx[:k]


def select_split(
    corpus: Corpus, category: str, n_train: int, n_test: int, seed: int
) -> tuple[Corpus, Corpus]:
    """Deterministic disjoint train/test split within one category.

    Candidates keep corpus order before sampling, so equal corpora, args,
    and seeds yield identical splits.
    """
    if n_train < 0 or n_test < 0:
        raise ValueError("split sizes must be non-negative")
    pool = corpus.category(category)
    if not pool:
        raise NotEnoughProblems(f"category {category!r} not present in corpus")
    if n_train + n_test > len(pool):
        raise NotEnoughProblems(
            f"requested {n_train}+{n_test} problems but category {category!r} has {len(pool)}"
        )
    picked = _sample_prefix(len(pool), n_train + n_test, SplitRng(seed))
    train = [pool[i] for i in picked[:n_train]]
    test = [pool[i] for i in picked[n_train:]]
    return (
        Corpus(problems=tuple(train), split_seed=seed, manifest=_build_manifest(train)),
        Corpus(problems=tuple(test), split_seed=seed, manifest=_build_manifest(test)),
    )
