"""Shared domain types, answer canonicalization, and pipeline configuration."""
from __future__ import annotations

import re
from dataclasses import dataclass
from fractions import Fraction


class PipelineError(Exception):
    """Base class for errors raised by this package."""


# ---------------------------------------------------------------------------
# Answers
# ---------------------------------------------------------------------------

_DELIM_PAIRS = (("$$", "$$"), ("$", "$"), (r"\(", r"\)"), (r"\[", r"\]"))
_FRAC_RE = re.compile(r"\\[dt]?frac\{")
_INT_RE = re.compile(r"^[+-]?\d+$")
_DECIMAL_RE = re.compile(r"^[+-]?(?:\d+\.\d*|\.\d+)$")
_FRACTION_RE = re.compile(r"^([+-]?\d+)/(\d+)$")


@dataclass(frozen=True)
class Answer:
    """A final answer in raw, canonical, and (when parseable) numeric form.

    ``canonical`` is a deterministic rewrite of ``raw``; ``numeric`` is set
    only when the canonical text is an integer, decimal, or a/b fraction.
    Integers and fractions are kept exact as ``Fraction``, decimals as float.
    """

    raw: str
    canonical: str
    numeric: Fraction | float | None = None


def _strip_delimiters(s: str) -> str:
    s = s.strip()
    changed = True
    while changed:
        changed = False
        for open_, close in _DELIM_PAIRS:
            if s.startswith(open_) and s.endswith(close) and len(s) >= len(open_) + len(close):
                s = s[len(open_):len(s) - len(close)].strip()
                changed = True
    return s


def _matched_group(s: str, start: int) -> int | None:
    """Index one past the closing brace of the group opening at ``start``, or None."""
    depth = 1
    i = start + 1
    while i < len(s):
        c = s[i]
        if c == "{":
            depth += 1
        elif c == "}":
            depth -= 1
            if depth == 0:
                return i + 1
        i += 1
    return None


def _rewrite_fracs(s: str) -> str:
    # \frac{a}{b} (and \dfrac/\tfrac) -> a/b, honoring nested braces.
    # Malformed groups are left untouched.
    while True:
        m = _FRAC_RE.search(s)
        if m is None:
            return s
        open_a = m.end() - 1
        end_a = _matched_group(s, open_a)
        if end_a is None or end_a >= len(s) or s[end_a] != "{":
            return s
        end_b = _matched_group(s, end_a)
        if end_b is None:
            return s
        a = s[open_a + 1:end_a - 1]
        b = s[end_a + 1:end_b - 1]
        s = s[:m.start()] + a + "/" + b + s[end_b:]


def _remove_all(s: str, token: str) -> str:
    while token in s:
        s = s.replace(token, "")
    return s


def _parse_numeric(canonical: str) -> Fraction | float | None:
    if _INT_RE.match(canonical):
        return Fraction(int(canonical))
    if _DECIMAL_RE.match(canonical):
        return float(canonical)
    m = _FRACTION_RE.match(canonical)
    if m:
        den = int(m.group(2))
        if den != 0:
            return Fraction(int(m.group(1)), den)
    return None


def canonicalize_answer(raw: str) -> Answer:
    """Normalize an answer string deterministically.

    Rules, applied to a fixpoint: trim and strip surrounding math delimiters,
    rewrite ``\\frac{a}{b}`` (also ``\\dfrac``/``\\tfrac``) to ``a/b``, drop
    ``\\left``/``\\right``, and remove whitespace. Case is preserved. The
    worst case is the trimmed input with no numeric value.
    """
    if not raw:
        raise ValueError("answer text must be non-empty")
    s = raw
    prev = None
    while s != prev:
        prev = s
        s = _strip_delimiters(s)
        s = _rewrite_fracs(s)
        s = _remove_all(s, "\\left")
        s = _remove_all(s, "\\right")
        s = re.sub(r"\s+", "", s)
    return Answer(raw=raw, canonical=s, numeric=_parse_numeric(s))


def answers_equivalent(a: Answer, b: Answer, tol: float) -> bool:
    """True when canonical texts match, or both are numeric and within ``tol``.

    The numeric test is relative to ``max(1, |a|, |b|)`` so that the relation
    stays symmetric; with ``tol=0`` it degenerates to exact equality.
    """
    if a.canonical == b.canonical:
        return True
    if a.numeric is None or b.numeric is None:
        return False
    if tol == 0:
        return a.numeric == b.numeric
    x, y = float(a.numeric), float(b.numeric)
    return abs(x - y) <= tol * max(1.0, abs(x), abs(y))


# ---------------------------------------------------------------------------
# Problems and solutions
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Problem:
    id: str
    statement: str
    category: str
    level: str
    source_path: str | None = None

    def __post_init__(self) -> None:
        if not self.statement:
            raise ValueError("problem statement must be non-empty")


@dataclass(frozen=True)
class ReferenceSolution:
    problem_id: str
    solution_text: str
    final_answer: Answer


@dataclass(frozen=True)
class FunctionSpec:
    """One planned function: what it does, what it consumes, what it yields."""

    name: str
    purpose: str
    inputs: tuple[str, ...]
    output: str
    dependencies: tuple[str, ...] = ()


class CyclicSketch(PipelineError):
    """The planned functions depend on each other in a cycle."""


@dataclass(frozen=True)
class SolutionSketch:
    """Ordered solution steps plus a dependency-linked function plan."""

    steps: tuple[str, ...]
    functions: tuple[FunctionSpec, ...]

    def __post_init__(self) -> None:
        names = [f.name for f in self.functions]
        if len(set(names)) != len(names):
            raise ValueError(f"duplicate function names in sketch: {names}")
        known = set(names)
        for f in self.functions:
            unknown = [d for d in f.dependencies if d not in known]
            if unknown:
                raise ValueError(f"function {f.name!r} depends on unknown {unknown}")
        _check_acyclic(self.functions)

    def render(self) -> str:
        lines = []
        for f in self.functions:
            deps = ", ".join(f.dependencies) if f.dependencies else "none"
            args = ", ".join(f.inputs)
            lines.append(f"{f.name}({args}) -> {f.output}: {f.purpose} [uses: {deps}]")
        return "\n".join(lines)


def _check_acyclic(functions: tuple[FunctionSpec, ...]) -> None:
    deps = {f.name: set(f.dependencies) for f in functions}
    state: dict[str, int] = {}  # 0 visiting, 1 done

    def visit(name: str, stack: list[str]) -> None:
        mark = state.get(name)
        if mark == 1:
            return
        if mark == 0:
            cycle = stack[stack.index(name):] + [name]
            raise CyclicSketch(" -> ".join(cycle))
        state[name] = 0
        stack.append(name)
        for dep in deps[name]:
            visit(dep, stack)
        stack.pop()
        state[name] = 1

    for name in deps:
        visit(name, [])


ENTRY_POINT = "solve"


@dataclass(frozen=True)
class SolutionProgram:
    """A solution recast as a runnable program; ``verified`` is set only after
    an execution whose answer matched the reference answer."""

    source: str
    sketch: SolutionSketch
    verified: bool = False
    attempts: int = 0
    entry_point: str = ENTRY_POINT


@dataclass(frozen=True)
class FeatureSet:
    """One category line plus one line per solution step naming the
    operation or theorem that step uses."""

    category_feature: str
    step_features: tuple[str, ...]

    def __post_init__(self) -> None:
        if not self.category_feature:
            raise ValueError("category feature must be non-empty")

    def steps_text(self) -> str:
        return "\n".join(self.step_features)


# ---------------------------------------------------------------------------
# Configuration
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class PipelineConfig:
    similarity_threshold: float = 0.80
    top_k: int = 1
    max_repair_attempts: int = 3
    category_weight: float = 0.30
    embed_dimension: int = 256
    exec_timeout: float = 10.0
    exec_memory_limit: int = 512 * 1024 * 1024
    numeric_tolerance: float = 1e-6

    def __post_init__(self) -> None:
        if not 0.0 <= self.similarity_threshold <= 1.0:
            raise ValueError("similarity_threshold must be in [0, 1]")
        if self.top_k < 1:
            raise ValueError("top_k must be positive")
        if self.max_repair_attempts < 1:
            raise ValueError("max_repair_attempts must be positive")
        if not 0.0 <= self.category_weight <= 1.0:
            raise ValueError("category_weight must be in [0, 1]")
        if self.embed_dimension < 2:
            raise ValueError("embed_dimension must be at least 2")
        if self.exec_timeout <= 0:
            raise ValueError("exec_timeout must be positive")
        if self.exec_memory_limit <= 0:
            raise ValueError("exec_memory_limit must be positive")
        if self.numeric_tolerance < 0:
            raise ValueError("numeric_tolerance must be non-negative")
