"""Judging traces against ground truth and computing the quadrant metrics.

Test problems partition into four quadrants by (correct?, retrieved?).
From the tallies:

    global accuracy          GA  = (c_r + c_nr) / u
    accuracy contribution    AC  = c_r / (c_r + c_nr)
    profitability            Prof = GA / GA_baseline - 1
    precision accuracy       PA  = c_r / (c_r + nc_r)
    target achievement rate  TAR = ((c_r + c_nr) - baseline_correct)
                                   / (u - baseline_correct)

A missing or failed answer counts as incorrect, keeping the partition
exhaustive. Degenerate denominators yield 0.0 plus an explicit flag. TAR is
computed from its defining formula on integer counts only; summary
percentages that do not satisfy the formula's identities are never
force-fitted.
"""
from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field

from .core import Answer, PipelineError, answers_equivalent
from .solver import MODE_AUGMENTED, SolveTrace

QUADRANT_CR = "c_r"      # correct, retrieved
QUADRANT_CNR = "c_nr"    # correct, not retrieved
QUADRANT_NCR = "nc_r"    # incorrect, retrieved
QUADRANT_NCNR = "nc_nr"  # incorrect, not retrieved


class MismatchedUniverse(PipelineError):
    pass


@dataclass(frozen=True)
class QuadrantCounts:
    c_r: int = 0
    c_nr: int = 0
    nc_r: int = 0
    nc_nr: int = 0

    def __post_init__(self) -> None:
        for name in ("c_r", "c_nr", "nc_r", "nc_nr"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be non-negative")

    @property
    def u(self) -> int:
        return self.c_r + self.c_nr + self.nc_r + self.nc_nr

    @property
    def correct(self) -> int:
        return self.c_r + self.c_nr

    @property
    def retrieved(self) -> int:
        return self.c_r + self.nc_r


def classify_trace(trace: SolveTrace, ground_truth: Answer, tol: float) -> str:
    """Quadrant for one trace: correctness requires a present answer that is
    equivalent to the truth; retrieval means the trace ran augmented."""
    correct = trace.answer is not None and answers_equivalent(trace.answer, ground_truth, tol)
    retrieved = trace.mode == MODE_AUGMENTED
    if correct:
        return QUADRANT_CR if retrieved else QUADRANT_CNR
    return QUADRANT_NCR if retrieved else QUADRANT_NCNR


def tally_traces(
    traces: list[SolveTrace], truth: dict[str, Answer], tol: float
) -> tuple[QuadrantCounts, list[SolveTrace]]:
    """Counts plus judged copies of the traces with ``correct`` filled in."""
    counts = {QUADRANT_CR: 0, QUADRANT_CNR: 0, QUADRANT_NCR: 0, QUADRANT_NCNR: 0}
    judged = []
    for trace in traces:
        if trace.problem_id not in truth:
            raise MismatchedUniverse(f"no ground truth for problem {trace.problem_id}")
        quadrant = classify_trace(trace, truth[trace.problem_id], tol)
        counts[quadrant] += 1
        judged.append(dataclasses.replace(trace, correct=quadrant in (QUADRANT_CR, QUADRANT_CNR)))
    return QuadrantCounts(**counts), judged


@dataclass(frozen=True)
class MetricsReport:
    global_accuracy: float
    accuracy_contribution: float
    precision_accuracy: float
    profitability: float | None
    target_achievement_rate: float | None
    cot_global_accuracy: float | None
    counts: QuadrantCounts
    cot_counts: QuadrantCounts | None
    degenerate: tuple[str, ...] = field(default_factory=tuple)

    def to_json(self) -> str:
        obj = {
            "global_accuracy": self.global_accuracy,
            "accuracy_contribution": self.accuracy_contribution,
            "precision_accuracy": self.precision_accuracy,
            "profitability": self.profitability,
            "target_achievement_rate": self.target_achievement_rate,
            "cot_global_accuracy": self.cot_global_accuracy,
            "counts": dataclasses.asdict(self.counts),
            "cot_counts": None if self.cot_counts is None else dataclasses.asdict(self.cot_counts),
            "degenerate": list(self.degenerate),
        }
        return json.dumps(obj, sort_keys=True, indent=2)

    @classmethod
    def from_json(cls, text: str) -> "MetricsReport":
        obj = json.loads(text)
        return cls(
            global_accuracy=obj["global_accuracy"],
            accuracy_contribution=obj["accuracy_contribution"],
            precision_accuracy=obj["precision_accuracy"],
            profitability=obj["profitability"],
            target_achievement_rate=obj["target_achievement_rate"],
            cot_global_accuracy=obj["cot_global_accuracy"],
            counts=QuadrantCounts(**obj["counts"]),
            cot_counts=None if obj["cot_counts"] is None else QuadrantCounts(**obj["cot_counts"]),
            degenerate=tuple(obj["degenerate"]),
        )


def compute_metrics(counts: QuadrantCounts, cot_counts: QuadrantCounts | None) -> MetricsReport:
    """All five metrics from the tallies; the baseline tallies may be absent,
    in which case the comparative metrics are omitted with a flag."""
    if counts.u == 0:
        raise MismatchedUniverse("empty universe")
    degenerate: list[str] = []

    ga = counts.correct / counts.u

    if counts.correct == 0:
        ac = 0.0
        degenerate.append("accuracy_contribution: no correct solutions")
    else:
        ac = counts.c_r / counts.correct

    if counts.retrieved == 0:
        pa = 0.0
        degenerate.append("precision_accuracy: no problems retrieved a similar solution")
    else:
        pa = counts.c_r / counts.retrieved

    if cot_counts is None:
        prof = None
        tar = None
        cot_ga = None
        degenerate.append("profitability, target_achievement_rate: no baseline run supplied")
    else:
        if cot_counts.u != counts.u:
            raise MismatchedUniverse(f"universe sizes differ: {counts.u} vs {cot_counts.u}")
        cot_correct = cot_counts.correct
        cot_ga = cot_correct / cot_counts.u
        if cot_correct == 0:
            prof = 0.0
            degenerate.append("profitability: baseline solved nothing")
        else:
            prof = ga / cot_ga - 1.0
        unresolved = counts.u - cot_correct
        if unresolved == 0:
            tar = 0.0
            degenerate.append("target_achievement_rate: baseline solved everything")
        else:
            tar = (counts.correct - cot_correct) / unresolved

    return MetricsReport(
        global_accuracy=ga,
        accuracy_contribution=ac,
        precision_accuracy=pa,
        profitability=prof,
        target_achievement_rate=tar,
        cot_global_accuracy=cot_ga,
        counts=counts,
        cot_counts=cot_counts,
        degenerate=tuple(degenerate),
    )


# ---------------------------------------------------------------------------
# Rendering
# ---------------------------------------------------------------------------

def _pct(value: float) -> str:
    return f"{value * 100:.2f}%"


def _rows(report: MetricsReport) -> list[tuple[str, str, str]]:
    c = report.counts
    rows = [
        (
            "Global Accuracy",
            _pct(report.global_accuracy),
            f"correct / all = {c.correct}/{c.u} = {report.global_accuracy:.4f}",
        ),
        (
            "Accuracy Contribution",
            _pct(report.accuracy_contribution),
            f"correct via retrieval / correct = {c.c_r}/{c.correct} = {report.accuracy_contribution:.4f}",
        ),
        (
            "Precision Accuracy",
            _pct(report.precision_accuracy),
            f"correct via retrieval / retrieved = {c.c_r}/{c.retrieved} = {report.precision_accuracy:.4f}",
        ),
    ]
    if report.cot_counts is not None:
        cot_correct = report.cot_counts.correct
        rows.append(
            (
                "CoT Global Accuracy",
                _pct(report.cot_global_accuracy),
                f"baseline correct / all = {cot_correct}/{c.u} = {report.cot_global_accuracy:.4f}",
            )
        )
        rows.append(
            (
                "Profitability (Benefit)",
                _pct(report.profitability),
                f"global accuracy / baseline accuracy - 1 = {report.profitability:.4f}",
            )
        )
        rows.append(
            (
                "Target Achievement Rate",
                _pct(report.target_achievement_rate),
                f"newly solved / baseline unresolved = {c.correct - cot_correct}/{c.u - cot_correct}"
                f" = {report.target_achievement_rate:.4f}",
            )
        )
    return rows


def render_report(report: MetricsReport, format: str = "table-text") -> str:
    """Deterministic report text; percentages carry two decimals and each row
    shows the defining formula alongside the value."""
    if format == "json":
        return report.to_json()
    rows = _rows(report)
    c = report.counts
    quadrant_line = (
        f"quadrants: correct&retrieved={c.c_r} correct&direct={c.c_nr} "
        f"incorrect&retrieved={c.nc_r} incorrect&direct={c.nc_nr} (total {c.u})"
    )
    if format == "markdown":
        lines = ["| Metric | Value | Formula |", "| --- | --- | --- |"]
        lines += [f"| {name} | {value} | {formula} |" for name, value, formula in rows]
        lines.append("")
        lines.append(quadrant_line)
        for flag in report.degenerate:
            lines.append(f"- note: {flag}")
        return "\n".join(lines) + "\n"
    if format == "table-text":
        name_w = max(len(r[0]) for r in rows)
        value_w = max(len(r[1]) for r in rows)
        lines = [f"{name.ljust(name_w)}  {value.rjust(value_w)}  {formula}" for name, value, formula in rows]
        lines.append(quadrant_line)
        for flag in report.degenerate:
            lines.append(f"note: {flag}")
        return "\n".join(lines) + "\n"
    raise ValueError(f"unknown report format {format!r}")


def group_by_category(
    traces: list[SolveTrace], truth: dict[str, Answer], categories: dict[str, str], tol: float
) -> dict[str, QuadrantCounts]:
    """Convenience per-category tallies; ``categories`` maps problem id to
    its category label."""
    grouped: dict[str, dict[str, int]] = {}
    for trace in traces:
        if trace.problem_id not in truth:
            raise MismatchedUniverse(f"no ground truth for problem {trace.problem_id}")
        category = categories.get(trace.problem_id, "unknown")
        counts = grouped.setdefault(
            category, {QUADRANT_CR: 0, QUADRANT_CNR: 0, QUADRANT_NCR: 0, QUADRANT_NCNR: 0}
        )
        counts[classify_trace(trace, truth[trace.problem_id], tol)] += 1
    return {cat: QuadrantCounts(**c) for cat, c in grouped.items()}
