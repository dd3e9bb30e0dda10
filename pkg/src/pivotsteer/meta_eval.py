"""Meta-evaluation: correlation with human judgments and steering-gain accounting."""

from __future__ import annotations

import csv
import io
import json
from dataclasses import asdict, dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

from pivotsteer.linalg import pearson

SIGMA_GRID = (0.0, 0.25, 0.5, 0.75, 1.0)
RHO_GRID = tuple(float(r) for r in range(-5, 6))
EPSILON = 1e-6
UNSTABLE = "unstable_baseline"
ORACLE = "oracle"


@dataclass
class JudgmentItem:
    item_id: str
    language: str
    dimension: str
    document: str
    summary: str
    human_scores: list[float]
    corrupted: bool = False
    paired_original_id: str | None = None
    reference: str | None = None
    pairing_resolved: bool = True

    def __post_init__(self):
        if not self.human_scores:
            raise ValueError(f"item {self.item_id}: human_scores is empty")
        for s in self.human_scores:
            if not 1 <= s <= 4:
                raise ValueError(f"item {self.item_id}: human score {s} outside [1, 4]")

    @property
    def mean_human(self) -> float:
        return float(np.mean(self.human_scores))


class UnstableBaseline(ValueError):
    """The baseline correlation is too close to zero for a relative gain."""


def default_grid(method: str) -> tuple[float, ...]:
    if method == "map":
        return SIGMA_GRID
    if method == "vector":
        return RHO_GRID
    raise ValueError(f"unknown method {method!r}")


def _join(records, items) -> list[tuple[float, JudgmentItem]]:
    by_id = {it.item_id: it for it in items}
    pairs = []
    for r in records:
        if r.item_id not in by_id:
            raise KeyError(f"score record {r.item_id!r} has no matching judgment item")
        pairs.append((r.score, by_id[r.item_id]))
    return pairs


def correlate(records, items) -> float:
    """Pearson r between metric scores and per-item mean human score."""
    pairs = _join(records, items)
    if len(pairs) < 2:
        raise ValueError("need at least 2 joined (score, judgment) pairs")
    return pearson([s for s, _ in pairs], [it.mean_human for _, it in pairs])


def relative_improvement(baseline_r: float, steered_r: float, eps: float = EPSILON) -> float:
    """Percentage change of the correlation relative to ``|baseline_r|``."""
    if abs(baseline_r) < eps:
        raise UnstableBaseline(f"|baseline r| = {abs(baseline_r):.3g} < {eps}")
    return (steered_r - baseline_r) / abs(baseline_r) * 100.0


def corruption_accuracy(records, items) -> float:
    """Share of (original, corrupted) pairs where the original scores strictly higher."""
    scores = {r.item_id: r.score for r in records}
    ids = {it.item_id for it in items}
    wins = total = 0
    for it in items:
        if not it.corrupted or it.paired_original_id not in ids:
            continue
        if it.item_id not in scores or it.paired_original_id not in scores:
            continue
        total += 1
        wins += scores[it.paired_original_id] > scores[it.item_id]
    if total == 0:
        raise ValueError("no resolvable (original, corrupted) pairs")
    return wins / total


@dataclass
class SweepRow:
    strength: float
    steered_r: float
    delta_pct: float | None
    flag: str = ""


@dataclass
class SweepResult:
    rows: list[SweepRow]
    best: SweepRow

    @property
    def baseline_r(self) -> float:
        return next(r.steered_r for r in self.rows if r.strength == 0)


def sweep(run: Callable[[float], float], grid: Sequence[float]) -> SweepResult:
    """Evaluate ``run(strength) -> correlation`` over ``grid``.

    The null strength (0) is the baseline for every Δ%.  The oracle pick
    maximises correlation, preferring the weaker intervention on ties.
    """
    grid = [float(g) for g in grid]
    if not grid:
        raise ValueError("empty grid")
    if 0.0 not in grid:
        raise ValueError("grid must include the null strength 0")
    results = {g: run(g) for g in grid}
    base = results[0.0]
    rows = []
    for g in grid:
        try:
            rows.append(SweepRow(g, results[g], relative_improvement(base, results[g])))
        except UnstableBaseline:
            rows.append(SweepRow(g, results[g], None, UNSTABLE))
    best = min(rows, key=lambda r: (-r.steered_r, abs(r.strength), r.strength))
    return SweepResult(rows, best)


@dataclass
class ReportRow:
    language: str
    dimension: str
    metric: str
    method: str
    strength: float
    baseline_r: float
    steered_r: float
    n_items: int
    delta_pct: float | None = None
    flag: str = ""


@dataclass
class AccuracyRow:
    language: str
    dimension: str
    metric: str
    method: str
    strength: float
    accuracy: float
    n_pairs: int


@dataclass
class EvalReport:
    rows: list[ReportRow] = field(default_factory=list)
    accuracy: list[AccuracyRow] = field(default_factory=list)

    CSV_COLUMNS = ("language", "dimension", "metric", "method", "strength",
                   "baseline_r", "steered_r", "delta_pct", "flag")

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(self.CSV_COLUMNS)
        for r in self.rows:
            w.writerow([r.language, r.dimension, r.metric, r.method, _fmt(r.strength),
                        _fmt(r.baseline_r), _fmt(r.steered_r), _fmt(r.delta_pct), r.flag])
        return buf.getvalue()

    def accuracy_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(("language", "dimension", "metric", "method", "strength",
                    "accuracy", "n_pairs"))
        for a in self.accuracy:
            w.writerow([a.language, a.dimension, a.metric, a.method, _fmt(a.strength),
                        _fmt(a.accuracy), a.n_pairs])
        return buf.getvalue()

    def to_json(self) -> str:
        payload = {
            "rows": [asdict(r) for r in self.rows],
            "accuracy": [asdict(a) for a in self.accuracy],
        }
        return json.dumps(payload, indent=2, sort_keys=True) + "\n"


def _fmt(x) -> str:
    if x is None:
        return ""
    return format(float(x), ".17g")


def build_report(rows: Iterable[ReportRow], accuracy: Iterable[AccuracyRow] = ()) -> EvalReport:
    """Fill in Δ% from full-precision correlations and sort rows stably.

    Rows are keyed by (language, dimension, metric, method, strength); a
    repeated key is an error.
    """
    seen: set = set()
    out: list[ReportRow] = []
    for r in rows:
        key = (r.language, r.dimension, r.metric, r.method, float(r.strength))
        if key in seen:
            raise ValueError(f"duplicate report key {key}")
        seen.add(key)
        flags = [f for f in r.flag.split(";") if f and f != UNSTABLE]
        try:
            delta = relative_improvement(r.baseline_r, r.steered_r)
        except UnstableBaseline:
            delta = None
            flags.append(UNSTABLE)
        out.append(ReportRow(r.language, r.dimension, r.metric, r.method, float(r.strength),
                             r.baseline_r, r.steered_r, r.n_items, delta, ";".join(flags)))
    out.sort(key=lambda r: (r.language, r.dimension, r.metric, r.method, r.strength))
    acc = sorted(accuracy, key=lambda a: (a.language, a.dimension, a.metric, a.method, a.strength))
    return EvalReport(out, acc)


def sweep_rows(
    result: SweepResult, language: str, dimension: str, metric: str, method: str, n_items: int
) -> list[ReportRow]:
    base = result.baseline_r
    return [
        ReportRow(language, dimension, metric, method, r.strength, base, r.steered_r, n_items,
                  flag=ORACLE if r is result.best else "")
        for r in result.rows
    ]
