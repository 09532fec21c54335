"""Time-based scoring of event-anchored predictions.

Predictions persist until the next one, giving a piecewise-constant label
timeline. Both timelines are sampled at the start of every fixed-length grid
interval (1 s by default) and compared interval by interval. Counting is done
with interval arithmetic on integer microseconds, which is exactly equal to a
per-interval loop.
"""

from __future__ import annotations

import json
import math
import statistics
from dataclasses import dataclass, field
from datetime import datetime, timedelta
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .ingest import GroundTruthTimeline
from .voting import Prediction, from_record, to_json_line

_US = timedelta(microseconds=1)
_EPOCH = datetime(1970, 1, 1)


class EvalError(Exception):
    pass


class EmptyPredictions(EvalError):
    pass


class SpanMismatch(EvalError):
    pass


class SchemaError(EvalError):
    def __init__(self, message: str, lineno: int | None = None):
        super().__init__(f"line {lineno}: {message}" if lineno is not None else message)
        self.lineno = lineno


def to_us(t: datetime) -> int:
    return (t - _EPOCH) // _US


@dataclass(frozen=True)
class PredictionTimeline:
    """Change points (strictly increasing) and the exclusive end of the span."""

    points: tuple[tuple[datetime, str], ...]
    end: datetime

    @property
    def start(self) -> datetime:
        return self.points[0][0]

    def label_at(self, t: datetime) -> str:
        if not self.start <= t < self.end:
            raise ValueError(f"{t} lies outside the prediction timeline")
        label = self.points[0][1]
        for when, lab in self.points:
            if when > t:
                break
            label = lab
        return label


def expand(predictions: Sequence[Prediction], span) -> PredictionTimeline:
    """Apply the persistence rule: each label holds until the next prediction.

    ``span`` is either the end instant or a ``(start, end)`` pair; predictions
    at or after the end are ignored.
    """
    end = span[1] if isinstance(span, tuple) else span
    ordered = sorted(predictions, key=lambda p: p.target_time)
    ordered = [p for p in ordered if p.target_time < end]
    if not ordered:
        raise EmptyPredictions("no predictions inside the evaluation span")
    points: list[tuple[datetime, str]] = []
    for p in ordered:
        if points and points[-1][0] == p.target_time:
            points.pop()
        if points and points[-1][1] == p.activity:
            continue
        points.append((p.target_time, p.activity))
    return PredictionTimeline(tuple(points), end)


@dataclass(frozen=True)
class EvalGrid:
    delta: timedelta = timedelta(seconds=1)

    def __post_init__(self):
        if self.delta <= timedelta(0):
            raise ValueError("grid interval must be positive")

    @property
    def delta_us(self) -> int:
        return self.delta // _US


@dataclass(frozen=True)
class ClassScore:
    label: str
    precision: float
    recall: float
    f1: float
    support: float  # seconds of ground truth
    predicted: float  # seconds predicted


@dataclass
class EvalReport:
    labels: tuple[str, ...]
    confusion: np.ndarray  # interval counts, rows = ground truth, cols = predicted
    delta_seconds: float
    excluded_seconds: float
    classes: list[ClassScore] = field(default_factory=list)
    weighted_f1: float = 0.0
    accuracy: float = 0.0

    @property
    def intervals(self) -> int:
        return int(self.confusion.sum())

    @property
    def total_seconds(self) -> float:
        return self.intervals * self.delta_seconds

    def confusion_seconds(self) -> np.ndarray:
        return self.confusion * self.delta_seconds


def _ceil_div(a: int, b: int) -> int:
    return -((-a) // b)


def _segments(points: Sequence[tuple[int, str]], end: int) -> list[tuple[int, int, str]]:
    out = []
    for i, (s, lab) in enumerate(points):
        e = points[i + 1][0] if i + 1 < len(points) else end
        if s < e:
            out.append((s, e, lab))
    return out


def confusion_counts(
    pred: PredictionTimeline,
    gt: GroundTruthTimeline,
    grid: EvalGrid,
    labels: Sequence[str] | None = None,
) -> tuple[tuple[str, ...], np.ndarray]:
    """Interval counts per (ground truth, predicted) label pair."""
    if pred.start < gt.start or pred.end > gt.end or pred.start >= pred.end:
        raise SpanMismatch(f"prediction span [{pred.start}, {pred.end}) is not inside [{gt.start}, {gt.end})")
    origin, end, step = to_us(pred.start), to_us(pred.end), grid.delta_us
    p_segs = _segments([(to_us(t), lab) for t, lab in pred.points], end)
    g_segs = [(to_us(iv.start), to_us(iv.end), iv.label) for iv in gt.intervals]

    names = list(labels or ())
    seen = set(names)
    names.extend(sorted(({lab for *_, lab in p_segs} | {iv.label for iv in gt.intervals}) - seen))
    index = {lab: i for i, lab in enumerate(names)}
    counts = np.zeros((len(names), len(names)), dtype=np.int64)

    # sweep the two sorted segment lists
    i = j = 0
    while i < len(p_segs) and j < len(g_segs):
        ps, pe, plab = p_segs[i]
        gs, ge, glab = g_segs[j]
        lo, hi = max(ps, gs), min(pe, ge)
        if lo < hi:
            n = _ceil_div(hi - origin, step) - _ceil_div(lo - origin, step)
            if n:
                counts[index[glab], index[plab]] += n
        if pe <= ge:
            i += 1
        else:
            j += 1
    return tuple(names), counts


def report_from_confusion(
    labels: Sequence[str], counts: np.ndarray, delta_seconds: float, excluded_seconds: float
) -> EvalReport:
    total = int(counts.sum())
    support = counts.sum(axis=1)
    predicted = counts.sum(axis=0)
    tp = np.diag(counts)
    classes = []
    weighted = 0.0
    for i, lab in enumerate(labels):
        p = tp[i] / predicted[i] if predicted[i] else 0.0
        r = tp[i] / support[i] if support[i] else 0.0
        f1 = 2 * p * r / (p + r) if p + r else 0.0
        classes.append(ClassScore(lab, float(p), float(r), float(f1), float(support[i] * delta_seconds),
                                  float(predicted[i] * delta_seconds)))
        weighted += int(support[i]) * f1
    return EvalReport(
        labels=tuple(labels),
        confusion=counts,
        delta_seconds=delta_seconds,
        excluded_seconds=excluded_seconds,
        classes=classes,
        weighted_f1=float(weighted / total) if total else 0.0,
        accuracy=float(tp.sum() / total) if total else 0.0,
    )


def score(
    pred: PredictionTimeline,
    gt: GroundTruthTimeline,
    grid: EvalGrid = EvalGrid(),
    labels: Sequence[str] | None = None,
) -> EvalReport:
    names, counts = confusion_counts(pred, gt, grid, labels)
    excluded = ((pred.start - gt.start) + (gt.end - pred.end)).total_seconds()
    return report_from_confusion(names, counts, grid.delta.total_seconds(), excluded)


def evaluate(
    predictions: Sequence[Prediction],
    gt: GroundTruthTimeline,
    grid: EvalGrid = EvalGrid(),
    labels: Sequence[str] | None = None,
) -> EvalReport:
    return score(expand(predictions, gt.end), gt, grid, labels)


# --- confidence analyses -----------------------------------------------------


@dataclass(frozen=True)
class ThresholdRow:
    threshold: float
    retained: int
    total: int
    report: EvalReport | None  # None when every prediction was discarded

    @property
    def discarded_pct(self) -> float:
        return 100.0 * (1 - self.retained / self.total) if self.total else 0.0

    @property
    def weighted_f1(self) -> float:
        return self.report.weighted_f1 if self.report is not None else float("nan")


@dataclass(frozen=True)
class ThresholdAnalysis:
    rows: tuple[ThresholdRow, ...]


def threshold_sweep(
    predictions: Sequence[Prediction],
    gt: GroundTruthTimeline,
    thresholds: Iterable[float],
    grid: EvalGrid = EvalGrid(),
    labels: Sequence[str] | None = None,
) -> ThresholdAnalysis:
    """Score only predictions with confidence >= th.

    Retained predictions persist over the gaps left by discarded ones; time
    before the first retained prediction is excluded.
    """
    rows = []
    for th in thresholds:
        if not 0.0 <= th <= 1.0:
            raise ValueError(f"threshold {th} outside [0, 1]")
        kept = [p for p in predictions if p.confidence >= th]
        try:
            report = evaluate(kept, gt, grid, labels)
        except EmptyPredictions:
            report = None
        rows.append(ThresholdRow(float(th), len(kept), len(predictions), report))
    return ThresholdAnalysis(tuple(rows))


@dataclass(frozen=True)
class GroupStats:
    count: int
    mean: float
    std: float  # population standard deviation


@dataclass(frozen=True)
class ConfidenceSplit:
    correct: GroupStats | None
    wrong: GroupStats | None


def _group(values: list[float]) -> GroupStats | None:
    if not values:
        return None
    return GroupStats(len(values), statistics.fmean(values), statistics.pstdev(values))


def confidence_split(predictions: Sequence[Prediction], gt: GroundTruthTimeline) -> ConfidenceSplit:
    """Confidence of predictions that match the ground truth at their target time vs. the rest."""
    right, wrong = [], []
    for p in predictions:
        if not gt.start <= p.target_time < gt.end:
            raise SpanMismatch(f"prediction at {p.target_time} lies outside the ground-truth span")
        (right if gt.label_at(p.target_time) == p.activity else wrong).append(p.confidence)
    return ConfidenceSplit(_group(right), _group(wrong))


# --- prediction files --------------------------------------------------------


def parse_prediction_line(line: str, lineno: int) -> Prediction:
    try:
        rec = json.loads(line)
    except ValueError as exc:
        raise SchemaError(f"not JSON ({exc})", lineno) from None
    if not isinstance(rec, dict):
        raise SchemaError("expected a JSON object", lineno)
    for key in ("target_time", "activity"):
        if key not in rec:
            raise SchemaError(f"missing field {key!r}", lineno)
    try:
        pred = from_record(rec)
    except (ValueError, TypeError, KeyError) as exc:
        raise SchemaError(f"bad field value ({exc})", lineno) from None
    if not (0.0 <= pred.confidence <= 1.0) or math.isnan(pred.confidence):
        raise SchemaError(f"confidence {pred.confidence} outside [0, 1]", lineno)
    if pred.n < 1:
        raise SchemaError("n must be >= 1", lineno)
    return pred


def import_predictions(path: str | Path) -> list[Prediction]:
    """Read a JSON-lines prediction file (ours or an external baseline's)."""
    preds = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if line.strip():
                preds.append(parse_prediction_line(line, lineno))
    return preds


def write_predictions(predictions: Iterable[Prediction], path: str | Path) -> None:
    text = "".join(to_json_line(p) + "\n" for p in predictions)
    Path(path).write_text(text, encoding="utf-8")
