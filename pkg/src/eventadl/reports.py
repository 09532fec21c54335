"""CSV and markdown renderings of evaluation results."""

from __future__ import annotations

import csv
import io
import math
from pathlib import Path
from typing import Sequence

from .evaluation import ConfidenceSplit, EvalReport, ThresholdAnalysis


def fmt(x: float | None, digits: int = 10) -> str:
    if x is None or (isinstance(x, float) and math.isnan(x)):
        return ""
    if float(x).is_integer():
        return str(int(x))
    return format(float(x), f".{digits}g")


def _csv(rows: Sequence[Sequence]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerows(rows)
    return buf.getvalue()


def weighted_row(report: EvalReport) -> tuple[float, float, float, float]:
    total = sum(c.support for c in report.classes)
    if not total:
        return 0.0, 0.0, 0.0, 0.0
    p = sum(c.precision * c.support for c in report.classes) / total
    r = sum(c.recall * c.support for c in report.classes) / total
    return p, r, report.weighted_f1, total


def per_class_table(report: EvalReport) -> list[list]:
    rows: list[list] = [["activity", "precision", "recall", "f1", "support_seconds"]]
    for c in report.classes:
        rows.append([c.label, c.precision, c.recall, c.f1, c.support])
    rows.append(["weighted avg", *weighted_row(report)])
    return rows


def per_class_csv(report: EvalReport) -> str:
    table = per_class_table(report)
    return _csv([table[0]] + [[r[0], *map(fmt, r[1:])] for r in table[1:]])


def confusion_csv(report: EvalReport) -> str:
    secs = report.confusion_seconds()
    rows = [["ground_truth \\ predicted", *report.labels]]
    for i, lab in enumerate(report.labels):
        rows.append([lab, *(fmt(float(v)) for v in secs[i])])
    return _csv(rows)


def threshold_csv(analysis: ThresholdAnalysis) -> str:
    rows = [["th", "weighted_f1", "discarded_pct", "retained", "total"]]
    for r in analysis.rows:
        rows.append([fmt(r.threshold), fmt(r.weighted_f1), fmt(r.discarded_pct), r.retained, r.total])
    return _csv(rows)


def confidence_split_csv(split: ConfidenceSplit) -> str:
    rows = [["group", "count", "mean", "std"]]
    for name, g in (("correct", split.correct), ("wrong", split.wrong)):
        rows.append([name, 0, "", ""] if g is None else [name, g.count, fmt(g.mean), fmt(g.std)])
    return _csv(rows)


def _md(rows: Sequence[Sequence]) -> str:
    head, *body = rows
    lines = ["| " + " | ".join(map(str, head)) + " |", "|" + "---|" * len(head)]
    lines += ["| " + " | ".join(map(str, r)) + " |" for r in body]
    return "\n".join(lines) + "\n"


def _r(x, digits=2):
    return "" if x is None or (isinstance(x, float) and math.isnan(x)) else f"{x:.{digits}f}"


def markdown_report(
    report: EvalReport,
    analysis: ThresholdAnalysis | None = None,
    split: ConfidenceSplit | None = None,
    title: str = "Evaluation",
) -> str:
    parts = [f"# {title}\n"]
    parts.append(
        f"Grid interval: {fmt(report.delta_seconds)} s. Evaluated: {fmt(report.total_seconds)} s. "
        f"Excluded (before the first prediction or after the last): {fmt(report.excluded_seconds)} s.\n"
    )
    parts.append(f"Weighted F1: {_r(report.weighted_f1, 4)}. Accuracy: {_r(report.accuracy, 4)}.\n")
    parts.append("\n## Per-activity scores\n\n")
    table = per_class_table(report)
    parts.append(_md([table[0]] + [[r[0], *(_r(v) for v in r[1:4]), fmt(r[4])] for r in table[1:]]))
    parts.append("\n## Confusion matrix (seconds; rows = ground truth)\n\n")
    secs = report.confusion_seconds()
    parts.append(_md([["", *report.labels]] + [[lab, *(fmt(float(v)) for v in secs[i])]
                                               for i, lab in enumerate(report.labels)]))
    if analysis is not None:
        parts.append("\n## Confidence threshold\n\n")
        parts.append(
            "Seconds governed by discarded predictions keep the previous retained label; "
            "time before the first retained prediction is excluded.\n\n"
        )
        parts.append(_md([["th", "weighted F1", "discarded %"]] +
                         [[_r(r.threshold), _r(r.weighted_f1), _r(r.discarded_pct, 1)] for r in analysis.rows]))
    if split is not None:
        parts.append("\n## Confidence of correct vs wrong predictions\n\n")
        rows = [["group", "n", "confidence"]]
        for name, g in (("correct", split.correct), ("wrong", split.wrong)):
            rows.append([name, 0, "n/a"] if g is None else [name, g.count, f"{g.mean:.2f} ± {g.std:.2f}"])
        parts.append(_md(rows))
    return "".join(parts)


def write_eval_outputs(
    out_dir: str | Path,
    report: EvalReport,
    analysis: ThresholdAnalysis | None = None,
    split: ConfidenceSplit | None = None,
) -> list[Path]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    files = {
        "per_class.csv": per_class_csv(report),
        "confusion.csv": confusion_csv(report),
        "report.md": markdown_report(report, analysis, split),
    }
    if analysis is not None:
        files["thresholds.csv"] = threshold_csv(analysis)
    if split is not None:
        files["confidence_split.csv"] = confidence_split_csv(split)
    written = []
    for name, text in files.items():
        path = out / name
        path.write_text(text, encoding="utf-8")
        written.append(path)
    return written
