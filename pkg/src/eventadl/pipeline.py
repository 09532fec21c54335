"""End-to-end orchestration behind the CLI subcommands."""

from __future__ import annotations

import csv
import io
import json
import logging
import statistics
import time
from collections import Counter
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from datetime import timedelta
from pathlib import Path
from typing import Sequence
from zoneinfo import ZoneInfo

import yaml

from . import __version__
from .backend import Backend, ChatClient, DraftStatus, ScriptedBackend
from .cache import ResponseCache
from .config import RunConfig
from .evaluation import (
    EvalGrid,
    confidence_split,
    evaluate,
    import_predictions,
    parse_prediction_line,
    threshold_sweep,
    SchemaError,
)
from .ingest import (
    DiscretizationStats,
    SensorInventory,
    TestSpan,
    build_ground_truth,
    calendar_span,
    clean_events,
    read_casas_file,
    read_events_csv,
    read_timeline_csv,
    split_dataset,
    to_events,
    write_events_csv,
    write_timeline_csv,
)
from .prompts import PromptBuilder, load_template
from .reports import fmt, write_eval_outputs
from .segment import segment, window_timespan_stats, write_timespan_csv
from .voting import Recognizer, to_json_line

logger = logging.getLogger(__name__)

DEFAULT_THRESHOLDS = (0.0, 0.66, 0.8, 1.0)


# --- prepare -----------------------------------------------------------------


@dataclass
class PrepareSummary:
    out_dir: Path
    records: int
    line_errors: int
    events: int
    train_events: int
    test_events: int
    skipped_readings: int
    sensor_counts: dict[str, int]
    activity_seconds: dict[str, float]
    test_activity_seconds: dict[str, float]
    warnings: list[str] = field(default_factory=list)

    @property
    def activities(self) -> list[str]:
        return [a for a, secs in self.activity_seconds.items() if secs > 0]

    def render(self) -> str:
        lines = [
            f"records: {self.records} ({self.line_errors} malformed lines)",
            f"events after cleaning: {self.events} (train {self.train_events}, test {self.test_events})",
            f"readings skipped without a rule: {self.skipped_readings}",
            f"activities: {len(self.activities)}",
        ]
        for label, secs in self.activity_seconds.items():
            test = self.test_activity_seconds.get(label, 0.0)
            lines.append(f"  {label}: {secs / 3600:.2f} h total, {test / 3600:.2f} h in test span")
        lines.append(f"sensors: {len(self.sensor_counts)}")
        for sid, count in sorted(self.sensor_counts.items()):
            lines.append(f"  {sid}: {count} events")
        if self.warnings:
            lines.append(f"warnings: {len(self.warnings)} (see split.json)")
        return "\n".join(lines)


def prepare(config: RunConfig) -> PrepareSummary:
    if config.raw is None:
        raise FileNotFoundError("no raw dataset configured (dataset.raw)")
    records, errors = read_casas_file(config.raw)
    for err in errors[:20]:
        logger.warning("%s:%s", config.raw, err)
    if not records:
        raise ValueError(f"{config.raw}: no parseable records")

    stats = DiscretizationStats()
    events = clean_events(to_events(records, config.inventory.thresholds(), stats))
    span = calendar_span(r.t for r in records)
    timeline = build_ground_truth(records, config.catalog, span)
    test_span = (
        TestSpan(config.test_start, config.test_days)
        if config.test_start is not None
        else TestSpan.last_days(span[1], config.test_days)
    )
    train, test = split_dataset(events, timeline, test_span)

    out = config.prepared_dir
    out.mkdir(parents=True, exist_ok=True)
    write_events_csv(events, out / "events.csv")
    write_events_csv(train.events, out / "train_events.csv")
    write_events_csv(test.events, out / "test_events.csv")
    write_timeline_csv(test.timeline, out / "timeline.csv")
    write_timeline_csv(timeline, out / "full_timeline.csv")
    inventory = config.inventory.complete_for(sorted({e.sensor for e in events}))
    (out / "inventory.yaml").write_text(yaml.safe_dump(inventory.to_mapping(), sort_keys=True), encoding="utf-8")
    (out / "line_errors.txt").write_text("".join(f"{err}\n" for err in errors), encoding="utf-8")

    lo, hi = test_span.bounds()
    warnings = list(timeline.warnings)
    split_info = {
        "data_span": [span[0].isoformat(), span[1].isoformat()],
        "test_span": [lo.isoformat(), hi.isoformat()],
        "test_days": test_span.days,
        "train_events": len(train.events),
        "test_events": len(test.events),
        "line_errors": len(errors),
        "skipped_readings": stats.skipped,
        "warnings": warnings,
    }
    (out / "split.json").write_text(json.dumps(split_info, indent=2) + "\n", encoding="utf-8")

    full_secs = timeline.seconds_by_label()
    test_secs = test.timeline.seconds_by_label()
    return PrepareSummary(
        out_dir=out,
        records=len(records),
        line_errors=len(errors),
        events=len(events),
        train_events=len(train.events),
        test_events=len(test.events),
        skipped_readings=stats.skipped,
        sensor_counts=dict(Counter(e.sensor for e in events)),
        activity_seconds={lab: full_secs.get(lab, 0.0) for lab in config.catalog.labels},
        test_activity_seconds={lab: test_secs.get(lab, 0.0) for lab in config.catalog.labels},
        warnings=warnings,
    )


# --- run ---------------------------------------------------------------------


def make_backend(config: RunConfig) -> Backend:
    settings = config.backend
    if settings.kind == "scripted":
        if settings.script is None and settings.default is None:
            raise ValueError("scripted backend needs `script` or `default`")
        kwargs = dict(faults=settings.fault_plan(), default=settings.default, latency=settings.latency)
        if settings.script is None:
            return ScriptedBackend({}, **kwargs)
        return ScriptedBackend.from_file(settings.script, **kwargs)
    return ChatClient(settings.client_config(config.effective_temperature))


def prompt_builder(config: RunConfig, inventory: SensorInventory | None = None) -> PromptBuilder:
    if inventory is None:
        path = config.prepared_dir / "inventory.yaml"
        inventory = SensorInventory.load(path) if path.exists() else config.inventory
    tz = ZoneInfo(config.timezone) if config.timezone else None
    return PromptBuilder(inventory, config.catalog, load_template(config.prompt_template), tz)


@dataclass
class RunResult:
    predictions_path: Path
    manifest_path: Path
    manifest: dict


def _existing_lines(path: Path, fingerprint_path: Path, fingerprint: str) -> dict[int, str]:
    if not path.exists():
        return {}
    if not fingerprint_path.exists() or fingerprint_path.read_text().strip() != fingerprint:
        logger.info("%s was produced with different settings; starting over", path)
        return {}
    kept = {}
    for lineno, line in enumerate(path.read_text(encoding="utf-8").splitlines(), start=1):
        if not line.strip():
            continue
        try:
            pred = parse_prediction_line(line, lineno)
        except SchemaError:
            logger.warning("%s:%d: unreadable prediction dropped", path, lineno)
            continue
        kept[pred.window_id] = line
    return kept


def _outcomes(lines: Sequence[str]) -> dict[str, int]:
    counts = {s.value: 0 for s in DraftStatus}
    counts["tie_broken"] = 0
    for line in lines:
        rec = json.loads(line)
        for d in rec["drafts"]:
            counts[d["status"]] += 1
        counts["tie_broken"] += bool(rec["tie_broken"])
    return counts


def run(
    config: RunConfig,
    backend: Backend | None = None,
    out_dir: Path | None = None,
    fresh: bool = False,
) -> RunResult:
    """Recognize every window of the prepared test segment.

    Windows already present in the prediction file (written under the same
    settings) are kept verbatim; the rest go through the response cache and
    the backend. Lines are committed in window order as they complete.
    """
    started = time.perf_counter()
    out = Path(out_dir or config.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    events = read_events_csv(config.prepared_dir / "test_events.csv")
    prompts = prompt_builder(config)
    windows = segment(events, config.segmentation)
    warnings = []
    if not windows:
        warnings.append(f"{len(events)} test events is fewer than k={config.k}; no windows")

    pred_path, fp_path, manifest_path = out / "predictions.jsonl", out / "predictions.fingerprint", out / "manifest.json"
    fingerprint = config.fingerprint(prompts.system)
    existing = {} if fresh else _existing_lines(pred_path, fp_path, fingerprint)
    existing = {wid: line for wid, line in existing.items() if wid in {w.window_id for w in windows}}
    todo = [w for w in windows if w.window_id not in existing]

    owns_backend = backend is None
    if backend is None and todo:
        backend = make_backend(config)
    recognizer = Recognizer(
        backend,
        prompts,
        n=config.n,
        policy=config.tie_break,
        cache=ResponseCache(config.cache_path),
        model=config.backend.model,
        temperature=config.effective_temperature,
    )
    fp_path.write_text(fingerprint + "\n")
    lines = []
    try:
        with ThreadPoolExecutor(config.parallelism) as pool, open(pred_path, "w", encoding="utf-8") as fh:
            fresh_preds = pool.map(recognizer.run_window, todo)
            for w in windows:
                line = existing.get(w.window_id)
                if line is None:
                    line = to_json_line(next(fresh_preds))
                fh.write(line + "\n")
                fh.flush()
                lines.append(line)
    finally:
        recognizer.close()
        if owns_backend and hasattr(backend, "close"):
            backend.close()

    lat = recognizer.stats.latencies
    manifest = {
        "version": __version__,
        "config": config.snapshot(),
        "fingerprint": fingerprint,
        "seed": config.tie_break.seed,
        "tie_break": config.tie_break.kind,
        "temperature": config.effective_temperature,
        "windows": len(windows),
        "resumed_windows": len(existing),
        "n": config.n,
        "outcomes": _outcomes(lines),
        "backend_calls": recognizer.stats.backend_calls,
        "cache_hits": recognizer.stats.cache_hits,
        "cache_entries": len(recognizer.cache),
        "latency": {
            "calls": len(lat),
            "mean": statistics.fmean(lat) if lat else None,
            "std": statistics.pstdev(lat) if lat else None,
        },
        "parallelism": config.parallelism,
        "wall_clock_seconds": time.perf_counter() - started,
        "warnings": warnings,
    }
    manifest_path.write_text(json.dumps(manifest, indent=2) + "\n", encoding="utf-8")
    return RunResult(pred_path, manifest_path, manifest)


# --- eval --------------------------------------------------------------------


@dataclass
class EvalResult:
    report: object
    analysis: object
    split: object
    files: list[Path]


def evaluate_files(
    predictions_path: Path,
    timeline_path: Path,
    out_dir: Path,
    thresholds: Sequence[float] = DEFAULT_THRESHOLDS,
    delta_seconds: float = 1.0,
    labels: Sequence[str] | None = None,
) -> EvalResult:
    preds = import_predictions(predictions_path)
    gt = read_timeline_csv(timeline_path)
    grid = EvalGrid(timedelta(seconds=delta_seconds))
    report = evaluate(preds, gt, grid, labels)
    analysis = threshold_sweep(preds, gt, thresholds, grid, labels)
    split = confidence_split(preds, gt)
    files = write_eval_outputs(out_dir, report, analysis, split)
    return EvalResult(report, analysis, split, files)


# --- sweep -------------------------------------------------------------------


SWEEP_AXES = ("k", "th", "N")


def sweep(
    config: RunConfig,
    axis: str,
    values: Sequence[float],
    backend: Backend | None = None,
    delta_seconds: float = 1.0,
) -> Path:
    """One row per value: weighted F1 (and discard % for thresholds)."""
    if axis not in SWEEP_AXES:
        raise ValueError(f"unknown sweep axis {axis!r}")
    gt = read_timeline_csv(config.prepared_dir / "timeline.csv")
    grid = EvalGrid(timedelta(seconds=delta_seconds))
    labels = list(config.catalog.labels)
    rows = [[axis, "weighted_f1", "accuracy", "discarded_pct", "windows"]]
    base = config.output_dir / "sweeps"
    if axis == "th":
        result = run(config, backend, base / "base")
        preds = import_predictions(result.predictions_path)
        for r in threshold_sweep(preds, gt, values, grid, labels).rows:
            acc = r.report.accuracy if r.report is not None else None
            rows.append([fmt(r.threshold), fmt(r.weighted_f1), fmt(acc), fmt(r.discarded_pct), r.retained])
    else:
        for value in values:
            value = int(value)
            cfg = replace(config, k=value) if axis == "k" else replace(config, n=value)
            result = run(cfg, backend, base / f"{axis}{value}")
            preds = import_predictions(result.predictions_path)
            report = evaluate(preds, gt, grid, labels)
            rows.append([value, fmt(report.weighted_f1), fmt(report.accuracy), "", len(preds)])
    buf = io.StringIO()
    csv.writer(buf, lineterminator="\n").writerows(rows)
    path = config.output_dir / f"sweep_{axis}.csv"
    path.write_text(buf.getvalue(), encoding="utf-8")
    return path


# --- stats -------------------------------------------------------------------


def timespan_stats(events_path: Path, k_values: Sequence[int], out_path: Path) -> list:
    events = read_events_csv(events_path)
    rows = window_timespan_stats(events, k_values)
    out_path.parent.mkdir(parents=True, exist_ok=True)
    write_timespan_csv(rows, out_path)
    return rows
