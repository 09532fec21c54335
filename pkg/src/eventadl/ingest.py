"""CASAS-style log ingestion: parsing, discretization, cleaning, ground truth and splits."""

from __future__ import annotations

import csv
import io
import logging
import re
from dataclasses import dataclass, field
from datetime import date, datetime, timedelta
from enum import Enum
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import yaml

logger = logging.getLogger(__name__)

MARKERS = ("begin", "end")
SENSOR_KINDS = ("motion", "magnetic", "temperature", "other")
ON_TOKENS = {"ON", "OPEN"}
OFF_TOKENS = {"OFF", "CLOSE"}

_TS_FORMATS = ("%Y-%m-%d %H:%M:%S.%f", "%Y-%m-%d %H:%M:%S")


class IngestError(Exception):
    pass


class SpanOutOfRange(IngestError):
    pass


class Status(str, Enum):
    ON = "ON"
    OFF = "OFF"


@dataclass(frozen=True)
class RawRecord:
    t: datetime
    sensor: str
    value: str
    annotation: tuple[str, str] | None = None  # (activity, marker)


@dataclass(frozen=True)
class LineError:
    lineno: int
    kind: str  # bad_timestamp | too_few_fields | bad_marker
    reason: str
    line: str

    def __str__(self) -> str:
        return f"line {self.lineno}: {self.reason}"


@dataclass(frozen=True)
class SensorEvent:
    t: datetime
    sensor: str
    status: Status


def parse_timestamp(date_token: str, time_token: str) -> datetime:
    text = f"{date_token} {time_token}"
    for fmt in _TS_FORMATS:
        try:
            return datetime.strptime(text, fmt)
        except ValueError:
            continue
    raise ValueError(f"bad timestamp {text!r}")


def parse_casas_line(line: str, lineno: int = 0) -> RawRecord | LineError:
    fields = line.split()
    if len(fields) < 4:
        return LineError(lineno, "too_few_fields", f"expected at least 4 fields, got {len(fields)}", line)
    try:
        t = parse_timestamp(fields[0], fields[1])
    except ValueError as exc:
        return LineError(lineno, "bad_timestamp", str(exc), line)
    if not fields[2]:
        return LineError(lineno, "too_few_fields", "empty sensor id", line)
    annotation = None
    if len(fields) > 4:
        if len(fields) != 6 or fields[5].lower() not in MARKERS:
            tail = " ".join(fields[4:])
            return LineError(lineno, "bad_marker", f"expected '<activity> begin|end', got {tail!r}", line)
        annotation = (fields[4], fields[5].lower())
    return RawRecord(t, fields[2], fields[3], annotation)


def parse_casas_stream(text: str | Iterable[str]) -> tuple[list[RawRecord], list[LineError]]:
    """Parse a whitespace-separated ``date time sensor value [activity marker]`` log.

    Blank lines are ignored; every other line yields either a record or a
    ``LineError`` carrying its 1-based line number.
    """
    lines = text.splitlines() if isinstance(text, str) else text
    records: list[RawRecord] = []
    errors: list[LineError] = []
    for lineno, line in enumerate(lines, start=1):
        line = line.rstrip("\r\n")
        if not line.strip():
            continue
        parsed = parse_casas_line(line, lineno)
        if isinstance(parsed, LineError):
            errors.append(parsed)
        else:
            records.append(parsed)
    return records, errors


def format_timestamp(t: datetime) -> str:
    return t.strftime("%Y-%m-%d %H:%M:%S.%f")


def format_record(record: RawRecord) -> str:
    parts = [format_timestamp(record.t), record.sensor, record.value]
    if record.annotation is not None:
        parts.extend(record.annotation)
    return " ".join(parts)


def read_casas_file(path: str | Path) -> tuple[list[RawRecord], list[LineError]]:
    with open(path, encoding="utf-8", errors="replace") as fh:
        return parse_casas_stream(fh)


# --- sensors and activities -------------------------------------------------


@dataclass(frozen=True)
class SensorInfo:
    kind: str = "other"
    location: str = "unknown"
    description: str = ""
    threshold: float | None = None


UNKNOWN_SENSOR = SensorInfo()


@dataclass
class SensorInventory:
    """Sensor id -> kind/location/description, plus optional numeric thresholds.

    ``prefixes`` maps an id prefix (e.g. ``"M"``) to a kind for sensors that
    are not listed individually.
    """

    sensors: dict[str, SensorInfo] = field(default_factory=dict)
    prefixes: dict[str, str] = field(default_factory=dict)

    def get(self, sensor: str) -> SensorInfo:
        info = self.sensors.get(sensor)
        if info is not None:
            return info
        for prefix in sorted(self.prefixes, key=len, reverse=True):
            if sensor.startswith(prefix):
                return SensorInfo(kind=self.prefixes[prefix])
        return UNKNOWN_SENSOR

    def __getitem__(self, sensor: str) -> SensorInfo:
        return self.get(sensor)

    def __contains__(self, sensor: str) -> bool:
        return sensor in self.sensors

    def thresholds(self) -> dict[str, float]:
        return {sid: info.threshold for sid, info in self.sensors.items() if info.threshold is not None}

    def complete_for(self, sensors: Iterable[str]) -> "SensorInventory":
        """Return a copy with an explicit entry for every sensor in ``sensors``."""
        merged = dict(self.sensors)
        for sid in sensors:
            if sid not in merged:
                merged[sid] = self.get(sid)
        return SensorInventory(merged, dict(self.prefixes))

    @classmethod
    def from_mapping(cls, data: Mapping | None) -> "SensorInventory":
        data = dict(data or {})
        sensors = {}
        for sid, spec in (data.get("sensors") or {}).items():
            spec = dict(spec or {})
            kind = str(spec.get("kind", "other")).lower()
            if kind not in SENSOR_KINDS:
                raise IngestError(f"sensor {sid}: unknown kind {kind!r}")
            threshold = spec.get("threshold")
            sensors[str(sid)] = SensorInfo(
                kind=kind,
                location=str(spec.get("location", "unknown")),
                description=str(spec.get("description", "")),
                threshold=None if threshold is None else float(threshold),
            )
        prefixes = {str(k): str(v).lower() for k, v in (data.get("prefixes") or {}).items()}
        for prefix, kind in prefixes.items():
            if kind not in SENSOR_KINDS:
                raise IngestError(f"prefix {prefix}: unknown kind {kind!r}")
        return cls(sensors, prefixes)

    def to_mapping(self) -> dict:
        sensors = {}
        for sid, info in sorted(self.sensors.items()):
            entry = {"kind": info.kind, "location": info.location, "description": info.description}
            if info.threshold is not None:
                entry["threshold"] = info.threshold
            sensors[sid] = entry
        return {"sensors": sensors, "prefixes": dict(self.prefixes)}

    @classmethod
    def load(cls, path: str | Path) -> "SensorInventory":
        with open(path, encoding="utf-8") as fh:
            return cls.from_mapping(yaml.safe_load(fh))


_WS = re.compile(r"\s+")


def normalize_label(text: str) -> str:
    return _WS.sub(" ", text.strip()).casefold()


@dataclass(frozen=True)
class ActivityCatalog:
    labels: tuple[str, ...]
    fallback: str = "other"
    # raw annotation token -> catalog label
    label_map: Mapping[str, str] = field(default_factory=dict, compare=False)

    def __post_init__(self):
        labels = tuple(self.labels)
        object.__setattr__(self, "labels", labels)
        if len(labels) < 2:
            raise IngestError("an activity catalog needs at least two labels")
        keys = [normalize_label(lab) for lab in labels]
        if len(set(keys)) != len(keys):
            raise IngestError("activity labels collide after normalization")
        if normalize_label(self.fallback) not in keys:
            raise IngestError(f"fallback label {self.fallback!r} is not in the catalog")
        object.__setattr__(self, "_index", dict(zip(keys, labels)))
        mapped = {}
        for raw, target in self.label_map.items():
            canonical = self._index.get(normalize_label(target))
            if canonical is None:
                raise IngestError(f"label_map target {target!r} is not in the catalog")
            mapped[normalize_label(raw)] = canonical
        object.__setattr__(self, "_mapped", mapped)
        object.__setattr__(self, "fallback", self._index[normalize_label(self.fallback)])

    def __len__(self) -> int:
        return len(self.labels)

    def __iter__(self):
        return iter(self.labels)

    def __contains__(self, label: object) -> bool:
        return isinstance(label, str) and normalize_label(label) in self._index

    def match(self, text: str) -> str | None:
        """Canonical catalog label for ``text`` under normalization, else None."""
        return self._index.get(normalize_label(text))

    def resolve_annotation(self, raw: str) -> str | None:
        key = normalize_label(raw)
        return self._mapped.get(key) or self._index.get(key)

    @classmethod
    def from_mapping(cls, data: Mapping) -> "ActivityCatalog":
        return cls(
            labels=tuple(str(x) for x in data["labels"]),
            fallback=str(data.get("fallback", "other")),
            label_map={str(k): str(v) for k, v in (data.get("label_map") or {}).items()},
        )


# --- discretization and cleaning ---------------------------------------------


@dataclass
class DiscretizationStats:
    skipped: int = 0
    skipped_by_sensor: dict[str, int] = field(default_factory=dict)

    def skip(self, sensor: str) -> None:
        self.skipped += 1
        self.skipped_by_sensor[sensor] = self.skipped_by_sensor.get(sensor, 0) + 1


def _sorted_records(records: Sequence[RawRecord]) -> Sequence[RawRecord]:
    if all(a.t <= b.t for a, b in zip(records, records[1:])):
        return records
    return sorted(records, key=lambda r: r.t)


def to_events(
    records: Sequence[RawRecord],
    rules: Mapping[str, float] | None = None,
    stats: DiscretizationStats | None = None,
) -> list[SensorEvent]:
    """Map raw readings to binary ON/OFF events.

    ``rules`` holds per-sensor thresholds for numeric readings; a numeric
    sensor starts in the OFF state and emits only on state changes.
    """
    rules = rules or {}
    stats = stats if stats is not None else DiscretizationStats()
    state: dict[str, Status] = {}
    events = []
    for rec in _sorted_records(records):
        token = rec.value.upper()
        if token in ON_TOKENS or token in OFF_TOKENS:
            status = Status.ON if token in ON_TOKENS else Status.OFF
            if state.get(rec.sensor) == status:
                continue
        else:
            threshold = rules.get(rec.sensor)
            try:
                reading = float(rec.value)
            except ValueError:
                reading = None
            if threshold is None or reading is None:
                stats.skip(rec.sensor)
                continue
            status = Status.ON if reading >= threshold else Status.OFF
            if state.get(rec.sensor, Status.OFF) == status:
                continue
        state[rec.sensor] = status
        events.append(SensorEvent(rec.t, rec.sensor, status))
    if stats.skipped:
        logger.info("skipped %d records without a discretization rule", stats.skipped)
    return events


def clean_events(events: Iterable[SensorEvent]) -> list[SensorEvent]:
    """Stable-sort by time and drop per-sensor repeats of the same status."""
    last: dict[str, Status] = {}
    out = []
    for ev in sorted(events, key=lambda e: e.t):
        if last.get(ev.sensor) == ev.status:
            continue
        last[ev.sensor] = ev.status
        out.append(ev)
    return out


# --- ground truth ------------------------------------------------------------


@dataclass(frozen=True)
class Interval:
    start: datetime
    end: datetime
    label: str


@dataclass(frozen=True)
class GroundTruthTimeline:
    intervals: tuple[Interval, ...]
    start: datetime
    end: datetime
    warnings: tuple[str, ...] = field(default=(), compare=False)

    @property
    def span(self) -> tuple[datetime, datetime]:
        return self.start, self.end

    def label_at(self, t: datetime) -> str:
        lo, hi = 0, len(self.intervals)
        while lo < hi:
            mid = (lo + hi) // 2
            if self.intervals[mid].start <= t:
                lo = mid + 1
            else:
                hi = mid
        if lo == 0 or not (self.start <= t < self.end):
            raise ValueError(f"{t} lies outside the timeline span")
        return self.intervals[lo - 1].label

    def restrict(self, start: datetime, end: datetime) -> "GroundTruthTimeline":
        if start < self.start or end > self.end or start > end:
            raise SpanOutOfRange(f"[{start}, {end}) is not inside [{self.start}, {self.end})")
        out = []
        for iv in self.intervals:
            s, e = max(iv.start, start), min(iv.end, end)
            if s < e:
                out.append(Interval(s, e, iv.label))
        return GroundTruthTimeline(tuple(out), start, end, self.warnings)

    def seconds_by_label(self) -> dict[str, float]:
        totals: dict[str, float] = {}
        for iv in self.intervals:
            totals[iv.label] = totals.get(iv.label, 0.0) + (iv.end - iv.start).total_seconds()
        return totals


def calendar_span(times: Iterable[datetime]) -> tuple[datetime, datetime]:
    """Midnight of the first day to midnight after the last day."""
    times = list(times)
    if not times:
        raise IngestError("no timestamps to derive a span from")
    first, last = min(times), max(times)
    start = datetime.combine(first.date(), datetime.min.time())
    end = datetime.combine(last.date(), datetime.min.time()) + timedelta(days=1)
    return start, end


def build_ground_truth(
    records: Sequence[RawRecord],
    catalog: ActivityCatalog,
    span: tuple[datetime, datetime],
) -> GroundTruthTimeline:
    """Turn begin/end annotations into a gap-free labeled timeline over ``span``.

    Unmatched markers and overlaps are repaired, never fatal; each repair adds
    a message to ``timeline.warnings``.
    """
    start, end = span
    warnings: list[str] = []
    open_at: dict[str, datetime] = {}
    raw_intervals: list[tuple[datetime, datetime, str]] = []
    for rec in _sorted_records(records):
        if rec.annotation is None:
            continue
        activity, marker = rec.annotation
        if marker == "begin":
            if activity in open_at:
                warnings.append(f"UnmatchedMarker: {activity} begin at {rec.t} while already open; closing previous")
                raw_intervals.append((open_at[activity], rec.t, activity))
            open_at[activity] = rec.t
        else:
            began = open_at.pop(activity, None)
            if began is None:
                warnings.append(f"UnmatchedMarker: {activity} end at {rec.t} without begin")
                continue
            raw_intervals.append((began, rec.t, activity))
    for activity, began in open_at.items():
        warnings.append(f"UnmatchedMarker: {activity} begin at {began} never ended; closed at span end")
        raw_intervals.append((began, end, activity))

    labelled = []
    for s, e, raw in raw_intervals:
        label = catalog.resolve_annotation(raw)
        if label is None:
            warnings.append(f"UnknownLabel: {raw!r} mapped to {catalog.fallback!r}")
            label = catalog.fallback
        labelled.append((s, e, label))
    labelled.sort(key=lambda x: (x[0], x[1]))

    resolved: list[tuple[datetime, datetime, str]] = []
    for s, e, label in labelled:
        if resolved and resolved[-1][1] > s:
            ps, pe, plabel = resolved.pop()
            warnings.append(f"Overlap: {plabel} [{ps}, {pe}) truncated at {s}")
            if ps < s:
                resolved.append((ps, s, plabel))
        if s < e:
            resolved.append((s, e, label))

    intervals: list[Interval] = []
    cursor = start
    for s, e, label in resolved:
        s, e = max(s, start), min(e, end)
        if s >= e:
            continue
        if cursor < s:
            intervals.append(Interval(cursor, s, catalog.fallback))
        intervals.append(Interval(s, e, label))
        cursor = e
    if cursor < end:
        intervals.append(Interval(cursor, end, catalog.fallback))
    for w in warnings:
        logger.warning(w)
    return GroundTruthTimeline(tuple(_merge_adjacent(intervals)), start, end, tuple(warnings))


def _merge_adjacent(intervals: list[Interval]) -> list[Interval]:
    out: list[Interval] = []
    for iv in intervals:
        if out and out[-1].label == iv.label and out[-1].end == iv.start:
            out[-1] = Interval(out[-1].start, iv.end, iv.label)
        else:
            out.append(iv)
    return out


# --- train/test split --------------------------------------------------------


@dataclass(frozen=True)
class TestSpan:
    start: date
    days: int = 21

    __test__ = False  # not a pytest class

    def bounds(self) -> tuple[datetime, datetime]:
        begin = datetime.combine(self.start, datetime.min.time())
        return begin, begin + timedelta(days=self.days)

    @classmethod
    def last_days(cls, span_end: datetime, days: int = 21) -> "TestSpan":
        end_day = span_end.date() if span_end.time() != datetime.min.time() else span_end.date() - timedelta(days=1)
        return cls(end_day - timedelta(days=days - 1), days)


@dataclass(frozen=True)
class Segment:
    events: tuple[SensorEvent, ...]
    timelines: tuple[GroundTruthTimeline, ...]

    @property
    def timeline(self) -> GroundTruthTimeline:
        if len(self.timelines) != 1:
            raise ValueError(f"segment has {len(self.timelines)} timeline pieces")
        return self.timelines[0]


def split_dataset(
    events: Sequence[SensorEvent],
    timeline: GroundTruthTimeline,
    test_span: TestSpan,
) -> tuple[Segment, Segment]:
    """Cut a contiguous block of calendar days out as the test segment.

    The train segment keeps everything else; its timeline may come in two
    pieces when the test block sits in the middle of the data.
    """
    lo, hi = test_span.bounds()
    if test_span.days < 1 or lo < timeline.start or hi > timeline.end:
        raise SpanOutOfRange(f"test span [{lo}, {hi}) is outside the data span [{timeline.start}, {timeline.end})")
    test_events = tuple(e for e in events if lo <= e.t < hi)
    train_events = tuple(e for e in events if not (lo <= e.t < hi))
    pieces = []
    if timeline.start < lo:
        pieces.append(timeline.restrict(timeline.start, lo))
    if hi < timeline.end:
        pieces.append(timeline.restrict(hi, timeline.end))
    return Segment(train_events, tuple(pieces)), Segment(test_events, (timeline.restrict(lo, hi),))


# --- file formats ------------------------------------------------------------


def write_events_csv(events: Iterable[SensorEvent], path: str | Path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["t", "sensor", "status"])
        for ev in events:
            w.writerow([ev.t.isoformat(sep=" ", timespec="microseconds"), ev.sensor, ev.status.value])


def read_events_csv(path: str | Path) -> list[SensorEvent]:
    with open(path, newline="", encoding="utf-8") as fh:
        return [
            SensorEvent(datetime.fromisoformat(row["t"]), row["sensor"], Status(row["status"]))
            for row in csv.DictReader(fh)
        ]


def timeline_to_csv(timeline: GroundTruthTimeline) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["start", "end", "label"])
    for iv in timeline.intervals:
        w.writerow([iv.start.isoformat(sep=" ", timespec="microseconds"),
                    iv.end.isoformat(sep=" ", timespec="microseconds"), iv.label])
    return buf.getvalue()


def write_timeline_csv(timeline: GroundTruthTimeline, path: str | Path) -> None:
    Path(path).write_text(timeline_to_csv(timeline), encoding="utf-8")


def read_timeline_csv(path: str | Path) -> GroundTruthTimeline:
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.DictReader(fh))
    if not rows:
        raise IngestError(f"{path}: empty timeline")
    intervals = tuple(
        Interval(datetime.fromisoformat(r["start"]), datetime.fromisoformat(r["end"]), r["label"]) for r in rows
    )
    for a, b in zip(intervals, intervals[1:]):
        if a.end != b.start:
            raise IngestError(f"{path}: timeline has a gap or overlap at {a.end}")
    return GroundTruthTimeline(intervals, intervals[0].start, intervals[-1].end)
