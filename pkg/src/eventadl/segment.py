"""Event-count windowing and window-timespan statistics."""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass
from datetime import timedelta
from pathlib import Path
from typing import Iterable, Iterator, NamedTuple, Sequence

import numpy as np

from .ingest import SensorEvent

logger = logging.getLogger(__name__)

_ONE_US = timedelta(microseconds=1)


@dataclass(frozen=True)
class SegmentationParams:
    k: int = 30
    s: int = 10

    def __post_init__(self):
        if self.k < 1 or self.s < 1:
            raise ValueError(f"window size and step must be positive (k={self.k}, s={self.s})")


class EventWindow(NamedTuple):
    """``k`` consecutive events; the last one is the prediction target.

    ``window_id`` is the 0-based index of the target event in the stream that
    was segmented. A plain tuple keeps construction and comparison cheap,
    which matters when a long log yields millions of windows.
    """

    window_id: int
    events: tuple[SensorEvent, ...]

    @property
    def target(self) -> SensorEvent:
        return self.events[-1]

    @property
    def context(self) -> tuple[SensorEvent, ...]:
        return self.events[:-1]


_new_tuple = tuple.__new__


def window_count(n_events: int, params: SegmentationParams) -> int:
    if n_events < params.k:
        return 0
    return (n_events - params.k) // params.s + 1


def target_indices(n_events: int, params: SegmentationParams) -> range:
    """0-based target indices: k-1, k-1+s, ... while < n_events."""
    return range(params.k - 1, n_events, params.s)


def iter_windows(events: Sequence[SensorEvent], params: SegmentationParams) -> Iterator[EventWindow]:
    seq = events if isinstance(events, tuple) else tuple(events)
    k = params.k
    for idx in target_indices(len(seq), params):
        yield _new_tuple(EventWindow, (idx, seq[idx - k + 1 : idx + 1]))


def segment(events: Sequence[SensorEvent], params: SegmentationParams = SegmentationParams()) -> list[EventWindow]:
    if len(events) < params.k:
        logger.warning("stream of %d events is shorter than k=%d; no windows", len(events), params.k)
        return []
    seq = events if isinstance(events, tuple) else tuple(events)
    k = params.k
    # tuple.__new__ skips the per-call field check of EventWindow._make
    return [_new_tuple(EventWindow, (idx, seq[idx - k + 1 : idx + 1])) for idx in target_indices(len(seq), params)]


@dataclass(frozen=True)
class TimespanSummary:
    k: int
    count: int
    min: float
    p25: float
    median: float
    p75: float
    max: float


def window_durations(events: Sequence[SensorEvent], k: int) -> np.ndarray:
    """Durations in seconds of every window of k events with step 1."""
    if k < 1:
        raise ValueError("k must be positive")
    if len(events) < k:
        return np.empty(0)
    # integer microseconds keep the differences exact
    base = events[0].t
    us = np.array([(e.t - base) // _ONE_US for e in events], dtype=np.int64)
    return (us[k - 1 :] - us[: len(us) - k + 1]) / 1e6


def window_timespan_stats(events: Sequence[SensorEvent], k_values: Iterable[int]) -> list[TimespanSummary]:
    out = []
    for k in k_values:
        d = window_durations(events, k)
        if d.size == 0:
            nan = float("nan")
            out.append(TimespanSummary(k, 0, nan, nan, nan, nan, nan))
            continue
        p = np.percentile(d, [0, 25, 50, 75, 100])
        out.append(TimespanSummary(k, int(d.size), *(float(x) for x in p)))
    return out


def write_timespan_csv(rows: Iterable[TimespanSummary], path: str | Path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["k", "min", "p25", "median", "p75", "max"])
        for r in rows:
            w.writerow([r.k, r.min, r.p25, r.median, r.p75, r.max])

