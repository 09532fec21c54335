"""Repeated-query majority voting with an approximate confidence score."""

from __future__ import annotations

import json
import random
import threading
from collections import Counter
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from datetime import datetime
from typing import Mapping, Sequence

from .backend import (
    BadResponse,
    Backend,
    DraftStatus,
    PredictionDraft,
    TransportFailure,
    parse_response,
    transport_draft,
)
from .cache import ResponseCache, cache_key
from .ingest import ActivityCatalog
from .prompts import PromptBuilder
from .segment import EventWindow

TIE_BREAK_KINDS = ("seeded-random", "priority-list")


@dataclass(frozen=True)
class TieBreakPolicy:
    kind: str = "seeded-random"
    priority: tuple[str, ...] = ()
    seed: int = 0

    def __post_init__(self):
        if self.kind not in TIE_BREAK_KINDS:
            raise ValueError(f"unknown tie-break policy {self.kind!r}")
        object.__setattr__(self, "priority", tuple(self.priority))
        if self.kind == "priority-list" and not self.priority:
            raise ValueError("priority-list policy needs a priority list")

    def check(self, catalog: ActivityCatalog) -> "TieBreakPolicy":
        """Return a copy whose priority labels are canonical catalog labels."""
        canonical = []
        for label in self.priority:
            match = catalog.match(label)
            if match is None:
                raise ValueError(f"priority label {label!r} is not in the catalog")
            canonical.append(match)
        return replace(self, priority=tuple(canonical))

    def choose(self, tied: Sequence[str], window_id: int) -> str:
        ordered = sorted(tied)
        if self.kind == "priority-list":
            rank = {label: i for i, label in enumerate(self.priority)}
            return min(ordered, key=lambda lab: (rank.get(lab, len(rank)), lab))
        rng = random.Random(f"{self.seed}:{window_id}")
        return rng.choice(ordered)


@dataclass(frozen=True)
class RepetitionSet:
    window_id: int
    drafts: tuple[PredictionDraft, ...]
    target_time: datetime | None = None

    def __post_init__(self):
        object.__setattr__(self, "drafts", tuple(self.drafts))
        if not self.drafts:
            raise ValueError("a repetition set needs at least one draft")

    @property
    def n(self) -> int:
        return len(self.drafts)


@dataclass(frozen=True)
class Prediction:
    window_id: int
    target_time: datetime
    activity: str
    confidence: float
    histogram: Mapping[str, int]
    tie_broken: bool
    n: int
    drafts: tuple[PredictionDraft, ...] = field(default=(), compare=False)


def aggregate(reps: RepetitionSet, policy: TieBreakPolicy, catalog: ActivityCatalog) -> Prediction:
    """Majority vote over the valid drafts; confidence is votes/N.

    Non-valid drafts count towards N but carry no vote. With no valid draft
    the fallback label is returned at confidence 1/N.
    """
    n = reps.n
    votes = Counter(d.label for d in reps.drafts if d.status is DraftStatus.VALID)
    histogram = {label: votes[label] for label in catalog.labels if votes[label]}
    target_time = reps.target_time or datetime.min
    if not histogram:
        return Prediction(reps.window_id, target_time, catalog.fallback, 1 / n, {}, True, n, reps.drafts)
    top = max(histogram.values())
    tied = [label for label, count in histogram.items() if count == top]
    activity = tied[0] if len(tied) == 1 else policy.choose(tied, reps.window_id)
    return Prediction(reps.window_id, target_time, activity, top / n, histogram, len(tied) > 1, n, reps.drafts)


# --- serialization -----------------------------------------------------------


def to_record(pred: Prediction) -> dict:
    return {
        "window_id": pred.window_id,
        "target_time": pred.target_time.isoformat(sep=" ", timespec="microseconds"),
        "activity": pred.activity,
        "confidence": pred.confidence,
        "histogram": dict(pred.histogram),
        "tie_broken": pred.tie_broken,
        "n": pred.n,
        "drafts": [{"status": d.status.value, "label": d.label, "latency": d.latency} for d in pred.drafts],
    }


def to_json_line(pred: Prediction) -> str:
    return json.dumps(to_record(pred), ensure_ascii=False, sort_keys=False)


def from_record(rec: Mapping) -> Prediction:
    """Inverse of ``to_record``; optional fields take baseline-friendly defaults."""
    activity = rec["activity"]
    if not isinstance(activity, str):
        raise TypeError("activity must be a string")
    confidence = float(rec.get("confidence", 1.0))
    n = int(rec.get("n", 1))
    drafts = tuple(
        PredictionDraft(DraftStatus(d["status"]), d.get("label"), latency=float(d.get("latency", 0.0)))
        for d in rec.get("drafts", ())
    )
    return Prediction(
        window_id=int(rec.get("window_id", -1)),
        target_time=datetime.fromisoformat(rec["target_time"]),
        activity=activity,
        confidence=confidence,
        histogram={str(k): int(v) for k, v in (rec.get("histogram") or {activity: 1}).items()},
        tie_broken=bool(rec.get("tie_broken", False)),
        n=n,
        drafts=drafts,
    )


# --- running windows ---------------------------------------------------------


@dataclass
class CallStats:
    backend_calls: int = 0
    cache_hits: int = 0
    latencies: list[float] = field(default_factory=list)


class Recognizer:
    """Queries a backend N times per window through the response cache.

    ``model`` and ``temperature`` only feed the cache key; the backend is
    expected to be configured with the same values.
    """

    def __init__(
        self,
        backend: Backend,
        prompts: PromptBuilder,
        *,
        n: int = 5,
        policy: TieBreakPolicy = TieBreakPolicy(),
        cache: ResponseCache | None = None,
        model: str = "scripted",
        temperature: float = 1.0,
        call_workers: int = 1,
    ):
        if n < 1:
            raise ValueError("N must be >= 1")
        self.backend = backend
        self.prompts = prompts
        self.catalog = prompts.catalog
        self.n = n
        self.policy = policy.check(self.catalog)
        self.cache = cache if cache is not None else ResponseCache()
        self.model = model
        self.temperature = temperature
        self.stats = CallStats()
        self._lock = threading.Lock()
        self._pool = ThreadPoolExecutor(call_workers) if call_workers > 1 else None

    def close(self) -> None:
        if self._pool is not None:
            self._pool.shutdown()

    def keys_for(self, window: EventWindow) -> list[str]:
        system, user = self.prompts.system, self.prompts.user(window)
        return [cache_key(self.model, self.temperature, system, user, r) for r in range(self.n)]

    def _draft(self, system: str, user: str, repetition: int) -> PredictionDraft:
        key = cache_key(self.model, self.temperature, system, user, repetition)
        entry = self.cache.get(key)
        if entry is None:
            with self._lock:
                self.stats.backend_calls += 1
            try:
                completion = self.backend.complete(system, user, repetition=repetition)
            except (TransportFailure, BadResponse) as exc:
                return transport_draft(exc)
            entry = self.cache.put(key, completion.text, completion.latency)
            with self._lock:
                self.stats.latencies.append(entry.latency)
        else:
            with self._lock:
                self.stats.cache_hits += 1
        return replace(parse_response(entry.text, self.catalog), latency=entry.latency)

    def drafts(self, window: EventWindow) -> tuple[PredictionDraft, ...]:
        system, user = self.prompts.system, self.prompts.user(window)
        if self._pool is None:
            return tuple(self._draft(system, user, r) for r in range(self.n))
        futures = [self._pool.submit(self._draft, system, user, r) for r in range(self.n)]
        return tuple(f.result() for f in futures)

    def run_window(self, window: EventWindow) -> Prediction:
        reps = RepetitionSet(window.window_id, self.drafts(window), window.target.t)
        return aggregate(reps, self.policy, self.catalog)


def run_window(
    window: EventWindow,
    backend: Backend,
    prompts: PromptBuilder,
    n: int = 5,
    policy: TieBreakPolicy = TieBreakPolicy(),
    cache: ResponseCache | None = None,
    **kwargs,
) -> Prediction:
    return Recognizer(backend, prompts, n=n, policy=policy, cache=cache, **kwargs).run_window(window)
