"""Append-only, content-addressed store of raw model responses (JSON lines)."""

from __future__ import annotations

import hashlib
import json
import logging
import os
import threading
from dataclasses import asdict, dataclass
from datetime import datetime, timezone
from pathlib import Path

logger = logging.getLogger(__name__)


def cache_key(model: str, temperature: float, system: str, user: str, repetition: int) -> str:
    blob = json.dumps([model, float(temperature), system, user, int(repetition)], ensure_ascii=False)
    return hashlib.sha256(blob.encode("utf-8")).hexdigest()


@dataclass(frozen=True)
class CacheEntry:
    key: str
    text: str
    received: str
    latency: float


class ResponseCache:
    """Thread-safe response cache; ``path=None`` keeps it in memory only.

    A key is written at most once. A torn final line left by an interrupted
    run is dropped on load.
    """

    def __init__(self, path: str | Path | None = None):
        self.path = Path(path) if path is not None else None
        self._entries: dict[str, CacheEntry] = {}
        self._lock = threading.Lock()
        self.hits = 0
        self.misses = 0
        if self.path is not None:
            self.path.parent.mkdir(parents=True, exist_ok=True)
            self._load()

    def _load(self) -> None:
        if not self.path.exists():
            return
        data = self.path.read_bytes()
        if data and not data.endswith(b"\n"):
            cut = data.rfind(b"\n") + 1
            logger.warning("%s: dropping torn trailing record (%d bytes)", self.path, len(data) - cut)
            with open(self.path, "r+b") as fh:
                fh.truncate(cut)
            data = data[:cut]
        for lineno, line in enumerate(data.decode("utf-8").splitlines(), start=1):
            if not line.strip():
                continue
            try:
                entry = CacheEntry(**json.loads(line))
            except (ValueError, TypeError) as exc:
                logger.warning("%s:%d: unreadable cache record skipped (%s)", self.path, lineno, exc)
                continue
            self._entries.setdefault(entry.key, entry)

    def __len__(self) -> int:
        return len(self._entries)

    def __contains__(self, key: str) -> bool:
        return key in self._entries

    def keys(self) -> list[str]:
        return list(self._entries)

    def get(self, key: str) -> CacheEntry | None:
        with self._lock:
            entry = self._entries.get(key)
            if entry is None:
                self.misses += 1
            else:
                self.hits += 1
            return entry

    def put(self, key: str, text: str, latency: float) -> CacheEntry:
        with self._lock:
            existing = self._entries.get(key)
            if existing is not None:
                return existing
            entry = CacheEntry(key, text, datetime.now(timezone.utc).isoformat(), float(latency))
            if self.path is not None:
                line = json.dumps(asdict(entry), ensure_ascii=False) + "\n"
                with open(self.path, "a", encoding="utf-8") as fh:
                    fh.write(line)
                    fh.flush()
                    os.fsync(fh.fileno())
            self._entries[key] = entry
            return entry
