"""Chat-completion backends and response parsing.

Every backend exposes ``complete(system, user, repetition=None) -> Completion``
and may be called from several threads at once.
"""

from __future__ import annotations

import hashlib
import json
import logging
import os
import re
import threading
import time
from collections import defaultdict
from dataclasses import dataclass, field, replace
from enum import Enum
from pathlib import Path
from typing import Callable, Mapping, Protocol, Sequence
from urllib.parse import urlparse

import httpx

from .ingest import ActivityCatalog

logger = logging.getLogger(__name__)


class BackendError(Exception):
    pass


class TransportFailure(BackendError):
    pass


class AuthFailure(BackendError):
    pass


class BadResponse(BackendError):
    pass


class UnknownPromptKey(BackendError):
    pass


@dataclass(frozen=True)
class Completion:
    text: str
    latency: float = 0.0


class Backend(Protocol):
    def complete(self, system: str, user: str, repetition: int | None = None) -> Completion: ...


@dataclass(frozen=True)
class BackendConfig:
    endpoint: str
    model: str
    temperature: float = 0.0
    timeout: float = 120.0
    max_retries: int = 3
    api_key_env: str | None = "OPENAI_API_KEY"
    max_tokens: int | None = None
    backoff: float = 1.0  # seconds before the first retry, doubled each time

    def __post_init__(self):
        if not 0.0 <= self.temperature <= 2.0:
            raise ValueError(f"temperature must be in [0, 2], got {self.temperature}")
        if self.max_retries < 0:
            raise ValueError("max_retries must be >= 0")
        parsed = urlparse(self.endpoint)
        if parsed.scheme not in ("http", "https") or not parsed.netloc:
            raise ValueError(f"invalid endpoint URL {self.endpoint!r}")

    def with_temperature(self, temperature: float) -> "BackendConfig":
        return replace(self, temperature=temperature)


_TRANSIENT_STATUS = {408, 409, 425, 429}


class ChatClient:
    """OpenAI-compatible ``/chat/completions`` client with retry and backoff."""

    def __init__(
        self,
        config: BackendConfig,
        *,
        transport: httpx.BaseTransport | None = None,
        sleep: Callable[[float], None] = time.sleep,
    ):
        self.config = config
        self._sleep = sleep
        headers = {"Content-Type": "application/json"}
        key = os.environ.get(config.api_key_env) if config.api_key_env else None
        if key:
            headers["Authorization"] = f"Bearer {key}"
        self._http = httpx.Client(
            base_url=config.endpoint.rstrip("/"), headers=headers, timeout=config.timeout, transport=transport
        )

    def close(self) -> None:
        self._http.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()

    def payload(self, system: str, user: str) -> dict:
        body = {
            "model": self.config.model,
            "temperature": self.config.temperature,
            "messages": [{"role": "system", "content": system}, {"role": "user", "content": user}],
        }
        if self.config.max_tokens is not None:
            body["max_tokens"] = self.config.max_tokens
        return body

    def complete(self, system: str, user: str, repetition: int | None = None) -> Completion:
        body = self.payload(system, user)
        last_error = "no attempt made"
        for attempt in range(self.config.max_retries + 1):
            if attempt:
                self._sleep(self.config.backoff * 2 ** (attempt - 1))
            started = time.perf_counter()
            try:
                resp = self._http.post("/chat/completions", json=body)
            except httpx.TimeoutException as exc:
                last_error = f"timeout: {exc}"
                continue
            except httpx.TransportError as exc:
                last_error = f"transport error: {exc}"
                continue
            latency = time.perf_counter() - started
            if resp.status_code in (401, 403):
                raise AuthFailure(f"HTTP {resp.status_code} from {self.config.endpoint}")
            if resp.status_code in _TRANSIENT_STATUS or resp.status_code >= 500:
                last_error = f"HTTP {resp.status_code}"
                continue
            if resp.status_code >= 400:
                raise TransportFailure(f"HTTP {resp.status_code}: {resp.text[:200]}")
            return Completion(extract_message(resp), latency)
        raise TransportFailure(f"gave up after {self.config.max_retries + 1} attempts ({last_error})")


def extract_message(resp: httpx.Response) -> str:
    try:
        data = resp.json()
        content = data["choices"][0]["message"]["content"]
    except (ValueError, KeyError, IndexError, TypeError) as exc:
        raise BadResponse(f"no choices[0].message.content in response: {exc!r}") from None
    if not isinstance(content, str):
        raise BadResponse("message content is not a string")
    return content


def complete(config: BackendConfig, system: str, user: str) -> str:
    """One chat completion; returns the assistant message text."""
    with ChatClient(config) as client:
        return client.complete(system, user).text


# --- response parsing --------------------------------------------------------


class DraftStatus(str, Enum):
    VALID = "valid"
    INVALID_LABEL = "invalid_label"
    PARSE_FAILURE = "parse_failure"
    TRANSPORT_FAILURE = "transport_failure"


@dataclass(frozen=True)
class PredictionDraft:
    status: DraftStatus
    label: str | None = None  # catalog member when valid, offending text when invalid
    reasoning: str | None = None
    raw: str = ""
    latency: float = 0.0

    @property
    def valid(self) -> bool:
        return self.status is DraftStatus.VALID


_FENCE = re.compile(r"```[A-Za-z0-9_-]*")
_TRAILING_COMMA = re.compile(r",\s*(?=[}\]])")
_SMART_QUOTES = str.maketrans({"“": '"', "”": '"', "‘": "'", "’": "'"})


def balanced_objects(text: str) -> list[tuple[int, int]]:
    """Spans of every brace-balanced ``{...}`` block, nested ones included.

    Double-quoted strings are honoured only inside a block, so stray quotes
    in surrounding prose do not derail the scan.
    """
    spans = []
    stack: list[int] = []
    in_string = escaped = False
    for i, ch in enumerate(text):
        if in_string:
            if escaped:
                escaped = False
            elif ch == "\\":
                escaped = True
            elif ch == '"':
                in_string = False
            continue
        if ch == "{":
            stack.append(i)
        elif ch == "}" and stack:
            spans.append((stack.pop(), i + 1))
        elif ch == '"' and stack:
            in_string = True
    return spans


def _loads_lenient(block: str):
    candidates = [block, _TRAILING_COMMA.sub("", block)]
    fixed = block.translate(_SMART_QUOTES)
    if '"' not in fixed:
        fixed = fixed.replace("'", '"')
    candidates.append(_TRAILING_COMMA.sub("", fixed))
    for c in candidates:
        try:
            return json.loads(c)
        except ValueError:
            continue
    return None


def _activity_field(obj: dict):
    for key, value in obj.items():
        if isinstance(key, str) and key.strip().lower() == "activity":
            return True, value
    return False, None


def parse_response(raw: str, catalog: ActivityCatalog) -> PredictionDraft:
    """Extract the final ``{"activity": ...}`` object from a model reply.

    Never raises: failures are reported through the draft status.
    """
    text = _FENCE.sub("", raw)
    spans = sorted(balanced_objects(text), key=lambda sp: (-sp[1], sp[0]))
    for start, end in spans:
        obj = _loads_lenient(text[start:end])
        if not isinstance(obj, dict):
            continue
        found, value = _activity_field(obj)
        if not found:
            continue
        reasoning = text[:start].strip() or None
        if not isinstance(value, str):
            return PredictionDraft(DraftStatus.INVALID_LABEL, json.dumps(value), reasoning, raw)
        label = catalog.match(value)
        if label is None:
            return PredictionDraft(DraftStatus.INVALID_LABEL, value, reasoning, raw)
        return PredictionDraft(DraftStatus.VALID, label, reasoning, raw)
    return PredictionDraft(DraftStatus.PARSE_FAILURE, None, text.strip() or None, raw)


def transport_draft(error: Exception, latency: float = 0.0) -> PredictionDraft:
    return PredictionDraft(DraftStatus.TRANSPORT_FAILURE, None, None, f"{type(error).__name__}: {error}", latency)


# --- scripted backend --------------------------------------------------------


def prompt_hash(text: str) -> str:
    return hashlib.sha256(text.encode("utf-8")).hexdigest()


FAULT_KINDS = ("malformed", "unknown_label", "timeout")
MALFORMED_RESPONSE = 'The resident is in the kitchen, so: {"activity": '
UNKNOWN_LABEL_RESPONSE = '{"activity": "juggling"}'


@dataclass
class FaultPlan:
    """Faults injected by the scripted backend at chosen repetition indices.

    ``by_repetition`` applies to every prompt; ``by_key`` to one prompt hash
    and takes precedence.
    """

    by_repetition: dict[int, str] = field(default_factory=dict)
    by_key: dict[str, dict[int, str]] = field(default_factory=dict)

    def __post_init__(self):
        kinds = list(self.by_repetition.values())
        kinds += [k for plan in self.by_key.values() for k in plan.values()]
        bad = sorted(set(kinds) - set(FAULT_KINDS))
        if bad:
            raise ValueError(f"unknown fault kinds {bad}; expected {FAULT_KINDS}")

    def fault_for(self, key: str, repetition: int) -> str | None:
        plan = self.by_key.get(key)
        if plan is not None and repetition in plan:
            return plan[repetition]
        return self.by_repetition.get(repetition)

    @classmethod
    def from_mapping(cls, data: Mapping | None) -> "FaultPlan":
        data = data or {}
        return cls(
            by_repetition={int(k): str(v) for k, v in (data.get("by_repetition") or {}).items()},
            by_key={
                str(h): {int(k): str(v) for k, v in plan.items()} for h, plan in (data.get("by_key") or {}).items()
            },
        )


class ScriptedBackend:
    """Deterministic offline backend keyed on the SHA-256 of the user prompt.

    Responses for a key are served in order and cycle when there are fewer
    of them than repetitions. When the caller passes ``repetition`` that index
    picks the response directly, which keeps concurrent runs deterministic;
    otherwise a per-key cursor advances under a lock.
    """

    def __init__(
        self,
        script: Mapping[str, Sequence[str]],
        faults: FaultPlan | None = None,
        default: str | None = None,
        latency: float = 0.0,
    ):
        self.script = {k: list(v) for k, v in script.items()}
        for key, responses in self.script.items():
            if not responses:
                raise ValueError(f"script entry {key} has no responses")
        self.faults = faults or FaultPlan()
        self.default = default
        self.latency = latency
        self.calls = 0
        self._cursor: dict[str, int] = defaultdict(int)
        self._lock = threading.Lock()

    @classmethod
    def from_file(cls, path: str | Path, **kwargs) -> "ScriptedBackend":
        with open(path, encoding="utf-8") as fh:
            data = json.load(fh)
        if not isinstance(data, dict) or not all(isinstance(v, list) for v in data.values()):
            raise ValueError(f"{path}: expected an object mapping prompt hashes to response arrays")
        return cls(data, **kwargs)

    def complete(self, system: str, user: str, repetition: int | None = None) -> Completion:
        key = prompt_hash(user)
        with self._lock:
            self.calls += 1
            if repetition is None:
                repetition = self._cursor[key]
                self._cursor[key] += 1
        fault = self.faults.fault_for(key, repetition)
        if fault == "timeout":
            raise TransportFailure("simulated timeout")
        if fault == "malformed":
            return Completion(MALFORMED_RESPONSE, self.latency)
        if fault == "unknown_label":
            return Completion(UNKNOWN_LABEL_RESPONSE, self.latency)
        responses = self.script.get(key)
        if responses is None:
            if self.default is None:
                raise UnknownPromptKey(f"no scripted response for prompt {key[:12]}")
            return Completion(json.dumps({"activity": self.default}), self.latency)
        return Completion(responses[repetition % len(responses)], self.latency)


def write_script(script: Mapping[str, Sequence[str]], path: str | Path) -> None:
    Path(path).write_text(json.dumps(dict(script), indent=1, sort_keys=True) + "\n", encoding="utf-8")
