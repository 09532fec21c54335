"""Run configuration: YAML/JSON document plus command-line overrides."""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field, fields, replace
from datetime import date
from importlib import resources
from pathlib import Path
from typing import Any, Mapping

import yaml

from .backend import BackendConfig, FaultPlan
from .ingest import ActivityCatalog, SensorInventory
from .segment import SegmentationParams
from .voting import TieBreakPolicy


class ConfigError(Exception):
    pass


PRESETS = ("aruba", "milan")


def load_preset(name: str) -> dict:
    if name not in PRESETS:
        raise ConfigError(f"unknown dataset preset {name!r}; choose from {PRESETS}")
    text = resources.files("eventadl").joinpath("data", f"{name}.yaml").read_text(encoding="utf-8")
    return yaml.safe_load(text)


@dataclass(frozen=True)
class BackendSettings:
    kind: str = "openai"  # openai | scripted
    endpoint: str = "http://localhost:8000/v1"
    model: str = "scripted"
    timeout: float = 120.0
    max_retries: int = 3
    api_key_env: str | None = "OPENAI_API_KEY"
    max_tokens: int | None = None
    backoff: float = 1.0
    script: Path | None = None
    default: str | None = None
    latency: float = 0.0
    faults: Mapping[str, Any] = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in ("openai", "scripted"):
            raise ConfigError(f"unknown backend kind {self.kind!r}")

    def client_config(self, temperature: float) -> BackendConfig:
        return BackendConfig(
            endpoint=self.endpoint,
            model=self.model,
            temperature=temperature,
            timeout=self.timeout,
            max_retries=self.max_retries,
            api_key_env=self.api_key_env,
            max_tokens=self.max_tokens,
            backoff=self.backoff,
        )

    def fault_plan(self) -> FaultPlan:
        return FaultPlan.from_mapping(self.faults)


@dataclass(frozen=True)
class RunConfig:
    catalog: ActivityCatalog
    inventory: SensorInventory = field(default_factory=SensorInventory)
    raw: Path | None = None
    test_start: date | None = None  # None: the last `test_days` days of the data
    test_days: int = 21
    k: int = 30
    s: int = 10
    backend: BackendSettings = field(default_factory=BackendSettings)
    n: int = 5
    temperature: float = 0.0
    repetition_temperature: float = 1.0
    tie_break: TieBreakPolicy = field(default_factory=TieBreakPolicy)
    parallelism: int = 4
    output_dir: Path = Path("out")
    cache: Path | None = None
    prompt_template: Path | None = None
    timezone: str | None = None

    def __post_init__(self):
        if self.k < 1 or self.s < 1 or self.n < 1:
            raise ConfigError("k, s and N must be positive")
        if self.test_days < 1:
            raise ConfigError("test_days must be positive")
        if self.parallelism < 1:
            raise ConfigError("parallelism must be positive")
        try:
            object.__setattr__(self, "tie_break", self.tie_break.check(self.catalog))
        except ValueError as exc:
            raise ConfigError(str(exc)) from None

    @property
    def segmentation(self) -> SegmentationParams:
        return SegmentationParams(self.k, self.s)

    @property
    def effective_temperature(self) -> float:
        """Single-shot runs use ``temperature``; repeated runs ``repetition_temperature``."""
        return self.temperature if self.n == 1 else self.repetition_temperature

    @property
    def prepared_dir(self) -> Path:
        return self.output_dir / "prepared"

    @property
    def cache_path(self) -> Path:
        return self.cache if self.cache is not None else self.output_dir / "cache.jsonl"

    def snapshot(self) -> dict:
        """JSON-friendly view of the configuration for manifests."""
        out = {}
        for f in fields(self):
            value = getattr(self, f.name)
            if f.name == "catalog":
                value = {"labels": list(value.labels), "fallback": value.fallback,
                         "label_map": dict(value.label_map)}
            elif f.name == "inventory":
                value = value.to_mapping()
            elif f.name in ("backend", "tie_break"):
                value = asdict(value)
            out[f.name] = value
        return json.loads(json.dumps(out, default=str))

    def fingerprint(self, system_prompt: str) -> str:
        """Identity of everything that shapes the prediction file."""
        snap = self.snapshot()
        keep = {key: snap[key] for key in ("catalog", "k", "s", "n", "tie_break")}
        keep["temperature"] = self.effective_temperature
        keep["model"] = self.backend.model
        keep["system_prompt"] = system_prompt
        blob = json.dumps(keep, sort_keys=True)
        return hashlib.sha256(blob.encode("utf-8")).hexdigest()

    def with_overrides(self, **changes) -> "RunConfig":
        changes = {k: v for k, v in changes.items() if v is not None}
        backend_changes = {k[len("backend_"):]: changes.pop(k) for k in list(changes) if k.startswith("backend_")}
        tie_changes = {k[len("tie_"):]: changes.pop(k) for k in list(changes) if k.startswith("tie_")}
        if backend_changes:
            changes["backend"] = replace(self.backend, **backend_changes)
        if tie_changes:
            changes["tie_break"] = replace(self.tie_break, **tie_changes)
        return replace(self, **changes)


def _path(base: Path, value) -> Path | None:
    if value in (None, ""):
        return None
    p = Path(str(value)).expanduser()
    return p if p.is_absolute() else base / p


def _merge(a: dict, b: Mapping) -> dict:
    out = dict(a)
    for key, value in (b or {}).items():
        if isinstance(value, Mapping) and isinstance(out.get(key), Mapping):
            out[key] = _merge(dict(out[key]), value)
        else:
            out[key] = value
    return out


def config_from_mapping(data: Mapping, base: Path = Path(".")) -> RunConfig:
    data = dict(data or {})
    dataset = dict(data.get("dataset") or {})
    preset = load_preset(dataset["preset"]) if dataset.get("preset") else {}

    catalog_data = _merge(preset.get("catalog") or {}, data.get("catalog") or {})
    if not catalog_data.get("labels"):
        raise ConfigError("no activity catalog: set `catalog.labels` or `dataset.preset`")
    try:
        catalog = ActivityCatalog.from_mapping(catalog_data)
    except Exception as exc:
        raise ConfigError(f"bad catalog: {exc}") from None

    inventory_data = dict(preset.get("inventory") or {})
    inv_path = _path(base, dataset.get("inventory"))
    try:
        if inv_path is not None:
            with open(inv_path, encoding="utf-8") as fh:
                inventory_data = _merge(inventory_data, yaml.safe_load(fh) or {})
        inventory_data = _merge(inventory_data, data.get("inventory") or {})
        inventory = SensorInventory.from_mapping(inventory_data)
    except OSError as exc:
        raise ConfigError(f"cannot read inventory: {exc}") from None
    except Exception as exc:
        raise ConfigError(f"bad inventory: {exc}") from None

    split = dict(data.get("test_span") or {})
    start = split.get("start")
    if isinstance(start, str) and start != "last":
        start = date.fromisoformat(start)
    elif start == "last":
        start = None

    seg = dict(data.get("segmentation") or {})
    backend = dict(data.get("backend") or {})
    if "script" in backend:
        backend["script"] = _path(base, backend["script"])
    known = {f.name for f in fields(BackendSettings)}
    unknown = set(backend) - known
    if unknown:
        raise ConfigError(f"unknown backend settings {sorted(unknown)}")
    tie = dict(data.get("tie_break") or {})
    try:
        tie_break = TieBreakPolicy(
            kind=tie.get("kind", "seeded-random"),
            priority=tuple(tie.get("priority") or ()),
            seed=int(tie.get("seed", 0)),
        )
        return RunConfig(
            catalog=catalog,
            inventory=inventory,
            raw=_path(base, dataset.get("raw")),
            test_start=start,
            test_days=int(split.get("days", 21)),
            k=int(seg.get("k", 30)),
            s=int(seg.get("s", 10)),
            backend=BackendSettings(**backend),
            n=int(data.get("repetitions", 5)),
            temperature=float(data.get("temperature", 0.0)),
            repetition_temperature=float(data.get("repetition_temperature", 1.0)),
            tie_break=tie_break,
            parallelism=int(data.get("parallelism", 4)),
            output_dir=_path(base, data.get("output_dir", "out")),
            cache=_path(base, data.get("cache")),
            prompt_template=_path(base, data.get("prompt_template")),
            timezone=data.get("timezone"),
        )
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from None


def load_config(path: str | Path) -> RunConfig:
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read config: {exc}") from None
    data = json.loads(text) if path.suffix == ".json" else yaml.safe_load(text)
    return config_from_mapping(data or {}, path.parent)
