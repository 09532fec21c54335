"""System and user prompt rendering.

Both renderers are pure functions of their inputs, so the rendered text can be
hashed into cache keys.
"""

from __future__ import annotations

import csv
import io
import re
from dataclasses import dataclass
from datetime import datetime, timezone, tzinfo
from functools import cached_property
from pathlib import Path
from typing import Mapping

from .ingest import ActivityCatalog, SensorInventory
from .segment import EventWindow

USER_COLUMNS = ("timestamp", "sensor_id", "sensor_type", "location", "status")

DEFAULT_SYSTEM_TEMPLATE = """\
You are an expert in human activity recognition in smart homes. You analyse \
streams of events produced by ambient sensors installed in the home of a \
single resident and infer which Activity of Daily Living the resident is \
performing. Be precise and rely only on the data you are given.

## Input format
You will receive a window of consecutive sensor events as a CSV string with \
the following columns, in this order:
{{columns}}
Events are ordered by time. Each motion sensor reports ON when it detects \
movement and OFF when movement stops; each magnetic sensor reports ON when \
a door or drawer is opened and OFF when it is closed.
Possible sensor types:
{{sensor_types}}
Possible locations:
{{locations}}
Sensors installed in the home:
{{sensors}}

## Task
Infer the activity the resident is performing at the time of the LAST event \
in the window. Use the previous events only as context: consider the order \
of the events, the time of day and the time elapsed between events, and \
ignore events that are irrelevant or outdated with respect to the last one. \
Choose exactly one activity from this list:
{{activities}}
Reason step by step before giving your answer.

## Output format
After your reasoning, end your answer with a JSON object with a single \
field "activity" whose value is one of the activities listed above, for \
example:
{"activity": "<activity>"}
"""

_PLACEHOLDER = re.compile(r"\{\{\s*([a-z_]+)\s*\}\}")


class EmptyCatalog(ValueError):
    pass


def _bullets(items) -> str:
    return "\n".join(f"- {x}" for x in items)


def placeholder_values(inventory: SensorInventory, catalog: ActivityCatalog) -> dict[str, str]:
    sensors = []
    for sid in sorted(inventory.sensors):
        info = inventory.sensors[sid]
        line = f"{sid}: {info.kind} sensor, location {info.location}"
        if info.description:
            line += f" ({info.description})"
        sensors.append(line)
    kinds = sorted({info.kind for info in inventory.sensors.values()} | set(inventory.prefixes.values()))
    locations = sorted({info.location for info in inventory.sensors.values()})
    return {
        "columns": _bullets(USER_COLUMNS),
        "sensor_types": _bullets(kinds) if kinds else "- unknown",
        "locations": _bullets(locations) if locations else "- unknown",
        "sensors": _bullets(sensors) if sensors else "- no sensor metadata available",
        "activities": _bullets(list(catalog)),
    }


def fill_template(template: str, values: Mapping[str, str]) -> str:
    def sub(m: re.Match) -> str:
        name = m.group(1)
        if name not in values:
            raise KeyError(f"unknown template placeholder {{{{{name}}}}}")
        return values[name]

    return _PLACEHOLDER.sub(sub, template)


def load_template(path: str | Path | None) -> str:
    if path is None:
        return DEFAULT_SYSTEM_TEMPLATE
    return Path(path).read_text(encoding="utf-8")


def render_system_prompt(
    inventory: SensorInventory,
    catalog: ActivityCatalog | None,
    template: str = DEFAULT_SYSTEM_TEMPLATE,
) -> str:
    if catalog is None or len(catalog) == 0:
        raise EmptyCatalog("cannot render a system prompt without activities")
    return fill_template(template, placeholder_values(inventory, catalog))


def format_local(t: datetime, tz: tzinfo | None = None) -> str:
    """Second-precision ISO timestamp; with ``tz``, naive times are read as UTC."""
    if tz is not None:
        if t.tzinfo is None:
            t = t.replace(tzinfo=timezone.utc)
        t = t.astimezone(tz).replace(tzinfo=None)
    return t.replace(microsecond=0).isoformat(timespec="seconds")


def render_user_prompt(window: EventWindow, inventory: SensorInventory, tz: tzinfo | None = None) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(USER_COLUMNS)
    for ev in window.events:
        info = inventory.get(ev.sensor)
        w.writerow([format_local(ev.t, tz), ev.sensor, info.kind, info.location, ev.status.value])
    return buf.getvalue()


@dataclass(frozen=True)
class PromptBuilder:
    """Bundles the inventory, catalog and template used for one run."""

    inventory: SensorInventory
    catalog: ActivityCatalog
    template: str = DEFAULT_SYSTEM_TEMPLATE
    tz: tzinfo | None = None

    @cached_property
    def system(self) -> str:
        return render_system_prompt(self.inventory, self.catalog, self.template)

    def user(self, window: EventWindow) -> str:
        return render_user_prompt(window, self.inventory, self.tz)
