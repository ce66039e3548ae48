"""Scenario files: declarative topology, faults, job, and named checks.

Durations in a scenario file may be written with an `_ms`, `_s`, or `_min`
suffix; everything is normalized to virtual milliseconds at load time.
`time_scale` is real seconds per virtual second: 0 runs the scheduler as
fast as possible, the CI default of one virtual minute per 50 real
milliseconds is 0.05/60.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Any, Optional

from ..transport import LinkClass
from ..transport.faults import FaultSchedule, FaultScheduleError, FaultWindow

SCENARIO_SCHEMA = 1


class ScenarioError(ValueError):
    pass


@dataclass(frozen=True)
class DeviceSpec:
    device_id: str
    kind: str                       # "node" | "mote"
    paired_node: Optional[str] = None
    sensors: dict[str, dict] = field(default_factory=dict)


@dataclass(frozen=True)
class LinkSpec:
    name: str
    a: str
    b: str
    link_class: LinkClass = LinkClass.WIDE_AREA
    base_latency_ms: int = 0


@dataclass(frozen=True)
class Scenario:
    name: str
    span_ms: int
    devices: tuple[DeviceSpec, ...]
    links: tuple[LinkSpec, ...]
    faults: FaultSchedule
    job: Optional[dict] = None      # /startMonitoring body (ms-normalized)
    assertions: tuple[dict, ...] = ()
    time_scale: float = 0.0
    drain_margin_ms: int = 180_000
    heartbeat_timeout_ms: int = 30_000
    trace_path: Optional[str] = None

    def validate(self) -> None:
        ids = [d.device_id for d in self.devices]
        if len(set(ids)) != len(ids):
            raise ScenarioError("duplicate device ids")
        link_names = {l.name for l in self.links}
        for window in self.faults.windows():
            if window.link not in link_names:
                raise ScenarioError(f"fault window targets unknown link {window.link!r}")
        for device in self.devices:
            if device.kind == "mote" and device.paired_node not in ids:
                raise ScenarioError(f"mote {device.device_id!r} has no valid paired_node")
        if self.span_ms <= 0:
            raise ScenarioError("span must be positive")


_DUR_UNITS = (("_ms", 1), ("_s", 1000), ("_min", 60_000))


def _dur(obj: dict, base: str, default: Optional[int] = None) -> int:
    for suffix, factor in _DUR_UNITS:
        key = base + suffix
        if key in obj:
            value = obj[key]
            if isinstance(value, bool) or not isinstance(value, (int, float)):
                raise ScenarioError(f"{key} must be a number")
            return int(value * factor)
    if default is None:
        raise ScenarioError(f"missing duration {base}_ms|_s|_min")
    return default


def _job_body(obj: dict) -> dict:
    try:
        body = {
            "prod_id": str(obj["prod_id"]),
            "batch_no": str(obj["batch_no"]),
            "sample_interval_ms": _dur(obj, "sample_interval"),
            "report_interval_ms": _dur(obj, "report_interval"),
            "sensor_params": {str(q): dict(p) for q, p in obj["sensor_params"].items()},
        }
    except KeyError as exc:
        raise ScenarioError(f"job missing {exc}") from exc
    return body


def _fault_windows(raw: list) -> FaultSchedule:
    windows = []
    for obj in raw:
        if not isinstance(obj, dict):
            raise ScenarioError("fault window must be an object")
        mode = str(obj.get("mode", "down"))
        windows.append(
            FaultWindow(
                link=str(obj["link"]),
                start_ms=_dur(obj, "start"),
                end_ms=_dur(obj, "end"),
                mode=mode,
                latency_ms=int(obj.get("latency_ms", 0)),
            )
        )
    try:
        return FaultSchedule(windows)
    except FaultScheduleError as exc:
        raise ScenarioError(str(exc)) from exc


def scenario_from_obj(obj: Any, base_dir: Optional[Path] = None) -> Scenario:
    if not isinstance(obj, dict):
        raise ScenarioError("scenario root must be an object")
    if obj.get("schema_version") != SCENARIO_SCHEMA:
        raise ScenarioError(f"unsupported scenario schema {obj.get('schema_version')!r}")
    try:
        devices = tuple(
            DeviceSpec(
                device_id=str(d["id"]),
                kind=str(d["kind"]),
                paired_node=d.get("paired_node"),
                sensors={str(q): dict(s) for q, s in d.get("sensors", {}).items()},
            )
            for d in obj.get("devices", [])
        )
        links = tuple(
            LinkSpec(
                name=str(l["name"]),
                a=str(l["between"][0]),
                b=str(l["between"][1]),
                link_class=LinkClass(l.get("class", "wide_area")),
                base_latency_ms=int(l.get("base_latency_ms", 0)),
            )
            for l in obj.get("links", [])
        )
    except (KeyError, ValueError, TypeError) as exc:
        raise ScenarioError(f"bad device/link spec: {exc}") from exc
    trace = obj.get("trace")
    if trace is not None:
        trace_path = Path(trace)
        if not trace_path.is_absolute() and base_dir is not None:
            trace_path = base_dir / trace_path
        trace = str(trace_path)
    scenario = Scenario(
        name=str(obj.get("name", "unnamed")),
        span_ms=_dur(obj, "span"),
        devices=devices,
        links=links,
        faults=_fault_windows(obj.get("faults", [])),
        job=_job_body(obj["job"]) if obj.get("job") else None,
        assertions=tuple(dict(a) for a in obj.get("assertions", [])),
        time_scale=float(obj.get("time_scale", 0.0)),
        drain_margin_ms=_dur(obj, "drain_margin", 180_000),
        heartbeat_timeout_ms=_dur(obj, "heartbeat_timeout", 30_000),
        trace_path=trace,
    )
    scenario.validate()
    return scenario


def load_scenario(path: str | Path) -> Scenario:
    path = Path(path)
    try:
        obj = json.loads(path.read_text("utf-8"))
    except (OSError, json.JSONDecodeError) as exc:
        raise ScenarioError(f"cannot read scenario {path}: {exc}") from exc
    return scenario_from_obj(obj, base_dir=path.parent)


def scenario_path(name: str) -> Path:
    """Path of a scenario file shipped with the package (setup1, setup2, bus_trip)."""
    root = resources.files("ambox.harness") / "scenarios" / f"{name}.json"
    return Path(str(root))
