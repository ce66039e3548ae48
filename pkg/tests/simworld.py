"""Helpers for building small programmatic worlds in agent tests."""

from __future__ import annotations

from pathlib import Path

from ambox.harness.scenario import DeviceSpec, LinkSpec, Scenario
from ambox.transport import LinkClass
from ambox.harness.world import ScenarioWorld
from ambox.transport.faults import FaultSchedule

TRACE = str(Path(__file__).resolve().parent / "data" / "flat_trace.csv")

JOB_BODY = {
    "prod_id": "cherries-premium",
    "batch_no": "B-2024-018",
    "sample_interval_ms": 60_000,
    "report_interval_ms": 300_000,
    "sensor_params": {
        "temperature": {"enabled": True},
        "humidity": {"enabled": True},
        "pressure": {"enabled": True},
    },
}


def mini_scenario(with_mote: bool = False, faults: FaultSchedule | None = None,
                  span_min: int = 120, heartbeat_timeout_ms: int = 30_000,
                  job: dict | None = None) -> Scenario:
    devices = [DeviceSpec("node1", "node")]
    links = [
        LinkSpec("wifi", "node1", "ledger"),
        LinkSpec("oplink", "node1", "operator"),
    ]
    if with_mote:
        devices.append(DeviceSpec("mote1", "mote", paired_node="node1"))
        links.append(LinkSpec("ble1", "node1", "mote1", link_class=LinkClass.SHORT_RANGE))
    return Scenario(
        name="mini",
        span_ms=span_min * 60_000,
        devices=tuple(devices),
        links=tuple(links),
        faults=faults or FaultSchedule(),
        job=job if job is not None else dict(JOB_BODY),
        heartbeat_timeout_ms=heartbeat_timeout_ms,
        trace_path=TRACE,
    )


def build_world(scenario: Scenario, seed: int = 1, **kw) -> ScenarioWorld:
    world = ScenarioWorld(scenario, seed, **kw)
    world.build()
    return world
