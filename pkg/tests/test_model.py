import itertools

import pytest
from hypothesis import given, strategies as st

from ambox import canonical
from ambox.model import (
    HUMIDITY,
    PRESSURE,
    TEMPERATURE,
    EventReport,
    HeartbeatMessage,
    ModelError,
    MonitoringJob,
    NodeState,
    SensorReading,
    legal_transition,
    new_report_id,
    validate_report,
)

from conftest import T0, make_reading, make_report

STATES = [NodeState.IDLE, NodeState.HEARTBEAT, NodeState.MONITORING]

# Independent oracle: the transition table transcribed directly from the
# lifecycle contract, not derived from the implementation under test.
ALLOWED = {
    ("idle", "heartbeat"),
    ("heartbeat", "monitoring"),
    ("monitoring", "heartbeat"),
    ("heartbeat", "idle"),
}


def test_legal_transition_examples():
    assert legal_transition(NodeState.IDLE, NodeState.HEARTBEAT) is True
    assert legal_transition(NodeState.IDLE, NodeState.MONITORING) is False
    assert legal_transition(NodeState.MONITORING, NodeState.MONITORING) is False


def test_legal_transition_all_nine_pairs():
    for a, b in itertools.product(STATES, repeat=2):
        assert legal_transition(a, b) == ((a.value, b.value) in ALLOWED)


def test_transition_graph_shape():
    # Heartbeat<->Monitoring is the only cycle among operating states
    # (the other back edge, Heartbeat->Idle, is power-off); Idle is reachable
    # from every state in at most two hops.
    edges = {(a, b) for a in STATES for b in STATES if legal_transition(a, b)}
    assert (NodeState.HEARTBEAT, NodeState.MONITORING) in edges
    assert (NodeState.MONITORING, NodeState.HEARTBEAT) in edges
    operating = {(a, b) for (a, b) in edges if NodeState.IDLE not in (a, b)}
    cycles = {(a, b) for (a, b) in operating if (b, a) in operating}
    assert cycles == {
        (NodeState.HEARTBEAT, NodeState.MONITORING),
        (NodeState.MONITORING, NodeState.HEARTBEAT),
    }
    for start in STATES:
        hops1 = {b for (a, b) in edges if a == start}
        hops2 = hops1 | {c for b in hops1 for (a, c) in edges if a == b}
        assert start is NodeState.IDLE or NodeState.IDLE in hops2


def brute_force_violations(report: EventReport) -> set[str]:
    """Straight-line re-evaluation of every report invariant."""
    out = set()
    if not report.report_id:
        out.add("report_id non-empty")
    if not report.device_id:
        out.add("device_id non-empty")
    if len(report.readings) == 0:
        out.add("readings non-empty")
        return out
    for i in range(len(report.readings) - 1):
        if report.readings[i + 1].sampled_at < report.readings[i].sampled_at:
            out.add("readings sorted")
    for r in report.readings:
        if r.sampled_at > report.created_at:
            out.add("readings within created_at")
    streams = {}
    for r in report.readings:
        streams.setdefault((r.source_device, r.quantity), []).append(r.sampled_at)
    for times in streams.values():
        if any(b <= a for a, b in zip(times, times[1:])):
            out.add("readings strictly increasing per source and quantity")
    return out


def test_validate_empty_readings():
    report = make_report(n_readings=3)
    empty = EventReport(report.report_id, report.device_id, report.product_id,
                        report.batch_no, report.created_at, ())
    assert "readings non-empty" in validate_report(empty)


def test_validate_unsorted_readings():
    r1 = make_reading(at=T0 + 120_000)
    r2 = make_reading(at=T0 + 60_000)
    report = EventReport("id-1", "node-1", "p", "b", T0 + 600_000, (r1, r2))
    assert "readings sorted" in validate_report(report)


def test_validate_good_report_ok():
    report = make_report(n_readings=5)
    assert validate_report(report) == []


@st.composite
def arbitrary_reports(draw):
    device = draw(st.sampled_from(["node-1", "node-2", ""]))
    created = draw(st.integers(min_value=0, max_value=10**12))
    n = draw(st.integers(min_value=0, max_value=6))
    readings = []
    for _ in range(n):
        readings.append(
            SensorReading(
                quantity=draw(st.sampled_from([TEMPERATURE, HUMIDITY, PRESSURE])),
                value=draw(st.floats(allow_nan=False, allow_infinity=False,
                                     min_value=-1000, max_value=2000)),
                sampled_at=draw(st.integers(min_value=0, max_value=10**12)),
                source_device=draw(st.sampled_from(["node-1", "mote-1"])),
            )
        )
    maybe_sort = draw(st.booleans())
    if maybe_sort:
        readings.sort(key=lambda r: r.sampled_at)
    return EventReport(
        report_id=draw(st.sampled_from(["rid-1", ""])),
        device_id=device,
        product_id="p",
        batch_no="b",
        created_at=created,
        readings=tuple(readings),
    )


@given(arbitrary_reports())
def test_validate_matches_brute_force(report):
    assert set(validate_report(report)) == brute_force_violations(report)


@given(arbitrary_reports())
def test_roundtrip_stability(report):
    # Valid reports survive serialize/parse and stay valid; the parsed value
    # is the same report.
    if validate_report(report):
        return
    parsed = EventReport.from_obj(canonical.loads(canonical.dumps(report.to_obj())))
    assert parsed == report
    assert validate_report(parsed) == []


def test_report_parse_rejects_missing_fields():
    obj = make_report().to_obj()
    del obj["batch_no"]
    with pytest.raises(ModelError):
        EventReport.from_obj(obj)


def test_report_parse_rejects_bad_types():
    obj = make_report().to_obj()
    obj["readings"][0]["value"] = "warm"
    with pytest.raises(ModelError):
        EventReport.from_obj(obj)


def test_report_id_format():
    rid = new_report_id("node-1", 1_704_067_800_000, 7)
    device, millis, suffix = rid.rsplit("-", 2)
    assert device == "node-1"
    assert int(millis) == 1_704_067_800_000
    assert len(suffix) == 8
    assert new_report_id("node-1", 1_704_067_800_000, 7) == rid
    assert new_report_id("node-1", 1_704_067_800_000, 8) != rid


def test_monitoring_job_invariants():
    with pytest.raises(ModelError):
        MonitoringJob("p", "b", 0, 60_000)
    with pytest.raises(ModelError):
        MonitoringJob("p", "b", 60_000, 30_000)
    job = MonitoringJob("p", "b", 60_000, 300_000,
                        {TEMPERATURE: {"enabled": True}, HUMIDITY: {"enabled": False}})
    assert job.enabled_quantities() == (TEMPERATURE,)
    assert MonitoringJob.from_obj(job.to_obj()) == job


def test_heartbeat_roundtrip():
    msg = HeartbeatMessage("node-1", NodeState.MONITORING, T0, 42,
                           buffer_alarm=True, consecutive_submit_failures=2)
    parsed = HeartbeatMessage.from_obj(canonical.loads(msg.to_bytes()))
    assert parsed == msg
