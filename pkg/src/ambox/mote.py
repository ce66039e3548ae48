"""Mote agent: a short-range peripheral that samples, signs, and buffers.

A mote never talks to the ledger or the operator. It signs every reading
with its own key, appends it to a durable journal, and streams the journal
to its paired node whenever a session exists: backlog first, oldest first,
then live readings. Entries leave the mote's buffer only after the node has
acknowledged them over the ack characteristic, so any outage pattern ends
with the node holding exactly what the mote sampled.
"""

from __future__ import annotations

import json
import logging
import threading
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Callable

from .envelope import KeyPair, SignedEnvelope, sign_reading_envelope
from .model import SensorReading
from .runtime import Runtime
from .storage import SCHEMA_VERSION, CorruptConfig, DurableBuffer, StorageFull, _atomic_write
from .transport import SessionClosed

logger = logging.getLogger(__name__)

# Characteristics of the mote's short-range service.
CHAR_READINGS = "readings"   # mote -> node, one signed reading per notification
CHAR_CONFIG = "config"       # node -> mote, job parameters
CHAR_ACK = "ack"             # node -> mote, cumulative receipt acknowledgment

MOTE_CONFIG_FILE = "mote_config.json"


@dataclass(frozen=True)
class MoteConfig:
    enabled: bool = False
    sample_interval_ms: int = 60_000
    sensor_params: dict[str, dict[str, Any]] = None  # type: ignore[assignment]

    def __post_init__(self) -> None:
        if self.sensor_params is None:
            object.__setattr__(self, "sensor_params", {})
        if self.sample_interval_ms <= 0:
            raise ValueError("sample_interval must be positive")

    def enabled_quantities(self) -> tuple[str, ...]:
        return tuple(q for q, p in sorted(self.sensor_params.items()) if p.get("enabled"))

    def to_obj(self) -> dict[str, Any]:
        return {
            "schema_version": SCHEMA_VERSION,
            "enabled": self.enabled,
            "sample_interval_ms": self.sample_interval_ms,
            "sensor_params": {q: dict(p) for q, p in sorted(self.sensor_params.items())},
        }

    @classmethod
    def from_obj(cls, obj: Any) -> "MoteConfig":
        if not isinstance(obj, dict):
            raise CorruptConfig("mote config must be an object")
        try:
            return cls(
                enabled=bool(obj["enabled"]),
                sample_interval_ms=int(obj["sample_interval_ms"]),
                sensor_params={str(q): dict(p) for q, p in obj["sensor_params"].items()},
            )
        except (KeyError, ValueError, TypeError, AttributeError) as exc:
            raise CorruptConfig(f"mote config invalid: {exc}") from exc


def load_mote_config(directory: str | Path) -> MoteConfig:
    path = Path(directory) / MOTE_CONFIG_FILE
    if not path.exists():
        return MoteConfig()
    try:
        obj = json.loads(path.read_text("utf-8"))
    except (OSError, json.JSONDecodeError) as exc:
        raise CorruptConfig(f"cannot read {path.name}: {exc}") from exc
    if obj.get("schema_version") != SCHEMA_VERSION:
        raise CorruptConfig(f"unsupported mote config schema {obj.get('schema_version')!r}")
    return MoteConfig.from_obj(obj)


def save_mote_config(directory: str | Path, config: MoteConfig) -> None:
    path = Path(directory) / MOTE_CONFIG_FILE
    _atomic_write(path, json.dumps(config.to_obj(), indent=2, sort_keys=True).encode())


def encode_reading_notification(entry_id: int, envelope: SignedEnvelope) -> bytes:
    obj = envelope.to_wire_obj()
    obj["entry_id"] = entry_id
    return json.dumps(obj, sort_keys=True).encode("utf-8")


def decode_reading_notification(payload: bytes) -> tuple[int, SignedEnvelope]:
    obj = json.loads(payload.decode("utf-8"))
    entry_id = int(obj.pop("entry_id"))
    return entry_id, SignedEnvelope.from_wire_obj(obj)


class MoteAgent:
    """Two activities: a sampler writing the buffer, a streamer draining it."""

    def __init__(
        self,
        keypair: KeyPair,
        paired_node: str,
        data_dir: str | Path,
        runtime: Runtime,
        driver_factory: Callable[[str, dict], Any],
        buffer_cap: int = 1_000_000,
    ) -> None:
        self.device_id = keypair.device_id
        self.keypair = keypair
        self.paired_node = paired_node
        self.data_dir = Path(data_dir)
        self.runtime = runtime
        self.driver_factory = driver_factory
        self.buffer = DurableBuffer(self.data_dir, cap=buffer_cap)
        self.config = load_mote_config(self.data_dir)
        self.stats: dict[str, int] = {
            "samples": 0,
            "sample_errors": 0,
            "dropped_full": 0,
            "notified": 0,
            "acked": 0,
        }
        self._config_lock = threading.Lock()
        self._config_changed = runtime.new_signal()
        self._drivers: dict[str, Any] = {}
        self._new_data = runtime.new_signal()
        self._session = None
        self._streamer_task = None
        self._sampler_task = None

    # -- lifecycle ----------------------------------------------------------

    def start(self) -> None:
        self._sampler_task = self.runtime.spawn(f"{self.device_id}:sampler", self._sampler_loop)

    def stop(self) -> None:
        for task in (self._sampler_task, self._streamer_task):
            if task is not None and task.alive:
                task.cancel()
        self.buffer.close()

    # -- peripheral delegate --------------------------------------------------

    def on_connect(self, session) -> None:
        self._session = session
        self._streamer_task = self.runtime.spawn(
            f"{self.device_id}:streamer", lambda: self._streamer_loop(session)
        )

    def on_write(self, session, characteristic: str, payload: bytes) -> None:
        if characteristic == CHAR_CONFIG:
            self._apply_config(payload)
        elif characteristic == CHAR_ACK:
            self._apply_ack(payload)
        else:
            logger.warning("%s: write to unknown characteristic %r", self.device_id, characteristic)

    def on_disconnect(self, session) -> None:
        if self._session is session:
            self._session = None
        if self._streamer_task is not None and self._streamer_task.alive:
            self._streamer_task.cancel()
            self._streamer_task = None

    # -- configuration ----------------------------------------------------------

    def _apply_config(self, payload: bytes) -> None:
        try:
            obj = json.loads(payload.decode("utf-8"))
            config = MoteConfig(
                enabled=bool(obj["enabled"]),
                sample_interval_ms=int(obj.get("sample_interval_ms", 60_000)),
                sensor_params={str(q): dict(p) for q, p in obj.get("sensor_params", {}).items()},
            )
        except (ValueError, KeyError, TypeError, AttributeError) as exc:
            logger.warning("%s: rejected config write: %s", self.device_id, exc)
            return
        with self._config_lock:
            self.config = config
            save_mote_config(self.data_dir, config)
        self._config_changed.set()
        logger.info("%s: config applied (enabled=%s, interval=%sms)",
                    self.device_id, config.enabled, config.sample_interval_ms)

    def _apply_ack(self, payload: bytes) -> None:
        try:
            upto = int(json.loads(payload.decode("utf-8"))["upto"])
        except (ValueError, KeyError, TypeError) as exc:
            logger.warning("%s: rejected ack write: %s", self.device_id, exc)
            return
        ids = [e.entry_id for e in self.buffer.pending_entries() if e.entry_id <= upto]
        if ids:
            self.buffer.ack(ids)
            self.stats["acked"] += len(ids)

    # -- sampling -----------------------------------------------------------------

    def _driver(self, quantity: str):
        driver = self._drivers.get(quantity)
        if driver is None:
            driver = self.driver_factory(quantity, self.config.sensor_params.get(quantity, {}))
            self._drivers[quantity] = driver
        return driver

    def _sampler_loop(self) -> None:
        while True:
            with self._config_lock:
                config = self.config
            # A config write interrupts the wait so a new cadence (or a
            # disable) takes effect immediately rather than one old interval
            # later.
            if self._config_changed.wait(timeout_ms=config.sample_interval_ms):
                self._config_changed.clear()
                continue
            with self._config_lock:
                config = self.config
            if not config.enabled:
                continue
            t = self.runtime.now_ms()
            for quantity in config.enabled_quantities():
                driver = self._driver(quantity)
                if driver is None:
                    continue
                try:
                    value = driver.read(t)
                except Exception:
                    self.stats["sample_errors"] += 1
                    logger.exception("%s: %s driver failed", self.device_id, quantity)
                    continue
                reading = SensorReading(
                    quantity=quantity, value=value, sampled_at=t, source_device=self.device_id
                )
                envelope = sign_reading_envelope(self.keypair, reading)
                try:
                    self.buffer.enqueue(envelope, t)
                except StorageFull:
                    self.stats["dropped_full"] += 1
                    continue
                self.stats["samples"] += 1
                self._new_data.set()

    # -- streaming ------------------------------------------------------------------

    def _streamer_loop(self, session) -> None:
        last_sent = 0
        while session.open:
            entries = self.buffer.peek_after(last_sent, 100)
            if entries:
                for entry in entries:
                    payload = encode_reading_notification(entry.entry_id, entry.envelope)
                    try:
                        session.notify(CHAR_READINGS, payload)
                    except SessionClosed:
                        return
                    last_sent = entry.entry_id
                    self.stats["notified"] += 1
                continue
            self._new_data.clear()
            if self.buffer.peek_after(last_sent, 1):
                continue
            self._new_data.wait()

