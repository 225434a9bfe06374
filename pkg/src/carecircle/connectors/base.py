"""Connector types and the lifecycle every source adapter follows:
connect -> authenticate -> subscribe -> sample -> transform -> push_to_store."""
from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass, field
from typing import Any, Callable, Iterable, Mapping, Sequence

from ..ontology import OntologySchema, TypedEvent

SOURCE_TYPES = frozenset({"ble_gatt", "platform_sdk", "vendor_cloud", "on_device"})
MAX_TZ_OFFSET = 840


class ConnectorError(Exception):
    pass


class LifecycleError(ConnectorError):
    pass


class AuthError(ConnectorError):
    pass


class ConsentScopeError(ConnectorError):
    def __init__(self, path: str):
        self.path = path
        super().__init__(f"consent scope does not cover {path}")


@dataclass(frozen=True)
class ConnectorDescriptor:
    id: str
    source_type: str
    sampling_frequency: float | None = None  # Hz; None means event-driven
    consent_requirements: tuple[str, ...] = ()

    def __post_init__(self):
        if self.source_type not in SOURCE_TYPES:
            raise ConnectorError(f"unknown source type {self.source_type!r}")
        if self.sampling_frequency is not None and not self.sampling_frequency > 0:
            raise ConnectorError("periodic sources need a positive sampling frequency")
        object.__setattr__(self, "consent_requirements", tuple(self.consent_requirements))


@dataclass(frozen=True)
class RawSample:
    source_id: str
    metric: str
    value: float
    unit: str
    device_ts: float  # device wall clock, seconds
    payload: bytes | None = None
    tz_offset_minutes: int = 0
    server_ts: float | None = None  # receipt time, UTC
    meta: Mapping[str, Any] = field(default_factory=dict)

    def __post_init__(self):
        if self.device_ts is None or not math.isfinite(self.device_ts):
            raise ConnectorError("raw sample needs a device timestamp")
        if isinstance(self.value, bool) or not math.isfinite(self.value):
            raise ConnectorError(f"raw sample value must be finite, got {self.value!r}")


@dataclass(frozen=True)
class Provenance:
    source_device_id: str
    firmware_version: str
    sampling_method: str
    device_ts: float
    server_ts: float
    tz_offset_minutes: int
    derived: bool = False
    notes: Mapping[str, Any] = field(default_factory=dict)

    def __post_init__(self):
        if abs(self.tz_offset_minutes) > MAX_TZ_OFFSET:
            raise ConnectorError(f"tz offset {self.tz_offset_minutes} out of range")
        if not self.source_device_id:
            raise ConnectorError("provenance needs a source device id")

    def to_json(self) -> dict:
        return {
            "source_device_id": self.source_device_id,
            "firmware_version": self.firmware_version,
            "sampling_method": self.sampling_method,
            "device_ts": self.device_ts,
            "server_ts": self.server_ts,
            "tz_offset_minutes": self.tz_offset_minutes,
            "derived": self.derived,
            "notes": dict(self.notes),
        }

    @classmethod
    def from_json(cls, d: Mapping) -> "Provenance":
        return cls(d["source_device_id"], d["firmware_version"], d["sampling_method"],
                   float(d["device_ts"]), float(d["server_ts"]), int(d["tz_offset_minutes"]),
                   bool(d.get("derived", False)), dict(d.get("notes", {})))


def _content_id(event: TypedEvent, prov: Provenance) -> str:
    body = json.dumps({"event": event.to_json(), "provenance": prov.to_json()},
                      sort_keys=True, separators=(",", ":"))
    return "ev-" + hashlib.sha256(body.encode()).hexdigest()[:32]


@dataclass(frozen=True)
class ProfileEvent:
    event: TypedEvent
    provenance: Provenance
    consent_scope: tuple[str, ...] = ()
    id: str = ""

    def __post_init__(self):
        object.__setattr__(self, "consent_scope", tuple(sorted(self.consent_scope)))
        expected = _content_id(self.event, self.provenance)
        if not self.id:
            object.__setattr__(self, "id", expected)
        elif self.id != expected:
            raise ConnectorError(f"event id {self.id} does not match its content")

    @property
    def entity(self) -> str:
        return self.event.entity

    @property
    def ts(self) -> float:
        f = self.event.fields
        return f["ts"] if "ts" in f else f.get("start", self.provenance.server_ts)

    def to_json(self) -> dict:
        return {
            "id": self.id,
            **self.event.to_json(),
            "provenance": self.provenance.to_json(),
            "consent_scope": list(self.consent_scope),
        }

    @classmethod
    def from_json(cls, d: Mapping) -> "ProfileEvent":
        return cls(TypedEvent.from_json(d), Provenance.from_json(d["provenance"]),
                   tuple(d.get("consent_scope", ())), d.get("id", ""))


def default_metric_paths(schema: OntologySchema) -> dict[str, str]:
    """Sensor metric name -> ontology path: every VitalSign quantity field."""
    vs = schema.entity("VitalSign")
    return {f.name: f"VitalSign.{f.name}" for f in vs.fields if f.kind == "quantity"}


class Connector:
    """Lifecycle state machine shared by all adapters.

    Subclasses override ``_open``, ``_authenticate`` and ``_poll``.
    """

    ORDER = ("new", "connected", "authenticated", "subscribed")

    def __init__(self, desc: ConnectorDescriptor, metric_paths: Mapping[str, str] | None = None,
                 granted_scope: Iterable[str] | None = None):
        self.desc = desc
        self.metric_paths = dict(metric_paths or {})
        required = set(desc.consent_requirements)
        self.consent_scope = required if granted_scope is None else required & set(granted_scope)
        self.state = "new"
        self.metrics: set[str] = set()
        self.callback: Callable[[RawSample], None] | None = None
        self.refused = 0

    def _require(self, state: str, op: str) -> None:
        if self.ORDER.index(self.state) < self.ORDER.index(state):
            raise LifecycleError(f"{op} called in state {self.state!r}; needs {state!r}")

    def path_for(self, metric: str) -> str:
        return self.metric_paths.get(metric, f"VitalSign.{metric}")

    def connect(self) -> None:
        if self.state != "new":
            raise LifecycleError(f"connect called in state {self.state!r}")
        self._open()
        self.state = "connected"

    def authenticate(self, credentials: Any = None) -> None:
        self._require("connected", "authenticate")
        if not self._authenticate(credentials):
            raise AuthError(f"connector {self.desc.id}: authentication failed")
        self.state = "authenticated"

    def subscribe(self, metrics: Iterable[str], callback: Callable[[RawSample], None] | None = None) -> None:
        self._require("authenticated", "subscribe")
        metrics = list(metrics)
        for m in metrics:
            path = self.path_for(m)
            if path not in self.consent_scope:
                raise ConsentScopeError(path)
        self.metrics.update(metrics)
        self.callback = callback
        self.state = "subscribed"

    def sample(self) -> list[RawSample]:
        self._require("subscribed", "sample")
        out = []
        for s in self._poll():
            if s.metric not in self.metrics:
                self.refused += 1
                continue
            out.append(s)
            if self.callback is not None:
                self.callback(s)
        return out

    def transform(self, raw: Sequence[RawSample], schema: OntologySchema, config=None):
        from .capture import CaptureConfig, run_capture_pipeline

        config = config or CaptureConfig(metric_paths=self.metric_paths or None)
        return run_capture_pipeline(raw, schema, config)

    def push_to_store(self, events: Sequence[ProfileEvent], store) -> list[str]:
        return store.ingest_many(events)

    # hooks
    def _open(self) -> None:
        pass

    def _authenticate(self, credentials: Any) -> bool:
        return True

    def _poll(self) -> list[RawSample]:
        return []


class ReplayConnector(Connector):
    """Emits a scripted list of samples, in order, across ``sample`` calls."""

    def __init__(self, desc: ConnectorDescriptor, samples: Sequence[RawSample],
                 batch: int | None = None, token: str | None = None, **kw):
        super().__init__(desc, **kw)
        self._samples = list(samples)
        self._cursor = 0
        self._batch = batch
        self._token = token

    def _authenticate(self, credentials: Any) -> bool:
        return self._token is None or credentials == self._token

    def _poll(self) -> list[RawSample]:
        end = len(self._samples) if self._batch is None else self._cursor + self._batch
        out = self._samples[self._cursor:end]
        self._cursor += len(out)
        return out
