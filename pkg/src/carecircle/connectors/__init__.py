"""Source connectors, the capture pipeline, clock alignment and vendor-trace replay."""
from .base import (
    SOURCE_TYPES,
    AuthError,
    Connector,
    ConnectorDescriptor,
    ConnectorError,
    ConsentScopeError,
    LifecycleError,
    ProfileEvent,
    Provenance,
    RawSample,
    ReplayConnector,
    default_metric_paths,
)
from .capture import CaptureConfig, PipelineReport, hampel_flags, run_capture_pipeline
from .gatt import GattError, parse_gatt_heart_rate
from .replay import (
    CANONICAL_METRICS,
    AdapterMissing,
    IngestReport,
    TraceError,
    VendorAdapter,
    VendorTrace,
    dump_trace,
    load_packaged_trace,
    load_trace,
    packaged_traces,
    replay_trace,
)
from .timealign import AlignedTime, ClockAligner, align_session, align_timestamps

__all__ = [name for name in dir() if not name.startswith("_")]
