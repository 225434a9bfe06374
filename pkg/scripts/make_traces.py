"""Regenerate the packaged vendor mapping tables and replay traces.

    python3 scripts/make_traces.py [--out src/carecircle/data]

Output is deterministic; rerunning it must leave the files unchanged.
"""
from __future__ import annotations

import argparse
import json
from pathlib import Path

import numpy as np

from carecircle._time import format_iso, to_utc
from carecircle.connectors.replay import CANONICAL_METRICS, VendorTrace, dump_trace

# canonical metric -> (typical value, spread, canonical unit)
SIGNALS = {
    "heart_rate": (72, 8, "bpm"),
    "resting_heart_rate": (62, 4, "bpm"),
    "hrv_rmssd": (38, 8, "ms"),
    "spo2": (97, 1, "%"),
    "respiratory_rate": (15, 1.5, "breaths/min"),
    "skin_temperature": (33.8, 0.3, "degC"),
    "systolic_bp": (124, 8, "mmHg"),
    "diastolic_bp": (79, 5, "mmHg"),
    "steps": (420, 150, "steps/hour"),
    "distance": (320, 90, "m"),
    "active_minutes": (22, 8, "minutes"),
    "calories": (95, 20, "kcal"),
    "sleep_duration": (410, 40, "minutes"),
    "sleep_efficiency": (86, 4, "%"),
    "weight": (68, 0.4, "kg"),
    "stress_score": (35, 10, "score"),
}

# vendor field name per canonical metric, and a vendor unit when it differs
VENDORS = {
    "healthconnect": {
        "modes": ["sdk"], "page_size": 500, "faults": False, "omit": (), "units": {},
        "names": {m: "".join(w.title() for w in m.split("_")) for m in CANONICAL_METRICS},
        "anonymous_every": 0,
    },
    "bandcloud": {
        "modes": ["ble", "cloud_oauth"], "page_size": 20, "faults": True,
        "omit": ("hrv_rmssd", "stress_score"),
        "units": {"sleep_duration": "h", "steps": "steps/min"},
        "names": {m: f"band_{m}" for m in CANONICAL_METRICS},
        "anonymous_every": 7,
    },
    "ringsync": {
        "modes": ["cloud_oauth"], "page_size": 25, "faults": True, "omit": (),
        "units": {"skin_temperature": "degF", "distance": "km", "weight": "lb", "hrv_rmssd": "s_ibi"},
        "names": {m: f"ring.{m.replace('_', '.')}" for m in CANONICAL_METRICS},
        "anonymous_every": 0,
    },
}

TO_VENDOR_UNIT = {
    ("h", "minutes"): lambda v: v / 60.0,
    ("steps/min", "steps/hour"): lambda v: v / 60.0,
    ("degF", "degC"): lambda v: v * 9.0 / 5.0 + 32.0,
    ("km", "m"): lambda v: v / 1000.0,
    ("lb", "kg"): lambda v: v / 0.45359237,
    ("s_ibi", "ms"): lambda v: v / 1000.0,
}

START = "2025-03-03T06:00:00+05:30"
PER_METRIC = 6
HR_EXTRA = 24
LATENCY_S = 30.0
FAULT_AT = {10: "rate_limit", 25: "auth_expired", 40: "dropout", 55: "partial", 70: "skew"}


def build_trace(vendor: str, spec: dict, seed: int) -> VendorTrace:
    rng = np.random.default_rng([seed, sum(vendor.encode())])
    t0 = to_utc(START)
    rows = []
    for m in CANONICAL_METRICS:
        n = PER_METRIC + (HR_EXTRA if m == "heart_rate" else 0)
        times = t0 + np.sort(rng.choice(16 * 3600 // 60, n, replace=False)) * 60.0
        mean, sd, unit = SIGNALS[m]
        for t in times:
            v = float(rng.normal(mean, sd))
            vu = spec["units"].get(m)
            if vu is not None:
                v = TO_VENDOR_UNIT[(vu, unit)](v)
            rows.append((float(t), m, round(v, 3), vu))
    rows.sort(key=lambda r: (r[0], r[1]))
    records = []
    for i, (t, m, v, vu) in enumerate(rows):
        rec = {
            "t": format_iso(t, 330),
            "server_t": format_iso(t + LATENCY_S),
            "metric": spec["names"][m],
            "value": v,
        }
        if vu is not None:
            rec["unit"] = vu
        every = spec["anonymous_every"]
        if not (every and i % every == 3):
            rec["device_id"] = f"{vendor}-dev-{1 + (i % 2)}"
            rec["firmware"] = "2.4.1"
        if spec["faults"] and i in FAULT_AT:
            fault = FAULT_AT[i]
            rec["fault"] = fault
            if fault == "partial":
                rec["value"] = None
            if fault == "skew":
                rec["t"] = format_iso(t + 3 * 3600, 330)
        records.append(rec)
    return VendorTrace(vendor, spec["modes"][-1], tuple(records))


def adapter_json(vendor: str, spec: dict) -> dict:
    fields = {}
    for m in CANONICAL_METRICS:
        if m in spec["omit"]:
            continue
        fields[spec["names"][m]] = {"metric": m, "unit": spec["units"].get(m, SIGNALS[m][2])}
    return {"vendor": vendor, "modes": spec["modes"], "page_size": spec["page_size"],
            "fields": dict(sorted(fields.items()))}


def main(argv=None) -> None:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--out", default=str(Path(__file__).resolve().parents[1] / "src/carecircle/data"))
    ap.add_argument("--seed", type=int, default=11)
    args = ap.parse_args(argv)
    out = Path(args.out)
    (out / "vendors").mkdir(parents=True, exist_ok=True)
    (out / "traces").mkdir(parents=True, exist_ok=True)
    for vendor, spec in VENDORS.items():
        (out / "vendors" / f"{vendor}.json").write_text(json.dumps(adapter_json(vendor, spec), indent=2) + "\n")
        (out / "traces" / f"{vendor}.jsonl").write_text(dump_trace(build_trace(vendor, spec, args.seed)))
        print(f"wrote {vendor}")


if __name__ == "__main__":
    main()
