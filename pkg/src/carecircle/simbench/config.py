"""Simulation configuration. Every generator parameter lives here or in the JSON it loads."""
from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field, fields, replace
from importlib import resources
from pathlib import Path
from typing import Any, Mapping


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class SignalParams:
    # minute heart rate in daily bouts
    hr_base: float = 72.0
    hr_amplitude: float = 6.0
    hr_noise: float = 3.0
    hr_minutes_total: int = 2036
    hr_bout_hours: tuple[int, ...] = (7, 10, 13, 16, 19)
    # hourly steps, zero-inflated Poisson
    steps_day_mean: float = 450.0
    steps_day_zero: float = 0.3
    steps_night_mean: float = 20.0
    steps_night_zero: float = 0.9
    day_hours: tuple[int, int] = (7, 22)
    # nightly sleep summary
    sleep_hour: int = 6
    sleep_duration_mean: float = 420.0
    sleep_duration_sd: float = 45.0
    sleep_efficiency_mean: float = 85.0
    sleep_efficiency_sd: float = 5.0
    # daily blood pressure
    bp_hour: int = 9
    systolic_base: float = 124.0
    diastolic_base: float = 79.0
    bp_drift_sd: float = 1.5
    bp_noise: float = 4.0
    # covariate shifts
    age_hr_per_decade: float = -1.0
    hypertension_systolic: float = 14.0
    hypertension_diastolic: float = 7.0
    diabetes_hr: float = 4.0
    copd_hr: float = 5.0
    female_hr: float = 3.0
    # outliers
    outlier_min: float = 55.0
    outlier_max: float = 90.0


@dataclass(frozen=True)
class SimConfig:
    n_circles: int = 50
    seed: int = 7
    days: int = 14
    start: str = "2025-03-03T00:00:00+05:30"
    tz_offset_minutes: int = 330
    circle_size_pmf: Mapping[str, float] = field(default_factory=lambda: {
        "2": 0.05, "3": 0.25, "4": 0.35, "5": 0.25, "6": 0.10})
    extra_role_weights: Mapping[str, float] = field(default_factory=lambda: {
        "family_monitor": 0.45, "nudge_only": 0.30, "clinician": 0.25})
    missingness_mean: float = 0.12
    missingness_concentration: float = 30.0
    gap_mean_length: Mapping[str, float] = field(default_factory=lambda: {
        "heart_rate": 12.0, "steps": 3.0, "sleep": 1.0, "bp": 1.0})
    outliers_mean: float = 3.0
    age_range: tuple[int, int] = (58, 90)
    comorbidity_rates: Mapping[str, float] = field(default_factory=lambda: {
        "hypertension": 0.45, "diabetes": 0.3, "copd": 0.12})
    medications: Mapping[str, tuple[str, float]] = field(default_factory=lambda: {
        "hypertension": ("amlodipine", 5.0), "diabetes": ("metformin", 500.0), "copd": ("tiotropium", 0.018),
        "none": ("vitamin_d", 0.025)})
    adherence_mean: float = 90.0
    adherence_sd: float = 8.0
    symptoms_mean: float = 1.0
    symptom_names: tuple[str, ...] = ("dizziness", "fatigue", "breathlessness", "joint_pain")
    severity_weights: Mapping[str, float] = field(default_factory=lambda: {
        "mild": 0.6, "moderate": 0.3, "severe": 0.1})
    fall_rate: float = 0.05
    signals: SignalParams = field(default_factory=SignalParams)

    def __post_init__(self):
        if self.n_circles < 1:
            raise ConfigError("n_circles must be at least 1")
        if self.days < 1:
            raise ConfigError("days must be at least 1")
        for name in ("missingness_mean", "fall_rate"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ConfigError(f"{name} must lie in [0, 1]")
        for name, pmf in (("circle_size_pmf", self.circle_size_pmf),
                          ("extra_role_weights", self.extra_role_weights),
                          ("severity_weights", self.severity_weights)):
            if any(p < 0 for p in pmf.values()) or abs(sum(pmf.values()) - 1.0) > 1e-9:
                raise ConfigError(f"{name} must be a probability distribution")
        if min(int(k) for k in self.circle_size_pmf) < 2:
            raise ConfigError("a circle needs the subject and at least one other member")
        if self.missingness_mean not in (0.0, 1.0) and self.missingness_concentration <= 0:
            raise ConfigError("missingness_concentration must be positive")
        if self.outliers_mean < 0 or self.symptoms_mean < 0:
            raise ConfigError("event rates must be non-negative")
        s = self.signals
        if s.hr_minutes_total < 0 or not s.hr_bout_hours:
            raise ConfigError("heart-rate schedule needs bout hours and a non-negative budget")

    @property
    def samples_per_subject(self) -> int:
        """Scheduled sensor slots: minute HR, hourly steps, nightly sleep and daily BP."""
        return self.signals.hr_minutes_total + 24 * self.days + 2 * self.days

    def to_json(self) -> dict:
        d = asdict(self)
        d["signals"] = asdict(self.signals)
        return _jsonable(d)

    @property
    def hash(self) -> str:
        return hashlib.sha256(json.dumps(self.to_json(), sort_keys=True).encode()).hexdigest()[:16]

    @classmethod
    def from_json(cls, data: Mapping[str, Any]) -> "SimConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ConfigError(f"unknown config keys {sorted(unknown)}")
        kw = dict(data)
        if "signals" in kw:
            sknown = {f.name for f in fields(SignalParams)}
            bad = set(kw["signals"]) - sknown
            if bad:
                raise ConfigError(f"unknown signal keys {sorted(bad)}")
            kw["signals"] = SignalParams(**{k: _tupled(v) for k, v in kw["signals"].items()})
        for k in ("age_range", "symptom_names"):
            if k in kw:
                kw[k] = tuple(kw[k])
        if "medications" in kw:
            kw["medications"] = {k: tuple(v) for k, v in kw["medications"].items()}
        return cls(**kw)

    def with_overrides(self, **kw) -> "SimConfig":
        return replace(self, **kw)


def _tupled(v):
    return tuple(v) if isinstance(v, list) else v


def _jsonable(obj):
    if isinstance(obj, Mapping):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    return obj


def load_config(path: str | Path | None = None) -> SimConfig:
    if path is None:
        text = resources.files("carecircle.data").joinpath("default_config.json").read_text("utf-8")
    else:
        text = Path(path).read_text("utf-8")
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config is not valid JSON: {exc.msg}") from None
    return SimConfig.from_json(data)
