"""EvalReport: JSON first, aligned text tables second."""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Mapping

REPORT_FORMAT = 1
ROLE_ORDER = ("care_primary", "family_monitor", "nudge_only", "clinician", "subject")
ROLE_NAMES = {"care_primary": "Care Primary", "family_monitor": "Family-monitor", "nudge_only": "Nudge-only",
              "clinician": "Clinician", "subject": "Subject"}


@dataclass
class EvalReport:
    meta: dict
    corpus: dict | None = None
    exposure: dict | None = None
    misconfig: dict | None = None
    fidelity: dict | None = None
    compat: dict | None = None
    extra: dict = field(default_factory=dict)

    def to_json(self) -> dict:
        out: dict[str, Any] = {"format": REPORT_FORMAT, "meta": self.meta}
        for name in ("corpus", "exposure", "misconfig", "fidelity", "compat"):
            v = getattr(self, name)
            if v is not None:
                out[name] = v
        out["failures"] = self.failures()
        return out

    def dumps(self) -> str:
        return json.dumps(self.to_json(), sort_keys=True, indent=2) + "\n"

    def write(self, path: str | Path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(self.dumps(), encoding="utf-8")
        return path

    @classmethod
    def from_json(cls, data: Mapping) -> "EvalReport":
        if data.get("format") != REPORT_FORMAT:
            raise ValueError(f"unsupported report format {data.get('format')!r}")
        return cls(data["meta"], data.get("corpus"), data.get("exposure"), data.get("misconfig"),
                   data.get("fidelity"), data.get("compat"))

    @classmethod
    def load(cls, path: str | Path) -> "EvalReport":
        return cls.from_json(json.loads(Path(path).read_text(encoding="utf-8")))

    def failures(self) -> list[str]:
        """Every gate the report misses; empty means the run passed."""
        out = []
        if self.exposure is not None:
            e = self.exposure
            if e["leak_count"]:
                out.append(f"exposure: {e['leak_count']} leaked fields")
            for role, r in sorted(e["roles"].items()):
                if r["expected"] != r["exposed"] or r["mismatched_briefings"]:
                    out.append(f"exposure: {role} expected {r['expected']} but exposed {r['exposed']}")
            if e["withheld"]:
                out.append(f"exposure: {len(e['withheld'])} briefings withheld")
        if self.misconfig is not None:
            m = self.misconfig
            if m["detected"] != m["injected"]:
                out.append(f"misconfig: detected {m['detected']} of {m['injected']}")
            if m["false_alarms"]:
                out.append(f"misconfig: {m['false_alarms']} false alarms")
        if self.fidelity is not None:
            f = self.fidelity
            lo, hi = f["precision_ci95"]
            if not lo <= f["precision"] <= hi:
                out.append(f"fidelity: precision {f['precision']:.4f} outside [{lo:.4f}, {hi:.4f}]")
            if not f["brute_force"]["agrees"]:
                out.append("fidelity: harness counts disagree with the manifest recount")
            c = f["confusion"]
            if c["corrupted"]["supported"] or c["faithful"]["unsupported"] or c["faithful"]["unverifiable"]:
                out.append("fidelity: verifier verdicts disagree with the corruption manifest")
            if f["fabrication_rate"] == 0 and f["corruption_rate"] == 0:
                for k in ("precision", "recall", "provenance_accuracy"):
                    if f[k] != 1.0:
                        out.append(f"fidelity: {k} {f[k]} below 1.0 without faults")
        if self.compat is not None:
            for vendor, v in sorted(self.compat["vendors"].items()):
                if v.get("skipped"):
                    continue
                if not v.get("arithmetic_ok", False):
                    out.append(f"compat: {vendor} pass rate does not match its metric counts")
        return out


def _table(headers: list[str], rows: list[list[str]]) -> str:
    widths = [max(len(str(x)) for x in col) for col in zip(headers, *rows)]
    line = lambda cells: "  ".join(str(c).ljust(w) for c, w in zip(cells, widths)).rstrip()
    return "\n".join([line(headers), "  ".join("-" * w for w in widths)] + [line(r) for r in rows])


def _pct(x: float | None) -> str:
    return "n/a" if x is None else f"{100 * x:.1f}%"


def render_tables(report: EvalReport) -> str:
    """Human-readable tables: corpus, fidelity, exposure, compatibility."""
    parts = [f"seed {report.meta.get('seed')}  config {report.meta.get('config_hash')}"]
    if report.corpus is not None:
        c = report.corpus
        q1, q3 = c["circle_size_iqr"]
        parts.append("Synthetic corpus\n" + _table(["Statistic", "Value"], [
            ["Care circles", str(c["n_circles"])],
            ["Median circle size (IQR)", f"{c['circle_size_median']:g} ({q1:g}-{q3:g})"],
            ["Avg samples/subject", f"{c['samples_per_subject_mean']:.0f}"],
            ["Mean missingness", _pct(c["missingness_mean"])],
            ["Median outliers/subject", f"{c['outliers_median']:g}"],
        ]))
    if report.fidelity is not None:
        f = report.fidelity
        lo, hi = f["precision_ci95"]
        parts.append("Fact fidelity and provenance\n" + _table(["Metric", "Value"], [
            ["Precision", f"{f['precision']:.4f}"],
            ["Recall", f"{f['recall']:.4f}"],
            ["F1", f"{f['f1']:.4f}"],
            ["Provenance accuracy", f"{f['provenance_accuracy']:.4f}"],
            ["Expected precision (95% CI)", f"{f['expected_precision']:.4f} ({lo:.4f}-{hi:.4f})"],
            ["Statements / turns", f"{f['statements']} / {f['turns']}"],
            ["Fault rates r / q", f"{f['fabrication_rate']:g} / {f['corruption_rate']:g}"],
        ]))
        conf = f["confusion"]
        parts.append("Verifier confusion vs manifest\n" + _table(
            ["Manifest", "supported", "unsupported", "unverifiable"],
            [[row, *(str(conf[row][k]) for k in ("supported", "unsupported", "unverifiable"))]
             for row in ("faithful", "corrupted")]))
    if report.exposure is not None or report.misconfig is not None:
        rows = []
        if report.exposure is not None:
            roles = report.exposure["roles"]
            for role in [r for r in ROLE_ORDER if r in roles] + sorted(set(roles) - set(ROLE_ORDER)):
                r = roles[role]
                rows.append([ROLE_NAMES.get(role, role), f"expected {r['expected']} -> exposed {r['exposed']}",
                             _pct(r["leak_rate"])])
        if report.misconfig is not None:
            m = report.misconfig
            rows.append(["Template misconfig injection detection", f"{m['detected']}/{m['injected']} detected",
                         f"{m['false_alarms']}/{m['clean_runs']} false alarms"])
        parts.append("Exposure control\n" + _table(["Check", "Fields", "Leakage"], rows))
    if report.compat is not None:
        rows = []
        for vendor, v in sorted(report.compat["vendors"].items()):
            faults = ", ".join(f"{k}={n}" for k, n in sorted(v.get("faults_recovered", {}).items())) or "-"
            synced = f"{v['metrics_synced']}/{v['metrics_expected']}" if "metrics_synced" in v else "-"
            rows.append([vendor, v.get("mode", ""), synced, _pct(v.get("pass_rate")), faults])
        parts.append("Vendor compatibility\n" + _table(
            ["Vendor", "Mode", "Metrics", "Pass rate", "Faults recovered"], rows))
    failures = report.failures()
    parts.append("Result: " + ("PASS" if not failures else "FAIL\n" + "\n".join(f"  - {x}" for x in failures)))
    return "\n\n".join(parts) + "\n"
