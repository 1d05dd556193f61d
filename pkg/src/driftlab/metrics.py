"""Aggregation of per-step reports into a run report, plus exports.

Per-domain error rates weight every domain equally in the average regardless
of batch counts (the row-average convention). Error counts always come from
the pre-update predictions recorded by the engine; per-class true positive
rates are null for classes that never appear in the stream.

Exported JSON carries the full traces and round-trips losslessly; the CSV
summary has one row per domain (name, batches, error_pct, annotations) and a
footer row named "average" holding the unweighted mean error over domains
with summed batch and annotation counts. No wall-clock fields appear
anywhere, so a seeded run exports byte-identical files.
"""

from __future__ import annotations

import io
import json
from dataclasses import dataclass, field

import numpy as np

SCHEMA_VERSION = 1
CSV_COLUMNS = ("domain", "batches", "error_pct", "annotations")


class MetricsError(ValueError):
    pass


def _finite_or_none(x: float) -> float | None:
    return float(x) if np.isfinite(x) else None


@dataclass
class DomainStats:
    domain_id: int
    name: str
    batches: int = 0
    samples: int = 0
    errors: int = 0
    annotations: int = 0
    fallbacks: int = 0

    @property
    def error_rate(self) -> float:
        return self.errors / self.samples if self.samples else 0.0


@dataclass
class RunReport:
    seed: int
    mode: str
    classes: int
    domains: list[DomainStats]
    per_class_tpr: list[float | None]
    traces: dict
    annotations: list[dict]
    config_echo: str
    aborted: str | None = None

    @property
    def average_error_rate(self) -> float:
        if not self.domains:
            return 0.0
        return float(np.mean([d.error_rate for d in self.domains]))

    def to_dict(self) -> dict:
        return {
            "schema_version": SCHEMA_VERSION,
            "seed": self.seed,
            "mode": self.mode,
            "classes": self.classes,
            "config_echo": self.config_echo,
            "aborted": self.aborted,
            "average_error_rate": self.average_error_rate,
            "domains": [
                {"domain_id": d.domain_id, "name": d.name, "batches": d.batches,
                 "samples": d.samples, "errors": d.errors,
                 "error_rate": d.error_rate, "annotations": d.annotations,
                 "fallbacks": d.fallbacks}
                for d in self.domains
            ],
            "per_class_tpr": self.per_class_tpr,
            "annotations": self.annotations,
            "traces": self.traces,
        }


class ReportAccumulator:
    """Folds StepReports (strictly increasing step index) into a RunReport."""

    def __init__(self, classes: int):
        self.classes = classes
        self._last_step = -1
        self._domains: dict[int, DomainStats] = {}
        self._order: list[int] = []
        self._class_correct = np.zeros(classes, dtype=np.int64)
        self._class_total = np.zeros(classes, dtype=np.int64)
        self._traces = {
            "selected_entropy": [], "selected_diff": [], "diff_distribution": [],
            "l_sup": [], "l_unsup": [], "norm_sup": [], "norm_unsup": [],
            "gamma1_raw": [], "gamma2_raw": [], "gamma1": [], "gamma2": [],
            "error_count": [], "confident_count": [],
        }
        self._annotations: list[dict] = []

    def accumulate(self, report) -> None:
        if report.step <= self._last_step:
            raise MetricsError(
                f"out-of-order step {report.step} after {self._last_step}")
        self._last_step = report.step
        dom = self._domains.get(report.domain_id)
        if dom is None:
            dom = DomainStats(domain_id=report.domain_id, name=report.domain_name)
            self._domains[report.domain_id] = dom
            self._order.append(report.domain_id)
        dom.batches += 1
        dom.samples += report.batch_size
        dom.errors += report.error_count
        dom.annotations += len(report.chosen)
        dom.fallbacks += sum(1 for c in report.chosen
                             if c.source.startswith("fallback:"))
        self._class_correct += report.class_correct
        self._class_total += report.class_total

        t = self._traces
        # Aborted steps carry NaN losses; JSON traces use null instead.
        t["l_sup"].append(_finite_or_none(report.l_sup))
        t["l_unsup"].append(_finite_or_none(report.l_unsup))
        t["norm_sup"].append(report.norm_sup)
        t["norm_unsup"].append(report.norm_unsup)
        t["gamma1_raw"].append(report.gamma_raw[0])
        t["gamma2_raw"].append(report.gamma_raw[1])
        t["gamma1"].append(report.gamma[0])
        t["gamma2"].append(report.gamma[1])
        t["error_count"].append(report.error_count)
        t["confident_count"].append(report.confident_count)
        if report.diffs is not None:
            t["diff_distribution"].extend(float(v) for v in report.diffs)
        for c in report.chosen:
            t["selected_entropy"].append(c.entropy)
            t["selected_diff"].append(c.diff)
            self._annotations.append({
                "step": report.step, "domain_id": report.domain_id,
                "index": c.index, "pseudo_label": c.pseudo_label,
                "oracle_label": c.oracle_label, "true_label": c.true_label,
                "source": c.source, "diff": c.diff, "entropy": c.entropy,
                "balance_rule_fired": c.balance_rule_fired,
            })

    def finalize(self, seed: int, mode: str, config_echo: str = "",
                 aborted: str | None = None) -> RunReport:
        tpr: list[float | None] = []
        for c in range(self.classes):
            if self._class_total[c] == 0:
                tpr.append(None)
            else:
                tpr.append(float(self._class_correct[c] / self._class_total[c]))
        domains = [self._domains[i] for i in self._order]
        return RunReport(seed=seed, mode=mode, classes=self.classes,
                         domains=domains, per_class_tpr=tpr,
                         traces=self._traces, annotations=self._annotations,
                         config_echo=config_echo, aborted=aborted)


def export_json(report: RunReport) -> str:
    """Canonical JSON: sorted keys, no whitespace variance, repr floats."""
    return json.dumps(report.to_dict(), sort_keys=True, indent=None,
                      separators=(",", ":"), allow_nan=False)


def parse_json(text: str) -> dict:
    return json.loads(text)


def report_from_dict(d: dict) -> RunReport:
    """Inverse of ``RunReport.to_dict``; export -> parse -> export is the
    identity byte-for-byte."""
    if d.get("schema_version") != SCHEMA_VERSION:
        raise MetricsError(f"unsupported report schema {d.get('schema_version')!r}")
    domains = [DomainStats(domain_id=row["domain_id"], name=row["name"],
                           batches=row["batches"], samples=row["samples"],
                           errors=row["errors"], annotations=row["annotations"],
                           fallbacks=row["fallbacks"])
               for row in d["domains"]]
    return RunReport(seed=d["seed"], mode=d["mode"], classes=d["classes"],
                     domains=domains, per_class_tpr=d["per_class_tpr"],
                     traces=d["traces"], annotations=d["annotations"],
                     config_echo=d["config_echo"], aborted=d["aborted"])


def export_csv(report: RunReport) -> str:
    buf = io.StringIO()
    buf.write(",".join(CSV_COLUMNS) + "\n")
    for d in report.domains:
        buf.write(f"{d.name},{d.batches},{100.0 * d.error_rate:.4f},{d.annotations}\n")
    total_batches = sum(d.batches for d in report.domains)
    total_annotations = sum(d.annotations for d in report.domains)
    buf.write(f"average,{total_batches},{100.0 * report.average_error_rate:.4f},"
              f"{total_annotations}\n")
    return buf.getvalue()


def write_report(report: RunReport, json_path, csv_path) -> None:
    with open(json_path, "w", encoding="utf-8") as fh:
        fh.write(export_json(report))
    with open(csv_path, "w", encoding="utf-8") as fh:
        fh.write(export_csv(report))
