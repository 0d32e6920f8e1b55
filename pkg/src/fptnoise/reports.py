"""Report and trace serialization.

Floats are written with repr() so parsing them back reproduces the exact
values. The trace CSV column order is part of the external interface and
must not change.
"""

from __future__ import annotations

import csv
import dataclasses
import json
import os

from .errors import FormatError, UsageError
from .evaluate import EvalReport, TraceRow

TRACE_COLUMNS = [
    "index",
    "tau",
    "ttc_tau",
    "sigma",
    "k",
    "r",
    "w",
    "branch",
    "final_linf",
    "pred",
    "label",
    "timing_ms",
]

_TRACE_TYPES = {
    "index": int,
    "branch": str,
    "pred": int,
    "label": int,
}

REPORT_JSON_SCHEMA = {
    "type": "object",
    "required": [
        "clean_accuracy",
        "robust_accuracy",
        "defended_clean_accuracy",
        "defended_robust_accuracy",
        "auc_fpt",
        "auc_ttc",
        "branch_hist_clean",
        "branch_hist_adv",
        "mean_defense_time_ms",
        "train_accuracy",
        "config",
        "traces",
    ],
    "properties": {
        "clean_accuracy": {"type": "number", "minimum": 0, "maximum": 1},
        "robust_accuracy": {"type": "number", "minimum": 0, "maximum": 1},
        "defended_clean_accuracy": {"type": "number", "minimum": 0, "maximum": 1},
        "defended_robust_accuracy": {"type": "number", "minimum": 0, "maximum": 1},
        "auc_fpt": {"type": "number", "minimum": 0, "maximum": 1},
        "auc_ttc": {"type": "number", "minimum": 0, "maximum": 1},
        "branch_hist_clean": {
            "type": "object",
            "additionalProperties": {"type": "integer", "minimum": 0},
        },
        "branch_hist_adv": {
            "type": "object",
            "additionalProperties": {"type": "integer", "minimum": 0},
        },
        "mean_defense_time_ms": {"type": "number", "minimum": 0},
        "train_accuracy": {"type": "number", "minimum": 0, "maximum": 1},
        "config": {"type": "object"},
        "traces": {
            "type": "array",
            "items": {
                "type": "object",
                "required": TRACE_COLUMNS,
                "properties": {
                    "index": {"type": "integer"},
                    "branch": {"type": "string"},
                    "pred": {"type": "integer"},
                    "label": {"type": "integer"},
                },
            },
        },
    },
}


def _fmt(value) -> str:
    if isinstance(value, float):
        return repr(value)
    return str(value)


def write_trace_csv(rows: list[TraceRow], path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(TRACE_COLUMNS)
        for row in rows:
            writer.writerow([_fmt(getattr(row, col)) for col in TRACE_COLUMNS])


def read_trace_csv(path) -> list[TraceRow]:
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header != TRACE_COLUMNS:
            raise FormatError(f"unexpected trace CSV header {header}")
        rows = []
        for record in reader:
            values = {}
            for col, raw in zip(TRACE_COLUMNS, record):
                values[col] = _TRACE_TYPES.get(col, float)(raw)
            rows.append(TraceRow(**values))
    return rows


def summary_dict(report: EvalReport) -> dict:
    """Flat scalar summary, histogram counts included."""
    flat = {name: getattr(report, name) for name in EvalReport.SUMMARY_FIELDS}
    for pop, hist in (
        ("clean", report.branch_hist_clean),
        ("adv", report.branch_hist_adv),
    ):
        for branch, count in hist.items():
            flat[f"branch_{pop}.{branch}"] = count
    return flat


def write_report_csv(report: EvalReport, path) -> None:
    flat = summary_dict(report)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(flat.keys())
        writer.writerow([_fmt(v) for v in flat.values()])


def read_report_csv(path) -> dict:
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        values = next(reader)
    out = {}
    for key, raw in zip(header, values):
        out[key] = int(raw) if key.startswith("branch_") else float(raw)
    return out


def report_to_json_dict(report: EvalReport) -> dict:
    return {
        **{name: getattr(report, name) for name in EvalReport.SUMMARY_FIELDS},
        "branch_hist_clean": report.branch_hist_clean,
        "branch_hist_adv": report.branch_hist_adv,
        "config": report.config,
        "traces": [dataclasses.asdict(row) for row in report.traces],
    }


def write_report_json(report: EvalReport, path) -> None:
    with open(path, "w") as fh:
        json.dump(report_to_json_dict(report), fh, indent=2, sort_keys=True)
        fh.write("\n")


def read_report_json(path) -> dict:
    with open(path) as fh:
        return json.load(fh)


def emit_report(report: EvalReport, out_dir, fmt: str = "csv") -> dict[str, str]:
    """Write the report plus the full trace table; returns written paths.

    csv format: report.csv + traces.csv + config.json.
    json format: report.json (traces embedded) + traces.csv.
    """
    if fmt not in ("csv", "json"):
        raise UsageError(f"unknown report format {fmt!r}")
    os.makedirs(out_dir, exist_ok=True)
    paths = {"traces": os.path.join(out_dir, "traces.csv")}
    write_trace_csv(report.traces, paths["traces"])
    if fmt == "csv":
        paths["report"] = os.path.join(out_dir, "report.csv")
        write_report_csv(report, paths["report"])
        paths["config"] = os.path.join(out_dir, "config.json")
        with open(paths["config"], "w") as fh:
            json.dump(report.config, fh, indent=2, sort_keys=True)
            fh.write("\n")
    else:
        paths["report"] = os.path.join(out_dir, "report.json")
        write_report_json(report, paths["report"])
    return paths


def write_sweep_csv(results, param: str, path) -> None:
    """One summary row per swept value, first column the parameter value."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        header_written = False
        for value, report in results:
            flat = summary_dict(report)
            if not header_written:
                writer.writerow([param, *flat.keys()])
                header_written = True
            writer.writerow([_fmt(value), *[_fmt(v) for v in flat.values()]])
