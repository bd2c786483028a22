"""Run-log CSV schema shared by the scenario runner, the offline
detector replay, and the figure tooling."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field

LOG_COLUMNS = [
    "t",
    "x",
    "y",
    "psi",
    "u",
    "v",
    "r",
    "x_meas",
    "y_meas",
    "psi_meas",
    "u_meas",
    "v_meas",
    "r_meas",
    "a_p",
    "a_s",
    "branch",
    "u_ref",
    "r_ref",
    "p_k",
    "p_bar",
    "alarm",
    "mode",
    "model_id",
]

TELEMETRY_COLUMNS = [
    "t",
    "branch",
    "d_g",
    "l",
    "psi_c",
    "u_d",
    "r_d",
    "u_ref",
    "r_ref",
    "i_u",
    "i_r",
    "a_p",
    "a_s",
]


class SchemaError(ValueError):
    """A log file does not match the expected column layout."""


@dataclass
class LogRow:
    t: float = 0.0
    x: float = 0.0
    y: float = 0.0
    psi: float = 0.0
    u: float = 0.0
    v: float = 0.0
    r: float = 0.0
    x_meas: float = 0.0
    y_meas: float = 0.0
    psi_meas: float = 0.0
    u_meas: float = 0.0
    v_meas: float = 0.0
    r_meas: float = 0.0
    a_p: float = 0.0
    a_s: float = 0.0
    branch: str = "-"
    u_ref: float = float("nan")
    r_ref: float = float("nan")
    p_k: float = float("nan")
    p_bar: float = float("nan")
    alarm: str = "none"
    mode: str = "normal"
    model_id: str = "nominal"


def _fmt(value) -> str:
    if isinstance(value, str):
        return value
    if isinstance(value, float) and math.isnan(value):
        return ""
    return f"{value:.10g}"


def write_log(path: str, rows: list[LogRow]) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(LOG_COLUMNS)
        for row in rows:
            writer.writerow([_fmt(getattr(row, col)) for col in LOG_COLUMNS])


def read_log(path: str) -> list[LogRow]:
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None:
            raise SchemaError("log file is empty")
        missing = [c for c in LOG_COLUMNS if c not in header]
        if missing:
            raise SchemaError(f"log file missing column(s): {', '.join(missing)}")
        idx = {c: header.index(c) for c in LOG_COLUMNS}
        rows = []
        for record in reader:
            kwargs = {}
            for col in LOG_COLUMNS:
                raw = record[idx[col]]
                if col in ("branch", "alarm", "mode", "model_id"):
                    kwargs[col] = raw
                else:
                    kwargs[col] = float(raw) if raw != "" else float("nan")
            rows.append(LogRow(**kwargs))
        return rows
