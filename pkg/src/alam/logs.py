"""Run-log schema: ``metrics.csv`` rows and ``events.jsonl`` records."""

from __future__ import annotations

import csv
import json
import math
from dataclasses import astuple, dataclass, fields
from pathlib import Path
from typing import Iterable


@dataclass
class MetricRow:
    env_step: int
    episode_return: float
    episode_cost: float
    violation_fraction: float
    rho: float
    mean_lambda: float
    loss_policy: float
    loss_q: float
    loss_qc: float
    loss_multiplier: float
    wall_time: float | None = None


METRIC_COLUMNS = [f.name for f in fields(MetricRow)]


def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, float):
        return "nan" if math.isnan(v) else repr(float(v))
    return str(v)


def write_metrics(path: str | Path, rows: Iterable[MetricRow]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(METRIC_COLUMNS)
        for row in rows:
            w.writerow([_fmt(v) for v in astuple(row)])


def read_metrics(path: str | Path) -> dict[str, list[float]]:
    """Column-wise view of a metrics file; blank cells read as NaN."""
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        if header != METRIC_COLUMNS:
            raise ValueError(f"{path}: unexpected columns {header}")
        cols: dict[str, list[float]] = {name: [] for name in header}
        for line in reader:
            for name, cell in zip(header, line):
                cols[name].append(float(cell) if cell != "" else math.nan)
    return cols


def append_event(path: str | Path, event: dict) -> None:
    with open(path, "a") as fh:
        fh.write(json.dumps(event, sort_keys=True) + "\n")


def read_events(path: str | Path, kind: str | None = None) -> list[dict]:
    out = []
    with open(path) as fh:
        for line in fh:
            if line.strip():
                ev = json.loads(line)
                if kind is None or ev.get("event") == kind:
                    out.append(ev)
    return out
