"""Seeded, serializable experiment records.

Reports serialize to a line-oriented document: one JSON header object
(schema, id, seed, config echo, summary, series names) followed by one JSON
record per series point, plus one flat CSV file per series. Serialization
is canonical - fixed key order, shortest-round-trip floats, and no wall
time - so identical config+seed reruns produce byte-identical files;
``runtime_ms`` lives only on the in-memory object.
"""

from __future__ import annotations

import dataclasses
import enum
import json
import os
import time
from dataclasses import dataclass, field
from fractions import Fraction
from pathlib import Path

import numpy as np

SCHEMA = "muonq-report-v1"

SeriesPoint = tuple[float, float]


@dataclass
class ExperimentReport:
    """One study run: config echo, per-step series, scalar summary."""

    experiment_id: str
    seed: int
    config: dict
    series: dict[str, list[SeriesPoint]] = field(default_factory=dict)
    summary: dict[str, float] = field(default_factory=dict)
    runtime_ms: int = 0

    def header(self) -> dict:
        return {
            "schema": SCHEMA,
            "experiment_id": self.experiment_id,
            "seed": self.seed,
            "config": jsonable(self.config),
            "summary": jsonable(self.summary),
            "series": sorted(self.series),
        }

    def to_jsonl(self) -> str:
        lines = [_dumps(self.header())]
        for name in sorted(self.series):
            for step, value in self.series[name]:
                lines.append(_dumps({"series": name, "step": jsonable(step),
                                     "value": jsonable(value)}))
        return "\n".join(lines) + "\n"

    def basename(self) -> str:
        return f"{self.experiment_id}_seed{self.seed}"


def _dumps(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), allow_nan=False)


def jsonable(obj):
    """Convert config/summary values into canonical JSON-ready data."""
    if isinstance(obj, dict):
        return {str(k): jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [jsonable(v) for v in obj]
    if isinstance(obj, enum.Enum):
        return obj.name.lower()
    if isinstance(obj, Fraction):
        return str(obj)
    if isinstance(obj, (np.floating, float)):
        return float(obj)
    if isinstance(obj, (np.integer, int)):
        return int(obj)
    if dataclasses.is_dataclass(obj) and not isinstance(obj, type):
        return jsonable(dataclasses.asdict(obj))
    if obj is None or isinstance(obj, (str, bool)):
        return obj
    raise TypeError(f"cannot serialize {type(obj).__name__} into a report")


def config_snapshot(**kwargs) -> dict:
    """Echo study parameters (dataclasses included) as plain JSON data."""
    return {k: jsonable(v) for k, v in kwargs.items()}


def write_report(report: ExperimentReport, out_dir) -> list[Path]:
    """Write the JSONL document and one CSV per series.

    All files are written to temporaries and renamed at the end, so a
    failed run leaves no new report files behind.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    base = report.basename()
    pending: list[tuple[Path, Path]] = []
    try:
        jsonl = out / f"{base}.jsonl"
        tmp = jsonl.with_name(jsonl.name + ".tmp")
        tmp.write_text(report.to_jsonl(), encoding="utf-8")
        pending.append((tmp, jsonl))
        for name in sorted(report.series):
            csv = out / f"{base}_{name}.csv"
            tmp = csv.with_name(csv.name + ".tmp")
            rows = ["step,value"]
            rows += [f"{_csv_num(s)},{_csv_num(v)}" for s, v in report.series[name]]
            tmp.write_text("\n".join(rows) + "\n", encoding="utf-8")
            pending.append((tmp, csv))
    except BaseException:
        for tmp, _ in pending:
            tmp.unlink(missing_ok=True)
        raise
    finals = []
    for tmp, final in pending:
        os.replace(tmp, final)
        finals.append(final)
    return finals


def _csv_num(x) -> str:
    x = jsonable(x)
    if isinstance(x, int):
        return str(x)
    return repr(float(x))


class StopwatchMs:
    """Measures elapsed wall time for a report's runtime_ms field."""

    def __enter__(self):
        self._t0 = time.perf_counter()
        return self

    def __exit__(self, *exc):
        self.elapsed_ms = int((time.perf_counter() - self._t0) * 1000)
        return False
