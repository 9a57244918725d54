"""Published run parameters and source-calibration rates shipped as package data."""
from __future__ import annotations

import csv
import io
from dataclasses import dataclass
from importlib import resources
from typing import List, Optional


@dataclass(frozen=True)
class PublishedRun:
    label: str
    site: str
    acquisition_min: float
    live_min: float
    sampling_period: float      # us
    p_g: float                  # fraction
    n_signal_min: int
    n_control_min: int
    n_control_max: int
    rate: float                 # 1/s
    rate_err: float
    activity: Optional[float]   # kBq, source runs only


@dataclass(frozen=True)
class SourceCalibration:
    activity: float             # kBq
    rate: float                 # expected impacts/s
    rate_err: float


def _read(name):
    text = resources.files("qpburst.data").joinpath(name).read_text()
    return list(csv.DictReader(io.StringIO(text)))


def published_runs() -> List[PublishedRun]:
    out = []
    for r in _read("runs.csv"):
        out.append(PublishedRun(
            r["label"], r["site"], float(r["acquisition_min"]), float(r["live_min"]),
            float(r["sampling_period"]), float(r["p_g_percent"]) / 100.0,
            int(r["n_signal_min"]), int(r["n_control_min"]), int(r["n_control_max"]),
            float(r["rate"]), float(r["rate_err"]),
            float(r["activity_kbq"]) if r["activity_kbq"] else None))
    return out


def source_rates() -> List[SourceCalibration]:
    return [SourceCalibration(float(r["activity_kbq"]), float(r["rate"]), float(r["rate_err"]))
            for r in _read("th_source_rates.csv")]
