"""Expected chip-impact rates from tabulated per-source coefficients.

Each source contributes ``coefficient * driver`` events/s, where the driver
is a measured flux, a source activity in kBq, or 1 for fixed contributions.
Source files hold one entry per line::

    name  type  coefficient  coefficient_err  driver  driver_err

with ``type`` one of ``flux``, ``activity``, ``fixed``. A coefficient written
as ``<value`` is an upper limit.
"""
from __future__ import annotations

import csv
import io
import math
import shlex
from dataclasses import dataclass, replace
from importlib import resources
from typing import List, Optional

import numpy as np

from .errors import ConfigError, DomainError

KINDS = ("flux", "activity", "fixed")


@dataclass(frozen=True)
class SourceEntry:
    name: str
    kind: str
    coefficient: float
    coefficient_err: float = 0.0
    driver: Optional[float] = 1.0
    driver_err: float = 0.0
    upper_limit: bool = False

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ConfigError(f"source {self.name!r}: unknown type {self.kind!r}")
        if self.coefficient < 0 or self.coefficient_err < 0 or self.driver_err < 0:
            raise ConfigError(f"source {self.name!r}: negative coefficient or error")
        if self.driver is not None and self.driver < 0:
            raise ConfigError(f"source {self.name!r}: negative driver")


@dataclass(frozen=True)
class SourceRate:
    name: str
    rate: float
    error: float
    upper_limit: bool = False

    def __str__(self):
        if self.upper_limit:
            return f"{self.name}: < {self.rate:.3g} /s"
        return f"{self.name}: ({self.rate:.4g} +- {self.error:.2g}) /s"


def scale_source_rate(entry: SourceEntry, include_driver_error=False):
    """``coefficient * driver`` with relative errors added in quadrature.

    By default only the coefficient error is propagated and the driver's
    measurement error is kept apart, which is how the site budgets quote
    their per-source errors; ``include_driver_error=True`` folds it in.
    """
    if entry.driver is None:
        raise ConfigError(f"source {entry.name!r} has no driver value")
    rate = entry.coefficient * entry.driver
    if entry.upper_limit:
        return SourceRate(entry.name, rate, 0.0, True)
    if rate == 0.0:
        return SourceRate(entry.name, 0.0, 0.0)
    rel = (entry.coefficient_err / entry.coefficient) ** 2 if entry.coefficient else 0.0
    if include_driver_error and entry.driver:
        rel += (entry.driver_err / entry.driver) ** 2
    return SourceRate(entry.name, rate, rate * math.sqrt(rel))


def total_budget(entries, combine="linear", include_driver_error=False):
    """Sum of the per-source rates; returns ``(total, per_source)``.

    Errors add linearly by default or in quadrature with
    ``combine="quadrature"``. Upper-limit entries add nothing to the total.
    """
    if combine not in ("linear", "quadrature"):
        raise DomainError(f"unknown error combination {combine!r}")
    rows = [e if isinstance(e, SourceRate) else scale_source_rate(e, include_driver_error)
            for e in entries]
    live = [r for r in rows if not r.upper_limit]
    total = math.fsum(r.rate for r in live)
    if combine == "linear":
        err = math.fsum(r.error for r in live)
    else:
        err = math.sqrt(math.fsum(r.error ** 2 for r in live))
    return SourceRate("total", total, err), rows


def scale_drivers(entries, factor):
    return [replace(e, driver=e.driver * factor) for e in entries]


def parse_sources(text):
    """Parse a source-definition text; ``#`` starts a comment."""
    out = []
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        parts = shlex.split(line)
        if len(parts) != 6:
            raise ConfigError(f"line {lineno}: expected 6 fields, got {len(parts)}")
        name, kind, coef, coef_err, driver, driver_err = parts
        limit = coef.startswith("<")
        try:
            coef_v = float(coef.lstrip("<"))
            drv = None if driver in ("-", "") else float(driver)
            out.append(SourceEntry(name, kind, coef_v, float(coef_err), drv, float(driver_err), limit))
        except ValueError as exc:
            raise ConfigError(f"line {lineno}: {exc}") from None
    return out


def load_sources(path):
    with open(path) as fh:
        return parse_sources(fh.read())


def builtin_sources(site):
    """Tabulated coefficients shipped with the package for ``FNAL`` or ``LNGS``."""
    name = {"fnal": "sources_fnal.txt", "lngs": "sources_lngs.txt"}.get(site.lower())
    if name is None:
        raise ConfigError(f"no built-in source table for site {site!r}")
    return parse_sources(resources.files("qpburst.data").joinpath(name).read_text())


def thorium_coefficient(activities, rates, errors):
    """Weighted through-origin slope (events/s per kBq) and its error."""
    a = np.asarray(activities, float)
    r = np.asarray(rates, float)
    w = 1.0 / np.asarray(errors, float) ** 2
    sxx = float(np.sum(w * a * a))
    if sxx == 0:
        raise DomainError("activities are all zero")
    return float(np.sum(w * a * r) / sxx), math.sqrt(1.0 / sxx)


def thorium_entry(activity_kbq, activity_err=0.0, calibration=None):
    """Activity-scaled source entry using the fitted thorium coefficient."""
    if calibration is None:
        from .datasets import source_rates
        cal = source_rates()
        calibration = ([c.activity for c in cal], [c.rate for c in cal], [c.rate_err for c in cal])
    k, k_err = thorium_coefficient(*calibration)
    return SourceEntry("thorium_source", "activity", k, k_err, activity_kbq, activity_err)


def budget_csv(total: SourceRate, rows: List[SourceRate]):
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["source", "rate", "rate_err", "upper_limit"])
    for r in list(rows) + [total]:
        w.writerow([r.name, f"{r.rate:.6e}", f"{r.error:.6e}", int(r.upper_limit)])
    return buf.getvalue()
