"""Event rates, weighted straight-line fits and derived detector quantities."""
from __future__ import annotations

import math
from collections import defaultdict
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .errors import DegeneracyError, DomainError

# 90% CL Poisson upper limit on the mean for zero observed counts
POISSON_UL90_ZERO = 2.302585092994046


@dataclass(frozen=True)
class RunResult:
    label: str
    sampling_period: float       # us
    p_g: float
    live_time: float             # s
    n_selected: int
    rate: float                  # 1/s
    rate_err: float
    upper_limit: Optional[float] = None
    n_traces: int = 0
    acquisition_time: float = float("nan")
    n_signal_min: int = 0
    n_control_min: int = 0
    n_control_max: int = 0

    CSV_FIELDS = ("label", "sampling_period", "p_g", "live_time", "n_selected", "rate",
                  "rate_err", "upper_limit", "n_signal_min", "n_control_min", "n_control_max")

    def csv_row(self):
        ul = "" if self.upper_limit is None else f"{self.upper_limit:.6e}"
        return [self.label, f"{self.sampling_period:g}", f"{self.p_g:.6f}", f"{self.live_time:.6f}",
                str(self.n_selected), f"{self.rate:.6e}", f"{self.rate_err:.6e}", ul,
                str(self.n_signal_min), str(self.n_control_min), str(self.n_control_max)]


@dataclass(frozen=True)
class FitResult:
    p1: float
    p1_err: float
    p0: float
    p0_err: float
    chi2: float
    dof: int
    fixed_intercept: bool = False
    x_min: float = float("nan")
    x_max: float = float("nan")
    cov01: float = 0.0

    def __call__(self, x):
        return self.p0 + self.p1 * np.asarray(x, dtype=float)

    def error_at(self, x):
        x = np.asarray(x, dtype=float)
        v = self.p0_err ** 2 + 2 * x * self.cov01 + (x * self.p1_err) ** 2
        return np.sqrt(np.maximum(v, 0.0))


def event_rate(n_selected, live_time):
    """``(rate, error, upper_limit)``; the limit is set only when ``n == 0``."""
    if not live_time > 0:
        raise DomainError(f"live time must be positive, got {live_time}")
    if n_selected < 0:
        raise DomainError("negative event count")
    if n_selected == 0:
        return 0.0, 0.0, POISSON_UL90_ZERO / live_time
    return n_selected / live_time, math.sqrt(n_selected) / live_time, None


def live_time(n_traces, sampling_period, trace_length=1_000_000):
    """Seconds covered by ``n_traces`` accepted traces."""
    return n_traces * trace_length * sampling_period * 1e-6


def make_run_result(label, n_selected, n_traces, sampling_period, p_g=float("nan"),
                    thresholds=None, trace_length=1_000_000, acquisition_traces=None):
    lt = live_time(n_traces, sampling_period, trace_length)
    rate, err, ul = event_rate(n_selected, lt)
    acq = live_time(acquisition_traces, sampling_period, trace_length) if acquisition_traces else lt
    kw = {}
    if thresholds is not None:
        kw = dict(n_signal_min=thresholds.n_signal_min, n_control_min=thresholds.n_control_min,
                  n_control_max=thresholds.n_control_max)
    return RunResult(label, sampling_period, p_g, lt, int(n_selected), rate, err, ul,
                     n_traces, acq, **kw)


def weighted_linear_fit(points, fix_intercept_zero=False):
    """Minimise ``sum(((y - p0 - p1 x) / s)**2)`` over ``(x, y, s)`` points."""
    pts = np.asarray(list(points), dtype=float)
    if pts.ndim != 2 or pts.shape[1] != 3:
        raise DomainError("points must be (x, y, sigma) triples")
    need = 1 if fix_intercept_zero else 2
    if len(pts) < need:
        raise DomainError(f"need at least {need} points, got {len(pts)}")
    x, y, s = pts.T
    if np.any(~(s > 0)):
        raise DomainError("all sigma must be positive")
    w = 1.0 / s ** 2
    if fix_intercept_zero:
        sxx = np.sum(w * x * x)
        if sxx == 0:
            raise DegeneracyError("all x are zero")
        p1 = np.sum(w * x * y) / sxx
        p0, p0_err, p1_err, c01 = 0.0, 0.0, math.sqrt(1.0 / sxx), 0.0
    else:
        S, Sx, Sy = w.sum(), np.sum(w * x), np.sum(w * y)
        Sxx, Sxy = np.sum(w * x * x), np.sum(w * x * y)
        D = S * Sxx - Sx * Sx
        # D is S^2 times the weighted variance of x
        if D <= 1e-12 * S * Sxx or np.ptp(x) == 0:
            raise DegeneracyError("all x equal: slope and intercept not separable")
        p0 = (Sxx * Sy - Sx * Sxy) / D
        p1 = (S * Sxy - Sx * Sy) / D
        p0_err, p1_err, c01 = math.sqrt(Sxx / D), math.sqrt(S / D), -Sx / D
    r = (y - p0 - p1 * x) / s
    return FitResult(float(p1), float(p1_err), float(p0), float(p0_err), float(np.sum(r * r)),
                     len(pts) - need, fix_intercept_zero, float(x.min()), float(x.max()), float(c01))


def sampling_period_correction(rate, err, t_from, t_to, model: FitResult, check_range=True):
    """Rescale a rate measured at ``t_from`` to ``t_to`` using a rate-vs-T_S line."""
    if check_range and np.isfinite(model.x_min):
        tol = 1e-9 * max(1.0, abs(model.x_max))
        for t in (t_from, t_to):
            if not model.x_min - tol <= t <= model.x_max + tol:
                raise DomainError(f"T_S={t} us outside fitted range [{model.x_min}, {model.x_max}]")
    m_from = float(model(t_from))
    if m_from <= 0:
        raise DomainError(f"model rate at T_S={t_from} us is not positive")
    f = float(model(t_to)) / m_from
    return rate * f, err * f


def average_by_period(results):
    """Weighted mean rate per sampling period: list of ``(T_S, rate, err)``."""
    groups = defaultdict(list)
    for r in results:
        if r.rate_err > 0:
            groups[r.sampling_period].append((r.rate, r.rate_err))
    out = []
    for ts in sorted(groups):
        v = np.asarray(groups[ts])
        w = 1.0 / v[:, 1] ** 2
        out.append((ts, float(np.sum(w * v[:, 0]) / w.sum()), float(1.0 / math.sqrt(w.sum()))))
    return out


def rate_vs_period_fit(results):
    """Straight line through the per-period weighted averages."""
    return weighted_linear_fit(average_by_period(results))


def efficiency_fit(measured, expected, fix_intercept_zero=True):
    """Fit measured rates against expected ones; the slope is the efficiency.

    ``measured`` holds ``(rate, err)`` pairs, ``expected`` the matching
    expected rates. Weights come from the measured errors only.
    """
    if len(measured) != len(expected):
        raise DomainError("measured and expected lengths differ")
    pts = [(float(e), float(m[0]), float(m[1])) for m, e in zip(measured, expected)]
    return weighted_linear_fit(pts, fix_intercept_zero)


def effective_t1(bits, wait_time):
    """``-wait / ln(N_e / N_tot)`` from one binary trace (1 = excited)."""
    bits = np.asarray(getattr(bits, "bits", bits))
    n_tot = len(bits)
    n_e = int(np.count_nonzero(bits))
    if n_tot == 0 or n_e == 0:
        raise DomainError("no excited readouts: effective T1 undefined")
    if n_e == n_tot:
        raise DomainError("no decays observed: effective T1 undefined")
    return -wait_time / math.log(n_e / n_tot)


def mean_effective_t1(traces, wait_time):
    vals = [effective_t1(t, wait_time) for t in traces]
    if not vals:
        raise DomainError("no traces")
    return float(np.mean(vals))


def impact_probability(rate, window):
    """Chance of at least one impact in ``window`` seconds at ``rate`` per second."""
    if rate < 0 or window < 0:
        raise DomainError("rate and window must be non-negative")
    return -math.expm1(-rate * window)


def available_time(rate, p_max):
    """Longest window keeping the impact probability at or below ``p_max``.

    Returns ``math.inf`` when ``rate`` is zero.
    """
    if not 0.0 < p_max < 1.0:
        raise DomainError(f"p_max must be in (0, 1), got {p_max}")
    if rate < 0:
        raise DomainError("rate must be non-negative")
    if rate == 0:
        return math.inf
    return -math.log1p(-p_max) / rate


def efficiency_from_tables(runs: Sequence, source_rates: Sequence, reference_period=73.6):
    """Slope of the sampling-period-corrected source-run rates against expectation.

    ``runs`` are table rows with ``site``, ``sampling_period``, ``rate`` and
    ``rate_err``; the FNAL rows define the rate-vs-T_S model and the rows
    with a source ``activity`` are corrected to ``reference_period``.
    Returns ``(fit, correction_model, corrected)``.
    """
    fnal = [r for r in runs if r.site == "FNAL"]
    model = rate_vs_period_fit(fnal)
    src = sorted((r for r in runs if r.activity), key=lambda r: r.activity)
    corrected = [sampling_period_correction(r.rate, r.rate_err, r.sampling_period,
                                            reference_period, model) for r in src]
    exp = sorted(source_rates, key=lambda s: s.activity)
    if len(exp) != len(src):
        raise DomainError("source runs and expected rates do not pair up")
    return efficiency_fit(corrected, [e.rate for e in exp]), model, corrected
