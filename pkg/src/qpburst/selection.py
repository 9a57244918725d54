"""Binomial selection of triggered events.

Signal cut: the smallest zero count ``n`` whose decay-only false-event rate
stays below the noise target. Control cut: keep the control counts whose
binomial probability is at least ``control_pmf_cut``.
"""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass

import numpy as np

from .errors import DegeneracyError, DomainError, SaturationError
from .trigger import TriggerConfig, with_disposition

NOISE_RATE_TARGET = 1e-4
CONTROL_PMF_CUT = 0.01


def _log_pmf_terms(n, p, ks):
    ks = np.asarray(ks, dtype=np.float64)
    lg = np.vectorize(math.lgamma)
    logc = math.lgamma(n + 1) - lg(ks + 1) - lg(n - ks + 1)
    return logc + ks * math.log(p) + (n - ks) * math.log1p(-p)


def _check(n, p, k):
    if not 0.0 <= p <= 1.0:
        raise DomainError(f"p must be in [0, 1], got {p}")
    if not (0 <= k <= n):
        raise DomainError(f"k={k} outside [0, {n}]")


def binomial_log_tail(n, p, k):
    """``log P(X >= k)`` for ``X ~ Binomial(n, p)``, summed in log space."""
    _check(n, p, k)
    if k == 0:
        return 0.0
    if p == 0.0:
        return -math.inf
    if p == 1.0:
        return 0.0
    terms = _log_pmf_terms(n, p, np.arange(k, n + 1))
    m = terms.max()
    return float(m + math.log(np.exp(terms - m).sum()))


def binomial_tail(n, p, k):
    """``P(X >= k)`` for ``X ~ Binomial(n, p)``."""
    return math.exp(binomial_log_tail(n, p, k))


def binomial_pmf(n, p, k):
    _check(n, p, k)
    if p in (0.0, 1.0):
        return float(k == (0 if p == 0.0 else n))
    return math.exp(float(_log_pmf_terms(n, p, [k])[0]))


def false_event_rate(n_min, p_g, sampling_period, trigger=TriggerConfig(), model="unconditioned"):
    """Decay-only accepted-event rate [1/s] for a signal cut of ``n_min`` zeros.

    ``unconditioned``: every cycle opens a signal window, rate
    ``P(X >= n_min) / T_S`` with ``X ~ Bin(signal_span, P(g))``.
    ``conditioned``: trigger rate ``P(g)^k / T_S`` times the chance the
    remaining ``signal_span - k`` samples supply the other ``n_min - k`` zeros.
    """
    ts = sampling_period * 1e-6
    span = trigger.signal_span
    if model == "unconditioned":
        return binomial_tail(span, p_g, n_min) / ts
    if model == "conditioned":
        k = trigger.n_consecutive
        rest = max(0, n_min - k)
        return p_g ** k * binomial_tail(span - k, p_g, rest) / ts
    raise DomainError(f"unknown noise model {model!r}")


def compute_signal_threshold(p_g, sampling_period, trigger=TriggerConfig(),
                             noise_rate_target=NOISE_RATE_TARGET, model="unconditioned"):
    """Minimum signal-window zero count meeting the noise target."""
    if not 0.0 <= p_g <= 1.0:
        raise DomainError(f"P(g) must be in [0, 1], got {p_g}")
    if not sampling_period > 0:
        raise DomainError("sampling period must be positive")
    floor = trigger.n_consecutive
    if p_g == 0.0:
        return floor
    for n in range(floor, trigger.signal_span + 1):
        if false_event_rate(n, p_g, sampling_period, trigger, model) < noise_rate_target:
            return n
    raise SaturationError(
        f"no signal threshold reaches {noise_rate_target:g}/s at P(g)={p_g}, T_S={sampling_period} us")


def compute_control_bounds(p_g, trigger=TriggerConfig(), control_pmf_cut=CONTROL_PMF_CUT):
    """Interval of control-window zero counts with PMF >= ``control_pmf_cut``."""
    if not 0.0 < p_g < 1.0:
        raise DomainError(f"P(g) must be in (0, 1), got {p_g}")
    n = trigger.control_span
    logp = _log_pmf_terms(n, p_g, np.arange(n + 1))
    ok = np.flatnonzero(logp >= math.log(control_pmf_cut)) if control_pmf_cut > 0 else np.arange(n + 1)
    if len(ok) == 0:
        raise DegeneracyError(f"control cut {control_pmf_cut} accepts no zero count at P(g)={p_g}")
    # binomial PMF is unimodal, so the accepted set is one interval
    return int(ok[0]), int(ok[-1])


@dataclass(frozen=True)
class SelectionThresholds:
    n_signal_min: int
    n_control_min: int
    n_control_max: int
    p_g: float
    sampling_period: float
    signal_span: int = 40
    control_span: int = 105
    noise_rate_target: float = NOISE_RATE_TARGET
    control_pmf_cut: float = CONTROL_PMF_CUT
    model: str = "unconditioned"
    achieved_noise_rate: float = float("nan")

    def to_json(self):
        return json.dumps(asdict(self), indent=2)

    @classmethod
    def from_json(cls, text):
        return cls(**json.loads(text))


def compute_thresholds(p_g, sampling_period, trigger=TriggerConfig(),
                       noise_rate_target=NOISE_RATE_TARGET, control_pmf_cut=CONTROL_PMF_CUT,
                       model="unconditioned"):
    n_min = compute_signal_threshold(p_g, sampling_period, trigger, noise_rate_target, model)
    lo, hi = compute_control_bounds(p_g, trigger, control_pmf_cut)
    achieved = false_event_rate(n_min, p_g, sampling_period, trigger, model) if p_g > 0 else 0.0
    return SelectionThresholds(n_min, lo, hi, p_g, sampling_period, trigger.signal_span,
                               trigger.control_span, noise_rate_target, control_pmf_cut,
                               model, achieved)


def classify(n_signal, n_control, thr: SelectionThresholds):
    """Return ``""`` for an accepted event, else the rejection reason."""
    if not thr.n_control_min <= n_control <= thr.n_control_max:
        return "control-noise"
    if n_signal < thr.n_signal_min:
        return "low-signal"
    return ""


def dispose(events, thr: SelectionThresholds):
    """Copies of ``events`` with accepted/rejected dispositions filled in."""
    out = []
    for ev in events:
        reason = classify(ev.n_signal, ev.n_control, thr)
        out.append(with_disposition(ev, "rejected", reason) if reason
                   else with_disposition(ev, "accepted"))
    return out


def select_events(events, thr: SelectionThresholds):
    """Apply the cuts; returns ``(accepted, stats)`` and never mutates input.

    ``stats`` counts ``accepted``, ``low-signal`` and ``control-noise``.
    """
    stats = {"accepted": 0, "low-signal": 0, "control-noise": 0}
    accepted = []
    for ev in dispose(events, thr):
        if ev.disposition == "accepted":
            accepted.append(ev)
            stats["accepted"] += 1
        else:
            stats[ev.reason] += 1
    return accepted, stats
