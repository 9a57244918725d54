import json

import mpmath
import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from qpburst.errors import DegeneracyError, DomainError, SaturationError
from qpburst.selection import (SelectionThresholds, binomial_log_tail, binomial_pmf, binomial_tail,
                               compute_control_bounds, compute_signal_threshold,
                               compute_thresholds, false_event_rate, select_events)
from qpburst.trigger import TriggerConfig, TriggeredEvent

# P(X >= 21), X ~ Bin(40, 0.15), enumerated at 50 digits
TAIL_40_015_21 = 3.5127206711646407216e-8


def _mp_tail(n, p, k):
    mpmath.mp.dps = 50
    pm = mpmath.mpf(p)
    return mpmath.fsum(mpmath.binomial(n, j) * pm ** j * (1 - pm) ** (n - j)
                       for j in range(k, n + 1))


def test_tail_examples():
    assert binomial_tail(40, 0.5, 0) == 1.0
    assert binomial_tail(2, 0.5, 2) == pytest.approx(0.25, rel=1e-14)
    assert binomial_tail(40, 0.15, 21) == pytest.approx(TAIL_40_015_21, rel=1e-12)


@settings(max_examples=200, deadline=None)
@given(n=st.integers(1, 200), p=st.floats(1e-4, 1 - 1e-4), frac=st.floats(0, 1))
def test_tail_matches_enumeration(n, p, frac):
    k = int(round(frac * n))
    ref = _mp_tail(n, p, k)
    # the log tail carries the precision even where the tail underflows
    assert abs(binomial_log_tail(n, p, k) - float(mpmath.log(ref))) <= 1e-6
    if ref > 1e-300:
        assert abs(binomial_tail(n, p, k) - ref) / ref <= 1e-6


def test_tail_edge_probabilities():
    assert binomial_tail(10, 0.0, 1) == 0.0
    assert binomial_tail(10, 1.0, 10) == 1.0
    assert binomial_pmf(10, 0.0, 0) == 1.0


@pytest.mark.parametrize("args", [(10, 0.5, 11), (10, 0.5, -1), (10, 1.5, 3)])
def test_tail_domain(args):
    with pytest.raises(DomainError):
        binomial_tail(*args)


def test_signal_threshold_examples():
    assert abs(compute_signal_threshold(0.118, 73.6) - 19) <= 1
    assert abs(compute_signal_threshold(0.145, 67.6) - 21) <= 1
    assert abs(compute_signal_threshold(0.176, 50.0) - 23) <= 1
    assert compute_signal_threshold(0.0, 73.6) == 4
    with pytest.raises(SaturationError):
        compute_signal_threshold(1.0, 73.6)


def test_signal_threshold_meets_target_minimally():
    for p in (0.12, 0.15, 0.18):
        n = compute_signal_threshold(p, 73.6)
        assert false_event_rate(n, p, 73.6) < 1e-4
        assert false_event_rate(n - 1, p, 73.6) >= 1e-4


def test_signal_threshold_monotonicity():
    grid = np.arange(0.10, 0.2001, 0.005)
    ns = [compute_signal_threshold(p, 73.6) for p in grid]
    assert np.all(np.diff(ns) >= 0)
    by_ts = [compute_signal_threshold(0.15, ts) for ts in (20, 40, 73.6, 150, 500)]
    assert np.all(np.diff(by_ts) <= 0)
    by_target = [compute_signal_threshold(0.15, 73.6, noise_rate_target=t)
                 for t in (1e-6, 1e-5, 1e-4, 1e-3)]
    assert np.all(np.diff(by_target) <= 0)


def test_conditioned_model_close():
    for p, ts in ((0.118, 73.6), (0.145, 67.6), (0.176, 50.0)):
        a = compute_signal_threshold(p, ts)
        b = compute_signal_threshold(p, ts, model="conditioned")
        assert abs(a - b) <= 2
    with pytest.raises(DomainError):
        compute_signal_threshold(0.15, 73.6, model="bayesian")


def test_control_bound_examples():
    lo, hi = compute_control_bounds(0.145)
    assert abs(lo - 8) <= 1 and abs(hi - 24) <= 1
    lo, hi = compute_control_bounds(0.118)
    assert abs(lo - 6) <= 1 and abs(hi - 21) <= 1
    with pytest.raises(DegeneracyError):
        compute_control_bounds(0.145, control_pmf_cut=1.0)
    with pytest.raises(DomainError):
        compute_control_bounds(0.0)


def test_control_bounds_are_pmf_cut():
    lo, hi = compute_control_bounds(0.15)
    pmf = [binomial_pmf(105, 0.15, k) for k in range(106)]
    inside = [k for k in range(106) if pmf[k] >= 0.01]
    assert inside == list(range(lo, hi + 1))


def _ev(n_signal, n_control, t=1000):
    return TriggeredEvent(0, t, n_control, n_signal, np.zeros(145, np.uint8))


def test_select_examples():
    thr = compute_thresholds(0.145, 67.6)
    events = [_ev(40, 15, 1000), _ev(40, 90, 2000), _ev(thr.n_signal_min - 1, 15, 3000),
              _ev(thr.n_signal_min, thr.n_control_max, 4000)]
    acc, stats = select_events(events, thr)
    assert [e.t for e in acc] == [1000, 4000]
    assert stats == {"accepted": 2, "low-signal": 1, "control-noise": 1}
    # the input events are left untouched
    assert all(e.disposition == "pending" for e in events)


def test_selection_is_pure():
    rng = np.random.default_rng(0)
    thr = compute_thresholds(0.15, 73.6)
    events = [_ev(int(s), int(c)) for s, c in zip(rng.integers(4, 41, 500),
                                                  rng.integers(0, 106, 500))]
    a = select_events(events, thr)
    b = select_events(events, thr)
    assert [e.t for e in a[0]] == [e.t for e in b[0]] and a[1] == b[1]
    assert sum(a[1].values()) == 500


def test_threshold_report_round_trip():
    thr = compute_thresholds(0.15, 73.6, TriggerConfig())
    d = json.loads(thr.to_json())
    assert d["n_signal_min"] == thr.n_signal_min and d["model"] == "unconditioned"
    assert d["achieved_noise_rate"] < d["noise_rate_target"]
    assert SelectionThresholds.from_json(thr.to_json()) == thr
    assert 4 <= thr.n_signal_min <= 40
    assert 0 <= thr.n_control_min <= thr.n_control_max <= 105
