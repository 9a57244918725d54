"""Stochastic simulation of the fast decay detection protocol.

A run is cut into fixed-length traces. Each trace draws from its own
counter-based substream keyed by ``(seed, trace_index)`` and starts with the
qubit in the ground state, so traces can be generated in any order or in
parallel with identical results.

Per cycle: conditional reset to ``e`` after a ground readout, decay during the
wait with the (burst-enhanced) relaxation rate, optional leakage to ``f``,
then readout. The hot state machine exists twice: a numba kernel that walks
the cycles, and a numpy path that composes the per-cycle state maps with a
parallel prefix scan. Both consume the same draws and return identical arrays.
"""
from __future__ import annotations

import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Optional

import numpy as np

from . import rng
from .rng import SLOT_DECAY, SLOT_LEAK, SLOT_READOUT, SLOT_RESET, uniform
from ._accel import USE_NUMBA, njit
from .errors import ConfigError
from .protocol import (ProtocolConfig, QubitModel,
                       RadiationEnvironment, TruthLog)

TRACE_LENGTH = 1_000_000
_PURPOSE_IMPACTS = 1
# burst tails are followed for this many recovery times
_TAIL_TAUS = 25.0


@dataclass
class TraceSim:
    """Output of one simulated trace."""

    trace_index: int
    start_cycle: int
    bits: np.ndarray            # measured outcome, uint8, 0 = ground
    states: np.ndarray          # true post-decay state, uint8 (0 g, 1 e, 2 f)
    iq: Optional[np.ndarray]    # (n, 2) float32 records in iq mode
    truth: TruthLog


@dataclass
class RunSimulation:
    sampling_period: float
    traces: list
    truth: TruthLog

    @property
    def bits(self):
        return np.concatenate([t.bits for t in self.traces])

    @property
    def iq(self):
        return np.concatenate([t.iq for t in self.traces])

    @property
    def states(self):
        return np.concatenate([t.states for t in self.traces])


def default_workers():
    try:
        return max(1, int(os.environ.get("QPBURST_WORKERS", "1")))
    except ValueError:
        raise ConfigError("QPBURST_WORKERS must be an integer") from None


# ---------------------------------------------------------------- impacts

def _trace_impacts(env: RadiationEnvironment, seed, trace_index, t_start, duration):
    """Impact times [s] and burst shapes for one trace's time window."""
    if env.impact_rate == 0.0 or trace_index < 0:
        return np.zeros(0), np.zeros(0)
    g = rng.generator(seed, trace_index, _PURPOSE_IMPACTS)
    n = g.poisson(env.impact_rate * duration)
    times = t_start + np.sort(g.uniform(0.0, duration, n))
    if env.duration_spread == "exponential":
        tau = env.recovery_time * g.exponential(1.0, n)
    else:
        tau = np.full(n, env.recovery_time)
    return times, tau


def decay_probabilities(protocol: ProtocolConfig, qubit: QubitModel, start_cycle, n,
                        impact_times, added_rate, taus):
    """Per-cycle probability that an excited qubit decays during the wait.

    The burst rate is integrated exactly over each wait window
    ``[t + pulse, t + pulse + wait]`` of cycle ``t``.
    """
    ts = protocol.sampling_period
    dt = protocol.wait_time
    base = dt / qubit.baseline_t1
    exponent = np.full(n, base)
    for t0_s, gam, tau in zip(impact_times, added_rate, taus):
        if gam <= 0.0:
            continue
        t0 = t0_s * 1e6
        first = max(0, int(math.floor((t0 - protocol.pi_pulse_duration - dt) / ts)) - start_cycle)
        last = min(n, int(math.ceil((t0 + _TAIL_TAUS * tau) / ts)) - start_cycle + 1)
        if first >= last:
            continue
        a = (np.arange(first, last) + start_cycle) * ts + protocol.pi_pulse_duration
        b = a + dt
        lo = np.maximum(a, t0) - t0
        hi = b - t0
        ok = hi > 0
        contrib = np.where(ok, gam * tau * (np.exp(-lo / tau) - np.exp(-np.maximum(hi, 0) / tau)), 0.0)
        exponent[first:last] += contrib
    return -np.expm1(-exponent)


def _truth_for(protocol, qubit, times, gam, taus, keep):
    ts = protocol.sampling_period
    t0_us = times * 1e6
    with np.errstate(divide="ignore"):
        span = np.where(gam * qubit.baseline_t1 > 1.0,
                        taus * np.log(np.maximum(gam * qubit.baseline_t1, 1.0)), 0.0)
    first = np.floor(t0_us / ts).astype(np.int64)
    last = np.maximum(first, np.floor((t0_us + span) / ts).astype(np.int64))
    return TruthLog(times[keep], gam[keep], taus[keep], first[keep], last[keep])


# ---------------------------------------------------------------- kernels

@njit
def _cycle_kernel(key, p_decay, meas0_if, use_table, misid_ge, misid_eg, reset_fid,
                  ideal, leak_p, dwell, states, bits):
    n = p_decay.shape[0]
    post = 0          # true post-readout state of the previous cycle
    prev_meas = 0     # first cycle always sees a ground readout -> reset
    leak_left = 0
    for i in range(n):
        if leak_left == 0 and leak_p > 0.0 and uniform(key, i, SLOT_LEAK) < leak_p:
            leak_left = dwell
        if leak_left > 0:
            leak_left -= 1
            s = 2
        else:
            s = 0 if post == 2 else post
            if reset_fid > 0.0:
                u = uniform(key, i, SLOT_RESET)
                if ideal:
                    if s == 0 and u < reset_fid:
                        s = 1
                elif prev_meas == 0 and u < reset_fid:
                    s = 1
            if s == 1 and uniform(key, i, SLOT_DECAY) < p_decay[i]:
                s = 0
        if use_table:
            m = 0 if meas0_if[s, i] else 1
        else:
            u = uniform(key, i, SLOT_READOUT)
            if s == 0:
                m = 1 if u < misid_ge else 0
            else:
                m = 0 if u < misid_eg else 1
        states[i] = s
        bits[i] = m
        post = s
        prev_meas = m


def _leak_mask(key, n, leak_p, dwell):
    """Cycles spent in ``f``: greedy episodes of ``dwell`` cycles."""
    mask = np.zeros(n, dtype=bool)
    if leak_p <= 0.0:
        return mask
    u = rng.uniform_array(key, np.arange(n, dtype=np.uint64), rng.SLOT_LEAK)
    cand = np.flatnonzero(u < leak_p)
    i = 0
    while i < len(cand):
        s = cand[i]
        mask[s:s + dwell] = True
        i = np.searchsorted(cand, s + dwell, side="left")
    return mask


def _compose_scan(maps):
    """Inclusive prefix composition of per-cycle maps on {g, e, f}.

    ``maps[i, x]`` is the next state given previous state ``x``; returns
    ``P[i] = maps[i] o ... o maps[0]``.
    """
    P = maps.copy()
    n = len(P)
    d = 1
    while d < n:
        # P[i] <- P[i] o P[i-d] for i >= d
        prev = P[:-d]
        cur = P[d:]
        P[d:] = np.take_along_axis(cur, prev, axis=1)
        d *= 2
    return P


def _cycle_numpy(key, p_decay, meas0_if, use_table, misid_ge, misid_eg, reset_fid,
                 ideal, leak_p, dwell):
    n = p_decay.shape[0]
    cnt = np.arange(n, dtype=np.uint64)
    leak = _leak_mask(key, n, leak_p, dwell)
    u_dec = rng.uniform_array(key, cnt, rng.SLOT_DECAY)
    decays = u_dec < p_decay
    if reset_fid > 0.0:
        pulse_ok = rng.uniform_array(key, cnt, rng.SLOT_RESET) < reset_fid
    else:
        pulse_ok = np.zeros(n, dtype=bool)
    if use_table:
        m0 = np.asarray(meas0_if, dtype=bool)           # (3, n)
    else:
        u = rng.uniform_array(key, cnt, rng.SLOT_READOUT)
        m0 = np.empty((3, n), dtype=bool)
        m0[0] = u >= misid_ge
        m0[1] = u < misid_eg
        m0[2] = m0[1]

    # maps[i, x]: post state of cycle i given post state x of cycle i-1
    maps = np.empty((n, 3), dtype=np.int8)
    for x in range(3):
        s = np.full(n, 0 if x == 2 else x, dtype=np.int8)
        prev_meas0 = np.ones(n, dtype=bool)
        prev_meas0[1:] = m0[x, :-1]
        if ideal:
            s = np.where((s == 0) & pulse_ok, 1, s).astype(np.int8)
        else:
            s = np.where(prev_meas0 & pulse_ok, 1, s).astype(np.int8)
        s = np.where((s == 1) & decays, 0, s).astype(np.int8)
        s[leak] = 2
        maps[:, x] = s
    # cycle 0 sees post=g with a ground readout, whatever the table says
    s0 = 0
    if pulse_ok[0]:
        s0 = 1
    if s0 == 1 and decays[0]:
        s0 = 0
    if leak[0]:
        s0 = 2
    maps[0, :] = s0
    states = _compose_scan(maps)[:, 0].astype(np.uint8)
    meas0 = m0[states, np.arange(n)]
    bits = (~meas0).astype(np.uint8)
    return states, bits


def run_cycles(key, p_decay, qubit: QubitModel, meas0_if=None, backend=None):
    """Walk the per-cycle state machine; returns ``(states, bits)``."""
    backend = backend or ("numba" if USE_NUMBA else "numpy")
    use_table = meas0_if is not None
    table = meas0_if if use_table else np.zeros((3, 1), dtype=np.bool_)
    args = (np.uint64(key), np.ascontiguousarray(p_decay, dtype=np.float64), table, use_table,
            float(qubit.misid_g_to_e), float(qubit.misid_e_to_g), float(qubit.reset_fidelity),
            qubit.feedback == "ideal", float(qubit.leakage_prob_f), int(qubit.leakage_dwell))
    if backend == "numba":
        n = len(p_decay)
        states = np.empty(n, dtype=np.uint8)
        bits = np.empty(n, dtype=np.uint8)
        _cycle_kernel(*args, states, bits)
        return states, bits
    if backend == "numpy":
        return _cycle_numpy(*args)
    raise ConfigError(f"unknown backend {backend!r}")


# ---------------------------------------------------------------- traces

def _iq_tables(qubit: QubitModel, key, n):
    """Noise draws and the readout decision for each possible true state."""
    geo = qubit.geometry_array()
    za, zb = rng.normal_pairs(key, 0, n)
    g, e = geo[0, :2], geo[1, :2]
    d = e - g
    mid = 0.5 * (g + e)
    meas0 = np.empty((3, n), dtype=bool)
    samples = []
    for s in range(3):
        i_val = geo[s, 0] + geo[s, 2] * za
        q_val = geo[s, 1] + geo[s, 3] * zb
        meas0[s] = (i_val - mid[0]) * d[0] + (q_val - mid[1]) * d[1] < 0.0
        samples.append((i_val, q_val))
    return meas0, samples


def simulate_trace(protocol: ProtocolConfig, qubit: QubitModel, env: RadiationEnvironment,
                   trace_index, n_cycles=TRACE_LENGTH, seed=0, mode="binary",
                   trace_length=None, backend=None):
    """Simulate the ``trace_index``-th trace of a run.

    ``trace_length`` fixes the run-global cycle offset of the trace
    (defaults to ``n_cycles``).
    """
    if n_cycles < 1:
        raise ConfigError("n_cycles must be at least 1")
    if mode not in ("binary", "iq"):
        raise ConfigError(f"unknown mode {mode!r}")
    if mode == "iq" and qubit.leakage_prob_f > 0 and "f" not in qubit.cluster_geometry:
        raise ConfigError("f leakage enabled but no f cluster geometry configured")
    trace_length = trace_length or n_cycles
    ts = protocol.sampling_period
    start = trace_index * trace_length
    t_start = start * ts * 1e-6
    dur = trace_length * ts * 1e-6

    times, taus = _trace_impacts(env, seed, trace_index, t_start, dur)
    times = times[times < t_start + n_cycles * ts * 1e-6]
    taus = taus[:len(times)]
    # tails of the previous trace's impacts reach into this one
    ptimes, ptaus = _trace_impacts(env, seed, trace_index - 1, t_start - dur, dur)
    all_t = np.concatenate([ptimes, times])
    all_tau = np.concatenate([ptaus, taus])
    gam = np.full(len(all_t), env.burst_added_rate)
    p = decay_probabilities(protocol, qubit, start, n_cycles, all_t, gam, all_tau)

    key = rng.stream_key(seed, trace_index)
    iq = None
    if mode == "iq":
        meas0, samples = _iq_tables(qubit, key, n_cycles)
        states, bits = run_cycles(key, p, qubit, meas0, backend)
        iq = np.empty((n_cycles, 2), dtype=np.float32)
        for s in range(3):
            sel = states == s
            iq[sel, 0] = samples[s][0][sel]
            iq[sel, 1] = samples[s][1][sel]
    else:
        states, bits = run_cycles(key, p, qubit, None, backend)
    own = np.zeros(len(all_t), dtype=bool)
    own[len(ptimes):] = True
    truth = _truth_for(protocol, qubit, all_t, gam, all_tau, own)
    return TraceSim(trace_index, start, bits, states, iq, truth)


def iter_traces(protocol, qubit, env, n_cycles, seed=0, mode="binary",
                trace_length=TRACE_LENGTH, backend=None, workers=None):
    """Yield the traces of a run in order; generation may run in parallel."""
    n_traces = -(-n_cycles // trace_length)
    sizes = [min(trace_length, n_cycles - k * trace_length) for k in range(n_traces)]

    def one(k):
        return simulate_trace(protocol, qubit, env, k, sizes[k], seed, mode,
                              trace_length, backend)

    workers = workers or default_workers()
    if workers == 1:
        for k in range(n_traces):
            yield one(k)
        return
    with ThreadPoolExecutor(workers) as pool:
        # bounded look-ahead keeps memory per worker constant
        pending = {}
        nxt = 0
        for k in range(n_traces):
            while nxt < n_traces and len(pending) < 2 * workers:
                pending[nxt] = pool.submit(one, nxt)
                nxt += 1
            yield pending.pop(k).result()


def simulate_run(protocol: ProtocolConfig, qubit: QubitModel, env: RadiationEnvironment,
                 n_cycles, seed=0, mode="binary", trace_length=TRACE_LENGTH, backend=None,
                 workers=None) -> RunSimulation:
    """Simulate ``n_cycles`` cycles and keep every trace in memory."""
    if n_cycles < 1:
        raise ConfigError("n_cycles must be at least 1")
    traces = list(iter_traces(protocol, qubit, env, n_cycles, seed, mode, trace_length,
                              backend, workers))
    return RunSimulation(protocol.sampling_period, traces,
                         TruthLog.concatenate(t.truth for t in traces))
