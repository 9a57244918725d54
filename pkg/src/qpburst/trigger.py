"""Consecutive-zero trigger with fixed control/signal windows and dead time.

A trigger fires at the first zero ``t`` of a run of at least
``n_consecutive`` ground readouts (scanning left to right), provided the full
145-sample window ``[t - 110, t + 34]`` fits inside the trace and ``t`` lies
beyond the previous trigger's dead time. A run that starts inside the dead
time does not trigger, however long it lasts.
"""
from __future__ import annotations

import base64
import json
from dataclasses import dataclass, field, replace

import numpy as np

from ._accel import USE_NUMBA, njit
from .errors import ConfigError


@dataclass(frozen=True)
class TriggerConfig:
    n_consecutive: int = 4
    window_total: int = 145
    control_span: int = 105
    signal_pre: int = 5
    signal_post: int = 35
    dead_time: int = 35

    def __post_init__(self):
        if self.control_span + self.signal_pre + self.signal_post != self.window_total:
            raise ConfigError("control_span + signal_pre + signal_post must equal window_total")
        if self.n_consecutive < 2:
            raise ConfigError("n_consecutive must be at least 2")
        if self.dead_time < 0:
            raise ConfigError("dead_time must be non-negative")
        if self.n_consecutive > self.signal_post:
            raise ConfigError("trigger run must fit in the post-trigger signal samples")

    @property
    def signal_span(self):
        return self.signal_pre + self.signal_post

    @property
    def lead(self):
        """Samples of window before the trigger index."""
        return self.control_span + self.signal_pre


@dataclass
class TriggeredEvent:
    trace: int
    t: int
    n_control: int
    n_signal: int
    snapshot: np.ndarray = field(repr=False)
    disposition: str = "pending"
    reason: str = ""

    def control_window(self, cfg=TriggerConfig()):
        return (self.t - cfg.lead, self.t - cfg.signal_pre - 1)

    def signal_window(self, cfg=TriggerConfig()):
        return (self.t - cfg.signal_pre, self.t + cfg.signal_post - 1)

    def to_json(self):
        packed = np.packbits(np.asarray(self.snapshot, dtype=np.uint8), bitorder="little")
        disp = self.disposition if not self.reason else f"{self.disposition}:{self.reason}"
        return json.dumps({
            "trace": int(self.trace), "t": int(self.t),
            "n_control": int(self.n_control), "n_signal": int(self.n_signal),
            "snapshot": base64.b64encode(packed.tobytes()).decode("ascii"),
            "disposition": disp,
        })

    @classmethod
    def from_json(cls, line, window_total=145):
        d = json.loads(line)
        raw = np.frombuffer(base64.b64decode(d["snapshot"]), dtype=np.uint8)
        snap = np.unpackbits(raw, bitorder="little")[:window_total]
        disp, _, reason = d["disposition"].partition(":")
        return cls(d["trace"], d["t"], d["n_control"], d["n_signal"], snap, disp, reason)


@njit
def _scan_kernel(bits, n_cons, lead, sig_pre, sig_post, dead):
    n = bits.shape[0]
    cap = 64
    ts = np.empty(cap, dtype=np.int64)
    nc = np.empty(cap, dtype=np.int64)
    ns = np.empty(cap, dtype=np.int64)
    count = 0
    run = 0
    blocked_until = -1     # triggers need t > blocked_until
    last_t = n - sig_post  # full signal window: t + sig_post - 1 < n
    for i in range(n):
        if bits[i] == 0:
            run += 1
        else:
            run = 0
        # only the n-th zero of a run marks its start as a trigger candidate
        if run != n_cons:
            continue
        t = i - n_cons + 1
        if t > last_t:
            break
        if t < lead or t <= blocked_until:
            continue
        c = 0
        for j in range(t - lead, t - sig_pre):
            if bits[j] == 0:
                c += 1
        s = 0
        for j in range(t - sig_pre, t + sig_post):
            if bits[j] == 0:
                s += 1
        if count == cap:
            cap *= 2
            ts2 = np.empty(cap, dtype=np.int64)
            nc2 = np.empty(cap, dtype=np.int64)
            ns2 = np.empty(cap, dtype=np.int64)
            ts2[:count] = ts[:count]
            nc2[:count] = nc[:count]
            ns2[:count] = ns[:count]
            ts, nc, ns = ts2, nc2, ns2
        ts[count] = t
        nc[count] = c
        ns[count] = s
        count += 1
        blocked_until = t + dead
    return ts[:count], nc[:count], ns[:count]


def _scan_numpy(bits, n_cons, lead, sig_pre, sig_post, dead):
    n = len(bits)
    zero = (bits == 0).astype(np.int64)
    cs = np.zeros(n + 1, dtype=np.int64)
    np.cumsum(zero, out=cs[1:])
    lo, hi = lead, n - sig_post
    if hi < lo:
        empty = np.zeros(0, dtype=np.int64)
        return empty, empty, empty
    t_all = np.arange(lo, hi + 1)
    starts = (cs[t_all + n_cons] - cs[t_all] == n_cons) & (zero[t_all - 1] == 0)
    cand = t_all[starts]
    picked = []
    i = 0
    while i < len(cand):
        t = cand[i]
        picked.append(t)
        i = np.searchsorted(cand, t + dead, side="right")
    ts = np.asarray(picked, dtype=np.int64)
    nc = cs[ts - sig_pre] - cs[ts - lead]
    ns = cs[ts + sig_post] - cs[ts - sig_pre]
    return ts, nc, ns


def scan_arrays(bits, cfg: TriggerConfig = TriggerConfig(), backend=None):
    """Trigger indices and window zero counts as three int64 arrays."""
    backend = backend or ("numba" if USE_NUMBA else "numpy")
    bits = np.ascontiguousarray(bits, dtype=np.uint8)
    args = (bits, cfg.n_consecutive, cfg.lead, cfg.signal_pre, cfg.signal_post, cfg.dead_time)
    if backend == "numba":
        return _scan_kernel(*args)
    if backend == "numpy":
        return _scan_numpy(*args)
    raise ConfigError(f"unknown backend {backend!r}")


def scan_triggers(binary, cfg: TriggerConfig = TriggerConfig(), trace_index=None, backend=None):
    """Scan one binary trace and return its :class:`TriggeredEvent` list.

    ``binary`` is a :class:`~qpburst.discrimination.BinaryTrace` or a plain
    0/1 array.
    """
    bits = getattr(binary, "bits", binary)
    if trace_index is None:
        trace_index = getattr(binary, "trace_index", 0)
    bits = np.asarray(bits, dtype=np.uint8)
    ts, nc, ns = scan_arrays(bits, cfg, backend)
    return [TriggeredEvent(int(trace_index), int(t), int(c), int(s),
                           bits[t - cfg.lead:t + cfg.signal_post].copy())
            for t, c, s in zip(ts, nc, ns)]


def with_disposition(event, disposition, reason=""):
    return replace(event, disposition=disposition, reason=reason)


def write_events(path, events):
    with open(path, "w") as fh:
        for ev in events:
            fh.write(ev.to_json() + "\n")


def read_events(path, window_total=145):
    with open(path) as fh:
        return [TriggeredEvent.from_json(line, window_total) for line in fh if line.strip()]
