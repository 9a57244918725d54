"""Staged simulate -> discriminate -> trigger -> select -> analyze -> budget flow.

Every stage reads and writes plain files in a run directory, so stages can be
run one at a time or chained by :func:`run_pipeline`:

    run.json           run metadata (label, T_S, trace length, trace count)
    truth.csv          injected impacts (simulated runs)
    iq.qrt             I/Q records (iq simulations)
    binary.qrt         binary readouts
    clusters.jsonl     per-trace cluster fits and quality flags
    events.jsonl       triggered events with their dispositions
    trace_stats.csv    per-trace record and zero counts, quality flag
    thresholds.json    selection thresholds and rejection counts
    results.csv        one row per run
    rate_vs_period.csv, efficiency.csv   plot data
    budget.csv         expected impact rates
    manifest.json      config hash, seed, stage versions, timing, status
"""
from __future__ import annotations

import csv
import json
import logging
import math
import os
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Iterable

import numpy as np

from . import __version__
from ._accel import backend as active_backend
from .budget import budget_csv, builtin_sources, load_sources, total_budget
from .config import RunConfig
from .discrimination import discriminate_trace, Trace
from .errors import ConfigError, DomainError, FormatError, StageError
from .protocol import TruthLog
from .rates import (RunResult, average_by_period, event_rate, make_run_result,
                    weighted_linear_fit)
from .selection import SelectionThresholds, classify, compute_thresholds
from .simulate import default_workers, iter_traces
from .trigger import TriggerConfig, TriggeredEvent, read_events, scan_arrays, write_events
from .traceio import ENC_BITS, ENC_IQ, TraceWriter, open_trace, read_trace

log = logging.getLogger(__name__)

STAGE_VERSIONS = {"simulate": 1, "discriminate": 1, "trigger": 1, "select": 1,
                  "analyze": 1, "budget": 1}

RUN_META = "run.json"
TRUTH = "truth.csv"
IQ_FILE = "iq.qrt"
BINARY_FILE = "binary.qrt"
CLUSTERS = "clusters.jsonl"
EVENTS = "events.jsonl"
TRACE_STATS = "trace_stats.csv"
THRESHOLDS = "thresholds.json"
RESULTS = "results.csv"
RATE_VS_PERIOD = "rate_vs_period.csv"
EFFICIENCY = "efficiency.csv"
BUDGET = "budget.csv"
MANIFEST = "manifest.json"


# ---------------------------------------------------------------- streaming core

@dataclass
class ScanSummary:
    """Trigger counts of a run without per-event snapshots."""

    sampling_period: float
    trace_length: int
    n_traces: int = 0            # accepted traces
    n_rejected: int = 0
    n_records: int = 0
    n_zeros: int = 0
    trace: np.ndarray = field(default_factory=lambda: np.zeros(0, np.int64))
    t: np.ndarray = field(default_factory=lambda: np.zeros(0, np.int64))
    n_control: np.ndarray = field(default_factory=lambda: np.zeros(0, np.int64))
    n_signal: np.ndarray = field(default_factory=lambda: np.zeros(0, np.int64))

    @property
    def p_g(self):
        return self.n_zeros / self.n_records if self.n_records else float("nan")

    @property
    def live_time(self):
        return self.n_traces * self.trace_length * self.sampling_period * 1e-6


def scan_traces(traces: Iterable, sampling_period, trace_length, trigger=TriggerConfig(),
                backend=None) -> ScanSummary:
    """Trigger-scan a stream of traces (objects with ``bits``, ``trace_index``
    and optionally ``quality``), keeping only window counts."""
    s = ScanSummary(sampling_period, trace_length)
    parts = []
    for tr in traces:
        if not getattr(tr, "quality", True):
            s.n_rejected += 1
            continue
        bits = tr.bits
        s.n_traces += 1
        s.n_records += len(bits)
        s.n_zeros += int(len(bits) - np.count_nonzero(bits))
        ts, nc, ns = scan_arrays(bits, trigger, backend)
        parts.append((np.full(len(ts), tr.trace_index, np.int64), ts, nc, ns))
    if parts:
        s.trace, s.t, s.n_control, s.n_signal = (np.concatenate(c) for c in zip(*parts))
    return s


def accepted_mask(summary: ScanSummary, thr: SelectionThresholds):
    return ((summary.n_signal >= thr.n_signal_min)
            & (summary.n_control >= thr.n_control_min)
            & (summary.n_control <= thr.n_control_max))


def thresholds_for(p_g, sampling_period, trigger, selection):
    """Thresholds from the measured ``p_g`` unless the config pins one."""
    p = selection.p_g if selection.p_g is not None else p_g
    return compute_thresholds(p, sampling_period, trigger, selection.noise_rate_target,
                              selection.control_pmf_cut, selection.model)


@dataclass
class SimulatedRun:
    result: RunResult
    summary: ScanSummary
    thresholds: SelectionThresholds
    truth: TruthLog
    accepted: np.ndarray

    @property
    def injected_rate(self):
        dur = self.summary.n_records * self.summary.sampling_period * 1e-6
        return len(self.truth) / dur if dur else float("nan")

    @property
    def efficiency(self):
        return self.result.rate / self.injected_rate if self.injected_rate else float("nan")


def simulate_and_select(protocol, qubit, env, n_cycles, seed=0, trigger=TriggerConfig(),
                        selection=None, thresholds=None, trace_length=1_000_000,
                        label="sim", backend=None, workers=None) -> SimulatedRun:
    """Binary-mode simulation scanned on the fly; memory stays per-trace.

    Thresholds come from the run's own P(g) unless ``thresholds`` is given.
    """
    from .config import SelectionOptions
    selection = selection or SelectionOptions()
    truths = []

    def stream():
        for tr in iter_traces(protocol, qubit, env, n_cycles, seed, "binary", trace_length,
                              backend, workers):
            truths.append(tr.truth)
            yield tr

    summary = scan_traces(stream(), protocol.sampling_period, trace_length, trigger, backend)
    thr = thresholds or thresholds_for(summary.p_g, protocol.sampling_period, trigger, selection)
    acc = accepted_mask(summary, thr)
    # a partial final trace still counts toward live time here
    live = summary.n_records * protocol.sampling_period * 1e-6
    n_sel = int(acc.sum())
    rate, err, ul = event_rate(n_sel, live)
    res = RunResult(label, protocol.sampling_period, summary.p_g, live, n_sel, rate, err, ul,
                    summary.n_traces, live, thr.n_signal_min, thr.n_control_min, thr.n_control_max)
    return SimulatedRun(res, summary, thr, TruthLog.concatenate(truths), acc)


# ---------------------------------------------------------------- file helpers

def _write_json(path, obj):
    with open(path, "w") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _read_json(path):
    try:
        with open(path) as fh:
            return json.load(fh)
    except FileNotFoundError:
        raise ConfigError(f"missing artifact {path}") from None


def _write_csv(path, header, rows):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)


def _read_csv(path):
    try:
        with open(path, newline="") as fh:
            return list(csv.DictReader(fh))
    except FileNotFoundError:
        raise ConfigError(f"missing artifact {path}") from None


def _map(fn, items, workers):
    """Ordered map, threaded when more than one worker is configured."""
    if workers <= 1:
        yield from map(fn, items)
        return
    with ThreadPoolExecutor(workers) as pool:
        yield from pool.map(fn, items)


def write_truth(path, truth: TruthLog):
    _write_csv(path, ["time_s", "added_rate", "recovery_us", "first_cycle", "last_cycle"],
               [[f"{t:.9f}", f"{g:.6g}", f"{r:.6f}", int(a), int(b)]
                for t, g, r, a, b in zip(truth.times, truth.added_rate, truth.recovery,
                                         truth.first_cycle, truth.last_cycle)])


def read_truth(path):
    rows = _read_csv(path)
    if not rows:
        return TruthLog()
    return TruthLog(np.array([float(r["time_s"]) for r in rows]),
                    np.array([float(r["added_rate"]) for r in rows]),
                    np.array([float(r["recovery_us"]) for r in rows]),
                    np.array([int(r["first_cycle"]) for r in rows], np.int64),
                    np.array([int(r["last_cycle"]) for r in rows], np.int64))


# ---------------------------------------------------------------- stages

def stage_simulate(cfg: RunConfig, out_dir, workers=None):
    os.makedirs(out_dir, exist_ok=True)
    ro = cfg.run
    n_traces = ro.n_traces
    n = n_traces * ro.trace_length
    ts = cfg.protocol.sampling_period
    fname = IQ_FILE if ro.sim_mode == "iq" else BINARY_FILE
    enc = ENC_IQ if ro.sim_mode == "iq" else ENC_BITS
    truths = []
    with TraceWriter(os.path.join(out_dir, fname), ts, enc, n) as w:
        for tr in iter_traces(cfg.protocol, cfg.qubit, cfg.environment, n, cfg.seed,
                              ro.sim_mode, ro.trace_length, workers=workers):
            w.write(tr.iq if ro.sim_mode == "iq" else tr.bits)
            truths.append(tr.truth)
    truth = TruthLog.concatenate(truths)
    write_truth(os.path.join(out_dir, TRUTH), truth)
    meta = {"label": cfg.label, "sampling_period": ts, "trace_length": ro.trace_length,
            "n_traces": n_traces, "seed": cfg.seed, "source": "simulation",
            "impact_rate": cfg.environment.impact_rate, "n_impacts": len(truth)}
    _write_json(os.path.join(out_dir, RUN_META), meta)
    return [fname, TRUTH, RUN_META]


def _meta(run_dir, sampling_period=None, trace_length=None, label=None):
    path = os.path.join(run_dir, RUN_META)
    meta = _read_json(path) if os.path.exists(path) else {}
    if sampling_period is not None:
        meta["sampling_period"] = sampling_period
    if trace_length is not None:
        meta["trace_length"] = trace_length
    if label is not None:
        meta["label"] = label
    meta.setdefault("label", os.path.basename(os.path.abspath(run_dir)))
    meta.setdefault("trace_length", 1_000_000)
    return meta


def stage_discriminate(in_path, out_dir, n_states=3, max_leak=0.01, reference=None,
                       trace_length=None, label=None, workers=None):
    """Fit, screen and binarize every full trace of an I/Q trace file."""
    os.makedirs(out_dir, exist_ok=True)
    src_dir = os.path.dirname(os.path.abspath(in_path))
    meta = _meta(src_dir, trace_length=trace_length, label=label)
    tf = open_trace(in_path)
    if tf.encoding != ENC_IQ:
        raise FormatError(f"{in_path} holds binary states, expected I/Q records", 20)
    L = int(meta["trace_length"])
    n_traces = tf.count // L
    if n_traces == 0:
        raise ConfigError(f"{in_path} holds fewer than one full trace of {L} records")

    def one(k):
        trace = Trace(np.asarray(tf.data[k * L:(k + 1) * L]), k, tf.sampling_period)
        return discriminate_trace(trace, n_states, max_leak, reference)

    workers = workers or default_workers()
    with TraceWriter(os.path.join(out_dir, BINARY_FILE), tf.sampling_period, ENC_BITS,
                     n_traces * L) as w, open(os.path.join(out_dir, CLUSTERS), "w") as fh:
        for b in _map(one, range(n_traces), workers):
            w.write(b.bits)
            rec = json.loads(b.model.summary(b.trace_index))
            rec["quality"] = bool(b.quality)
            rec["p_g"] = b.p_g
            fh.write(json.dumps(rec, sort_keys=True) + "\n")
    meta.update(sampling_period=tf.sampling_period, n_traces=n_traces)
    _write_json(os.path.join(out_dir, RUN_META), meta)
    return [BINARY_FILE, CLUSTERS, RUN_META]


class _BinTrace:
    __slots__ = ("bits", "trace_index", "quality")

    def __init__(self, bits, k, quality):
        self.bits, self.trace_index, self.quality = bits, k, quality


def _load_quality(run_dir):
    path = os.path.join(run_dir, CLUSTERS)
    if not os.path.exists(path):
        return {}
    with open(path) as fh:
        return {int(r["trace"]): bool(r["quality"]) for r in map(json.loads, fh) if r}


def stage_trigger(in_path, out_dir, trigger=TriggerConfig(), trace_length=None, label=None,
                  workers=None):
    """Scan each accepted trace and write pending events plus trace statistics."""
    os.makedirs(out_dir, exist_ok=True)
    src_dir = os.path.dirname(os.path.abspath(in_path))
    meta = _meta(src_dir, trace_length=trace_length, label=label)
    tf = read_trace(in_path)
    if tf.encoding != ENC_BITS:
        raise FormatError(f"{in_path} holds I/Q records; run discriminate first", 20)
    quality = _load_quality(src_dir)
    L = int(meta["trace_length"])
    n_traces = tf.count // L
    if n_traces == 0:
        raise ConfigError(f"{in_path} holds fewer than one full trace of {L} records")

    def one(k):
        bits = tf.data[k * L:(k + 1) * L]
        ok = quality.get(k, True)
        ts, nc, ns = scan_arrays(bits, trigger) if ok else (np.zeros(0, np.int64),) * 3
        evs = [TriggeredEvent(k, int(t), int(c), int(s), bits[t - trigger.lead:t + trigger.signal_post])
               for t, c, s in zip(ts, nc, ns)]
        return k, ok, len(bits), int(len(bits) - np.count_nonzero(bits)), evs

    rows = []
    with open(os.path.join(out_dir, EVENTS), "w") as fh:
        for k, ok, n, z, evs in _map(one, range(n_traces), workers or default_workers()):
            rows.append([k, n, z, int(ok)])
            for ev in evs:
                fh.write(ev.to_json() + "\n")
    _write_csv(os.path.join(out_dir, TRACE_STATS), ["trace", "n_records", "n_zeros", "quality"], rows)
    meta.update(sampling_period=tf.sampling_period, n_traces=n_traces,
                trigger={k: getattr(trigger, k) for k in trigger.__dataclass_fields__})
    _write_json(os.path.join(out_dir, RUN_META), meta)
    return [EVENTS, TRACE_STATS, RUN_META]


def _trace_stats(run_dir):
    rows = _read_csv(os.path.join(run_dir, TRACE_STATS))
    acc = [r for r in rows if int(r["quality"])]
    n = sum(int(r["n_records"]) for r in acc)
    z = sum(int(r["n_zeros"]) for r in acc)
    return len(acc), len(rows), n, z


def stage_select(run_dir, out_dir=None, selection=None, trigger=TriggerConfig()):
    """Compute thresholds from the run's P(g) and mark every event."""
    from .config import SelectionOptions
    selection = selection or SelectionOptions()
    out_dir = out_dir or run_dir
    os.makedirs(out_dir, exist_ok=True)
    meta = _meta(run_dir)
    n_acc, n_all, n_rec, n_zero = _trace_stats(run_dir)
    if n_rec == 0:
        raise DomainError("no quality-accepted traces: P(g) undefined")
    p_g = n_zero / n_rec
    thr = thresholds_for(p_g, meta["sampling_period"], trigger, selection)
    events = read_events(os.path.join(run_dir, EVENTS), trigger.window_total)
    stats = {"accepted": 0, "low-signal": 0, "control-noise": 0}
    marked = []
    for ev in events:
        reason = classify(ev.n_signal, ev.n_control, thr)
        marked.append(replace(ev, disposition="rejected" if reason else "accepted", reason=reason))
        stats[reason or "accepted"] += 1
    write_events(os.path.join(out_dir, EVENTS), marked)
    report = json.loads(thr.to_json())
    report.update(measured_p_g=p_g, stats=stats, accepted_traces=n_acc, total_traces=n_all)
    _write_json(os.path.join(out_dir, THRESHOLDS), report)
    if os.path.abspath(out_dir) != os.path.abspath(run_dir):
        _write_json(os.path.join(out_dir, RUN_META), meta)
        _write_csv(os.path.join(out_dir, TRACE_STATS), ["trace", "n_records", "n_zeros", "quality"],
                   [[r["trace"], r["n_records"], r["n_zeros"], r["quality"]]
                    for r in _read_csv(os.path.join(run_dir, TRACE_STATS))])
    return [EVENTS, THRESHOLDS]


def run_result(run_dir) -> RunResult:
    meta = _meta(run_dir)
    thr = _read_json(os.path.join(run_dir, THRESHOLDS))
    n_acc, n_all, _, _ = _trace_stats(run_dir)
    return make_run_result(meta["label"], thr["stats"]["accepted"], n_acc, meta["sampling_period"],
                           thr["measured_p_g"], SelectionThresholds(**{k: thr[k] for k in (
                               SelectionThresholds.__dataclass_fields__)}),
                           int(meta["trace_length"]), n_all)


def stage_analyze(run_dirs, out_dir):
    """One results row per run, plus rate-vs-T_S and measured-vs-injected plot data."""
    os.makedirs(out_dir, exist_ok=True)
    results = [run_result(d) for d in run_dirs]
    _write_csv(os.path.join(out_dir, RESULTS), list(RunResult.CSV_FIELDS),
               [r.csv_row() for r in results])
    written = [RESULTS]

    avg = average_by_period(results)
    rows = []
    fit = weighted_linear_fit(avg) if len({a[0] for a in avg}) >= 2 else None
    for ts, rate, err in avg:
        m = (f"{float(fit(ts)):.6e}", f"{float(fit.error_at(ts)):.6e}") if fit else ("", "")
        rows.append([f"{ts:g}", f"{rate:.6e}", f"{err:.6e}", *m])
    _write_csv(os.path.join(out_dir, RATE_VS_PERIOD),
               ["sampling_period", "rate", "rate_err", "model", "model_err"], rows)
    written.append(RATE_VS_PERIOD)

    eff_rows = []
    for d, r in zip(run_dirs, results):
        meta = _meta(d)
        tpath = os.path.join(d, TRUTH)
        if "n_impacts" not in meta or not os.path.exists(tpath):
            continue
        dur = int(meta["n_traces"]) * int(meta["trace_length"]) * meta["sampling_period"] * 1e-6
        n_imp = int(meta["n_impacts"])
        inj, inj_err = n_imp / dur, math.sqrt(n_imp) / dur
        eff = r.rate / inj if inj > 0 else float("nan")
        eff_rows.append([r.label, f"{r.sampling_period:g}", f"{inj:.6e}", f"{inj_err:.6e}",
                         f"{r.rate:.6e}", f"{r.rate_err:.6e}", f"{eff:.6f}"])
    if eff_rows:
        _write_csv(os.path.join(out_dir, EFFICIENCY),
                   ["label", "sampling_period", "expected_rate", "expected_err", "measured_rate",
                    "measured_err", "efficiency"], eff_rows)
        written.append(EFFICIENCY)
    return written


def stage_budget(options, out_dir):
    os.makedirs(out_dir, exist_ok=True)
    entries = load_sources(options.sources) if options.sources else builtin_sources(options.site)
    total, rows = total_budget(entries, options.combine, options.include_driver_error)
    with open(os.path.join(out_dir, BUDGET), "w") as fh:
        fh.write(budget_csv(total, rows))
    return [BUDGET]


# ---------------------------------------------------------------- orchestration

class Manifest:
    def __init__(self, cfg: RunConfig, out_dir):
        self.path = os.path.join(out_dir, MANIFEST)
        self.data = {
            "label": cfg.label, "config_sha256": cfg.digest(), "seed": cfg.seed,
            "package_version": __version__, "backend": active_backend(),
            "stage_versions": dict(STAGE_VERSIONS), "config": cfg.to_dict(),
            "started": time.strftime("%Y-%m-%dT%H:%M:%S%z"), "stages": [], "complete": False,
        }

    def record(self, name, status, artifacts, seconds, error=None):
        entry = {"stage": name, "status": status, "artifacts": artifacts,
                 "seconds": round(seconds, 3)}
        if error is not None:
            entry["error"] = str(error)
            entry["incomplete_artifacts"] = artifacts
        self.data["stages"].append(entry)
        self.save()

    def finish(self, ok):
        self.data["complete"] = ok
        self.data["finished"] = time.strftime("%Y-%m-%dT%H:%M:%S%z")
        self.save()

    def save(self):
        _write_json(self.path, self.data)


_EXPECTED = {
    "simulate": lambda c: [c.run.sim_mode == "iq" and IQ_FILE or BINARY_FILE, TRUTH, RUN_META],
    "discriminate": lambda c: [BINARY_FILE, CLUSTERS, RUN_META],
    "trigger": lambda c: [EVENTS, TRACE_STATS, RUN_META],
    "select": lambda c: [EVENTS, THRESHOLDS],
    "analyze": lambda c: [RESULTS, RATE_VS_PERIOD],
    "budget": lambda c: [BUDGET],
}


def run_pipeline(cfg: RunConfig, out_dir=None, workers=None):
    """Run every stage into ``out_dir``; returns the :class:`RunResult`.

    In ``analyze`` mode the simulation is skipped and ``cfg.input`` (a trace
    file) is processed instead. Stage failures raise :class:`StageError`
    after the manifest has marked that stage's artifacts incomplete.
    """
    out = out_dir or cfg.output_dir
    os.makedirs(out, exist_ok=True)
    man = Manifest(cfg, out)
    man.save()
    reference = ({k: v[:2] for k, v in cfg.qubit.cluster_geometry.items()}
                 if cfg.discrimination.use_reference else None)

    plan = []
    if cfg.mode == "analyze":
        src = cfg.input
        tf_enc = open_trace(src).encoding
        if tf_enc == ENC_IQ:
            plan.append(("discriminate", lambda: stage_discriminate(
                src, out, cfg.discrimination.n_states, cfg.discrimination.max_leak, reference,
                cfg.run.trace_length, cfg.label, workers)))
            bin_path = os.path.join(out, BINARY_FILE)
        else:
            bin_path = src
        plan.append(("trigger", lambda: stage_trigger(bin_path, out, cfg.trigger,
                                                      cfg.run.trace_length, cfg.label, workers)))
    else:
        plan.append(("simulate", lambda: stage_simulate(cfg, out, workers)))
        if cfg.run.sim_mode == "iq":
            plan.append(("discriminate", lambda: stage_discriminate(
                os.path.join(out, IQ_FILE), out, cfg.discrimination.n_states,
                cfg.discrimination.max_leak, reference, workers=workers)))
        plan.append(("trigger", lambda: stage_trigger(os.path.join(out, BINARY_FILE), out,
                                                      cfg.trigger, workers=workers)))
    if cfg.mode != "simulate":
        plan.append(("select", lambda: stage_select(out, out, cfg.selection, cfg.trigger)))
        plan.append(("analyze", lambda: stage_analyze([out], out)))
    if cfg.budget.enabled:
        plan.append(("budget", lambda: stage_budget(cfg.budget, out)))

    for name, fn in plan:
        t0 = time.perf_counter()
        try:
            arts = fn()
        except Exception as exc:
            man.record(name, "failed", _EXPECTED[name](cfg), time.perf_counter() - t0, exc)
            man.finish(False)
            if isinstance(exc, (ConfigError, FormatError)):
                raise
            raise StageError(name, exc) from exc
        man.record(name, "ok", arts, time.perf_counter() - t0)
        log.info("stage %s done in %.2f s", name, time.perf_counter() - t0)
    man.finish(True)
    return run_result(out) if cfg.mode != "simulate" else None
