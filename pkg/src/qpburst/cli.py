"""``qpburst`` command line tool.

Exit status: 0 success, 2 configuration error, 3 trace-file format error,
4 stage failure. ``QPBURST_WORKERS`` sets the trace-level worker count.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys

from . import __version__
from .config import (BudgetOptions, DiscriminationOptions, SelectionOptions, config_from_dict,
                     load_config)
from .errors import ConfigError, FormatError, QPBurstError
from .trigger import TriggerConfig

EXIT_OK, EXIT_CONFIG, EXIT_FORMAT, EXIT_STAGE = 0, 2, 3, 4

log = logging.getLogger("qpburst")


def _set(d, path, value):
    if value is None:
        return
    *head, last = path.split(".")
    for k in head:
        d = d.setdefault(k, {})
    d[last] = value


# flag dest -> config key
_SIM_KEYS = {
    "seed": "seed", "label": "label", "sampling_period": "protocol.sampling_period",
    "wait_time": "protocol.wait_time", "t1": "qubit.baseline_t1",
    "reset_fidelity": "qubit.reset_fidelity", "misid_g_to_e": "qubit.misid_g_to_e",
    "misid_e_to_g": "qubit.misid_e_to_g", "leakage_prob": "qubit.leakage_prob_f",
    "feedback": "qubit.feedback", "impact_rate": "environment.impact_rate",
    "burst_rate": "environment.burst_added_rate", "recovery_time": "environment.recovery_time",
    "duration_spread": "environment.duration_spread", "n_cycles": "run.n_cycles",
    "trace_length": "run.trace_length", "sim_mode": "run.sim_mode",
    "n_states": "discrimination.n_states", "max_leak": "discrimination.max_leak",
    "n_consecutive": "trigger.n_consecutive", "dead_time": "trigger.dead_time",
    "noise_target": "selection.noise_rate_target", "control_cut": "selection.control_pmf_cut",
    "noise_model": "selection.model", "p_g": "selection.p_g", "site": "budget.site",
    "sources": "budget.sources", "out": "paths.output_dir", "input": "paths.input",
}


def _config(args, mode):
    flags = {"mode": mode}
    for dest, key in _SIM_KEYS.items():
        _set(flags, key, getattr(args, dest, None))
    if getattr(args, "config", None):
        return load_config(args.config, flags)
    return config_from_dict(flags)


def _add_sim_flags(p):
    g = p.add_argument_group("simulation")
    g.add_argument("--seed", type=int)
    g.add_argument("--label")
    g.add_argument("--sampling-period", type=float, help="T_S in us")
    g.add_argument("--wait-time", type=float, help="decay wait in us")
    g.add_argument("--t1", type=float, help="baseline T1 in us")
    g.add_argument("--reset-fidelity", type=float)
    g.add_argument("--misid-g-to-e", type=float)
    g.add_argument("--misid-e-to-g", type=float)
    g.add_argument("--leakage-prob", type=float)
    g.add_argument("--feedback", choices=("measured", "ideal"))
    g.add_argument("--impact-rate", type=float, help="impacts per second")
    g.add_argument("--burst-rate", type=float, help="added relaxation rate at impact, 1/us")
    g.add_argument("--recovery-time", type=float, help="burst recovery time in us")
    g.add_argument("--duration-spread", choices=("none", "exponential"))
    g.add_argument("--n-cycles", type=int)
    g.add_argument("--trace-length", type=int)
    g.add_argument("--sim-mode", choices=("binary", "iq"))


def _add_trigger_flags(p):
    p.add_argument("--n-consecutive", type=int)
    p.add_argument("--dead-time", type=int)


def _add_select_flags(p):
    p.add_argument("--noise-target", type=float, help="decay-noise rate target, 1/s")
    p.add_argument("--control-cut", type=float, help="control-window PMF cut")
    p.add_argument("--noise-model", choices=("unconditioned", "conditioned"))
    p.add_argument("--p-g", type=float, help="use this P(g) instead of the measured one")


def _trigger_cfg(args):
    kw = {}
    if getattr(args, "n_consecutive", None) is not None:
        kw["n_consecutive"] = args.n_consecutive
    if getattr(args, "dead_time", None) is not None:
        kw["dead_time"] = args.dead_time
    try:
        return TriggerConfig(**kw)
    except TypeError as exc:
        raise ConfigError(str(exc)) from None


def build_parser():
    ap = argparse.ArgumentParser(prog="qpburst", description=__doc__.split("\n")[0])
    ap.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", help="simulate a run and write its trace file")
    p.add_argument("--config", help="TOML run config; its values override flags")
    p.add_argument("--out", help="output directory")
    _add_sim_flags(p)

    p = sub.add_parser("discriminate", help="fit, screen and binarize an I/Q trace file")
    p.add_argument("input")
    p.add_argument("--out")
    p.add_argument("--n-states", type=int, default=3)
    p.add_argument("--max-leak", type=float, default=0.01)
    p.add_argument("--trace-length", type=int)
    p.add_argument("--label")
    p.add_argument("--config", help="TOML config supplying reference cluster geometry")
    p.add_argument("--no-reference", action="store_true",
                   help="do not seed the fit from the configured cluster centres")

    p = sub.add_parser("trigger", help="scan a binary trace file for triggers")
    p.add_argument("input")
    p.add_argument("--out")
    p.add_argument("--trace-length", type=int)
    p.add_argument("--label")
    _add_trigger_flags(p)

    p = sub.add_parser("select", help="compute thresholds and mark events in a run directory")
    p.add_argument("run_dir")
    p.add_argument("--out")
    _add_select_flags(p)
    _add_trigger_flags(p)

    p = sub.add_parser("analyze", help="rates and plot data for selected runs")
    p.add_argument("run_dirs", nargs="*")
    p.add_argument("--out", default=".")
    p.add_argument("--published", action="store_true",
                   help="fit the shipped published run table instead of run directories")

    p = sub.add_parser("budget", help="expected impact rates from source coefficients")
    p.add_argument("--site", choices=("FNAL", "LNGS", "fnal", "lngs"))
    p.add_argument("--sources", help="source-definition file")
    p.add_argument("--thorium-activity", type=float, help="add a Th source of this many kBq")
    p.add_argument("--combine", choices=("linear", "quadrature"), default="linear")
    p.add_argument("--driver-errors", action="store_true",
                   help="propagate flux/activity errors as well")
    p.add_argument("--out", help="directory for budget.csv (default: print only)")

    p = sub.add_parser("pipeline", help="run every stage end to end")
    p.add_argument("--config", help="TOML run config; its values override flags")
    p.add_argument("--out")
    p.add_argument("--input", help="existing trace file (analyze mode)")
    _add_sim_flags(p)
    p.add_argument("--n-states", type=int)
    p.add_argument("--max-leak", type=float)
    _add_trigger_flags(p)
    _add_select_flags(p)
    p.add_argument("--site", help="also compute this site's radiation budget")
    p.add_argument("--sources", help="also compute a budget from this source file")
    return ap


def _cmd_simulate(args):
    from .pipeline import stage_simulate
    cfg = _config(args, "simulate")
    out = args.out or cfg.output_dir
    arts = stage_simulate(cfg, out)
    print(f"wrote {', '.join(arts)} to {out}")


def _cmd_discriminate(args):
    from .pipeline import stage_discriminate
    ref = None
    if not args.no_reference:
        cfg = load_config(args.config) if args.config else config_from_dict({})
        ref = {k: v[:2] for k, v in cfg.qubit.cluster_geometry.items()}
    DiscriminationOptions(args.n_states, args.max_leak)
    out = args.out or os.path.dirname(os.path.abspath(args.input))
    arts = stage_discriminate(args.input, out, args.n_states, args.max_leak, ref,
                              args.trace_length, args.label)
    print(f"wrote {', '.join(arts)} to {out}")


def _cmd_trigger(args):
    from .pipeline import stage_trigger
    out = args.out or os.path.dirname(os.path.abspath(args.input))
    arts = stage_trigger(args.input, out, _trigger_cfg(args), args.trace_length, args.label)
    print(f"wrote {', '.join(arts)} to {out}")


def _cmd_select(args):
    from .pipeline import THRESHOLDS, stage_select
    kw = {}
    for dest, key in (("noise_target", "noise_rate_target"), ("control_cut", "control_pmf_cut"),
                      ("noise_model", "model"), ("p_g", "p_g")):
        if getattr(args, dest) is not None:
            kw[key] = getattr(args, dest)
    out = args.out or args.run_dir
    stage_select(args.run_dir, out, SelectionOptions(**kw), _trigger_cfg(args))
    with open(os.path.join(out, THRESHOLDS)) as fh:
        rep = json.load(fh)
    print(f"P(g)={rep['measured_p_g']:.4f} N_signal_min={rep['n_signal_min']} "
          f"control=[{rep['n_control_min']}, {rep['n_control_max']}] stats={rep['stats']}")


def _cmd_analyze(args):
    if args.published:
        return _published(args.out)
    from .pipeline import RESULTS, stage_analyze
    if not args.run_dirs:
        raise ConfigError("give run directories or --published")
    arts = stage_analyze(args.run_dirs, args.out)
    with open(os.path.join(args.out, RESULTS)) as fh:
        sys.stdout.write(fh.read())
    print(f"wrote {', '.join(arts)} to {args.out}")


def _published(out):
    from .datasets import published_runs, source_rates
    from .rates import average_by_period, efficiency_from_tables
    from .pipeline import EFFICIENCY, RATE_VS_PERIOD, _write_csv
    os.makedirs(out, exist_ok=True)
    runs = published_runs()
    fit, model, corrected = efficiency_from_tables(runs, source_rates())
    avg = average_by_period([r for r in runs if r.site == "FNAL"])
    _write_csv(os.path.join(out, RATE_VS_PERIOD),
               ["sampling_period", "rate", "rate_err", "model", "model_err"],
               [[f"{ts:g}", f"{r:.6e}", f"{e:.6e}", f"{float(model(ts)):.6e}",
                 f"{float(model.error_at(ts)):.6e}"] for ts, r, e in avg])
    cal = sorted(source_rates(), key=lambda c: c.activity)
    _write_csv(os.path.join(out, EFFICIENCY),
               ["activity_kbq", "expected_rate", "expected_err", "measured_rate", "measured_err",
                "model"],
               [[f"{c.activity:g}", f"{c.rate:.6e}", f"{c.rate_err:.6e}", f"{m:.6e}", f"{e:.6e}",
                 f"{fit.p1 * c.rate:.6e}"] for c, (m, e) in zip(cal, corrected)])
    corr = float(model(73.6) / model(67.6))
    print(f"rate vs T_S: p0={model.p0:.4e} p1={model.p1:.4e}/us "
          f"(67.6->73.6 us factor {corr:.4f})")
    print(f"efficiency p1 = {fit.p1:.4f} +- {fit.p1_err:.4f} (chi2/dof {fit.chi2:.2f}/{fit.dof})")
    print(f"wrote {RATE_VS_PERIOD}, {EFFICIENCY} to {out}")


def _cmd_budget(args):
    from .budget import (budget_csv, builtin_sources, load_sources, thorium_entry,
                         total_budget)
    if not (args.site or args.sources or args.thorium_activity is not None):
        raise ConfigError("give --site, --sources or --thorium-activity")
    entries = []
    if args.site:
        entries += builtin_sources(args.site)
    if args.sources:
        entries += load_sources(args.sources)
    if args.thorium_activity is not None:
        entries.append(thorium_entry(args.thorium_activity))
    BudgetOptions(combine=args.combine)
    total, rows = total_budget(entries, args.combine, args.driver_errors)
    text = budget_csv(total, rows)
    if args.out:
        os.makedirs(args.out, exist_ok=True)
        with open(os.path.join(args.out, "budget.csv"), "w") as fh:
            fh.write(text)
    sys.stdout.write(text)


def _cmd_pipeline(args):
    from .pipeline import run_pipeline
    mode = "analyze" if args.input else "pipeline"
    cfg = _config(args, mode)
    res = run_pipeline(cfg, args.out or cfg.output_dir)
    if res is not None:
        lim = f" (90% CL < {res.upper_limit:.3e})" if res.upper_limit else ""
        print(f"{res.label}: T_S={res.sampling_period:g} us P(g)={res.p_g:.4f} "
              f"live={res.live_time:.1f} s N={res.n_selected} "
              f"rate={res.rate:.3e} +- {res.rate_err:.3e} /s{lim}")


COMMANDS = {"simulate": _cmd_simulate, "discriminate": _cmd_discriminate,
            "trigger": _cmd_trigger, "select": _cmd_select, "analyze": _cmd_analyze,
            "budget": _cmd_budget, "pipeline": _cmd_pipeline}


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        COMMANDS[args.command](args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except FormatError as exc:
        print(f"format error: {exc}", file=sys.stderr)
        return EXIT_FORMAT
    except (QPBurstError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_STAGE
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
