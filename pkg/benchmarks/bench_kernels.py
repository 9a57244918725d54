"""Time the numba kernels against their numpy fallbacks.

    python benchmarks/bench_kernels.py [--cycles N] [--repeat R]

Both backends run in one process (the backend is a per-call argument), and
their outputs are checked for equality before timing is reported.
"""
import argparse
import time

import numpy as np

from qpburst import _accel
from qpburst.protocol import ProtocolConfig, QubitModel, RadiationEnvironment
from qpburst.simulate import simulate_trace
from qpburst.trigger import TriggerConfig, scan_arrays


def best_of(fn, repeat):
    times = []
    out = None
    for _ in range(repeat):
        t0 = time.perf_counter()
        out = fn()
        times.append(time.perf_counter() - t0)
    return min(times), out


def main():
    ap = argparse.ArgumentParser(description=__doc__.split("\n")[0])
    ap.add_argument("--cycles", type=int, default=1_000_000)
    ap.add_argument("--repeat", type=int, default=3)
    ap.add_argument("--impact-rate", type=float, default=0.042)
    args = ap.parse_args()

    backends = ["numpy"] + (["numba"] if _accel.NUMBA_AVAILABLE else [])
    pc = ProtocolConfig()
    q = QubitModel()
    env = RadiationEnvironment(impact_rate=args.impact_rate)
    n = args.cycles

    if "numba" in backends:
        # compile outside the timed region
        simulate_trace(pc, q, env, 0, 1000, backend="numba")
        scan_arrays(np.ones(1000, np.uint8), backend="numba")

    print(f"{'kernel':<22}{'backend':<8}{'seconds':>10}{'Mcycles/s':>12}")
    sims = {}
    for b in backends:
        dt, tr = best_of(lambda: simulate_trace(pc, q, env, 0, n, seed=1, backend=b), args.repeat)
        sims[b] = tr
        print(f"{'simulate (binary)':<22}{b:<8}{dt:>10.3f}{n / dt / 1e6:>12.2f}")
    bits = sims["numpy"].bits
    scans = {}
    for b in backends:
        dt, out = best_of(lambda: scan_arrays(bits, TriggerConfig(), backend=b), args.repeat)
        scans[b] = out
        print(f"{'trigger scan':<22}{b:<8}{dt:>10.3f}{n / dt / 1e6:>12.2f}")

    if len(backends) == 2:
        same_sim = np.array_equal(sims["numpy"].bits, sims["numba"].bits)
        same_scan = all(np.array_equal(a, c) for a, c in zip(scans["numpy"], scans["numba"]))
        print(f"outputs identical: simulate={same_sim} trigger={same_scan}")


if __name__ == "__main__":
    main()
