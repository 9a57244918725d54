import math

import numpy as np
import pytest
from scipy import stats

from qpburst.errors import ConfigError
from qpburst.protocol import ProtocolConfig, QubitModel, RadiationEnvironment
from qpburst.simulate import decay_probabilities, simulate_run, simulate_trace

PC = ProtocolConfig()


@pytest.mark.parametrize("mode", ["binary", "iq"])
def test_backends_identical(mode):
    q = QubitModel(leakage_prob_f=1e-3)
    env = RadiationEnvironment(impact_rate=5.0)
    a = simulate_trace(PC, q, env, 3, 200_000, seed=9, mode=mode, backend="numpy")
    b = simulate_trace(PC, q, env, 3, 200_000, seed=9, mode=mode, backend="numba")
    assert np.array_equal(a.bits, b.bits)
    assert np.array_equal(a.states, b.states)
    if mode == "iq":
        assert np.array_equal(a.iq, b.iq)


def test_determinism_across_workers():
    env = RadiationEnvironment(impact_rate=2.0)
    runs = [simulate_run(PC, QubitModel(), env, 250_000, seed=4, trace_length=50_000, workers=w)
            for w in (1, 3)]
    again = simulate_run(PC, QubitModel(), env, 250_000, seed=4, trace_length=50_000)
    for r in runs[1:] + [again]:
        assert np.array_equal(r.bits, runs[0].bits)
        assert np.array_equal(r.truth.times, runs[0].truth.times)
        assert np.array_equal(r.truth.recovery, runs[0].truth.recovery)


def test_trace_independent_of_neighbours():
    env = RadiationEnvironment(impact_rate=1.0)
    run = simulate_run(PC, QubitModel(), env, 150_000, seed=2, trace_length=50_000)
    alone = simulate_trace(PC, QubitModel(), env, 2, 50_000, seed=2)
    assert np.array_equal(run.traces[2].bits, alone.bits)


def test_seeds_differ():
    a = simulate_trace(PC, QubitModel(), RadiationEnvironment(), 0, 10_000, seed=1)
    b = simulate_trace(PC, QubitModel(), RadiationEnvironment(), 0, 10_000, seed=2)
    assert not np.array_equal(a.bits, b.bits)


def test_rejects_bad_arguments():
    with pytest.raises(ConfigError):
        simulate_trace(PC, QubitModel(), RadiationEnvironment(), 0, 0)
    with pytest.raises(ConfigError):
        simulate_trace(PC, QubitModel(), RadiationEnvironment(), 0, 10, mode="analog")


def _poisson_gof(counts, mu):
    edges = np.array([0, 29, 33, 36, 39, 42, 46, 10 ** 6])
    obs = np.histogram(counts, edges)[0]
    p = np.diff(stats.poisson.cdf(edges - 1, mu))
    p[-1] += 1 - p.sum()
    exp = len(counts) * p
    return stats.chi2.sf(np.sum((obs - exp) ** 2 / exp), len(obs) - 1)


def test_impact_counts_are_poisson():
    # mean 36.8 impacts per trace; ten blocks of 100 seeds, each a 1% test
    env = RadiationEnvironment(impact_rate=5.0)
    n = 100_000
    mu = env.impact_rate * n * PC.sampling_period * 1e-6
    counts = np.array([len(simulate_trace(PC, QubitModel(), env, 0, n, seed=s).truth)
                       for s in range(1000)])
    pvals = [_poisson_gof(blk, mu) for blk in counts.reshape(10, 100)]
    # P(>= 3 of 10 rejections) is 1e-4 under the null
    assert sum(p < 0.01 for p in pvals) <= 2, pvals
    assert _poisson_gof(counts, mu) > 0.01


def test_burst_decay_probability_saturates():
    q = QubitModel()
    pc = ProtocolConfig.from_sampling_period(40.0)
    t0, gam, tau = 400e-6, 1.0, 500.0
    p = decay_probabilities(pc, q, 0, 300, np.array([t0]), np.array([gam]), np.array([tau]))
    # T1 at the end of each wait window, the weakest point of the window
    t_end = np.arange(300) * pc.sampling_period + pc.pi_pulse_duration + pc.wait_time
    rate = 1 / q.baseline_t1 + np.where(t_end >= t0 * 1e6,
                                        gam * np.exp(-(t_end - t0 * 1e6) / tau), 0.0)
    short = (1 / rate < pc.wait_time / 2.3) & (t_end - pc.wait_time >= t0 * 1e6)
    assert short.sum() >= 5
    assert np.all(p[short] > 0.9)
    # far from the burst the baseline decay probability returns
    assert p[0] == pytest.approx(-math.expm1(-pc.wait_time / q.baseline_t1))


def test_noiseless_limit_all_excited():
    # clusters 50 sigma apart make I/Q readout error-free as well
    q = QubitModel(baseline_t1=1e12, reset_fidelity=1.0, misid_g_to_e=0.0, misid_e_to_g=0.0,
                   cluster_geometry={"g": (0, 0, 0.1, 0.1), "e": (5, 0, 0.1, 0.1)})
    for mode in ("binary", "iq"):
        tr = simulate_trace(PC, q, RadiationEnvironment(), 0, 100_000, seed=1, mode=mode)
        assert np.all(tr.bits == 1)
        assert np.all(tr.states == 1)


def test_truth_span_follows_burst_shape():
    env = RadiationEnvironment(impact_rate=1.0, duration_spread="none")
    tr = simulate_trace(PC, QubitModel(), env, 0, 500_000, seed=3)
    assert len(tr.truth) > 0
    span = (tr.truth.last_cycle - tr.truth.first_cycle) * PC.sampling_period
    expect = env.recovery_time * math.log(env.burst_added_rate * QubitModel().baseline_t1)
    assert np.all(np.abs(span - expect) <= PC.sampling_period)


def test_burst_example_zero_runs():
    """Bursts holding T1 near 1 us for the recovery time leave >= 25 zeros at T_S = 40 us."""
    pc = ProtocolConfig.from_sampling_period(40.0)
    env = RadiationEnvironment(impact_rate=0.5, burst_added_rate=1.0, recovery_time=500.0,
                               duration_spread="none")
    tr = simulate_trace(pc, QubitModel(), env, 0, 1_000_000, seed=3)
    n = len(tr.truth)
    assert abs(n - 20) <= 3 * math.sqrt(20)
    runs = []
    for f in tr.truth.first_cycle:
        seg = tr.bits[f:f + 60]
        best = cur = 0
        for b in seg:
            cur = cur + 1 if b == 0 else 0
            best = max(best, cur)
        runs.append(best)
    assert min(runs) >= 25, f"longest post-impact zero runs: {sorted(runs)}"
