import math

import numpy as np
import pytest

from qpburst.errors import ConfigError, DomainError
from qpburst.protocol import (ProtocolConfig, QubitModel, RadiationEnvironment, burst_zero_count,
                              expected_ground_probability, stationary_zero_fraction)
from qpburst.simulate import simulate_trace


def test_ground_probability_examples():
    assert expected_ground_probability(80, 5) == pytest.approx(0.0606, abs=5e-5)
    assert expected_ground_probability(5, 5) == pytest.approx(1 - 1 / math.e, rel=1e-12)
    assert expected_ground_probability(1e12, 5) < 1e-10
    assert expected_ground_probability(80, 0) == 0.0


def test_ground_probability_monotone_in_t1():
    vals = [expected_ground_probability(t1, 5) for t1 in np.geomspace(1, 1e4, 50)]
    assert np.all(np.diff(vals) < 0)


@pytest.mark.parametrize("t1", [0, -1])
def test_ground_probability_rejects_bad_t1(t1):
    with pytest.raises(DomainError):
        expected_ground_probability(t1, 5)


def test_burst_zero_count():
    assert burst_zero_count(1.5, 40) == 37
    assert burst_zero_count(1.5, 74) == 20
    assert burst_zero_count(0, 40) == 0
    with pytest.raises(DomainError):
        burst_zero_count(1.5, 0)


def test_protocol_sampling_period():
    pc = ProtocolConfig()
    assert pc.sampling_period == pytest.approx(73.6)
    assert ProtocolConfig.from_sampling_period(39.8).sampling_period == pytest.approx(39.8)
    with pytest.raises(ConfigError):
        ProtocolConfig.from_sampling_period(10.0)
    with pytest.raises(ConfigError):
        ProtocolConfig(wait_time=-1)


@pytest.mark.parametrize("kw", [
    {"baseline_t1": 0}, {"misid_g_to_e": 1.5}, {"reset_fidelity": -0.1},
    {"feedback": "psychic"}, {"leakage_dwell": 0},
    {"cluster_geometry": {"g": (0, 0, 1, 1)}},
    {"cluster_geometry": {"g": (0, 0, 1, 1), "e": (0, 0, 1, 1)}},
    {"cluster_geometry": {"g": (0, 0, 1, 1), "e": (1, 1, 0, 1)}},
])
def test_qubit_validation(kw):
    with pytest.raises(ConfigError):
        QubitModel(**kw)


def test_environment_validation():
    with pytest.raises(ConfigError):
        RadiationEnvironment(impact_rate=-1)
    with pytest.raises(ConfigError):
        RadiationEnvironment(recovery_time=0)
    with pytest.raises(ConfigError):
        RadiationEnvironment(duration_spread="gamma")


def test_iq_leakage_needs_f_cluster():
    q = QubitModel(leakage_prob_f=1e-3,
                   cluster_geometry={"g": (0, 0, 1, 1), "e": (3, 0, 1, 1)})
    with pytest.raises(ConfigError):
        simulate_trace(ProtocolConfig(), q, RadiationEnvironment(), 0, 1000, mode="iq")


def _zero_fraction_check(q, n=1_000_000, seed=4):
    pc = ProtocolConfig()
    bits = simulate_trace(pc, q, RadiationEnvironment(), 0, n, seed=seed).bits
    p_hat = 1 - bits.mean()
    p = stationary_zero_fraction(pc, q)
    return p_hat, p, math.sqrt(p * (1 - p) / n)


def test_mixture_example_ideal_reset():
    # 5% symmetric misid, perfect reset acting on the true state
    q = QubitModel(reset_fidelity=1.0, misid_g_to_e=0.05, misid_e_to_g=0.05, feedback="ideal")
    analytic = 0.0606 * 0.95 + 0.9394 * 0.05
    p_hat, p, se = _zero_fraction_check(q)
    assert p == pytest.approx(analytic, abs=2e-4)
    assert abs(p_hat - analytic) < 3 * se + 1e-4


@pytest.mark.parametrize("kw", [{}, {"reset_fidelity": 0.95, "misid_g_to_e": 0.03},
                                {"feedback": "ideal"}])
def test_stationary_fraction_matches_simulation(kw):
    p_hat, p, se = _zero_fraction_check(QubitModel(**kw))
    assert abs(p_hat - p) < 3 * se


def test_default_ground_probability_in_observed_range():
    p = stationary_zero_fraction(ProtocolConfig(), QubitModel())
    assert 0.118 <= p <= 0.176
