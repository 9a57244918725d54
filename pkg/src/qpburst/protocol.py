"""Protocol timing, qubit and radiation models for the fast decay detection loop.

Times are in microseconds unless a name says otherwise; impact rates are
per second.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Dict, Tuple

import numpy as np

from .errors import ConfigError, DomainError

GROUND, EXCITED, SECOND = 0, 1, 2
STATE_NAMES = ("g", "e", "f", "h")

# (I centre, Q centre, sigma_I, sigma_Q) in detector units. g/e separation is
# 2.68 sigma so the optimal threshold misidentifies ~9% of each state.
DEFAULT_GEOMETRY = {
    "g": (0.0, 0.0, 0.6, 0.6),
    "e": (1.1377, 1.1377, 0.6, 0.6),
    "f": (2.9, 0.6, 0.6, 0.6),
}


@dataclass(frozen=True)
class ProtocolConfig:
    """One reset / wait / readout / cooldown cycle."""

    wait_time: float = 5.0
    pi_pulse_duration: float = 0.2
    readout_duration: float = 7.0
    cooldown_duration: float = 61.4

    def __post_init__(self):
        for name in ("wait_time", "pi_pulse_duration", "readout_duration", "cooldown_duration"):
            if not getattr(self, name) > 0:
                raise ConfigError(f"{name} must be positive, got {getattr(self, name)}")
        if not 1.0 <= self.sampling_period <= 1000.0:
            raise ConfigError(f"sampling period {self.sampling_period} us outside [1, 1000] us")

    @property
    def sampling_period(self) -> float:
        return self.wait_time + self.pi_pulse_duration + self.readout_duration + self.cooldown_duration

    @classmethod
    def from_sampling_period(cls, sampling_period, wait_time=5.0, pi_pulse_duration=0.2,
                             readout_duration=7.0):
        """Build a cycle of total length ``sampling_period`` by sizing the cooldown."""
        cooldown = sampling_period - wait_time - pi_pulse_duration - readout_duration
        if cooldown <= 0:
            raise ConfigError(
                f"sampling period {sampling_period} us too short for wait+pulse+readout")
        return cls(wait_time, pi_pulse_duration, readout_duration, cooldown)


@dataclass(frozen=True)
class QubitModel:
    """Transmon, readout and reset parameters.

    ``feedback`` selects what triggers the conditional reset to ``e``:
    ``"measured"`` (a ground readout on the previous cycle, as on hardware,
    so a g->e misidentification leaves the qubit unreset) or ``"ideal"`` (the
    true state being ``g``, a reset blind to readout errors).
    """

    baseline_t1: float = 80.0
    reset_fidelity: float = 0.99
    misid_g_to_e: float = 0.09
    misid_e_to_g: float = 0.09
    leakage_prob_f: float = 0.0
    leakage_dwell: int = 20
    cluster_geometry: Dict[str, Tuple[float, float, float, float]] = field(
        default_factory=lambda: dict(DEFAULT_GEOMETRY))
    feedback: str = "measured"

    def __post_init__(self):
        if not self.baseline_t1 > 0:
            raise ConfigError(f"baseline_t1 must be positive, got {self.baseline_t1}")
        for name in ("reset_fidelity", "misid_g_to_e", "misid_e_to_g", "leakage_prob_f"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ConfigError(f"{name} must be a probability, got {v}")
        if self.leakage_dwell < 1:
            raise ConfigError("leakage_dwell must be at least one cycle")
        if self.feedback not in ("measured", "ideal"):
            raise ConfigError(f"unknown feedback mode {self.feedback!r}")
        geo = self.cluster_geometry
        for s in ("g", "e"):
            if s not in geo:
                raise ConfigError(f"cluster geometry missing state {s!r}")
        for s, v in geo.items():
            if len(v) != 4 or v[2] <= 0 or v[3] <= 0:
                raise ConfigError(f"cluster {s!r} needs (I, Q, sigma_I, sigma_Q) with sigma > 0")
        if tuple(geo["g"][:2]) == tuple(geo["e"][:2]):
            raise ConfigError("g and e cluster centres coincide")

    def geometry_array(self):
        """(3, 4) array for g, e, f; f falls back to e when not configured."""
        rows = [self.cluster_geometry["g"], self.cluster_geometry["e"],
                self.cluster_geometry.get("f", self.cluster_geometry["e"])]
        return np.asarray(rows, dtype=np.float64)


@dataclass(frozen=True)
class RadiationEnvironment:
    """Poisson impacts, each adding a decaying relaxation rate.

    After an impact at ``t0`` the relaxation rate is
    ``1/T1 + burst_added_rate * exp(-(t - t0) / tau)``. With
    ``duration_spread="exponential"`` each impact draws its own recovery time
    ``tau = recovery_time * X``, ``X ~ Exp(1)``, standing in for the spread of
    deposited energies; ``"none"`` gives every burst the same shape.
    """

    impact_rate: float = 0.0
    burst_added_rate: float = 1.0
    recovery_time: float = 500.0
    duration_spread: str = "exponential"

    def __post_init__(self):
        if self.impact_rate < 0:
            raise ConfigError("impact_rate must be non-negative")
        if self.burst_added_rate < 0:
            raise ConfigError("burst_added_rate must be non-negative")
        if not self.recovery_time > 0:
            raise ConfigError("recovery_time must be positive")
        if self.duration_spread not in ("none", "exponential"):
            raise ConfigError(f"unknown duration_spread {self.duration_spread!r}")


@dataclass
class TruthLog:
    """Injected impacts: absolute time [s], added rate, recovery time and
    the span of cycles (run-global indices) where the burst at least doubles
    the baseline relaxation rate."""

    times: np.ndarray = field(default_factory=lambda: np.zeros(0))
    added_rate: np.ndarray = field(default_factory=lambda: np.zeros(0))
    recovery: np.ndarray = field(default_factory=lambda: np.zeros(0))
    first_cycle: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))
    last_cycle: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))

    def __len__(self):
        return len(self.times)

    @classmethod
    def concatenate(cls, logs):
        logs = list(logs)
        if not logs:
            return cls()
        return cls(*(np.concatenate([getattr(lg, f) for lg in logs])
                     for f in ("times", "added_rate", "recovery", "first_cycle", "last_cycle")))


def expected_ground_probability(t1, wait_time):
    """Probability that an excited qubit has decayed after ``wait_time``."""
    if not t1 > 0:
        raise DomainError(f"T1 must be positive, got {t1}")
    if wait_time < 0:
        raise DomainError(f"wait time must be non-negative, got {wait_time}")
    return -math.expm1(-wait_time / t1)


def burst_zero_count(burst_duration_ms, sampling_period):
    """Consecutive ground readouts a burst of the given length spans."""
    if not sampling_period > 0:
        raise DomainError(f"sampling period must be positive, got {sampling_period}")
    if burst_duration_ms < 0:
        raise DomainError("burst duration must be non-negative")
    return int(math.floor(burst_duration_ms * 1000.0 / sampling_period + 1e-12))


def stationary_zero_fraction(protocol: ProtocolConfig, qubit: QubitModel):
    """Long-run fraction of ground readouts with no impacts and no leakage.

    Solves the two-state chain on the post-readout qubit state directly, so
    it is an independent check on the simulator.
    """
    a = expected_ground_probability(qubit.baseline_t1, protocol.wait_time)
    mg, me, fid = qubit.misid_g_to_e, qubit.misid_e_to_g, qubit.reset_fidelity
    # P(read 0 | true g) and P(read 0 | true e)
    z_g, z_e = 1.0 - mg, me
    # T[i, j]: post-readout state i -> next cycle's start state j
    T = np.zeros((2, 2))
    for post, z in ((0, z_g), (1, z_e)):
        if qubit.feedback == "measured":
            up = z * fid
            T[post, 1] += up
            T[post, post] += 1.0 - up
        else:
            if post == 0:
                T[0, 1] += fid
                T[0, 0] += 1.0 - fid
            else:
                T[1, 1] += 1.0
    # start -> post via decay
    D = np.array([[1.0, 0.0], [a, 1.0 - a]])
    M = T @ D  # post(n-1) -> post(n)
    w, v = np.linalg.eig(M.T)
    pi = np.real(v[:, np.argmin(np.abs(w - 1.0))])
    pi = pi / pi.sum()
    return float(pi[0] * z_g + pi[1] * z_e)
