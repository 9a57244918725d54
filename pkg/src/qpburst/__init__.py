"""Detection of radiation-induced relaxation bursts in a transmon qubit.

Simulator, I/Q discrimination, consecutive-zero trigger, binomial event
selection, rate analysis and radiation budget, tied together by a staged
pipeline and the ``qpburst`` command line tool.
"""
__version__ = "0.1.0"

from .errors import (ConfigError, DegeneracyError, DomainError, FitError, FormatError,
                     QPBurstError, SaturationError, StageError)
from .protocol import (ProtocolConfig, QubitModel, RadiationEnvironment, TruthLog,
                       burst_zero_count, expected_ground_probability)
from .simulate import simulate_run, simulate_trace
from .discrimination import (BinaryTrace, ClusterModel, Trace, fit_clusters, quality_filter,
                             rotate_and_threshold)
from .trigger import TriggerConfig, TriggeredEvent, scan_triggers
from .selection import (SelectionThresholds, binomial_tail, compute_control_bounds,
                        compute_signal_threshold, compute_thresholds, select_events)
from .rates import (FitResult, RunResult, available_time, effective_t1, event_rate,
                    impact_probability, sampling_period_correction, weighted_linear_fit)
from .budget import SourceEntry, scale_source_rate, total_budget
from .traceio import decode_trace, encode_trace

__all__ = [
    "ConfigError", "DegeneracyError", "DomainError", "FitError", "FormatError", "QPBurstError",
    "SaturationError", "StageError", "ProtocolConfig", "QubitModel", "RadiationEnvironment",
    "TruthLog", "burst_zero_count", "expected_ground_probability", "simulate_run",
    "simulate_trace", "BinaryTrace", "ClusterModel", "Trace", "fit_clusters", "quality_filter",
    "rotate_and_threshold", "TriggerConfig", "TriggeredEvent", "scan_triggers",
    "SelectionThresholds", "binomial_tail", "compute_control_bounds", "compute_signal_threshold",
    "compute_thresholds", "select_events", "FitResult", "RunResult", "available_time",
    "effective_t1", "event_rate", "impact_probability", "sampling_period_correction",
    "weighted_linear_fit", "SourceEntry", "scale_source_rate", "total_budget", "decode_trace",
    "encode_trace",
]
