"""TOML run configuration.

Sections mirror the model objects::

    mode = "pipeline"            # simulate | analyze | pipeline
    seed = 7
    label = "fnal-74us"

    [protocol]                   # sampling_period, or the four durations
    sampling_period = 73.6

    [qubit]                      # QubitModel fields
    [environment]                # RadiationEnvironment fields
    [run]                        # n_cycles, trace_length, sim_mode
    [discrimination]             # n_states, max_leak
    [trigger]                    # TriggerConfig fields
    [selection]                  # noise_rate_target, control_pmf_cut, model, p_g
    [budget]                     # site or sources, combine, include_driver_error
    [paths]                      # input, output_dir
"""
from __future__ import annotations

import hashlib
import json
import os
from dataclasses import asdict, dataclass, field, fields
from typing import Optional

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

from .errors import ConfigError
from .protocol import ProtocolConfig, QubitModel, RadiationEnvironment
from .trigger import TriggerConfig
from .selection import CONTROL_PMF_CUT, NOISE_RATE_TARGET

MODES = ("simulate", "analyze", "pipeline")


@dataclass(frozen=True)
class RunOptions:
    n_cycles: int = 10_000_000
    trace_length: int = 1_000_000
    sim_mode: str = "binary"

    def __post_init__(self):
        if self.trace_length < 1000:
            raise ConfigError("trace_length must be at least 1000 records")
        if self.n_cycles < self.trace_length:
            raise ConfigError("n_cycles must cover at least one full trace")
        if self.sim_mode not in ("binary", "iq"):
            raise ConfigError(f"unknown sim_mode {self.sim_mode!r}")

    @property
    def n_traces(self):
        return self.n_cycles // self.trace_length


@dataclass(frozen=True)
class DiscriminationOptions:
    n_states: int = 3
    max_leak: float = 0.01
    use_reference: bool = True

    def __post_init__(self):
        if not 2 <= self.n_states <= 4:
            raise ConfigError("n_states must be 2, 3 or 4")
        if not 0.0 <= self.max_leak <= 1.0:
            raise ConfigError("max_leak must be a probability")


@dataclass(frozen=True)
class SelectionOptions:
    noise_rate_target: float = NOISE_RATE_TARGET
    control_pmf_cut: float = CONTROL_PMF_CUT
    model: str = "unconditioned"
    p_g: Optional[float] = None    # override the measured P(g)

    def __post_init__(self):
        if not self.noise_rate_target > 0:
            raise ConfigError("noise_rate_target must be positive")
        if not 0.0 <= self.control_pmf_cut <= 1.0:
            raise ConfigError("control_pmf_cut must be a probability")
        if self.model not in ("unconditioned", "conditioned"):
            raise ConfigError(f"unknown noise model {self.model!r}")
        if self.p_g is not None and not 0.0 <= self.p_g <= 1.0:
            raise ConfigError("selection p_g must be a probability")


@dataclass(frozen=True)
class BudgetOptions:
    site: Optional[str] = None       # built-in table: FNAL or LNGS
    sources: Optional[str] = None    # source-definition file
    combine: str = "linear"
    include_driver_error: bool = False

    def __post_init__(self):
        if self.combine not in ("linear", "quadrature"):
            raise ConfigError(f"unknown error combination {self.combine!r}")
        if self.site and self.site.upper() not in ("FNAL", "LNGS"):
            raise ConfigError(f"no built-in budget for site {self.site!r}")

    @property
    def enabled(self):
        return bool(self.site or self.sources)


@dataclass(frozen=True)
class RunConfig:
    mode: str = "pipeline"
    seed: int = 0
    label: str = "run"
    protocol: ProtocolConfig = field(default_factory=ProtocolConfig)
    qubit: QubitModel = field(default_factory=QubitModel)
    environment: RadiationEnvironment = field(default_factory=RadiationEnvironment)
    run: RunOptions = field(default_factory=RunOptions)
    discrimination: DiscriminationOptions = field(default_factory=DiscriminationOptions)
    trigger: TriggerConfig = field(default_factory=TriggerConfig)
    selection: SelectionOptions = field(default_factory=SelectionOptions)
    budget: BudgetOptions = field(default_factory=BudgetOptions)
    input: Optional[str] = None
    output_dir: str = "out"

    def __post_init__(self):
        if self.mode not in MODES:
            raise ConfigError(f"unknown mode {self.mode!r}")
        if self.mode == "analyze":
            if not self.input:
                raise ConfigError("analyze mode needs paths.input")
            if not os.path.exists(self.input):
                raise ConfigError(f"input {self.input!r} does not exist")

    def to_dict(self):
        d = asdict(self)
        d["qubit"]["cluster_geometry"] = {k: list(v) for k, v in self.qubit.cluster_geometry.items()}
        return d

    def digest(self):
        """SHA-256 of the canonical JSON form, ignoring output location."""
        d = self.to_dict()
        d.pop("output_dir", None)
        return hashlib.sha256(json.dumps(d, sort_keys=True).encode()).hexdigest()


def _build(cls, section, name):
    section = dict(section or {})
    known = {f.name for f in fields(cls)}
    extra = set(section) - known
    if extra:
        raise ConfigError(f"[{name}] unknown keys: {', '.join(sorted(extra))}")
    try:
        return cls(**section)
    except TypeError as exc:
        raise ConfigError(f"[{name}] {exc}") from None


def _protocol(section):
    section = dict(section or {})
    ts = section.pop("sampling_period", None)
    if ts is None:
        return _build(ProtocolConfig, section, "protocol")
    if "cooldown_duration" in section:
        raise ConfigError("[protocol] give sampling_period or cooldown_duration, not both")
    try:
        return ProtocolConfig.from_sampling_period(float(ts), **section)
    except TypeError as exc:
        raise ConfigError(f"[protocol] {exc}") from None


def _qubit(section):
    section = dict(section or {})
    geo = section.get("cluster_geometry")
    if geo is not None:
        section["cluster_geometry"] = {k: tuple(float(x) for x in v) for k, v in geo.items()}
    return _build(QubitModel, section, "qubit")


def config_from_dict(d):
    d = dict(d)
    allowed = {"mode", "seed", "label", "protocol", "qubit", "environment", "run",
               "discrimination", "trigger", "selection", "budget", "paths"}
    extra = set(d) - allowed
    if extra:
        raise ConfigError(f"unknown top-level keys: {', '.join(sorted(extra))}")
    paths = dict(d.get("paths") or {})
    bad = set(paths) - {"input", "output_dir"}
    if bad:
        raise ConfigError(f"[paths] unknown keys: {', '.join(sorted(bad))}")
    seed = d.get("seed", 0)
    if not isinstance(seed, int) or seed < 0:
        raise ConfigError("seed must be a non-negative integer")
    return RunConfig(
        mode=d.get("mode", "pipeline"), seed=seed, label=str(d.get("label", "run")),
        protocol=_protocol(d.get("protocol")), qubit=_qubit(d.get("qubit")),
        environment=_build(RadiationEnvironment, d.get("environment"), "environment"),
        run=_build(RunOptions, d.get("run"), "run"),
        discrimination=_build(DiscriminationOptions, d.get("discrimination"), "discrimination"),
        trigger=_build(TriggerConfig, d.get("trigger"), "trigger"),
        selection=_build(SelectionOptions, d.get("selection"), "selection"),
        budget=_build(BudgetOptions, d.get("budget"), "budget"),
        input=paths.get("input"), output_dir=paths.get("output_dir", "out"))


def load_config(path, base=None):
    """Read a TOML file over ``base`` (nested dict, e.g. from CLI flags).

    Keys in the file win over ``base``.
    """
    try:
        with open(path, "rb") as fh:
            d = tomllib.load(fh)
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"{path}: {exc}") from None
    return config_from_dict(merge(base or {}, d))


def merge(base, top):
    out = dict(base)
    for k, v in top.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = merge(out[k], v)
        else:
            out[k] = v
    return out
