"""Scenario configuration: YAML schema, defaults and validation.

Every section maps onto a dataclass.  Unknown keys, wrong types and
inconsistent combinations raise :class:`ConfigError` naming the offending
field, e.g. ``agent.gamma: must lie in [0, 1]``.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import os
import typing
from dataclasses import dataclass, field

import yaml

AGENT_VARIANTS = ("saa", "random", "full_band", "policy_iteration", "dqn", "ddqn", "drqn", "ddrqn")
DEEP_VARIANTS = ("dqn", "ddqn", "drqn", "ddrqn")
INTERFERENCE_KINDS = ("sweep", "markov", "schedule", "trace", "power_trace", "cycle")

PAPER_SCALE = {"offline_cpis": 500, "eval_cpis": 70, "pulses_per_cpi": 1000}


class ConfigError(ValueError):
    pass


@dataclass
class ChannelConfig:
    n_subbands: int = 5
    total_bandwidth_hz: float = 100e6


@dataclass
class InterferenceConfig:
    kind: str = "markov"
    p_switch: float = 0.4
    active_mask: list = field(default_factory=lambda: [1, 1, 0, 0, 0])
    # (eval CPI index, p_switch) pairs; offline training uses the first entry
    schedule: list = field(default_factory=list)
    masks: list = field(default_factory=list)
    trace_path: str = ""
    trace_end: str = "wrap"
    # leading share of a trace used for offline training; the rest is evaluated
    train_fraction: float = 0.5


@dataclass
class AgentSection:
    variant: str = "dqn"
    gamma: float = 0.9
    batch_size: int = 32
    target_update_period: int = 250
    learning_rate: float = 1e-3
    history_length: int = 1
    sequence_length: int = 10
    replay_capacity: int = 2000
    hidden_sizes: list = field(default_factory=lambda: [256, 128, 84])
    lstm_units: int = 84
    clip_norm: typing.Optional[float] = None
    include_target: bool = False
    min_visits: int = 1


@dataclass
class RewardConfig:
    beta1: float = 5.0
    beta2: float = 6.0


@dataclass
class PhaseConfig:
    offline_cpis: int = 100
    eval_cpis: int = 30
    pulses_per_cpi: int = 128
    continue_learning: bool = True


@dataclass
class TargetConfig:
    n_positions: int = 50
    n_velocities: int = 10
    range_min_m: float = 2_000.0
    range_max_m: float = 12_000.0


@dataclass
class LinkConfig:
    transmit_power_w: float = 1_000.0
    tx_gain: float = 1_000.0
    rx_gain: float = 1_000.0
    wavelength_m: float = 0.1
    rcs_m2: float = 0.1
    noise_temp_k: float = 290.0
    loss_factor: float = 10.0
    interference_power_w: float = 1e-10


@dataclass
class RadarSection:
    pulse_duration_s: float = 20e-6
    sample_rate_hz: float = 200e6
    pri_s: float = 0.41e-3
    n_range_gates: int = 256
    velocity_scale_mps: float = 5.0
    target_gate_offset: float = 0.37
    doppler_window: str = "none"
    roc_cpis: int = 100
    roc_pulses_per_cpi: int = 64
    pfas: list = field(default_factory=lambda: [1e-4, 3e-4, 1e-3, 3e-3, 1e-2])
    guard_cells: int = 2
    training_cells: int = 4
    target_amplitude: float = 1.0
    # decision budget for the LUT latency report
    interference_slot_s: float = 0.41e-3


@dataclass
class SeedConfig:
    env: int = 0
    agent: int = 0
    noise: int = 0


@dataclass
class ScenarioConfig:
    channel: ChannelConfig = field(default_factory=ChannelConfig)
    interference: InterferenceConfig = field(default_factory=InterferenceConfig)
    agent: AgentSection = field(default_factory=AgentSection)
    reward: RewardConfig = field(default_factory=RewardConfig)
    phases: PhaseConfig = field(default_factory=PhaseConfig)
    target: TargetConfig = field(default_factory=TargetConfig)
    link: LinkConfig = field(default_factory=LinkConfig)
    radar: RadarSection = field(default_factory=RadarSection)
    seeds: SeedConfig = field(default_factory=SeedConfig)
    output_dir: str = "runs/default"
    # directory the config file was read from; relative trace paths resolve against it
    base_dir: str = field(default="", metadata={"internal": True})

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d.pop("base_dir")
        return d

    def digest(self) -> str:
        """SHA-256 over the canonical JSON form (output directory excluded)."""
        d = self.to_dict()
        d.pop("output_dir")
        return hashlib.sha256(json.dumps(d, sort_keys=True).encode()).hexdigest()

    def resolve_path(self, path: str) -> str:
        if not path or os.path.isabs(path):
            return path
        return os.path.join(self.base_dir, path) if self.base_dir else path


# --------------------------------------------------------------------------
# loading


def _type_ok(value, annotation) -> bool:
    origin = typing.get_origin(annotation)
    if origin is typing.Union:
        return any(_type_ok(value, a) for a in typing.get_args(annotation))
    if annotation is type(None):
        return value is None
    if annotation is bool:
        return isinstance(value, bool)
    if annotation is int:
        return isinstance(value, int) and not isinstance(value, bool)
    if annotation is float:
        return isinstance(value, (int, float)) and not isinstance(value, bool)
    if annotation is str:
        return isinstance(value, str)
    if annotation is list:
        return isinstance(value, (list, tuple))
    return True


def _build(cls, data, path: str):
    if data is None:
        data = {}
    if not isinstance(data, dict):
        raise ConfigError(f"{path or 'config'}: expected a mapping, got {type(data).__name__}")
    hints = typing.get_type_hints(cls)
    fields = {f.name: f for f in dataclasses.fields(cls) if not f.metadata.get("internal")}
    unknown = sorted(set(data) - set(fields))
    if unknown:
        where = f"{path}." if path else ""
        raise ConfigError(f"{where}{unknown[0]}: unknown key")
    kwargs = {}
    for name, value in data.items():
        here = f"{path}.{name}" if path else name
        hint = hints[name]
        if dataclasses.is_dataclass(hint):
            kwargs[name] = _build(hint, value, here)
            continue
        if not _type_ok(value, hint):
            raise ConfigError(f"{here}: expected {getattr(hint, '__name__', hint)}, got {value!r}")
        if hint is float and value is not None:
            value = float(value)
        kwargs[name] = list(value) if isinstance(value, tuple) else value
    return cls(**kwargs)


def _is_mask(m, n) -> bool:
    return isinstance(m, (list, tuple)) and len(m) == n and all(b in (0, 1) and not isinstance(b, bool) for b in m)


def validate(cfg: ScenarioConfig) -> ScenarioConfig:
    def fail(where, msg):
        raise ConfigError(f"{where}: {msg}")

    n = cfg.channel.n_subbands
    if n < 2:
        fail("channel.n_subbands", "must be >= 2")
    if cfg.channel.total_bandwidth_hz <= 0:
        fail("channel.total_bandwidth_hz", "must be positive")

    it = cfg.interference
    if it.kind not in INTERFERENCE_KINDS:
        fail("interference.kind", f"must be one of {', '.join(INTERFERENCE_KINDS)}")
    if not 0 <= it.p_switch <= 1:
        fail("interference.p_switch", "must lie in [0, 1]")
    if not _is_mask(it.active_mask, n):
        fail("interference.active_mask", f"must be {n} bits of 0/1")
    if it.kind == "schedule":
        if not it.schedule:
            fail("interference.schedule", "required for kind 'schedule'")
        prev = -1
        for k, entry in enumerate(it.schedule):
            if not (isinstance(entry, (list, tuple)) and len(entry) == 2):
                fail(f"interference.schedule[{k}]", "must be a [cpi, p_switch] pair")
            cpi, p = entry
            if not isinstance(cpi, int) or isinstance(cpi, bool) or cpi <= prev:
                fail(f"interference.schedule[{k}]", "CPI indices must be increasing integers")
            if not isinstance(p, (int, float)) or not 0 <= p <= 1:
                fail(f"interference.schedule[{k}]", "p_switch must lie in [0, 1]")
            prev = cpi
        if it.schedule[0][0] != 0:
            fail("interference.schedule[0]", "must start at CPI 0")
    if it.kind == "cycle":
        if not it.masks:
            fail("interference.masks", "required for kind 'cycle'")
        for k, m in enumerate(it.masks):
            if not _is_mask(m, n):
                fail(f"interference.masks[{k}]", f"must be {n} bits of 0/1")
    if it.kind in ("trace", "power_trace") and not it.trace_path:
        fail("interference.trace_path", f"required for kind '{it.kind}'")
    if it.trace_end not in ("wrap", "terminate"):
        fail("interference.trace_end", "must be 'wrap' or 'terminate'")
    if not 0 < it.train_fraction < 1:
        fail("interference.train_fraction", "must lie in (0, 1)")

    ag = cfg.agent
    if ag.variant not in AGENT_VARIANTS:
        fail("agent.variant", f"must be one of {', '.join(AGENT_VARIANTS)}")
    if not 0 <= ag.gamma <= 1:
        fail("agent.gamma", "must lie in [0, 1]")
    if ag.variant in ("policy_iteration",) and ag.gamma >= 1:
        fail("agent.gamma", "policy iteration needs gamma < 1")
    for name in ("batch_size", "target_update_period", "history_length", "sequence_length",
                 "replay_capacity", "lstm_units", "min_visits"):
        if getattr(ag, name) < 1:
            fail(f"agent.{name}", "must be positive")
    if ag.learning_rate <= 0:
        fail("agent.learning_rate", "must be positive")
    if not ag.hidden_sizes or any(not isinstance(h, int) or isinstance(h, bool) or h < 1 for h in ag.hidden_sizes):
        fail("agent.hidden_sizes", "must be a non-empty list of positive integers")
    if ag.clip_norm is not None and ag.clip_norm <= 0:
        fail("agent.clip_norm", "must be positive when set")
    if ag.batch_size > ag.replay_capacity:
        fail("agent.batch_size", "cannot exceed agent.replay_capacity")

    if not 0 <= cfg.reward.beta1 < cfg.reward.beta2:
        fail("reward.beta1", "need 0 <= beta1 < beta2")

    ph = cfg.phases
    if ph.offline_cpis < 0:
        fail("phases.offline_cpis", "must be >= 0")
    if ph.eval_cpis < 1:
        fail("phases.eval_cpis", "must be positive")
    if ph.pulses_per_cpi < 1:
        fail("phases.pulses_per_cpi", "must be positive")
    if ag.variant in ("drqn", "ddrqn") and ag.sequence_length > ph.pulses_per_cpi:
        fail("agent.sequence_length", "cannot exceed phases.pulses_per_cpi (sequences stay inside a CPI)")

    tg = cfg.target
    if tg.n_positions < 1 or tg.n_velocities < 1:
        fail("target", "n_positions and n_velocities must be positive")
    if not 0 < tg.range_min_m <= tg.range_max_m:
        fail("target.range_min_m", "need 0 < range_min_m <= range_max_m")

    for f in dataclasses.fields(LinkConfig):
        if getattr(cfg.link, f.name) <= 0:
            fail(f"link.{f.name}", "must be positive")

    rd = cfg.radar
    if rd.sample_rate_hz < 2 * cfg.channel.total_bandwidth_hz:
        fail("radar.sample_rate_hz", "must be at least twice channel.total_bandwidth_hz")
    for name in ("pulse_duration_s", "pri_s", "velocity_scale_mps", "interference_slot_s"):
        if getattr(rd, name) <= 0:
            fail(f"radar.{name}", "must be positive")
    if rd.pulse_duration_s >= rd.pri_s:
        fail("radar.pulse_duration_s", "must be shorter than radar.pri_s")
    if rd.n_range_gates <= 2 * (rd.guard_cells + rd.training_cells):
        fail("radar.n_range_gates", "too few gates for the CFAR window")
    if rd.roc_pulses_per_cpi <= 2 * (rd.guard_cells + rd.training_cells):
        fail("radar.roc_pulses_per_cpi", "too few pulses for the CFAR window")
    if rd.roc_cpis < 1:
        fail("radar.roc_cpis", "must be positive")
    if rd.training_cells < 1 or rd.guard_cells < 0:
        fail("radar.training_cells", "need training_cells >= 1 and guard_cells >= 0")
    if not rd.pfas or any(not 0 < p < 1 for p in rd.pfas):
        fail("radar.pfas", "must be a non-empty list of values in (0, 1)")
    if rd.doppler_window not in ("none", "hann"):
        fail("radar.doppler_window", "must be 'none' or 'hann'")
    if not 0 <= rd.target_gate_offset < 1:
        fail("radar.target_gate_offset", "must lie in [0, 1)")
    if rd.target_amplitude < 0:
        fail("radar.target_amplitude", "must be >= 0")

    for name in ("env", "agent", "noise"):
        if getattr(cfg.seeds, name) < 0:
            fail(f"seeds.{name}", "must be >= 0")
    return cfg


def from_dict(data: dict, base_dir: str = "") -> ScenarioConfig:
    cfg = _build(ScenarioConfig, data, "")
    cfg.base_dir = base_dir
    return validate(cfg)


def load_config(path: str | os.PathLike) -> ScenarioConfig:
    try:
        with open(path, encoding="utf-8") as fh:
            data = yaml.safe_load(fh)
    except yaml.YAMLError as exc:
        raise ConfigError(f"{path}: not valid YAML ({exc})") from None
    return from_dict(data or {}, os.path.dirname(os.path.abspath(path)))


def dump_config(cfg: ScenarioConfig, path: str | os.PathLike):
    with open(path, "w", encoding="utf-8") as fh:
        yaml.safe_dump(cfg.to_dict(), fh, sort_keys=True)


def apply_overrides(cfg: ScenarioConfig, *, seed_env=None, seed_agent=None, seed_noise=None,
                    paper_scale: bool = False, out=None, continue_learning=None) -> ScenarioConfig:
    cfg = dataclasses.replace(
        cfg,
        seeds=dataclasses.replace(
            cfg.seeds,
            env=cfg.seeds.env if seed_env is None else seed_env,
            agent=cfg.seeds.agent if seed_agent is None else seed_agent,
            noise=cfg.seeds.noise if seed_noise is None else seed_noise,
        ),
        phases=dataclasses.replace(cfg.phases, **(PAPER_SCALE if paper_scale else {})),
        output_dir=cfg.output_dir if out is None else out,
    )
    if continue_learning is not None:
        cfg.phases = dataclasses.replace(cfg.phases, continue_learning=continue_learning)
    return validate(cfg)
