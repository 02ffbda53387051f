"""Builds environments and agents from a scenario config and runs the phases."""

from __future__ import annotations

import json
import os
from dataclasses import asdict, dataclass, field

import numpy as np

from . import interference as itf
from .config import DEEP_VARIANTS, ConfigError, ScenarioConfig
from .deep import AgentConfig, DeepQAgent, PhaseLog, StateEncoder, run_offline_training, run_online_evaluation
from .radar import (CfarConfig, LinkBudget, MetricsRow, RadarConfig, RocSweep, aggregate_metrics,
                    simulate_cpi)
from .spectrum import ChannelSpec, RewardParams, SpectrumEnv, TargetSpec
from .tabular import (FullBandAgent, OptimalPolicyAgent, PolicyIterationAgent, RandomAgent, SaaAgent,
                      TabularPolicy, exact_theta_model, policy_iteration_solve)

EXACT_KINDS = ("sweep", "markov", "schedule", "cycle")


def channel_of(cfg: ScenarioConfig) -> ChannelSpec:
    return ChannelSpec(cfg.channel.n_subbands, cfg.channel.total_bandwidth_hz)


def reward_of(cfg: ScenarioConfig) -> RewardParams:
    return RewardParams(cfg.reward.beta1, cfg.reward.beta2)


def link_of(cfg: ScenarioConfig) -> LinkBudget:
    return LinkBudget(**asdict(cfg.link))


def radar_of(cfg: ScenarioConfig) -> RadarConfig:
    r = cfg.radar
    return RadarConfig(r.pulse_duration_s, r.sample_rate_hz, r.pri_s, r.n_range_gates,
                       r.velocity_scale_mps, r.target_gate_offset, r.doppler_window)


def encoder_of(cfg: ScenarioConfig) -> StateEncoder:
    return StateEncoder(cfg.channel.n_subbands, cfg.agent.history_length,
                        cfg.target.n_positions, cfg.target.n_velocities)


def _phase_seeds(cfg: ScenarioConfig, phase: str):
    """(generator seed, target seed) for a phase; phases never share a stream."""
    index = {"train": 0, "eval": 1, "roc": 2}[phase]
    ss = np.random.SeedSequence([cfg.seeds.env, index])
    return ss.spawn(2)


def _load_trace(cfg: ScenarioConfig) -> itf.TraceBuffer:
    path = cfg.resolve_path(cfg.interference.trace_path)
    if not os.path.exists(path):
        raise ConfigError(f"interference.trace_path: file not found: {path}")
    loader = itf.load_power_trace if cfg.interference.kind == "power_trace" else itf.load_trace
    return loader(path, cfg.channel.n_subbands)


def build_generator(cfg: ScenarioConfig, phase: str):
    it = cfg.interference
    n = cfg.channel.n_subbands
    gen_seed, _ = _phase_seeds(cfg, phase)
    if it.kind == "sweep":
        return itf.SweepGenerator(n)
    if it.kind == "markov":
        return itf.MarkovGenerator(it.p_switch, tuple(it.active_mask), seed=gen_seed)
    if it.kind == "schedule":
        inner = itf.MarkovGenerator(it.schedule[0][1], tuple(it.active_mask), seed=gen_seed)
        if phase == "train":
            return inner
        return itf.ScheduleGenerator([tuple(e) for e in it.schedule], cfg.phases.pulses_per_cpi, inner)
    if it.kind == "cycle":
        return itf.CycleGenerator([tuple(m) for m in it.masks])
    trace = _load_trace(cfg)
    split = int(len(trace.frames) * it.train_fraction)
    if split < 1 or split >= len(trace.frames):
        raise ConfigError("interference.train_fraction: leaves an empty training or evaluation segment")
    if phase == "train":
        return trace.segment(0, split, wrap=True)
    return trace.segment(split, None, wrap=it.trace_end == "wrap")


def build_env(cfg: ScenarioConfig, phase: str) -> SpectrumEnv:
    _, target_seed = _phase_seeds(cfg, phase)
    t = cfg.target
    return SpectrumEnv(channel_of(cfg), build_generator(cfg, phase), reward_of(cfg),
                       TargetSpec(t.n_positions, t.n_velocities, t.range_min_m, t.range_max_m),
                       history_length=cfg.agent.history_length, seed=target_seed)


def deep_config(cfg: ScenarioConfig) -> AgentConfig:
    a = cfg.agent
    return AgentConfig(a.variant, a.gamma, a.batch_size, a.target_update_period, a.learning_rate,
                       a.history_length, a.sequence_length, a.replay_capacity, tuple(a.hidden_sizes),
                       a.lstm_units, a.clip_norm)


def build_agent(cfg: ScenarioConfig, actions):
    a = cfg.agent
    seed = np.random.SeedSequence(cfg.seeds.agent)
    if a.variant in DEEP_VARIANTS:
        return DeepQAgent(actions, encoder_of(cfg), deep_config(cfg), seed)
    if a.variant == "policy_iteration":
        return PolicyIterationAgent(actions, a.gamma, a.history_length, a.include_target, a.min_visits, seed=seed)
    return {"saa": SaaAgent, "random": RandomAgent, "full_band": FullBandAgent}[a.variant](actions, seed)


def oracle_agent(cfg: ScenarioConfig, actions, generator) -> OptimalPolicyAgent:
    """Policy iteration on the true source dynamics, one policy per switch probability."""
    it = cfg.interference
    if it.kind not in EXACT_KINDS:
        raise ConfigError(f"interference.kind: no exact dynamics for {it.kind!r}")
    n = cfg.channel.n_subbands

    def solve(p=None):
        model = exact_theta_model(it.kind, n, reward_of(cfg), p, it.active_mask, it.masks)
        return policy_iteration_solve(model, cfg.agent.gamma if cfg.agent.gamma < 1 else 0.9)[0]

    if it.kind == "schedule":
        return OptimalPolicyAgent(actions, {float(p): solve(float(p)) for _, p in it.schedule}, generator)
    if it.kind == "markov":
        return OptimalPolicyAgent(actions, {float(it.p_switch): solve(it.p_switch)}, generator)
    return OptimalPolicyAgent(actions, solve())


# --------------------------------------------------------------------------
# checkpoints


def save_agent(agent, path):
    if isinstance(agent, DeepQAgent):
        agent.save(path)
        return
    payload = {"kind": "tabular" if isinstance(agent, PolicyIterationAgent) else "baseline", "name": agent.name}
    if isinstance(agent, PolicyIterationAgent):
        policy = agent.policy or TabularPolicy({})
        payload["policy"] = sorted([[list(map(list, s)), a] for s, a in policy.action_by_state.items()])
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(payload, fh, sort_keys=True)


def load_agent(path, cfg: ScenarioConfig, actions):
    with open(path, "rb") as fh:
        head = fh.read(4)
    if head == b"CRAG":
        agent = DeepQAgent.load(path, actions, np.random.SeedSequence(cfg.seeds.agent))
        if agent.config.variant != cfg.agent.variant or agent.encoder != encoder_of(cfg):
            raise ConfigError("checkpoint does not match agent.variant / state encoding of the config")
        return agent
    try:
        with open(path, encoding="utf-8") as fh:
            payload = json.load(fh)
    except (UnicodeDecodeError, ValueError):
        raise ConfigError(f"{path}: not a recognised checkpoint") from None
    agent = build_agent(cfg, actions)
    if payload.get("name") != agent.name:
        raise ConfigError(f"checkpoint holds a {payload.get('name')!r} agent, config asks for {agent.name!r}")
    if payload["kind"] == "tabular":
        table = {tuple(tuple(m) for m in s): int(a) for s, a in payload["policy"]}
        if any(not 0 <= a < len(actions) for a in table.values()):
            raise ConfigError("checkpoint action index outside the action set")
        agent.policy = TabularPolicy(table)
    return agent


# --------------------------------------------------------------------------
# runs


@dataclass
class RunResult:
    name: str
    agent: object
    train: PhaseLog
    eval: PhaseLog
    metrics: MetricsRow | None = None
    extra: dict = field(default_factory=dict)


def train_agent(cfg: ScenarioConfig, agent=None):
    env = build_env(cfg, "train")
    agent = agent if agent is not None else build_agent(cfg, env.actions)
    agent, log = run_offline_training(agent, env, cfg.phases.offline_cpis, cfg.phases.pulses_per_cpi)
    return agent, log


def evaluate_agent(cfg: ScenarioConfig, agent, n_cpis=None, pulses_per_cpi=None, phase="eval"):
    env = build_env(cfg, phase)
    if isinstance(agent, OptimalPolicyAgent):
        agent.generator = env.generator
    log = run_online_evaluation(agent, env, n_cpis or cfg.phases.eval_cpis,
                                pulses_per_cpi or cfg.phases.pulses_per_cpi, cfg.phases.continue_learning)
    metrics = aggregate_metrics(log.steps, link_of(cfg), cfg.channel.n_subbands) if log.steps else None
    return log, metrics


def run_scenario(cfg: ScenarioConfig) -> RunResult:
    agent, train_log = train_agent(cfg)
    eval_log, metrics = evaluate_agent(cfg, agent)
    return RunResult(cfg.agent.variant, agent, train_log, eval_log, metrics)


def run_oracle(cfg: ScenarioConfig) -> RunResult:
    env = build_env(cfg, "eval")
    agent = oracle_agent(cfg, env.actions, env.generator)
    log = run_online_evaluation(agent, env, cfg.phases.eval_cpis, cfg.phases.pulses_per_cpi, False)
    metrics = aggregate_metrics(log.steps, link_of(cfg), cfg.channel.n_subbands) if log.steps else None
    return RunResult("pi_star_oracle", agent, PhaseLog(), log, metrics)


def env_signature(cfg: ScenarioConfig) -> dict:
    d = cfg.to_dict()
    return {k: d[k] for k in ("channel", "interference", "reward", "phases", "target")} | {"env_seed": cfg.seeds.env}


def noise_seed(cfg: ScenarioConfig, cpi: int) -> np.random.SeedSequence:
    """Per-CPI receiver-noise stream shared by every agent under one config seed."""
    return np.random.SeedSequence([cfg.seeds.noise, cpi])


def roc_for_agent(cfg: ScenarioConfig, agent) -> tuple[list, MetricsRow | None, PhaseLog]:
    """Roll the agent out, simulate each CPI's radar returns and score CFAR detections."""
    r = cfg.radar
    log, metrics = evaluate_agent(cfg, agent, r.roc_cpis, r.roc_pulses_per_cpi, phase="roc")
    sweep = RocSweep(list(r.pfas), CfarConfig(r.guard_cells, r.training_cells, r.pfas[0]))
    ppc = r.roc_pulses_per_cpi
    channel, link, radar = channel_of(cfg), link_of(cfg), radar_of(cfg)
    for cpi in range(len(log.steps) // ppc):
        steps = log.steps[cpi * ppc:(cpi + 1) * ppc]
        target = log.targets[cpi]
        rd = simulate_cpi([s.action for s in steps], target, link, [s.theta for s in steps], channel, radar,
                          noise_seed(cfg, cpi), r.target_amplitude)
        # a zero-amplitude target still defines the scored neighbourhood (null control)
        sweep.add(rd)
    return sweep.points(), metrics, log
