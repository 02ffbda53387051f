"""Deep Q-learning agents (DQN, DDQN, DRQN, DDRQN) and the phase runners.

Training follows a two-phase protocol: an offline phase with uniformly random
actions that fills the replay memory and trains every pulse, then an online
phase acting greedily, optionally still training.
"""

from __future__ import annotations

import itertools
import json
import struct
import time
from collections import deque
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

from . import neural
from .neural import QNetwork, SgdConfig
from .spectrum import EndOfTrace, EnvState, InvalidInput, Mask, SpectrumEnv, StepMetrics, TargetState, Transition

VARIANTS = ("dqn", "ddqn", "drqn", "ddrqn")


@dataclass
class AgentConfig:
    variant: str = "dqn"
    gamma: float = 0.9
    batch_size: int = 32
    target_update_period: int = 250
    learning_rate: float = 1e-3
    history_length: int = 1
    sequence_length: int = 10
    replay_capacity: int = 2000
    hidden_sizes: tuple = (256, 128, 84)
    lstm_units: int = 84
    clip_norm: float | None = None

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise InvalidInput(f"variant must be one of {VARIANTS}, got {self.variant!r}")
        if not 0.0 <= self.gamma <= 1.0:
            raise InvalidInput("gamma must lie in [0, 1]")
        for name in ("batch_size", "target_update_period", "history_length",
                     "sequence_length", "replay_capacity", "lstm_units"):
            if getattr(self, name) < 1:
                raise InvalidInput(f"{name} must be positive")
        if not self.learning_rate > 0:
            raise InvalidInput("learning_rate must be positive")
        self.hidden_sizes = tuple(int(h) for h in self.hidden_sizes)

    @property
    def double(self) -> bool:
        return self.variant in ("ddqn", "ddrqn")

    @property
    def recurrent(self) -> bool:
        return self.variant in ("drqn", "ddrqn")


@dataclass(frozen=True)
class StateEncoder:
    """Flattens the last ``history_length`` masks plus normalised target indices."""

    n_subbands: int
    history_length: int = 1
    n_positions: int = 50
    n_velocities: int = 10

    @property
    def width(self) -> int:
        return self.history_length * self.n_subbands + 2

    def encode_parts(self, history: Sequence[Mask], position_index: int, velocity_index: int) -> np.ndarray:
        hist = list(history)[-self.history_length:]
        pad = [(0,) * self.n_subbands] * (self.history_length - len(hist))
        bits = [b for mask in pad + hist for b in mask]
        return np.array(bits + [position_index / self.n_positions,
                                velocity_index / self.n_velocities], dtype=float)

    def encode(self, state: EnvState) -> np.ndarray:
        return self.encode_parts(state.history, state.target.position_index, state.target.velocity_index)


class ReplayBuffer:
    """FIFO replay memory with uniform sampling.

    Items remember the episode they came from so recurrent agents can draw
    contiguous sequences that stay inside one episode.
    """

    def __init__(self, capacity: int, width: int):
        self.capacity = capacity
        self.states = np.zeros((capacity, width))
        self.next_states = np.zeros((capacity, width))
        self.actions = np.zeros(capacity, dtype=int)
        self.rewards = np.zeros(capacity)
        self.terminals = np.zeros(capacity, dtype=bool)
        self.episodes = np.zeros(capacity, dtype=np.int64)
        self.items: list[Transition | None] = [None] * capacity
        self.size = 0
        self.head = 0  # next write slot

    def __len__(self):
        return self.size

    def add(self, transition: Transition, state_vec, next_vec, episode: int):
        i = self.head
        self.states[i] = state_vec
        self.next_states[i] = next_vec
        self.actions[i] = transition.action_index
        self.rewards[i] = transition.reward
        self.terminals[i] = transition.terminal
        self.episodes[i] = episode
        self.items[i] = transition
        self.head = (self.head + 1) % self.capacity
        self.size = min(self.size + 1, self.capacity)

    def _chronological(self) -> np.ndarray:
        start = (self.head - self.size) % self.capacity
        return (start + np.arange(self.size)) % self.capacity

    def transitions(self) -> list[Transition]:
        return [self.items[i] for i in self._chronological()]

    def sample(self, rng, n: int) -> np.ndarray:
        return self._chronological()[rng.integers(self.size, size=n)]

    def sequence_starts(self, length: int) -> np.ndarray:
        order = self._chronological()
        if self.size < length:
            return np.zeros(0, dtype=int)
        eps = self.episodes[order]
        ok = eps[:self.size - length + 1] == eps[length - 1:]
        return np.flatnonzero(ok)

    def sample_sequences(self, rng, n: int, length: int) -> np.ndarray | None:
        """(n, length) slot indices of in-episode sequences, or None if too few exist."""
        starts = self.sequence_starts(length)
        if starts.size < n:
            return None
        order = self._chronological()
        picks = starts[rng.integers(starts.size, size=n)]
        return order[picks[:, None] + np.arange(length)]


def greedy(q_values) -> int:
    """Argmax with ties to the lowest index."""
    return int(np.argmax(q_values))


def dqn_target(reward: float, next_q_target, gamma: float, terminal: bool = False) -> float:
    if terminal:
        return float(reward)
    return float(reward + gamma * np.max(next_q_target))


def ddqn_target(reward: float, next_q_policy, next_q_target, gamma: float, terminal: bool = False) -> float:
    if terminal:
        return float(reward)
    return float(reward + gamma * np.asarray(next_q_target)[greedy(next_q_policy)])


class DeepQAgent:
    trainable = True

    def __init__(self, actions: Sequence[Mask], encoder: StateEncoder, config: AgentConfig = AgentConfig(), seed=None):
        self.actions = list(actions)
        self.encoder = encoder
        self.config = config
        self.name = config.variant
        ss = seed if isinstance(seed, np.random.SeedSequence) else np.random.SeedSequence(seed)
        seeds = ss.spawn(2)
        self.rng = np.random.default_rng(seeds[1])
        self.policy_net = QNetwork.build(encoder.width, len(self.actions), config.hidden_sizes,
                                         config.lstm_units if config.recurrent else None, seeds[0])
        self.target_net = neural.clone_into_target(self.policy_net)
        self.sgd = SgdConfig(config.learning_rate, config.clip_norm)
        self.buffer = ReplayBuffer(config.replay_capacity, encoder.width)
        self.window: deque = deque(maxlen=config.sequence_length)
        self.episode = 0
        self.train_steps = 0
        self.losses: list[float] = []

    # acting ---------------------------------------------------------------

    def begin_episode(self):
        self.window.clear()
        self.episode += 1

    def act_explore(self) -> int:
        return int(self.rng.integers(len(self.actions)))

    def q_values(self, state: EnvState) -> np.ndarray:
        x = self.encoder.encode(state)
        if self.config.recurrent:
            return self.policy_net.forward_sequence(np.array(list(self.window) + [x])[-self.config.sequence_length:])
        return self.policy_net.forward(x)

    def act(self, state: EnvState, explore: bool = False) -> int:
        x = self.encoder.encode(state)
        if self.config.recurrent:
            self.window.append(x)
        if explore:
            return self.act_explore()
        if self.config.recurrent:
            return greedy(self.policy_net.forward_sequence(np.array(self.window)))
        return greedy(self.policy_net.forward(x))

    # learning -------------------------------------------------------------

    def observe(self, transition: Transition):
        self.buffer.add(transition, self.encoder.encode(transition.state),
                        self.encoder.encode(transition.next_state), self.episode)

    def learn(self):
        return self.train_step()

    def end_offline(self):
        pass

    def _targets(self, next_x, rewards, terminals, sequence):
        fwd = "forward_all_steps" if sequence else "forward"
        q_next_target = getattr(self.target_net, fwd)(next_x)
        if self.config.double:
            chosen = np.argmax(getattr(self.policy_net, fwd)(next_x), axis=-1)
            bootstrap = np.take_along_axis(q_next_target, chosen[..., None], axis=-1)[..., 0]
        else:
            bootstrap = q_next_target.max(axis=-1)
        return rewards + self.config.gamma * np.where(terminals, 0.0, bootstrap)

    def train_step(self) -> float | None:
        """One SGD step on a replay batch; ``None`` when the memory is too small.

        Recurrent variants regress every prefix of each sampled sequence, so
        the short windows seen at the start of a CPI are trained too.
        """
        cfg = self.config
        if cfg.recurrent:
            idx = self.buffer.sample_sequences(self.rng, cfg.batch_size, cfg.sequence_length)
            if idx is None:
                return None
        else:
            if len(self.buffer) < cfg.batch_size:
                return None
            idx = self.buffer.sample(self.rng, cfg.batch_size)
        buf = self.buffer
        y = self._targets(buf.next_states[idx], buf.rewards[idx], buf.terminals[idx], cfg.recurrent)
        loss, grads = self.policy_net.backward(buf.states[idx], buf.actions[idx], y, sequence=cfg.recurrent)
        neural.sgd_step(self.policy_net, grads, self.sgd)
        self.train_steps += 1
        if self.train_steps % cfg.target_update_period == 0:
            self.target_net.copy_from(self.policy_net)
        self.losses.append(loss)
        return loss

    # persistence ----------------------------------------------------------

    def save(self, path):
        header = json.dumps({"kind": "deep", "config": asdict(self.config),
                             "encoder": asdict(self.encoder), "n_actions": len(self.actions)},
                            sort_keys=True).encode()
        with open(path, "wb") as fh:
            fh.write(b"CRAG" + struct.pack("<I", len(header)) + header)
            fh.write(neural.serialize(self.policy_net))

    @classmethod
    def load(cls, path, actions, seed=None) -> "DeepQAgent":
        with open(path, "rb") as fh:
            blob = fh.read()
        if blob[:4] != b"CRAG" or len(blob) < 8:
            raise neural.CheckpointError("not an agent checkpoint")
        (n,) = struct.unpack("<I", blob[4:8])
        try:
            header = json.loads(blob[8:8 + n])
        except ValueError:
            raise neural.CheckpointError("corrupt agent header") from None
        if header["n_actions"] != len(actions):
            raise neural.CheckpointError(
                f"checkpoint has {header['n_actions']} actions, environment has {len(actions)}")
        config = AgentConfig(**header["config"])
        agent = cls(actions, StateEncoder(**header["encoder"]), config, seed)
        net = neural.deserialize(blob[8 + n:])
        agent.policy_net.copy_from(net)
        agent.target_net.copy_from(net)
        return agent


# --------------------------------------------------------------------------
# phase runners


@dataclass
class PhaseLog:
    cpi_rewards: list[float] = field(default_factory=list)
    steps: list[StepMetrics] = field(default_factory=list)
    targets: list[TargetState] = field(default_factory=list)
    ended_early: bool = False


def run_phase(agent, env: SpectrumEnv, n_cpis: int, pulses_per_cpi: int, *, explore: bool, learn: bool,
              keep_steps: bool = True) -> PhaseLog:
    log = PhaseLog()
    if env.state is None:
        env.reset()
    state = env.state
    for _ in range(n_cpis):
        state = env.new_episode()
        log.targets.append(state.target)
        agent.begin_episode()
        total = 0.0
        count = 0
        for _ in range(pulses_per_cpi):
            a = agent.act(state, explore=explore)
            try:
                transition, metrics = env.step(a)
            except EndOfTrace:
                log.ended_early = True
                break
            if learn:
                agent.observe(transition)
                agent.learn()
            if keep_steps:
                log.steps.append(metrics)
            total += transition.reward
            count += 1
            state = transition.next_state
        if count:
            log.cpi_rewards.append(total / count)
        if log.ended_early:
            break
    return log


def run_offline_training(agent, env: SpectrumEnv, n_cpis: int, pulses_per_cpi: int = 128):
    """Uniform exploration; every transition is stored and trained on."""
    log = run_phase(agent, env, n_cpis, pulses_per_cpi, explore=True, learn=True, keep_steps=False)
    agent.end_offline()
    return agent, log


def run_online_evaluation(agent, env: SpectrumEnv, n_cpis: int, pulses_per_cpi: int = 128,
                          continue_learning: bool = True) -> PhaseLog:
    learn = continue_learning and getattr(agent, "trainable", False)
    return run_phase(agent, env, n_cpis, pulses_per_cpi, explore=False, learn=learn)


# --------------------------------------------------------------------------
# look-up table export


@dataclass
class LookUpTable:
    table: dict
    history_length: int
    n_subbands: int

    def __len__(self):
        return len(self.table)

    def lookup(self, history: Sequence[Mask]) -> int:
        return self.table[tuple(tuple(m) for m in history)]

    def export(self, path):
        with open(path, "w", encoding="utf-8", newline="\n") as fh:
            for key, action in self.table.items():
                fh.write("|".join("".join(map(str, m)) for m in key) + f" -> {action}\n")


MAX_LUT_BITS = 20


def export_lut(agent: DeepQAgent) -> LookUpTable:
    """Greedy action for every interference history, target features at mid-grid."""
    enc = agent.encoder
    if agent.config.recurrent:
        raise InvalidInput("LUT export needs a feed-forward agent")
    bits = enc.history_length * enc.n_subbands
    if bits > MAX_LUT_BITS:
        raise InvalidInput(f"LUT domain of 2^{bits} entries is too large (limit 2^{MAX_LUT_BITS})")
    pos, vel = enc.n_positions // 2, enc.n_velocities // 2
    table = {}
    for flat in itertools.product((0, 1), repeat=bits):
        key = tuple(tuple(flat[k * enc.n_subbands:(k + 1) * enc.n_subbands]) for k in range(enc.history_length))
        x = enc.encode_parts(key, pos, vel)
        table[key] = greedy(agent.policy_net.forward(x))
    return LookUpTable(table, enc.history_length, enc.n_subbands)


def lut_latency(lut: LookUpTable, n_lookups: int = 100_000, seed: int = 0) -> float:
    """Mean seconds per lookup over random keys from the table's domain."""
    keys = list(lut.table)
    rng = np.random.default_rng(seed)
    picks = [keys[i] for i in rng.integers(len(keys), size=n_lookups)]
    table = lut.table
    start = time.perf_counter()
    for k in picks:
        table[k]
    return (time.perf_counter() - start) / n_lookups
