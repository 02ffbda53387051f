"""Shared-channel coexistence environment.

The channel is split into ``N`` equal sub-bands.  Both the communications
occupancy ``theta`` and the radar action are binary masks of length ``N``;
actions are restricted to a single contiguous run of set bits.

Time advances one radar pulse per step.  The radar picks its waveform from
what it has already observed (the previous interference mask) and is scored
against the interference that is present while the pulse is on the air.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np

Mask = tuple[int, ...]


class InvalidInput(ValueError):
    """Raised for malformed masks or mismatched lengths."""


class EndOfTrace(Exception):
    """Raised when a non-wrapping interference source has no more frames."""


@dataclass(frozen=True)
class ChannelSpec:
    n_subbands: int = 5
    total_bandwidth_hz: float = 100e6

    def __post_init__(self):
        if int(self.n_subbands) != self.n_subbands or self.n_subbands < 2:
            raise InvalidInput(f"n_subbands must be an integer >= 2, got {self.n_subbands}")
        if not self.total_bandwidth_hz > 0:
            raise InvalidInput("total_bandwidth_hz must be positive")

    @property
    def subband_bandwidth_hz(self) -> float:
        return self.total_bandwidth_hz / self.n_subbands

    @property
    def n_actions(self) -> int:
        return self.n_subbands * (self.n_subbands + 1) // 2


@dataclass(frozen=True)
class RewardParams:
    beta1: float = 5.0
    beta2: float = 6.0
    alpha1: float = 1.0
    alpha2: float = 1.0
    large_penalty: float = -10.0

    def __post_init__(self):
        if not 0 <= self.beta1 < self.beta2:
            raise InvalidInput(f"need 0 <= beta1 < beta2, got ({self.beta1}, {self.beta2})")


@dataclass(frozen=True)
class TargetState:
    position_index: int
    velocity_index: int
    n_positions: int = 50
    n_velocities: int = 10
    range_min_m: float = 2_000.0
    range_max_m: float = 12_000.0

    def __post_init__(self):
        if not 0 <= self.position_index < self.n_positions:
            raise InvalidInput(f"position_index {self.position_index} outside [0, {self.n_positions})")
        if not 0 <= self.velocity_index < self.n_velocities:
            raise InvalidInput(f"velocity_index {self.velocity_index} outside [0, {self.n_velocities})")
        if not 0 < self.range_min_m <= self.range_max_m:
            raise InvalidInput("range span must be positive and ordered")

    @property
    def range_m(self) -> float:
        if self.n_positions == 1:
            return self.range_min_m
        frac = self.position_index / (self.n_positions - 1)
        return self.range_min_m + frac * (self.range_max_m - self.range_min_m)

    @property
    def velocity_step(self) -> int:
        return velocity_step(self.velocity_index, self.n_velocities)


@dataclass(frozen=True)
class EnvState:
    interference: Mask
    target: TargetState
    history: tuple[Mask, ...] = ()

    def __post_init__(self):
        if not self.history:
            object.__setattr__(self, "history", (self.interference,))
        if self.history[-1] != self.interference:
            raise InvalidInput("newest history entry must equal the interference mask")


@dataclass(frozen=True)
class Transition:
    state: EnvState
    action_index: int
    reward: float
    next_state: EnvState
    terminal: bool = False


@dataclass(frozen=True)
class StepMetrics:
    action_index: int
    action: Mask
    theta: Mask
    n_collisions: int
    n_missed: int
    bandwidth_hz: float
    adapted: bool
    range_m: float
    reward: float


def as_mask(bits: Sequence[int], n: int | None = None) -> Mask:
    mask = tuple(int(b) for b in bits)
    if any(b not in (0, 1) for b in mask):
        raise InvalidInput(f"mask entries must be 0 or 1: {mask}")
    if n is not None and len(mask) != n:
        raise InvalidInput(f"mask width {len(mask)} != {n}")
    return mask


def enumerate_actions(channel: ChannelSpec | int) -> list[Mask]:
    """All contiguous-run masks, ordered by start index then run length.

    The position of a mask in the returned list is its action index.
    """
    n = channel if isinstance(channel, int) else channel.n_subbands
    actions = []
    for start in range(n):
        for length in range(1, n - start + 1):
            bits = [0] * n
            bits[start:start + length] = [1] * length
            actions.append(tuple(bits))
    return actions


def _check_pair(a: Sequence[int], theta: Sequence[int]):
    if len(a) != len(theta):
        raise InvalidInput(f"mask lengths differ: {len(a)} vs {len(theta)}")


def count_collisions(a: Sequence[int], theta: Sequence[int]) -> int:
    _check_pair(a, theta)
    return sum(1 for x, y in zip(a, theta) if x == 1 and y == 1)


def largest_free_block(theta: Sequence[int]) -> Mask:
    """Longest run of vacant sub-bands, lowest start index on ties."""
    n = len(theta)
    best_start, best_len = 0, 0
    i = 0
    while i < n:
        if theta[i] == 0:
            j = i
            while j < n and theta[j] == 0:
                j += 1
            if j - i > best_len:
                best_start, best_len = i, j - i
            i = j
        else:
            i += 1
    bits = [0] * n
    bits[best_start:best_start + best_len] = [1] * best_len
    return tuple(bits)


def count_missed_opportunities(a: Sequence[int], theta: Sequence[int]) -> int:
    _check_pair(a, theta)
    best = largest_free_block(theta)
    matched = sum(1 for x, y in zip(best, a) if x == 1 and y == 1)
    return max(sum(best) - matched, 0)


def reward_from_counts(n_collisions: int, n_missed: int, params: RewardParams) -> float:
    if n_collisions > 0:
        return 0.0
    if n_missed == 0:
        return 1.0
    return params.beta1 / (params.beta2 * n_missed)


def reward(a: Sequence[int], theta: Sequence[int], params: RewardParams = RewardParams()) -> float:
    """Collision / missed-opportunity reward in [0, 1]."""
    return reward_from_counts(count_collisions(a, theta),
                              count_missed_opportunities(a, theta), params)


def reward_sinr_bw(sinr_db: float, n_bands: float, params: RewardParams = RewardParams()) -> float:
    """Weighted SINR/bandwidth reward; bandwidth is counted in sub-bands."""
    if sinr_db < 0:
        return params.large_penalty
    return params.alpha1 * sinr_db + params.alpha2 * n_bands


def velocity_step(velocity_index: int, n_velocities: int) -> int:
    """Signed position step per pulse for a velocity index.

    Indices map symmetrically so that ``i`` and ``V-1-i`` have opposite
    steps.  Odd ``V`` includes a stationary middle index; even ``V`` skips 0.
    """
    half = n_velocities // 2
    step = velocity_index - half
    if n_velocities % 2 == 0 and velocity_index >= half:
        step += 1
    return step


def advance_target(target: TargetState) -> TargetState:
    """Constant-velocity move with reflection at the ends of the position grid."""
    step = target.velocity_step
    if step == 0:
        return target
    last = target.n_positions - 1
    pos = target.position_index + step
    vel = target.velocity_index
    flipped = False
    # reflect until inside; large steps on tiny grids may bounce more than once
    while pos < 0 or pos > last:
        if last == 0:
            pos = 0
            break
        pos = -pos if pos < 0 else 2 * last - pos
        flipped = not flipped
    if flipped:
        vel = target.n_velocities - 1 - vel
    return replace(target, position_index=pos, velocity_index=vel)


def env_step(state: EnvState, action_index: int, generator, params: RewardParams,
             actions: Sequence[Mask], history_length: int = 1,
             previous_action: int | None = None) -> tuple[Transition, StepMetrics]:
    """Transmit ``actions[action_index]`` for one pulse.

    Draws the interference present during the pulse from ``generator``,
    scores the action against it and moves the target.  The returned
    transition's next state carries the newly revealed interference.
    Raises :class:`EndOfTrace` when a terminating trace has run dry.
    """
    if not 0 <= action_index < len(actions):
        raise InvalidInput(f"action index {action_index} outside [0, {len(actions)})")
    action = actions[action_index]
    theta = generator.next_theta()
    n_c = count_collisions(action, theta)
    n_mo = count_missed_opportunities(action, theta)
    r = reward_from_counts(n_c, n_mo, params)
    history = (state.history + (theta,))[-history_length:]
    next_state = EnvState(theta, advance_target(state.target), history)
    terminal = bool(getattr(generator, "exhausted", False))
    transition = Transition(state, action_index, r, next_state, terminal)
    n_bands = sum(action)
    metrics = StepMetrics(
        action_index=action_index,
        action=action,
        theta=theta,
        n_collisions=n_c,
        n_missed=n_mo,
        bandwidth_hz=float(n_bands),  # rescaled by SpectrumEnv
        adapted=previous_action is not None and previous_action != action_index,
        range_m=state.target.range_m,
        reward=r,
    )
    return transition, metrics


@dataclass
class TargetSpec:
    n_positions: int = 50
    n_velocities: int = 10
    range_min_m: float = 2_000.0
    range_max_m: float = 12_000.0

    def draw(self, rng: np.random.Generator) -> TargetState:
        return TargetState(
            position_index=int(rng.integers(self.n_positions)),
            velocity_index=int(rng.integers(self.n_velocities)),
            n_positions=self.n_positions,
            n_velocities=self.n_velocities,
            range_min_m=self.range_min_m,
            range_max_m=self.range_max_m,
        )


@dataclass
class SpectrumEnv:
    """Stateful wrapper around :func:`env_step`.

    One episode is one CPI: :meth:`new_episode` redraws the target while the
    interference process keeps running.
    """

    channel: ChannelSpec
    generator: object
    reward_params: RewardParams = field(default_factory=RewardParams)
    target_spec: TargetSpec = field(default_factory=TargetSpec)
    history_length: int = 1
    seed: int | np.random.SeedSequence | None = None

    def __post_init__(self):
        self.actions = enumerate_actions(self.channel)
        self.rng = np.random.default_rng(self.seed)
        self.state: EnvState | None = None
        self.previous_action: int | None = None

    @property
    def n_actions(self) -> int:
        return len(self.actions)

    def reset(self) -> EnvState:
        theta = self.generator.next_theta()
        if len(theta) != self.channel.n_subbands:
            raise InvalidInput(f"generator mask width {len(theta)} != {self.channel.n_subbands}")
        self.state = EnvState(theta, self.target_spec.draw(self.rng), (theta,))
        self.previous_action = None
        return self.state

    def new_episode(self) -> EnvState:
        if self.state is None:
            return self.reset()
        self.state = replace(self.state, target=self.target_spec.draw(self.rng))
        return self.state

    def step(self, action_index: int) -> tuple[Transition, StepMetrics]:
        if self.state is None:
            raise RuntimeError("call reset() before step()")
        transition, metrics = env_step(self.state, action_index, self.generator,
                                       self.reward_params, self.actions,
                                       self.history_length, self.previous_action)
        metrics = replace(metrics, bandwidth_hz=metrics.bandwidth_hz * self.channel.subband_bandwidth_hz)
        self.state = transition.next_state
        self.previous_action = action_index
        return transition, metrics
