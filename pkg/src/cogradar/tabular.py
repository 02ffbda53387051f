"""Baseline decision makers and the tabular policy-iteration solver.

The solver works on an empirical model: transition weights and mean rewards
accumulated from observed ``(s, a, r, s')`` tuples.  State ids are any
hashable values; the agents below use tuples of interference masks,
optionally extended with the target's position and velocity indices.
"""

from __future__ import annotations

import os
from collections import defaultdict
from dataclasses import dataclass, field
from typing import Callable, Hashable, Iterable, Sequence

import numpy as np
import scipy.sparse as sp

from .spectrum import (EnvState, InvalidInput, Mask, RewardParams, Transition,
                       enumerate_actions, largest_free_block, reward)


class SolverError(RuntimeError):
    """Policy evaluation failed to converge within the sweep budget."""


def saa_act(previous_theta: Sequence[int]) -> Mask:
    """Sense-and-avoid: largest vacant block of the last observed mask.

    A fully occupied channel leaves nothing to avoid, so the full band is used.
    """
    block = largest_free_block(previous_theta)
    if not any(block):
        return (1,) * len(previous_theta)
    return block


# --------------------------------------------------------------------------
# empirical model


@dataclass
class TabularModel:
    n_actions: int
    transition_counts: dict = field(default_factory=lambda: defaultdict(dict))
    reward_sums: dict = field(default_factory=dict)

    def __post_init__(self):
        self._compiled = None

    def add(self, s: Hashable, a: int, r: float, s_next: Hashable, weight: float = 1.0):
        row = self.transition_counts.setdefault((s, a), {})
        row[s_next] = row.get(s_next, 0.0) + weight
        acc = self.reward_sums.setdefault((s, a, s_next), [0.0, 0.0])
        acc[0] += r * weight
        acc[1] += weight
        self._compiled = None

    def observed(self, s, a) -> bool:
        return (s, a) in self.transition_counts

    def probabilities(self, s, a) -> dict:
        row = self.transition_counts.get((s, a))
        if not row:
            return {}
        total = sum(row.values())
        return {k: v / total for k, v in row.items()}

    def mean_reward(self, s, a, s_next) -> float:
        total, count = self.reward_sums[(s, a, s_next)]
        return total / count

    @property
    def states(self) -> list:
        seen = {}
        for (s, _), row in self.transition_counts.items():
            seen.setdefault(s, None)
            for s_next in row:
                seen.setdefault(s_next, None)
        return list(seen)

    @classmethod
    def from_arrays(cls, P: np.ndarray, R: np.ndarray, states: Sequence | None = None) -> "TabularModel":
        """Exact model from ``P[s, a, s']`` and ``R[s, a, s']``; all-zero rows mean unobserved."""
        P = np.asarray(P, dtype=float)
        R = np.asarray(R, dtype=float)
        n_s, n_a, _ = P.shape
        names = list(range(n_s)) if states is None else list(states)
        model = cls(n_actions=n_a)
        for s in range(n_s):
            for a in range(n_a):
                for s2 in np.flatnonzero(P[s, a]):
                    model.add(names[s], a, R[s, a, s2], names[s2], weight=P[s, a, s2])
        return model

    def compile(self) -> "_CompiledModel":
        if self._compiled is None:
            self._compiled = _CompiledModel.build(self)
        return self._compiled


@dataclass
class _CompiledModel:
    states: list
    index: dict
    observed: np.ndarray       # (S, A) bool
    transition: sp.csr_matrix  # (S*A, S)
    expected_reward: np.ndarray  # (S, A)

    @classmethod
    def build(cls, model: TabularModel) -> "_CompiledModel":
        states = model.states
        index = {s: i for i, s in enumerate(states)}
        n_s, n_a = len(states), model.n_actions
        observed = np.zeros((n_s, n_a), dtype=bool)
        expected = np.zeros((n_s, n_a))
        rows, cols, vals = [], [], []
        for (s, a), row in model.transition_counts.items():
            i = index[s]
            observed[i, a] = True
            total = sum(row.values())
            for s_next, w in row.items():
                p = w / total
                rows.append(i * n_a + a)
                cols.append(index[s_next])
                vals.append(p)
                expected[i, a] += p * model.mean_reward(s, a, s_next)
        transition = sp.csr_matrix((vals, (rows, cols)), shape=(n_s * n_a, n_s))
        return cls(states, index, observed, transition, expected)

    def lookahead(self, values: np.ndarray, gamma: float) -> np.ndarray:
        n_s, n_a = self.observed.shape
        q = self.expected_reward + gamma * (self.transition @ values).reshape(n_s, n_a)
        return np.where(self.observed, q, -np.inf)


def fit_model(transitions: Iterable[Transition], n_actions: int,
              state_key: Callable[[EnvState], Hashable] | None = None) -> TabularModel:
    """Empirical transition frequencies and mean rewards."""
    key = state_key or (lambda st: st.interference)
    model = TabularModel(n_actions=n_actions)
    count = 0
    for t in transitions:
        model.add(key(t.state), t.action_index, t.reward, key(t.next_state))
        count += 1
    if count == 0:
        raise InvalidInput("fit_model needs at least one transition")
    return model


# --------------------------------------------------------------------------
# values and policies


@dataclass
class ValueTable:
    values: dict

    def __getitem__(self, s):
        return self.values[s]

    def as_array(self, states: Sequence) -> np.ndarray:
        return np.array([self.values.get(s, 0.0) for s in states])


@dataclass
class TabularPolicy:
    action_by_state: dict
    default_action: int = 0

    def act(self, s, fallback: int | None = None) -> int:
        if s in self.action_by_state:
            return self.action_by_state[s]
        return self.default_action if fallback is None else fallback

    def export(self, path: str | os.PathLike):
        with open(path, "w", encoding="utf-8", newline="\n") as fh:
            fh.write(f"# default_action={self.default_action}\n")
            for s, a in self.action_by_state.items():
                fh.write(f"{_format_state(s)} -> {a}\n")


def _format_state(s) -> str:
    if isinstance(s, tuple):
        return "|".join(_format_state(x) for x in s) if any(isinstance(x, tuple) for x in s) \
            else "".join(str(x) for x in s) if all(x in (0, 1) for x in s) else ",".join(map(str, s))
    return str(s)


def initial_policy(model: TabularModel) -> TabularPolicy:
    c = model.compile()
    actions = {}
    for i, s in enumerate(c.states):
        obs = np.flatnonzero(c.observed[i])
        if obs.size:
            actions[s] = int(obs[0])
    return TabularPolicy(actions)


def policy_evaluation(policy: TabularPolicy, model: TabularModel, gamma: float,
                      epsilon: float = 1e-8, max_sweeps: int = 100_000) -> ValueTable:
    """Iterated Bellman-expectation sweeps until the largest change drops below ``epsilon``.

    States without any observed action have no outgoing model and keep value 0.
    """
    if not 0.0 <= gamma <= 1.0:
        raise InvalidInput(f"gamma must lie in [0, 1], got {gamma}")
    c = model.compile()
    n_s, n_a = c.observed.shape
    rows = np.full(n_s, -1)
    for i, s in enumerate(c.states):
        if s in policy.action_by_state:
            a = policy.action_by_state[s]
            if not c.observed[i, a]:
                raise InvalidInput(f"policy action {a} at state {s!r} has no model")
            rows[i] = i * n_a + a
    active = rows >= 0
    p_pi = c.transition[rows[active]]
    r_pi = c.expected_reward[np.flatnonzero(active), (rows[active] % n_a)]
    values = np.zeros(n_s)
    for _ in range(max_sweeps):
        new = np.zeros(n_s)
        new[active] = r_pi + gamma * (p_pi @ values)
        delta = np.max(np.abs(new - values)) if n_s else 0.0
        values = new
        if delta < epsilon:
            return ValueTable(dict(zip(c.states, values.tolist())))
    raise SolverError(f"policy evaluation did not converge in {max_sweeps} sweeps (last change {delta:.3g})")


def policy_improvement(values: ValueTable, model: TabularModel, gamma: float,
                       tie_tol: float = 1e-9) -> TabularPolicy:
    """Greedy one-step lookahead; near-ties go to the lowest action index."""
    c = model.compile()
    q = c.lookahead(values.as_array(c.states), gamma)
    actions = {}
    for i, s in enumerate(c.states):
        row = q[i]
        if not np.any(np.isfinite(row)):
            continue
        best = np.max(row)
        actions[s] = int(np.flatnonzero(row >= best - tie_tol)[0])
    return TabularPolicy(actions)


def policy_iteration_solve(model: TabularModel, gamma: float = 0.9, epsilon: float = 1e-8,
                           max_iterations: int = 1000) -> tuple[TabularPolicy, ValueTable]:
    policy = initial_policy(model)
    for _ in range(max_iterations):
        values = policy_evaluation(policy, model, gamma, epsilon)
        improved = policy_improvement(values, model, gamma)
        if improved.action_by_state == policy.action_by_state:
            return policy, values
        policy = improved
    raise SolverError(f"policy iteration did not stabilise in {max_iterations} iterations")


def bellman_residual(values: ValueTable, model: TabularModel, gamma: float) -> float:
    c = model.compile()
    v = values.as_array(c.states)
    q = c.lookahead(v, gamma)
    has = c.observed.any(axis=1)
    if not has.any():
        return 0.0
    return float(np.max(np.abs(q[has].max(axis=1) - v[has])))


# --------------------------------------------------------------------------
# exact interference dynamics (for the optimal-policy reference)


def exact_theta_model(kind: str, n_subbands: int, params: RewardParams = RewardParams(),
                      p_switch: float | None = None, active_mask: Sequence[int] | None = None,
                      cycle: Sequence[Sequence[int]] | None = None) -> TabularModel:
    """Model keyed on the last observed mask, built from the true source dynamics."""
    actions = enumerate_actions(n_subbands)
    succ: dict[Mask, dict[Mask, float]] = {}
    if kind == "sweep":
        for k in range(n_subbands):
            cur = tuple(int(i == k) for i in range(n_subbands))
            nxt = tuple(int(i == (k + 1) % n_subbands) for i in range(n_subbands))
            succ[cur] = {nxt: 1.0}
    elif kind in ("markov", "schedule"):
        on = tuple(active_mask)
        off = (0,) * n_subbands
        p = float(p_switch)
        succ[off] = {on: p, off: 1 - p}
        succ[on] = {off: p, on: 1 - p}
    elif kind == "cycle":
        masks = [tuple(m) for m in cycle]
        for i, m in enumerate(masks):
            nxt = masks[(i + 1) % len(masks)]
            row = succ.setdefault(m, {})
            row[nxt] = row.get(nxt, 0.0) + 1.0
    else:
        raise InvalidInput(f"no exact model for interference kind {kind!r}")
    model = TabularModel(n_actions=len(actions))
    for s, row in succ.items():
        for a_idx, a in enumerate(actions):
            for s_next, w in row.items():
                if w > 0:
                    model.add((s,), a_idx, reward(a, s_next, params), (s_next,), weight=w)
    return model


# --------------------------------------------------------------------------
# agents


class BaselineAgent:
    trainable = False
    name = "baseline"

    def __init__(self, actions: Sequence[Mask], seed=None):
        self.actions = list(actions)
        self.index = {a: i for i, a in enumerate(self.actions)}
        self.rng = np.random.default_rng(seed)

    def begin_episode(self):
        pass

    def act_explore(self) -> int:
        return int(self.rng.integers(len(self.actions)))

    def observe(self, transition: Transition):
        pass

    def learn(self):
        return None

    def end_offline(self):
        pass


class SaaAgent(BaselineAgent):
    name = "saa"

    def act(self, state: EnvState, explore: bool = False) -> int:
        return self.index[saa_act(state.interference)]


class RandomAgent(BaselineAgent):
    name = "random"

    def act(self, state: EnvState, explore: bool = False) -> int:
        return self.act_explore()


class FullBandAgent(BaselineAgent):
    name = "full_band"

    def act(self, state: EnvState, explore: bool = False) -> int:
        return self.index[(1,) * len(self.actions[0])]


def theta_history_key(history_length: int = 1, include_target: bool = False):
    def key(state: EnvState):
        hist = state.history[-history_length:]
        if len(hist) < history_length:
            hist = ((0,) * len(state.interference),) * (history_length - len(hist)) + hist
        if include_target:
            return hist + ((state.target.position_index, state.target.velocity_index),)
        return hist
    return key


class PolicyIterationAgent(BaselineAgent):
    """Explores uniformly offline, then fits a model and solves it.

    The solved policy is frozen; unseen states fall back to sense-and-avoid.
    """

    trainable = True
    name = "policy_iteration"

    def __init__(self, actions, gamma: float = 0.9, history_length: int = 1,
                 include_target: bool = False, min_visits: int = 1, epsilon: float = 1e-8, seed=None):
        super().__init__(actions, seed)
        self.gamma = gamma
        self.epsilon = epsilon
        self.min_visits = min_visits
        self.state_key = theta_history_key(history_length, include_target)
        self.transitions: list[Transition] = []
        self.policy: TabularPolicy | None = None
        self.values: ValueTable | None = None

    def observe(self, transition: Transition):
        if self.policy is None:
            self.transitions.append(transition)

    def end_offline(self):
        if not self.transitions:
            self.policy = TabularPolicy({})
            return
        model = fit_model(self.transitions, len(self.actions), self.state_key)
        if self.min_visits > 1:
            model = _prune(model, self.min_visits)
        self.policy, self.values = policy_iteration_solve(model, self.gamma, self.epsilon)
        self.transitions = []

    def act(self, state: EnvState, explore: bool = False) -> int:
        if explore or self.policy is None:
            return self.act_explore()
        fallback = self.index[saa_act(state.interference)]
        return self.policy.act(self.state_key(state), fallback)


def _prune(model: TabularModel, min_visits: int) -> TabularModel:
    pruned = TabularModel(model.n_actions)
    for (s, a), row in model.transition_counts.items():
        if sum(row.values()) >= min_visits:
            for s_next in row:
                total, count = model.reward_sums[(s, a, s_next)]
                pruned.add(s, a, total / count, s_next, weight=row[s_next])
    return pruned


class OptimalPolicyAgent(BaselineAgent):
    """Reference agent acting on a policy solved from the true dynamics.

    ``policy_for_p`` maps a switch probability to a solved policy; the agent
    asks ``generator.upcoming_p()`` which one applies.  For sources without a
    probability a single policy is used.
    """

    name = "pi_star_oracle"

    def __init__(self, actions, policies, generator=None):
        super().__init__(actions)
        self.policies = policies
        self.generator = generator

    def act(self, state: EnvState, explore: bool = False) -> int:
        if isinstance(self.policies, TabularPolicy):
            policy = self.policies
        else:
            policy = self.policies[self.generator.upcoming_p()]
        fallback = self.index[saa_act(state.interference)]
        return policy.act((state.interference,), fallback)
