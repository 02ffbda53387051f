import itertools

import numpy as np
import pytest
from hypothesis import given, strategies as st

from cogradar.interference import SweepGenerator
from cogradar.spectrum import (ChannelSpec, EnvState, InvalidInput, RewardParams, SpectrumEnv, TargetSpec,
                               TargetState, advance_target, count_collisions, count_missed_opportunities,
                               enumerate_actions, env_step, largest_free_block, reward, reward_from_counts,
                               reward_sinr_bw, velocity_step)

masks5 = st.lists(st.integers(0, 1), min_size=5, max_size=5).map(tuple)


def brute_force_runs(n):
    out = set()
    for bits in itertools.product((0, 1), repeat=n):
        ones = [i for i, b in enumerate(bits) if b]
        if ones and ones[-1] - ones[0] + 1 == len(ones):
            out.add(bits)
    return out


class TestEnumerateActions:
    def test_five_bands_gives_fifteen(self):
        assert len(enumerate_actions(ChannelSpec())) == 15

    def test_single_band(self):
        assert enumerate_actions(1) == [(1,)]

    def test_three_band_order(self):
        assert enumerate_actions(3) == [(1, 0, 0), (1, 1, 0), (1, 1, 1), (0, 1, 0), (0, 1, 1), (0, 0, 1)]

    @pytest.mark.parametrize("n", range(1, 11))
    def test_matches_brute_force(self, n):
        acts = enumerate_actions(n)
        assert len(acts) == n * (n + 1) // 2
        assert set(acts) == brute_force_runs(n)
        assert len(set(acts)) == len(acts)


class TestCounts:
    @pytest.mark.parametrize("a,theta,expected", [
        ((0, 0, 1, 1, 1), (1, 1, 0, 0, 0), 0),
        ((1, 1, 1, 0, 0), (1, 1, 0, 0, 0), 2),
        ((1, 1, 1, 1, 1), (1, 1, 1, 1, 1), 5),
    ])
    def test_collisions(self, a, theta, expected):
        assert count_collisions(a, theta) == expected

    @pytest.mark.parametrize("theta,expected", [
        ((1, 1, 0, 0, 0), (0, 0, 1, 1, 1)),
        ((0, 0, 1, 0, 0), (1, 1, 0, 0, 0)),
        ((1, 1, 1, 1, 1), (0, 0, 0, 0, 0)),
    ])
    def test_largest_free_block(self, theta, expected):
        assert largest_free_block(theta) == expected

    @pytest.mark.parametrize("a,theta,expected", [
        ((0, 0, 1, 1, 1), (1, 1, 0, 0, 0), 0),
        ((0, 0, 0, 1, 1), (1, 1, 0, 0, 0), 1),
        ((1, 0, 0, 0, 0), (1, 1, 0, 0, 0), 3),
    ])
    def test_missed(self, a, theta, expected):
        assert count_missed_opportunities(a, theta) == expected

    def test_length_mismatch(self):
        with pytest.raises(InvalidInput):
            count_collisions((1, 0), (1, 0, 0))
        with pytest.raises(InvalidInput):
            count_missed_opportunities((1, 0), (1, 0, 0))

    def test_free_block_never_overlaps_exhaustive(self):
        for theta in itertools.product((0, 1), repeat=5):
            assert count_collisions(largest_free_block(theta), theta) == 0

    @given(st.sampled_from(enumerate_actions(5)), masks5)
    def test_bounds(self, a, theta):
        assert 0 <= count_collisions(a, theta) <= 5
        assert 0 <= count_missed_opportunities(a, theta) <= 4


class TestReward:
    def test_examples(self):
        p = RewardParams()
        assert reward_from_counts(0, 1, p) == pytest.approx(5 / 6)
        assert reward_from_counts(2, 3, p) == 0.0
        assert reward_from_counts(0, 4, p) == pytest.approx(5 / 24)

    def test_sinr_bw(self):
        assert reward_sinr_bw(10, 4) == 14
        assert reward_sinr_bw(-1, 4) == RewardParams().large_penalty
        assert reward_sinr_bw(3, 2, RewardParams(alpha1=0, alpha2=0)) == 0

    def test_params_validated(self):
        with pytest.raises(InvalidInput):
            RewardParams(beta1=6, beta2=5)

    @given(masks5, masks5)
    def test_range_and_unit_iff(self, a, theta):
        r = reward(a, theta)
        assert 0.0 <= r <= 1.0
        perfect = count_collisions(a, theta) == 0 and count_missed_opportunities(a, theta) == 0
        assert (r == 1.0) == perfect

    @given(st.integers(1, 3))
    def test_monotone_in_missed(self, n):
        p = RewardParams()
        assert reward_from_counts(0, n + 1, p) <= reward_from_counts(0, n, p)


class TestTarget:
    def test_unit_step(self):
        t = TargetState(10, 5, n_positions=50, n_velocities=10)
        assert t.velocity_step == 1
        assert advance_target(t).position_index == 11

    def test_reflection(self):
        t = TargetState(49, 5, n_positions=50, n_velocities=10)
        moved = advance_target(t)
        assert moved.position_index == 48
        assert moved.velocity_step == -1

    def test_stationary(self):
        t = TargetState(7, 2, n_positions=20, n_velocities=5)
        assert t.velocity_step == 0
        assert advance_target(t) == t

    @given(st.integers(1, 12), st.integers(1, 9), st.data())
    def test_stays_on_grid(self, n_pos, n_vel, data):
        pos = data.draw(st.integers(0, n_pos - 1))
        vel = data.draw(st.integers(0, n_vel - 1))
        t = TargetState(pos, vel, n_positions=n_pos, n_velocities=n_vel)
        for _ in range(30):
            t = advance_target(t)
            assert 0 <= t.position_index < n_pos
            assert abs(t.velocity_step) == abs(velocity_step(vel, n_vel))


class TestEnvStep:
    def test_sweep_example(self):
        # pulse sees [10000]; the next draw reveals [01000]
        acts = enumerate_actions(5)
        gen = SweepGenerator()
        prev = EnvState((0, 0, 0, 0, 1), TargetState(0, 5))
        tr, m = env_step(prev, acts.index((0, 1, 1, 1, 1)), gen, RewardParams(), acts)
        assert m.theta == (1, 0, 0, 0, 0) and tr.reward == 1.0
        assert gen.next_theta() == (0, 1, 0, 0, 0)

    def test_all_ones_always_zero(self):
        acts = enumerate_actions(5)

        class Jam:
            def next_theta(self):
                return (1,) * 5

        state = EnvState((1,) * 5, TargetState(0, 5))
        for i in range(15):
            assert env_step(state, i, Jam(), RewardParams(), acts)[0].reward == 0.0

    def test_empty_full_band(self):
        acts = enumerate_actions(5)

        class Quiet:
            def next_theta(self):
                return (0,) * 5

        tr, m = env_step(EnvState((0,) * 5, TargetState(0, 5)), acts.index((1,) * 5), Quiet(), RewardParams(), acts)
        assert tr.reward == 1.0 and m.n_collisions == 0 and m.n_missed == 0

    def test_bad_action(self):
        with pytest.raises(InvalidInput):
            env_step(EnvState((0,) * 5, TargetState(0, 5)), 15, SweepGenerator(), RewardParams(), enumerate_actions(5))

    def test_history_window(self):
        env = SpectrumEnv(ChannelSpec(), SweepGenerator(), history_length=3, seed=0)
        env.reset()
        for _ in range(5):
            tr, _ = env.step(0)
            assert len(tr.next_state.history) <= 3
            assert tr.next_state.history[-1] == tr.next_state.interference

    def test_bandwidth_and_adaptation(self):
        env = SpectrumEnv(ChannelSpec(), SweepGenerator(), seed=0)
        env.reset()
        _, m0 = env.step(2)
        _, m1 = env.step(2)
        _, m2 = env.step(3)
        assert m0.bandwidth_hz == pytest.approx(60e6)
        assert (m0.adapted, m1.adapted, m2.adapted) == (False, False, True)

    def test_reproducible(self):
        def rollout():
            env = SpectrumEnv(ChannelSpec(), SweepGenerator(), target_spec=TargetSpec(), seed=123)
            env.reset()
            rng = np.random.default_rng(0)
            out = []
            for k in range(50):
                if k % 10 == 0:
                    env.new_episode()
                tr, m = env.step(int(rng.integers(15)))
                out.append((tr.reward, m.range_m, tr.next_state))
            return out

        assert rollout() == rollout()
