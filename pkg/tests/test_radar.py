import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from cogradar.radar import (CfarConfig, CpiOutcome, LfmWaveform, LinkBudget, RadarConfig, RangeDopplerMap,
                            RocSweep, adaptation_flag, aggregate_metrics, ca_cfar, cfar_scale,
                            doppler_sidelobe_ratio, pd_at_fa, roc_points, score_detections, simulate_cpi, sinr,
                            synth_chirp, waveform_for_action)
from cogradar.interference import SweepGenerator
from cogradar.spectrum import ChannelSpec, InvalidInput, SpectrumEnv, StepMetrics, TargetState, enumerate_actions
from cogradar.tabular import SaaAgent

CH = ChannelSpec()
LINK = LinkBudget()


def step(action, theta=(0,) * 5, n_c=0, n_mo=0, rng=5_000.0):
    return StepMetrics(0, action, theta, n_c, n_mo, sum(action) * 20e6, False, rng, 1.0)


class TestSinr:
    def test_collision_free_is_snr(self):
        s = sinr(LINK, 5e3, 0, 5, 60e6)
        snr = 10 * np.log10(LINK.signal_power_w(5e3) / LINK.noise_power_w(60e6))
        assert s == pytest.approx(snr)
        loud = LinkBudget(interference_power_w=1.0)
        assert sinr(loud, 5e3, 0, 5, 60e6) == pytest.approx(s)

    def test_range_law(self):
        assert sinr(LINK, 4e3, 0, 5, 20e6) - sinr(LINK, 8e3, 0, 5, 20e6) == pytest.approx(40 * np.log10(2))

    def test_collisions_oracle(self):
        link = LinkBudget(interference_power_w=1e-6)
        sig, noise = link.signal_power_w(6e3), link.noise_power_w(100e6)
        values = [sinr(link, 6e3, n, 5, 100e6) for n in range(6)]
        for n, v in enumerate(values):
            assert v == pytest.approx(10 * np.log10(sig / (noise + n / 5 * 1e-6)))
        assert all(b < a for a, b in zip(values, values[1:]))

    @given(st.floats(500, 50_000), st.floats(500, 50_000), st.integers(0, 5))
    def test_monotone_in_range(self, r1, r2, n_c):
        if r1 < r2:
            assert sinr(LINK, r1, n_c, 5, 20e6) > sinr(LINK, r2, n_c, 5, 20e6)

    def test_errors(self):
        with pytest.raises(InvalidInput):
            sinr(LINK, 0.0, 0, 5, 20e6)
        with pytest.raises(InvalidInput):
            sinr(LINK, 1e3, 6, 5, 20e6)


class TestMetrics:
    def test_constant_action(self):
        row = aggregate_metrics([step((0, 0, 1, 1, 1))] * 10, LINK, 5)
        assert row.pct_adaptation_steps == 0.0 and row.pct_collision_steps == 0.0
        assert row.avg_bandwidth_mhz == pytest.approx(60.0)

    def test_adaptation_flag(self):
        assert not adaptation_flag((1, 0), None)
        assert adaptation_flag((1, 0), (0, 1)) and not adaptation_flag((1, 0), (1, 0))

    def test_saa_sweep_period(self):
        acts = enumerate_actions(5)
        env = SpectrumEnv(CH, SweepGenerator(), seed=0)
        state = env.reset()
        agent = SaaAgent(acts)
        steps = []
        for _ in range(50):
            tr, m = env.step(agent.act(state))
            steps.append(m)
            state = tr.next_state
        row = aggregate_metrics(steps[5:], LINK, 5)
        assert row.avg_bandwidth_mhz == pytest.approx(64.0, abs=1e-9)
        assert row.pct_collision_steps == pytest.approx(60.0, abs=1e-9)
        assert row.pct_adaptation_steps == pytest.approx(100.0)

    def test_empty(self):
        with pytest.raises(InvalidInput):
            aggregate_metrics([])


class TestChirp:
    def test_zero_bandwidth_is_tone(self):
        w = LfmWaveform(10e6, 0.0)
        x = synth_chirp(w)
        t = np.arange(x.size) / w.sample_rate_hz
        assert np.allclose(x, np.exp(2j * np.pi * 10e6 * t))

    def test_instantaneous_frequency_linear(self):
        w = LfmWaveform(5e6, 20e6)
        x = synth_chirp(w)
        f = np.diff(np.unwrap(np.angle(x))) * w.sample_rate_hz / (2 * np.pi)
        assert f[0] == pytest.approx(-5e6, abs=0.1e6) and f[-1] == pytest.approx(15e6, abs=0.1e6)
        assert np.allclose(np.diff(f), np.diff(f)[0], atol=1.0)
        assert np.allclose(np.abs(x), 1.0)

    def test_matched_filter_peak_and_width(self):
        w = LfmWaveform(0.0, 20e6)
        x = synth_chirp(w)
        up = 16
        n = 1 << int(np.ceil(np.log2(2 * x.size)))
        spec = np.abs(np.fft.fft(x, n)) ** 2
        padded = np.zeros(n * up)
        padded[:n // 2], padded[-n // 2:] = spec[:n // 2], spec[-n // 2:]
        acf = np.abs(np.fft.ifft(padded))
        acf = np.fft.fftshift(acf) / acf.max()
        centre = np.argmax(acf)
        assert centre == n * up // 2
        above = np.flatnonzero(acf ** 2 >= 0.5)
        width_s = (above[-1] - above[0]) / (w.sample_rate_hz * up)
        assert 0.7 <= width_s * w.sweep_bandwidth_hz <= 1.2

    def test_undersampled(self):
        with pytest.raises(InvalidInput):
            LfmWaveform(0.0, 150e6, sample_rate_hz=200e6)

    def test_peak_invariant_to_centre(self):
        peaks = []
        for action in [(1, 1, 0, 0, 0), (0, 1, 1, 0, 0), (0, 0, 0, 1, 1)]:
            x = synth_chirp(waveform_for_action(action, CH))
            peaks.append(np.abs(np.vdot(x, x)))
        assert max(peaks) - min(peaks) <= 1e-9 * max(peaks)


STATIC = TargetState(25, 5, n_velocities=11)  # odd V: index 5 is stationary


class TestSimulate:
    def test_noiseless_static_peak(self):
        acts = [(1, 1, 1, 1, 1)] * 16
        rd = simulate_cpi(acts, STATIC, LINK, [(0,) * 5] * 16, CH, noise=False)
        g, b = np.unravel_index(np.argmax(rd.power), rd.power.shape)
        assert (g, b) == (rd.target_gate, 0) == (RadarConfig().n_range_gates // 2, rd.target_doppler_bin)

    def test_moving_target_bin(self):
        moving = TargetState(25, 7, n_velocities=11)
        rd = simulate_cpi([(0, 1, 1, 1, 0)] * 64, moving, LINK, [(0,) * 5] * 64, CH, noise=False)
        row = np.abs(rd.data[rd.target_gate])
        assert int(np.argmax(row)) == rd.target_doppler_bin != 0

    def test_switching_raises_sidelobes(self):
        n = 64
        thetas = [(0,) * 5] * n
        const = simulate_cpi([(1, 0, 0, 0, 0)] * n, STATIC, LINK, thetas, CH, noise=False)
        hop = simulate_cpi([(1, 0, 0, 0, 0) if p % 2 == 0 else (0, 0, 0, 0, 1) for p in range(n)],
                           STATIC, LINK, thetas, CH, noise=False)
        assert doppler_sidelobe_ratio(hop) > doppler_sidelobe_ratio(const)

    def test_zero_amplitude_is_noise_only(self):
        acts = [(1, 1, 1, 0, 0)] * 32
        rd = simulate_cpi(acts, STATIC, LINK, [(0,) * 5] * 32, CH, noise_seed=3, target_amplitude=0.0)
        noise_only = simulate_cpi(acts, TargetState(10, 2), LINK, [(0,) * 5] * 32, CH, noise_seed=3,
                                  target_amplitude=0.0)
        assert np.array_equal(rd.data, noise_only.data)

    def test_deterministic(self):
        acts = [(0, 1, 1, 0, 0)] * 8
        th = [(1, 1, 0, 0, 0)] * 8
        a = simulate_cpi(acts, STATIC, LINK, th, CH, noise_seed=np.random.SeedSequence([1, 2]))
        b = simulate_cpi(acts, STATIC, LINK, th, CH, noise_seed=np.random.SeedSequence([1, 2]))
        assert np.array_equal(a.data, b.data)

    def test_interference_adds_power(self):
        acts = [(1, 1, 1, 1, 1)] * 8
        loud = LinkBudget(interference_power_w=1e-9)
        quiet = simulate_cpi(acts, STATIC, loud, [(0,) * 5] * 8, CH, noise_seed=1, target_amplitude=0.0)
        jammed = simulate_cpi(acts, STATIC, loud, [(1, 1, 0, 0, 0)] * 8, CH, noise_seed=1, target_amplitude=0.0)
        assert jammed.power.mean() > 10 * quiet.power.mean()

    def test_misaligned(self):
        with pytest.raises(InvalidInput):
            simulate_cpi([(1,) * 5] * 3, STATIC, LINK, [(0,) * 5] * 2, CH)

    def test_map_io(self, tmp_path):
        rd = simulate_cpi([(1,) * 5] * 4, STATIC, LINK, [(0,) * 5] * 4, CH, noise_seed=0)
        rd.export_binary(tmp_path / "m.bin")
        back = RangeDopplerMap.import_binary(tmp_path / "m.bin")
        assert np.array_equal(back.data, rd.data)
        rd.export_csv(tmp_path / "m.csv")
        lines = (tmp_path / "m.csv").read_text().splitlines()
        assert len(lines) == rd.data.shape[0] + 1
        (tmp_path / "bad.bin").write_bytes(b"nope")
        with pytest.raises(InvalidInput):
            RangeDopplerMap.import_binary(tmp_path / "bad.bin")


class TestCfar:
    @pytest.mark.parametrize("pfa", [1e-6, 1e-3, 0.1, 0.3])
    def test_flat_map(self, pfa):
        det, _ = ca_cfar(np.ones((40, 40)), CfarConfig(2, 4, pfa))
        assert not det.any()

    def test_flat_map_crossover(self):
        # the scale drops below 1, and a flat map starts to fire, once pfa > (1 + 1/n)^-n
        n = 13 * 13 - 5 * 5
        edge = (1 + 1 / n) ** (-n)
        assert cfar_scale(n, edge * 0.999) > 1 > cfar_scale(n, edge * 1.001)

    def test_strong_cell(self):
        rng = np.random.default_rng(0)
        p = rng.exponential(1e-3, size=(40, 40))
        p[20, 17] = 1.0
        det, _ = ca_cfar(p, CfarConfig(2, 4, 1e-4))
        assert det[20, 17]

    def test_monte_carlo_rate(self):
        rng = np.random.default_rng(1)
        cfg = CfarConfig(2, 4, 1e-3)
        hits = cells = 0
        for _ in range(16):
            z = (rng.standard_normal((256, 256)) + 1j * rng.standard_normal((256, 256))) / np.sqrt(2)
            det, _ = ca_cfar(np.abs(z) ** 2, cfg)
            hits += det.sum()
            cells += det.size
        assert 1e-3 / 3 <= hits / cells <= 3e-3

    def test_scale_matches_pfa(self):
        # for n exponential training cells, P(X > a * mean) = (1 + a / n)^-n
        n, pfa = 80, 1e-4
        a = cfar_scale(n, pfa)
        assert (1 + a / n) ** (-n) == pytest.approx(pfa)

    def test_window_too_big(self):
        with pytest.raises(InvalidInput):
            ca_cfar(np.ones((10, 10)), CfarConfig(2, 4, 1e-3))


class TestRoc:
    def test_pd_arithmetic(self):
        assert roc_points([[CpiOutcome(True, 0, 100), CpiOutcome(False, 0, 100)]]) == [(0.0, 0.5)]

    def test_nothing_detected(self):
        det = np.zeros((20, 20), dtype=bool)
        assert roc_points([[score_detections(det, 10, 3)]]) == [(0.0, 0.0)]

    def test_zero_threshold_limit(self):
        det = np.ones((20, 20), dtype=bool)
        out = score_detections(det, 10, 3)
        fa, pd = roc_points([[out]])[0]
        assert pd == 1.0 and fa == pytest.approx((400 - 9) / 400)

    def test_doppler_wraps(self):
        det = np.zeros((20, 20), dtype=bool)
        det[10, 19] = True
        assert score_detections(det, 10, 0).detected

    def test_sweep_monotone(self):
        rng = np.random.default_rng(4)
        sweep = RocSweep([1e-4, 1e-3, 1e-2, 1e-1], CfarConfig(2, 4, 1e-3))
        for _ in range(10):
            z = (rng.standard_normal((64, 32)) + 1j * rng.standard_normal((64, 32))) / np.sqrt(2)
            z[32, 0] += 3.0
            sweep.add(RangeDopplerMap(z, target_gate=32, target_doppler_bin=0))
        pts = sorted(sweep.points())
        assert all(b[1] >= a[1] for a, b in zip(pts, pts[1:]))

    def test_zero_cpis(self):
        with pytest.raises(InvalidInput):
            roc_points([[]])

    def test_pd_at_fa(self):
        pts = [(1e-4, 0.2), (1e-2, 0.6), (0.0, 0.0)]
        got = pd_at_fa(pts, [1e-4, 1e-3, 1e-2, 1e-5, 0.1])
        assert got[:3] == pytest.approx([0.2, 0.4, 0.6])
        assert np.all(np.isnan(got[3:]))
        assert np.all(np.isnan(pd_at_fa([(1e-3, 0.5)], [1e-3])))
