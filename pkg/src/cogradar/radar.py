"""Radar-side evaluation: link budget, LFM pulses, range-Doppler maps, CFAR, ROC.

Signals are complex baseband referenced to the centre of the shared channel,
so sub-band ``k`` of ``N`` spans ``[-B/2 + k B/N, -B/2 + (k+1) B/N]``.  The
local oscillator stays at the channel centre for the whole CPI; a pulse that
occupies an off-centre block is therefore an offset chirp.
"""

from __future__ import annotations

import csv
import struct
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .spectrum import ChannelSpec, InvalidInput, Mask, StepMetrics, TargetState

SPEED_OF_LIGHT = 299_792_458.0
BOLTZMANN = 1.380649e-23


@dataclass(frozen=True)
class LinkBudget:
    transmit_power_w: float = 1_000.0
    tx_gain: float = 1_000.0
    rx_gain: float = 1_000.0
    wavelength_m: float = 0.1
    rcs_m2: float = 0.1
    noise_temp_k: float = 290.0
    loss_factor: float = 10.0
    interference_power_w: float = 1e-10
    boltzmann: float = BOLTZMANN

    def __post_init__(self):
        for name in ("transmit_power_w", "tx_gain", "rx_gain", "wavelength_m", "rcs_m2",
                     "noise_temp_k", "loss_factor", "interference_power_w", "boltzmann"):
            if not getattr(self, name) > 0:
                raise InvalidInput(f"{name} must be positive")

    def signal_power_w(self, range_m: float) -> float:
        num = self.transmit_power_w * self.tx_gain * self.rx_gain * self.wavelength_m ** 2 * self.rcs_m2
        return num / ((4 * np.pi) ** 3 * range_m ** 4)

    def noise_power_w(self, bandwidth_hz: float) -> float:
        return self.boltzmann * self.noise_temp_k * self.loss_factor * bandwidth_hz


def sinr(link: LinkBudget, range_m: float, n_collisions: int, n_subbands: int,
         bandwidth_hz: float) -> float:
    """SINR in dB for one pulse.

    Interference contributes ``(n_collisions / n_subbands) * P_I``; noise is
    ``k T0 L`` integrated over the selected bandwidth.
    """
    if not range_m > 0:
        raise InvalidInput("range must be positive")
    if not bandwidth_hz > 0:
        raise InvalidInput("bandwidth must be positive")
    if n_subbands < 1 or not 0 <= n_collisions <= n_subbands:
        raise InvalidInput(f"need 0 <= n_collisions <= n_subbands, got {n_collisions}/{n_subbands}")
    denom = link.noise_power_w(bandwidth_hz) + n_collisions / n_subbands * link.interference_power_w
    return float(10 * np.log10(link.signal_power_w(range_m) / denom))


def adaptation_flag(action, previous_action) -> bool:
    return previous_action is not None and tuple(action) != tuple(previous_action)


@dataclass(frozen=True)
class MetricsRow:
    avg_sinr_db: float
    avg_bandwidth_mhz: float
    pct_collision_steps: float
    pct_missed_opp_steps: float
    pct_adaptation_steps: float
    pct_missed_opp_any_steps: float = 0.0
    n_steps: int = 0


def aggregate_metrics(steps: Sequence[StepMetrics], link: LinkBudget | None = None,
                      n_subbands: int | None = None) -> MetricsRow:
    """Summarise a step log.

    Missed opportunities are counted on collision-free steps (a colliding
    pulse earns nothing regardless of how much vacant spectrum it skipped);
    ``pct_missed_opp_any_steps`` counts every step with ``N_mo > 0``.
    Adaptation is a fraction of the steps that have a predecessor.
    """
    if not steps:
        raise InvalidInput("no steps to aggregate")
    n = len(steps)
    coll = sum(s.n_collisions > 0 for s in steps)
    missed = sum(s.n_missed > 0 and s.n_collisions == 0 for s in steps)
    missed_any = sum(s.n_missed > 0 for s in steps)
    adapt = sum(adaptation_flag(b.action, a.action) for a, b in zip(steps, steps[1:]))
    avg_sinr = float("nan")
    if link is not None:
        width = n_subbands if n_subbands is not None else len(steps[0].action)
        avg_sinr = float(np.mean([sinr(link, s.range_m, s.n_collisions, width, s.bandwidth_hz) for s in steps]))
    return MetricsRow(
        avg_sinr_db=avg_sinr,
        avg_bandwidth_mhz=float(np.mean([s.bandwidth_hz for s in steps]) / 1e6),
        pct_collision_steps=100.0 * coll / n,
        pct_missed_opp_steps=100.0 * missed / n,
        pct_adaptation_steps=100.0 * adapt / (n - 1) if n > 1 else 0.0,
        pct_missed_opp_any_steps=100.0 * missed_any / n,
        n_steps=n,
    )


# --------------------------------------------------------------------------
# waveforms


@dataclass(frozen=True)
class LfmWaveform:
    center_freq_hz: float
    sweep_bandwidth_hz: float
    pulse_duration_s: float = 20e-6
    sample_rate_hz: float = 200e6

    def __post_init__(self):
        if self.sweep_bandwidth_hz < 0 or not self.pulse_duration_s > 0:
            raise InvalidInput("bandwidth must be >= 0 and pulse duration > 0")
        if self.sample_rate_hz < 2 * self.sweep_bandwidth_hz:
            raise InvalidInput(f"sample rate {self.sample_rate_hz:g} Hz undersamples a "
                               f"{self.sweep_bandwidth_hz:g} Hz sweep")
        top = abs(self.center_freq_hz) + self.sweep_bandwidth_hz / 2
        if top > self.sample_rate_hz / 2:
            raise InvalidInput("sweep extends past the Nyquist band")

    @property
    def n_samples(self) -> int:
        return int(round(self.pulse_duration_s * self.sample_rate_hz))

    def phase(self, t):
        """Phase (cycles) at time ``t`` after the pulse start."""
        k = self.sweep_bandwidth_hz / self.pulse_duration_s
        f_lo = self.center_freq_hz - self.sweep_bandwidth_hz / 2
        return f_lo * t + 0.5 * k * t * t

    def sample(self, t):
        t = np.asarray(t, dtype=float)
        inside = (t >= 0) & (t < self.pulse_duration_s)
        return np.where(inside, np.exp(2j * np.pi * self.phase(t)), 0.0)


def synth_chirp(w: LfmWaveform) -> np.ndarray:
    return w.sample(np.arange(w.n_samples) / w.sample_rate_hz)


def band_edges_hz(channel: ChannelSpec, first: int, last: int) -> tuple[float, float]:
    """Baseband edges of sub-bands ``first..last`` inclusive."""
    lo = -channel.total_bandwidth_hz / 2
    bw = channel.subband_bandwidth_hz
    return lo + first * bw, lo + (last + 1) * bw


def waveform_for_action(action: Mask, channel: ChannelSpec, pulse_duration_s: float = 20e-6,
                        sample_rate_hz: float = 200e6) -> LfmWaveform:
    occupied = np.flatnonzero(action)
    if occupied.size == 0:
        raise InvalidInput("action occupies no sub-band")
    f_lo, f_hi = band_edges_hz(channel, occupied[0], occupied[-1])
    return LfmWaveform((f_lo + f_hi) / 2, f_hi - f_lo, pulse_duration_s, sample_rate_hz)


# --------------------------------------------------------------------------
# range-Doppler processing


@dataclass
class RangeDopplerMap:
    data: np.ndarray  # (range gates, Doppler bins), complex
    pri_s: float = 0.41e-3
    range_gate_m: float = 0.0
    first_gate_range_m: float = 0.0
    target_gate: int | None = None
    target_doppler_bin: int | None = None

    @property
    def n_pulses(self) -> int:
        return self.data.shape[1]

    @property
    def power(self) -> np.ndarray:
        return np.abs(self.data) ** 2

    def export_binary(self, path):
        rows, cols = self.data.shape
        with open(path, "wb") as fh:
            fh.write(b"CRRD" + struct.pack("<III", rows, cols, 2))
            fh.write(np.ascontiguousarray(np.stack([self.data.real, self.data.imag], axis=-1), dtype="<f8").tobytes())

    @classmethod
    def import_binary(cls, path, **meta) -> "RangeDopplerMap":
        with open(path, "rb") as fh:
            blob = fh.read()
        if blob[:4] != b"CRRD" or len(blob) < 16:
            raise InvalidInput("not a range-Doppler dump")
        rows, cols, comps = struct.unpack("<III", blob[4:16])
        values = np.frombuffer(blob[16:], dtype="<f8")
        if comps != 2 or values.size != rows * cols * 2:
            raise InvalidInput("range-Doppler dump has the wrong size")
        values = values.reshape(rows, cols, 2)
        return cls(values[..., 0] + 1j * values[..., 1], **meta)

    def export_csv(self, path):
        """Magnitude in dB, one row per range gate."""
        mag = 20 * np.log10(np.maximum(np.abs(self.data), 1e-300))
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(["range_m"] + [f"doppler_bin_{k}" for k in range(self.n_pulses)])
            for g, row in enumerate(mag):
                writer.writerow([f"{self.first_gate_range_m + g * self.range_gate_m:.3f}"]
                                + [f"{v:.6f}" for v in row])


@dataclass(frozen=True)
class RadarConfig:
    pulse_duration_s: float = 20e-6
    sample_rate_hz: float = 200e6
    pri_s: float = 0.41e-3
    n_range_gates: int = 256
    velocity_scale_mps: float = 5.0
    target_gate_offset: float = 0.37
    doppler_window: str = "none"

    def __post_init__(self):
        if self.n_range_gates < 3:
            raise InvalidInput("need at least 3 range gates")
        if self.doppler_window not in ("none", "hann"):
            raise InvalidInput("doppler_window must be 'none' or 'hann'")
        if not 0 <= self.target_gate_offset < 1:
            raise InvalidInput("target_gate_offset must lie in [0, 1)")


def _bandlimited_noise(rng, n, power, f_edges, sample_rate_hz):
    """Complex Gaussian noise of total ``power`` confined to the given bands."""
    if power <= 0 or not f_edges:
        return np.zeros(n, dtype=complex)
    white = (rng.standard_normal(n) + 1j * rng.standard_normal(n)) / np.sqrt(2)
    freqs = np.fft.fftfreq(n, 1 / sample_rate_hz)
    keep = np.zeros(n, dtype=bool)
    for lo, hi in f_edges:
        keep |= (freqs >= lo) & (freqs < hi)
    if not keep.any():
        return np.zeros(n, dtype=complex)
    spec = np.fft.fft(white) * keep
    shaped = np.fft.ifft(spec)
    # normalise to the expected power, not the realised one, so draws stay Gaussian
    return shaped * np.sqrt(power * n / keep.sum())


def _interference_bands(action: Mask, theta: Mask, channel: ChannelSpec):
    """Edges of occupied sub-bands inside the pulse's sweep, and the overlap fraction."""
    occupied = [k for k, bit in enumerate(theta) if bit]
    hit = [k for k in occupied if action[k]]
    if not occupied:
        return [], 0.0
    return [band_edges_hz(channel, k, k) for k in hit], len(hit) / len(occupied)


def simulate_cpi(actions: Sequence[Mask], target: TargetState, link: LinkBudget,
                 interference: Sequence[Mask], channel: ChannelSpec, config: RadarConfig = RadarConfig(),
                 noise_seed=None, target_amplitude: float = 1.0, noise: bool = True) -> RangeDopplerMap:
    """Pulse-Doppler simulation of one CPI.

    Range is held at the target's CPI-start value and velocity enters only as
    the pulse-to-pulse Doppler phase.  The receive swath is centred on the
    target with a fractional-gate offset, so pulses at different centre
    frequencies land with different phases at the peak gate.
    """
    n_p = len(actions)
    if n_p == 0 or len(interference) != n_p:
        raise InvalidInput(f"{n_p} actions but {len(interference)} interference masks")
    rng = np.random.default_rng(noise_seed)
    fs = config.sample_rate_hz
    ts = 1 / fs
    n_gates = config.n_range_gates
    target_gate = n_gates // 2
    frac_gate = target_gate + config.target_gate_offset
    range_m = target.range_m
    velocity = target.velocity_step * config.velocity_scale_mps
    f_doppler = 2 * velocity / link.wavelength_m
    amp = target_amplitude * np.sqrt(link.signal_power_w(range_m))
    noise_var = link.noise_power_w(fs)

    n_pulse = int(round(config.pulse_duration_s * fs))
    n_window = n_gates + n_pulse - 1
    n_fft = 1 << int(np.ceil(np.log2(n_window + n_pulse)))
    t_rx = (np.arange(n_window) - frac_gate) * ts

    compressed = np.empty((n_gates, n_p), dtype=complex)
    cache: dict = {}
    for p, (action, theta) in enumerate(zip(actions, interference)):
        action, theta = tuple(action), tuple(theta)
        if action not in cache:
            w = waveform_for_action(action, channel, config.pulse_duration_s, fs)
            ref = np.conj(np.fft.fft(synth_chirp(w), n_fft))
            cache[action] = (w, ref)
        w, ref = cache[action]
        rx = amp * w.sample(t_rx) * np.exp(2j * np.pi * f_doppler * p * config.pri_s)
        if noise:
            rx = rx + np.sqrt(noise_var / 2) * (rng.standard_normal(n_window) + 1j * rng.standard_normal(n_window))
            bands, frac = _interference_bands(action, theta, channel)
            rx = rx + _bandlimited_noise(rng, n_window, frac * link.interference_power_w, bands, fs)
        compressed[:, p] = np.fft.ifft(np.fft.fft(rx, n_fft) * ref)[:n_gates]

    if config.doppler_window == "hann":
        compressed = compressed * np.hanning(n_p)[None, :]
    data = np.fft.fft(compressed, axis=1)
    gate_m = SPEED_OF_LIGHT * ts / 2
    prf = 1 / config.pri_s
    doppler_bin = int(round(f_doppler / prf * n_p)) % n_p
    return RangeDopplerMap(data, config.pri_s, gate_m, range_m - frac_gate * gate_m,
                           target_gate, doppler_bin)


def doppler_sidelobe_ratio(rd: RangeDopplerMap, gate: int | None = None, exclude: int = 1) -> float:
    """Largest Doppler sidelobe over the peak at one range gate (linear power)."""
    gate = rd.target_gate if gate is None else gate
    row = np.abs(rd.data[gate]) ** 2
    k = int(np.argmax(row))
    mask = np.ones(row.size, dtype=bool)
    mask[[(k + d) % row.size for d in range(-exclude, exclude + 1)]] = False
    return float(row[mask].max() / row[k])


# --------------------------------------------------------------------------
# detection


@dataclass(frozen=True)
class CfarConfig:
    guard_cells: int = 2
    training_cells: int = 4
    desired_pfa: float = 1e-3

    def __post_init__(self):
        if self.training_cells < 1 or self.guard_cells < 0:
            raise InvalidInput("need training_cells >= 1 and guard_cells >= 0")
        if not 0 < self.desired_pfa < 1:
            raise InvalidInput("desired_pfa must lie in (0, 1)")


def cfar_scale(n_training, pfa: float):
    """CA-CFAR multiplier for exponentially distributed cell power."""
    n = np.asarray(n_training, dtype=float)
    return n * (pfa ** (-1.0 / n) - 1.0)


def _box_sum(integral, half):
    """Sum over a (2*half+1)^2 box around each cell, truncated at the edges."""
    rows, cols = integral.shape[0] - 1, integral.shape[1] - 1
    r = np.arange(rows)
    c = np.arange(cols)
    r0, r1 = np.clip(r - half, 0, rows), np.clip(r + half + 1, 0, rows)
    c0, c1 = np.clip(c - half, 0, cols), np.clip(c + half + 1, 0, cols)
    return (integral[r1][:, c1] - integral[r0][:, c1] - integral[r1][:, c0] + integral[r0][:, c0])


def cfar_noise_estimate(power: np.ndarray, guard_cells: int, training_cells: int):
    """Mean training-cell power and training-cell count for every cell."""
    power = np.asarray(power, dtype=float)
    outer = guard_cells + training_cells
    if power.ndim != 2 or min(power.shape) <= 2 * outer:
        raise InvalidInput(f"map {np.shape(power)} too small for a window of half-width {outer}")
    padded = np.zeros((power.shape[0] + 1, power.shape[1] + 1))
    padded[1:, 1:] = power.cumsum(0).cumsum(1)
    ones = np.zeros_like(padded)
    ones[1:, 1:] = np.ones_like(power).cumsum(0).cumsum(1)
    total = _box_sum(padded, outer) - _box_sum(padded, guard_cells)
    count = np.rint(_box_sum(ones, outer) - _box_sum(ones, guard_cells))
    if np.any(count < 1):
        raise InvalidInput("a cell has no training cells")
    return total / count, count


def ca_cfar(power: np.ndarray, cfg: CfarConfig) -> tuple[np.ndarray, np.ndarray]:
    """2-D cell-averaging CFAR over a square annulus.

    Returns ``(detections, threshold)``.  Windows that run off the map are
    truncated and the scale factor uses the surviving training-cell count.
    """
    mean, count = cfar_noise_estimate(power, cfg.guard_cells, cfg.training_cells)
    threshold = cfar_scale(count, cfg.desired_pfa) * mean
    return np.asarray(power) > threshold, threshold


@dataclass(frozen=True)
class CpiOutcome:
    detected: bool
    n_false_alarms: int
    n_cells: int


def score_detections(detections: np.ndarray, target_gate: int | None, target_bin: int | None,
                     gate_tol: int = 1, bin_tol: int = 1) -> CpiOutcome:
    """Hit if any detection lies within the target neighbourhood; the rest are false alarms.

    The Doppler axis wraps.  ``target_gate=None`` means no target is present.
    """
    det = np.asarray(detections, dtype=bool)
    near = np.zeros_like(det)
    if target_gate is not None:
        rows = np.arange(max(target_gate - gate_tol, 0), min(target_gate + gate_tol + 1, det.shape[0]))
        cols = [(target_bin + d) % det.shape[1] for d in range(-bin_tol, bin_tol + 1)]
        near[np.ix_(rows, cols)] = True
    return CpiOutcome(bool((det & near).any()), int((det & ~near).sum()), det.size)


def roc_points(outcomes_by_setting: Sequence[Sequence[CpiOutcome]]) -> list[tuple[float, float]]:
    """One (false-alarm rate, detection rate) pair per threshold setting."""
    points = []
    for outcomes in outcomes_by_setting:
        if not outcomes:
            raise InvalidInput("no CPIs for a threshold setting")
        n = len(outcomes)
        cells = outcomes[0].n_cells
        fa = sum(o.n_false_alarms for o in outcomes) / (n * cells)
        pd = 1.0 - sum(not o.detected for o in outcomes) / n
        points.append((fa, pd))
    return points



def pd_at_fa(points: Sequence[tuple[float, float]], fa_rates: Sequence[float]) -> np.ndarray:
    """Detection rate at given false-alarm rates, linear in log10(FA) between ROC points.

    Rates outside the measured FA span (or below a zero-FA point) come back NaN.
    """
    pts = sorted((fa, pd) for fa, pd in points if fa > 0)
    out = np.full(len(fa_rates), np.nan)
    if len(pts) < 2:
        return out
    log_fa = np.log10([p[0] for p in pts])
    pd = np.maximum.accumulate([p[1] for p in pts])
    for k, fa in enumerate(fa_rates):
        x = np.log10(fa)
        if log_fa[0] <= x <= log_fa[-1]:
            out[k] = float(np.interp(x, log_fa, pd))
    return out

@dataclass
class RocSweep:
    """Accumulates CPI outcomes for several CFAR settings."""

    pfas: Sequence[float]
    cfar: CfarConfig = field(default_factory=CfarConfig)
    outcomes: list = field(default_factory=list)

    def __post_init__(self):
        self.outcomes = [[] for _ in self.pfas]

    def add(self, rd: RangeDopplerMap, target_present: bool = True):
        power = rd.power
        mean, count = cfar_noise_estimate(power, self.cfar.guard_cells, self.cfar.training_cells)
        gate = rd.target_gate if target_present else None
        for k, pfa in enumerate(self.pfas):
            det = power > cfar_scale(count, pfa) * mean
            self.outcomes[k].append(score_detections(det, gate, rd.target_doppler_bin))

    def points(self) -> list[tuple[float, float]]:
        return roc_points(self.outcomes)
