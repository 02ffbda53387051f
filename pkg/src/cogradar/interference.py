"""Sources of the per-pulse interference mask.

Every generator exposes ``next_theta()`` and owns its random stream, so two
environments never share state.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from .spectrum import EndOfTrace, InvalidInput, Mask, as_mask


class TraceFormatError(InvalidInput):
    def __init__(self, path, line_no, message):
        super().__init__(f"{path}:{line_no}: {message}")
        self.line_no = line_no


@dataclass
class SweepGenerator:
    """Frequency-hopping sweep: one occupied band, moving up by one each pulse."""

    n_subbands: int = 5
    phase: int = 0

    def next_theta(self) -> Mask:
        bits = [0] * self.n_subbands
        bits[self.phase] = 1
        self.phase = (self.phase + 1) % self.n_subbands
        return tuple(bits)


@dataclass
class MarkovGenerator:
    """Two-state on/off source; flips state with probability ``p_switch`` each pulse."""

    p_switch: float = 0.4
    active_mask: Mask = (1, 1, 0, 0, 0)
    is_active: bool = False
    seed: int | np.random.SeedSequence | None = None

    def __post_init__(self):
        if not 0.0 <= self.p_switch <= 1.0:
            raise InvalidInput(f"p_switch must lie in [0, 1], got {self.p_switch}")
        self.active_mask = as_mask(self.active_mask)
        self.rng = np.random.default_rng(self.seed)
        self.n_switches = 0
        self.n_draws = 0

    @property
    def n_subbands(self) -> int:
        return len(self.active_mask)

    def next_theta(self) -> Mask:
        self.n_draws += 1
        if self.rng.random() < self.p_switch:
            self.is_active = not self.is_active
            self.n_switches += 1
        return self.active_mask if self.is_active else (0,) * len(self.active_mask)

    def upcoming_p(self) -> float:
        return self.p_switch


@dataclass
class ScheduleGenerator:
    """Markov source whose switch probability changes at CPI boundaries.

    ``schedule`` holds ``(cpi_index, p_switch)`` pairs; CPI ``k`` covers draws
    ``k*pulses_per_cpi .. (k+1)*pulses_per_cpi - 1``.
    """

    schedule: Sequence[tuple[int, float]]
    pulses_per_cpi: int
    inner: MarkovGenerator = field(default_factory=MarkovGenerator)

    def __post_init__(self):
        self.schedule = [(int(c), float(p)) for c, p in self.schedule]
        if not self.schedule:
            raise InvalidInput("schedule must not be empty")
        cpis = [c for c, _ in self.schedule]
        if any(b <= a for a, b in zip(cpis, cpis[1:])):
            raise InvalidInput("schedule CPI indices must be strictly increasing")
        if cpis[0] != 0:
            raise InvalidInput("schedule must start at CPI 0")
        if any(not 0.0 <= p <= 1.0 for _, p in self.schedule):
            raise InvalidInput("schedule probabilities must lie in [0, 1]")
        if self.pulses_per_cpi < 1:
            raise InvalidInput("pulses_per_cpi must be positive")
        self.draws = 0
        self.inner.p_switch = self.schedule[0][1]

    @property
    def n_subbands(self) -> int:
        return self.inner.n_subbands

    def p_for_cpi(self, cpi: int) -> float:
        p = self.schedule[0][1]
        for start, value in self.schedule:
            if cpi >= start:
                p = value
        return p

    def upcoming_p(self) -> float:
        return self.p_for_cpi(self.draws // self.pulses_per_cpi)

    def next_theta(self) -> Mask:
        if self.draws % self.pulses_per_cpi == 0:
            self.inner.p_switch = self.upcoming_p()
        self.draws += 1
        return self.inner.next_theta()


@dataclass
class TraceBuffer:
    """Replay of recorded occupancy frames."""

    frames: list[Mask]
    cursor: int = 0
    wrap: bool = True

    def __post_init__(self):
        if not self.frames:
            raise InvalidInput("trace has no frames")
        width = len(self.frames[0])
        if any(len(f) != width for f in self.frames):
            raise InvalidInput("trace frames differ in width")
        self.frames = [tuple(f) for f in self.frames]

    @property
    def n_subbands(self) -> int:
        return len(self.frames[0])

    @property
    def exhausted(self) -> bool:
        return not self.wrap and self.cursor >= len(self.frames)

    def next_theta(self) -> Mask:
        if self.cursor >= len(self.frames):
            if not self.wrap:
                raise EndOfTrace(f"trace ended after {len(self.frames)} frames")
            self.cursor = 0
        frame = self.frames[self.cursor]
        self.cursor += 1
        return frame

    def segment(self, start: int, stop: int | None = None, wrap: bool | None = None) -> "TraceBuffer":
        frames = self.frames[start:stop]
        return TraceBuffer(list(frames), wrap=self.wrap if wrap is None else wrap)


@dataclass
class CycleGenerator:
    """Deterministic repetition of a fixed list of masks."""

    masks: Sequence[Mask]
    phase: int = 0

    def __post_init__(self):
        self.masks = [as_mask(m) for m in self.masks]
        if not self.masks or len({len(m) for m in self.masks}) != 1:
            raise InvalidInput("cycle needs at least one mask, all of one width")

    @property
    def n_subbands(self) -> int:
        return len(self.masks[0])

    def next_theta(self) -> Mask:
        mask = self.masks[self.phase]
        self.phase = (self.phase + 1) % len(self.masks)
        return mask


def next_theta(generator) -> Mask:
    return generator.next_theta()


def binarize_power(powers_db: Sequence[float], threshold_db: float) -> Mask:
    """Occupied where the sub-band power reaches the threshold."""
    values = np.asarray(powers_db, dtype=float)
    if not np.all(np.isfinite(values)):
        raise InvalidInput("power values must be finite")
    return tuple(int(v) for v in (values >= threshold_db))


def _rows(path):
    with open(path, encoding="utf-8") as fh:
        for line_no, raw in enumerate(fh, start=1):
            line = raw.strip()
            if line:
                yield line_no, line


def load_trace(path: str | os.PathLike, n_subbands: int | None = None, wrap: bool = True) -> TraceBuffer:
    """Read a binary occupancy trace: one comma-separated row per pulse."""
    frames = []
    for line_no, line in _rows(path):
        tokens = [t.strip() for t in line.split(",")]
        if any(t not in ("0", "1") for t in tokens):
            raise TraceFormatError(path, line_no, f"non-binary token in {line!r}")
        width = n_subbands if n_subbands is not None else (len(frames[0]) if frames else len(tokens))
        if len(tokens) != width:
            raise TraceFormatError(path, line_no, f"expected {width} values, got {len(tokens)}")
        frames.append(tuple(int(t) for t in tokens))
    if not frames:
        raise TraceFormatError(path, 0, "empty trace file")
    return TraceBuffer(frames, wrap=wrap)


def load_power_trace(path: str | os.PathLike, n_subbands: int | None = None, wrap: bool = True) -> TraceBuffer:
    """Read a sub-band power trace (dB) and threshold it into occupancy frames.

    The first non-empty line must read ``threshold_db=<value>``.
    """
    rows = _rows(path)
    try:
        line_no, header = next(rows)
    except StopIteration:
        raise TraceFormatError(path, 0, "empty power trace") from None
    key, _, value = header.partition("=")
    if key.strip() != "threshold_db":
        raise TraceFormatError(path, line_no, "header must be 'threshold_db=<value>'")
    try:
        threshold = float(value)
    except ValueError:
        raise TraceFormatError(path, line_no, f"bad threshold {value!r}") from None
    frames = []
    for line_no, line in rows:
        try:
            powers = [float(t) for t in line.split(",")]
        except ValueError:
            raise TraceFormatError(path, line_no, f"non-numeric value in {line!r}") from None
        width = n_subbands if n_subbands is not None else (len(frames[0]) if frames else len(powers))
        if len(powers) != width:
            raise TraceFormatError(path, line_no, f"expected {width} values, got {len(powers)}")
        if not all(np.isfinite(powers)):
            raise TraceFormatError(path, line_no, "non-finite power value")
        frames.append(binarize_power(powers, threshold))
    if not frames:
        raise TraceFormatError(path, line_no, "power trace has a header but no rows")
    return TraceBuffer(frames, wrap=wrap)


def write_trace(path: str | os.PathLike, frames: Iterable[Sequence[int]]) -> int:
    count = 0
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for frame in frames:
            fh.write(",".join(str(int(b)) for b in frame) + "\n")
            count += 1
    return count
