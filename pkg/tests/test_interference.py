import pytest
from hypothesis import given, settings, strategies as st

from cogradar.interference import (CycleGenerator, MarkovGenerator, ScheduleGenerator, SweepGenerator,
                                   TraceBuffer, TraceFormatError, binarize_power, load_power_trace, load_trace,
                                   write_trace)
from cogradar.spectrum import EndOfTrace, InvalidInput


def test_sweep_first_three():
    g = SweepGenerator()
    assert [g.next_theta() for _ in range(3)] == [(1, 0, 0, 0, 0), (0, 1, 0, 0, 0), (0, 0, 1, 0, 0)]


@given(st.integers(2, 10), st.integers(0, 9))
def test_sweep_period(n, phase):
    g = SweepGenerator(n, phase % n)
    first = [g.next_theta() for _ in range(n)]
    assert all(sum(m) == 1 for m in first)
    assert sorted(m.index(1) for m in first) == list(range(n))
    assert [g.next_theta() for _ in range(n)] == first


def test_markov_p0_stays_off():
    g = MarkovGenerator(0.0, seed=1)
    assert all(g.next_theta() == (0,) * 5 for _ in range(200))


def test_markov_p1_alternates():
    g = MarkovGenerator(1.0, seed=1)
    seq = [g.next_theta() for _ in range(6)]
    assert seq == [(1, 1, 0, 0, 0), (0,) * 5] * 3


@pytest.mark.parametrize("p", [0.1, 0.4, 0.8])
def test_markov_switch_rate(p):
    g = MarkovGenerator(p, seed=7)
    prev, flips, n = g.next_theta(), 0, 100_000
    for _ in range(n):
        cur = g.next_theta()
        flips += cur != prev
        prev = cur
    assert abs(flips / n - p) <= 0.02


@settings(max_examples=25)
@given(st.floats(0, 1), st.integers(0, 2**31))
def test_markov_support_and_seed(p, seed):
    a = MarkovGenerator(p, (0, 1, 1, 0, 0), seed=seed)
    b = MarkovGenerator(p, (0, 1, 1, 0, 0), seed=seed)
    sa = [a.next_theta() for _ in range(100)]
    assert sa == [b.next_theta() for _ in range(100)]
    assert set(sa) <= {(0, 1, 1, 0, 0), (0,) * 5}


def test_markov_bad_p():
    with pytest.raises(InvalidInput):
        MarkovGenerator(1.5)


def test_schedule_updates_at_cpi_boundaries():
    g = ScheduleGenerator([(0, 0.0), (2, 1.0)], pulses_per_cpi=4, inner=MarkovGenerator(0.0, seed=0))
    seq = [g.next_theta() for _ in range(12)]
    assert seq[:8] == [(0,) * 5] * 8
    assert seq[8:] == [(1, 1, 0, 0, 0), (0,) * 5] * 2
    assert g.p_for_cpi(1) == 0.0 and g.p_for_cpi(5) == 1.0


@pytest.mark.parametrize("schedule", [[], [(0, 0.1), (0, 0.2)], [(1, 0.1)], [(0, 2.0)]])
def test_schedule_rejects(schedule):
    with pytest.raises(InvalidInput):
        ScheduleGenerator(schedule, 10)


def test_cycle():
    g = CycleGenerator([(1, 1, 0), (0, 1, 1)])
    assert [g.next_theta() for _ in range(3)] == [(1, 1, 0), (0, 1, 1), (1, 1, 0)]


def test_load_trace_two_frames(tmp_path):
    p = tmp_path / "t.txt"
    p.write_text("1,1,0,0,0\n0,0,0,0,0\n")
    tb = load_trace(p)
    assert tb.frames == [(1, 1, 0, 0, 0), (0,) * 5]


@pytest.mark.parametrize("text,line", [("2,0,0,0,0\n", 1), ("1,0,0,0,0\n1,0,0\n", 2), ("", 0)])
def test_load_trace_errors(tmp_path, text, line):
    p = tmp_path / "bad.txt"
    p.write_text(text)
    with pytest.raises(TraceFormatError) as exc:
        load_trace(p)
    assert exc.value.line_no == line


def test_trace_round_trip_matches_sweep(tmp_path):
    p = tmp_path / "sweep.txt"
    g = SweepGenerator()
    write_trace(p, (g.next_theta() for _ in range(1000)))
    tb, ref = load_trace(p), SweepGenerator()
    assert all(tb.next_theta() == ref.next_theta() for _ in range(2500))


def test_trace_end_behaviour():
    tb = TraceBuffer([(1, 0), (0, 1)], wrap=False)
    tb.next_theta()
    tb.next_theta()
    assert tb.exhausted
    with pytest.raises(EndOfTrace):
        tb.next_theta()
    wrapped = TraceBuffer([(1, 0), (0, 1)])
    assert [wrapped.next_theta() for _ in range(3)] == [(1, 0), (0, 1), (1, 0)]


def test_binarize_power():
    assert binarize_power([-90, -40, -90, -90, -90], -60) == (0, 1, 0, 0, 0)
    assert binarize_power([-90] * 5, -60) == (0,) * 5
    assert binarize_power([-60, -61, -59, -90, -90], -60) == (1, 0, 1, 0, 0)


def test_power_trace(tmp_path):
    p = tmp_path / "pw.csv"
    p.write_text("threshold_db=-60\n-90,-40,-90,-90,-90\n-60,-60,-70,-70,-70\n")
    assert load_power_trace(p).frames == [(0, 1, 0, 0, 0), (1, 1, 0, 0, 0)]
    p.write_text("-90,-40,-90,-90,-90\n")
    with pytest.raises(TraceFormatError):
        load_power_trace(p)
