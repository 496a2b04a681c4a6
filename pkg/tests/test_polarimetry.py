import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from spsqkd.errors import UndefinedValueError, ValidationError
from spsqkd.polarimetry import (
    FilterWindow,
    PhaseIndex,
    as_runs,
    build_matrix,
    qber_stats,
    window_stats,
)
from spsqkd.simulator import SourceParams, reference_scenario, simulate_bb84, true_statistics
from spsqkd.timetag import ChannelId, PulseClock, TagStream

CLOCK = PulseClock(5e6)
P = CLOCK.period


def synthetic_runs(counts: np.ndarray, phase: int = 5000, duration_periods: int = 10):
    """Runs whose (state, channel) event numbers are given by ``counts``."""
    runs = {}
    for s in ChannelId:
        tags = []
        for c in ChannelId:
            for k in range(int(counts[s, c])):
                tags.append((k * P + phase, c))
        runs[s] = TagStream.from_tags(tags, CLOCK, duration=max(duration_periods, int(counts.max()) + 1) * P, label=s)
    return runs


def test_window_bounds_are_cyclic():
    assert FilterWindow(1000, 5000).bounds(P) == (4500, 5500)
    lo, hi = FilterWindow(1000, 100).bounds(P)
    assert (lo, hi) == (P - 400, P + 600)
    assert FilterWindow(3 * P, 7).bounds(P) == ((7 - P // 2) % P, (7 - P // 2) % P + P)
    acc = FilterWindow(1000, 100).accept(P)
    assert acc(np.array([P - 400, 599, 600, 5000])).tolist() == [True, True, False, False]
    with pytest.raises(ValidationError):
        FilterWindow(0, 0)


@settings(max_examples=60, deadline=None)
@given(
    st.lists(st.tuples(st.integers(0, 20 * P), st.integers(0, 3)), max_size=80),
    st.integers(1, 2 * P),
    st.integers(0, P - 1),
)
def test_phase_index_counts_match_mask(tags, width, center):
    runs = {s: TagStream.from_tags(tags, CLOCK, duration=21 * P, label=s) for s in ChannelId}
    w = FilterWindow(width, center)
    got = PhaseIndex(runs).counts(w)
    acc = w.accept(P)
    for s, run in runs.items():
        keep = acc(run.phases())
        expect = np.bincount(run.channels[keep], minlength=4)
        assert got[s].tolist() == expect.tolist()


def test_build_matrix_and_qber():
    counts = np.array([[90, 10, 50, 50], [5, 95, 50, 50], [50, 50, 80, 20], [50, 50, 0, 100]])
    runs = synthetic_runs(counts)
    m = build_matrix(runs)
    assert np.array_equal(m.counts, counts)
    assert m.rates[0, 0] == pytest.approx(90 / runs[ChannelId.H].acquisition)
    st_ = qber_stats(m)
    assert st_.qber[ChannelId.H] == pytest.approx(0.10)
    assert st_.qber[ChannelId.V] == pytest.approx(0.05)
    assert st_.qber[ChannelId.D] == pytest.approx(0.20)
    assert st_.qber[ChannelId.A] == 0.0
    assert st_.worst == pytest.approx(0.20)
    assert st_.average == pytest.approx(0.0875)
    assert st_.qber_for("V") == pytest.approx(0.05)


def test_undefined_row_is_signalled():
    counts = np.array([[0, 0, 5, 5], [5, 95, 0, 0], [0, 0, 80, 20], [0, 0, 1, 99]])
    with pytest.raises(UndefinedValueError, match="H"):
        qber_stats(build_matrix(synthetic_runs(counts)))


def test_scaled_row_changes_only_that_row():
    m = build_matrix(synthetic_runs(np.full((4, 4), 10)))
    m2 = m.scaled_row("D", 2.0)
    assert np.array_equal(m2.rates[2], 2 * m.rates[2])
    assert np.array_equal(np.delete(m2.rates, 2, 0), np.delete(m.rates, 2, 0))
    # scaling a row leaves its QBER unchanged
    assert qber_stats(m2).qber[ChannelId.D] == qber_stats(m).qber[ChannelId.D]


def test_run_labels_are_checked():
    runs = synthetic_runs(np.full((4, 4), 3))
    with pytest.raises(ValidationError):
        as_runs({k: v for k, v in runs.items() if k != ChannelId.A})
    with pytest.raises(ValidationError):
        as_runs(list(runs.values()) + [runs[ChannelId.H]])
    swapped = dict(runs)
    swapped[ChannelId.H], swapped[ChannelId.V] = runs[ChannelId.V], runs[ChannelId.H]
    with pytest.raises(ValidationError):
        as_runs(swapped)
    assert as_runs(list(runs.values())).keys() == runs.keys()
    assert set(as_runs({"h": runs[0], "v": runs[1], "d": runs[2], "a": runs[3]})) == set(ChannelId)


# -- windows ---------------------------------------------------------------------


@pytest.fixture(scope="module")
def sim_runs():
    return simulate_bb84(reference_scenario(mu=0.03), 10_000_000, seed=11)


def test_full_window_reproduces_unwindowed_stats(sim_runs):
    full = window_stats(sim_runs, FilterWindow.full(P), 80.0)
    plain = qber_stats(build_matrix(sim_runs))
    assert full.duty == 1.0
    assert full.stats.sifted_fraction == 1.0
    assert full.signal_fraction == 1.0
    for s in ChannelId:
        assert full.stats.qber[s] == plain.qber[s]


@settings(max_examples=30, deadline=None)
@given(st.integers(1000, P), st.integers(0, P - 1), st.floats(0, 500))
def test_windowed_dark_probability_scales_with_duty(width, center, dark):
    runs = synthetic_runs(np.full((4, 4), 2))
    ws = window_stats(runs, FilterWindow(width, center), dark)
    assert ws.duty == width / P
    assert ws.p_dc == pytest.approx(dark / 5e6 * width / P, rel=1e-12, abs=0)


def test_signal_qber_removes_darks(sim_runs):
    p = reference_scenario(mu=0.03)
    ws = window_stats(sim_runs, FilterWindow.full(P), 4 * p.dark_rate)
    no_dark = true_statistics(p.replace(dark_rate=0.0), "H").qber_expected
    for s in ChannelId:
        n = ws.stats.basis_totals[s]
        assert abs(ws.signal_qber[s] - no_dark) < 4 * math.sqrt(no_dark / n)


def test_narrow_window_keeps_most_signal_drops_darks(sim_runs):
    narrow = window_stats(sim_runs, FilterWindow(30_000, 2000 + 12_000), 80.0)
    assert narrow.signal_fraction > 0.9
    assert narrow.duty == pytest.approx(0.15)
    assert narrow.stats.sifted_fraction < 1.0


def test_dark_only_runs_have_no_signal():
    runs = simulate_bb84(SourceParams(p1=0.0, dark_rate=20.0), 25_000_000, seed=12)
    for w in (FilterWindow.full(P), FilterWindow(4000, 3000), FilterWindow(50_000, 100_000)):
        assert window_stats(runs, w, 80.0).signal_fraction == 0.0


def test_empty_window_gives_nan_qber():
    runs = synthetic_runs(np.full((4, 4), 3), phase=5000)
    ws = window_stats(runs, FilterWindow(1000, 100_000), 0.0)
    assert all(math.isnan(v) for v in ws.stats.qber.values())
    assert ws.signal_fraction == 0.0 and math.isnan(ws.signal_worst)
