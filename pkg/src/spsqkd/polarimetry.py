"""QBER from the 4x4 input-state x detection-channel matrix, and the same
statistics restricted to a temporal acceptance window.

Windows act on the arrival phase folded into one clock period and are
cyclic: ``[t_c - dt/2, t_c + dt/2)`` taken modulo the period, so a window as
wide as the period is the full period wherever it is centred.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Mapping

import numpy as np

from .errors import UndefinedValueError, ValidationError
from .timetag import ChannelId, TagStream

Runs = Mapping[ChannelId, TagStream]


@dataclass(frozen=True)
class FilterWindow:
    width: int  # ps
    center: int  # ps, relative to the clock phase origin

    def __post_init__(self):
        if self.width <= 0:
            raise ValidationError("window width must be positive")

    def bounds(self, period: int) -> tuple[int, int]:
        """Cyclic ``[lo, hi)`` with ``0 <= lo < period`` and ``hi - lo`` the
        effective width (at most one period); ``hi`` may exceed ``period``."""
        w = min(int(self.width), period)
        lo = (int(self.center) - w // 2) % period
        return lo, lo + w

    def effective_width(self, period: int) -> int:
        return min(int(self.width), period)

    def accept(self, period: int):
        lo, hi = self.bounds(period)

        def f(phase):
            return ((phase - lo) % period) < (hi - lo)

        return f

    @classmethod
    def full(cls, period: int) -> "FilterWindow":
        return cls(period, period // 2)


class PhaseIndex:
    """Sorted folded phases per (run, channel) for O(log n) window counts."""

    def __init__(self, runs: Runs):
        _check_runs(runs)
        self.period = next(iter(runs.values())).clock.period
        self.repetition_rate = next(iter(runs.values())).clock.repetition_rate
        if any(s.clock.period != self.period for s in runs.values()):
            raise ValidationError("runs use different clock periods")
        self.acquisition = {s: runs[s].acquisition for s in ChannelId}
        self._phases = {}
        for s in ChannelId:
            run = runs[s]
            ph = run.phases()
            for c in ChannelId:
                self._phases[s, c] = np.sort(ph[run.channels == int(c)])

    def counts(self, window: FilterWindow | None = None) -> np.ndarray:
        """Event counts, shape (input state, channel)."""
        out = np.zeros((4, 4), np.int64)
        if window is None:
            for (s, c), ph in self._phases.items():
                out[s, c] = ph.size
            return out
        lo, hi = window.bounds(self.period)
        P = self.period
        for (s, c), ph in self._phases.items():
            if hi <= P:
                a, b = np.searchsorted(ph, [lo, hi])
                out[s, c] = b - a
            else:
                a = np.searchsorted(ph, lo)
                b = np.searchsorted(ph, hi - P)
                out[s, c] = (ph.size - a) + b
        return out


def _check_runs(runs: Runs):
    labels = list(runs.keys())
    parsed = [ChannelId.parse(k) for k in labels]
    if sorted(parsed) != list(ChannelId):
        raise ValidationError(f"need exactly one run per input state H, V, D, A; got {labels}")
    for k, s in runs.items():
        if s.label is not None and s.label != ChannelId.parse(k):
            raise ValidationError(f"run keyed {k} is labelled {s.label.name}")


def as_runs(streams) -> dict[ChannelId, TagStream]:
    """Key a mapping or a sequence of labelled streams by input state."""
    if isinstance(streams, Mapping):
        runs = {ChannelId.parse(k): v for k, v in streams.items()}
        if len(runs) != len(streams):
            raise ValidationError("duplicate input-state labels")
        _check_runs(runs)
        return runs
    runs = {}
    for s in streams:
        if s.label is None:
            raise ValidationError("unlabelled run")
        if s.label in runs:
            raise ValidationError(f"duplicate run for input state {s.label.name}")
        runs[s.label] = s
    _check_runs(runs)
    return runs


@dataclass(frozen=True)
class PolarizationMatrix:
    rates: np.ndarray  # Hz, rows: input state, columns: channel
    acquisition: np.ndarray  # s per input-state run
    counts: np.ndarray

    def __post_init__(self):
        if np.any(self.rates < 0):
            raise ValidationError("negative rate")

    def scaled_row(self, state, factor: float) -> "PolarizationMatrix":
        s = int(ChannelId.parse(state))
        r = self.rates.copy()
        r[s] *= factor
        return PolarizationMatrix(r, self.acquisition, self.counts)


@dataclass(frozen=True)
class BasisStats:
    qber: dict  # ChannelId -> float (nan where undefined)
    average: float
    worst: float
    sifted_fraction: float = 1.0
    basis_totals: dict | None = None  # events in the input basis, per state

    def qber_for(self, mode: str = "worst") -> float:
        if mode == "worst":
            return self.worst
        if mode == "average":
            return self.average
        return self.qber[ChannelId.parse(mode)]


def build_matrix(runs, window: FilterWindow | None = None, index: PhaseIndex | None = None) -> PolarizationMatrix:
    runs = as_runs(runs)
    index = index or PhaseIndex(runs)
    counts = index.counts(window)
    acq = np.array([index.acquisition[s] for s in ChannelId])
    if np.any(acq <= 0):
        raise ValidationError("run with zero acquisition time")
    return PolarizationMatrix(counts / acq[:, None], acq, counts)


def _qbers(table: np.ndarray) -> tuple[dict, dict]:
    q, tot = {}, {}
    for s in ChannelId:
        right, wrong = table[s, s], table[s, s.partner]
        total = right + wrong
        tot[s] = float(total)
        q[s] = float(wrong / total) if total > 0 else math.nan
    return q, tot


def qber_stats(matrix: PolarizationMatrix) -> BasisStats:
    q, tot = _qbers(matrix.rates)
    missing = [s.name for s in ChannelId if math.isnan(q[s])]
    if missing:
        raise UndefinedValueError(f"no same-basis events for input state(s) {', '.join(missing)}")
    vals = [q[s] for s in ChannelId]
    return BasisStats(q, float(np.mean(vals)), float(max(vals)), 1.0, tot)


@dataclass(frozen=True)
class WindowStats:
    """Windowed statistics. ``stats`` holds raw measured values; the
    ``signal_*`` fields remove the expected dark counts of the window."""

    window: FilterWindow
    stats: BasisStats
    p_dc: float  # per pulse, scaled to the window
    duty: float  # effective width / period
    signal_fraction: float
    signal_qber: dict
    signal_worst: float
    signal_average: float

    def signal_qber_for(self, mode: str = "worst") -> float:
        if mode == "worst":
            return self.signal_worst
        if mode == "average":
            return self.signal_average
        return self.signal_qber[ChannelId.parse(mode)]


def window_stats(
    runs,
    window: FilterWindow,
    dark_rate_total: float,
    index: PhaseIndex | None = None,
    full_counts: np.ndarray | None = None,
) -> WindowStats:
    """QBER and sifted fraction inside ``window``.

    The dark probability per pulse is ``dark_rate_total / clock`` scaled by
    the window's duty cycle. Raw QBERs that are undefined (empty window) are
    NaN; ``signal_fraction`` is clamped at zero, and is zero outright when
    the full-period excess over the expected darks is within three standard
    deviations of dark noise.
    """
    if dark_rate_total < 0:
        raise ValidationError("dark rate must be non-negative")
    if index is None:
        runs = as_runs(runs)
        index = PhaseIndex(runs)
    P = index.period
    rate = index.repetition_rate
    win = index.counts(window)
    full = index.counts(None) if full_counts is None else full_counts
    duty = window.effective_width(P) / P

    raw_q, tot = _qbers(win)
    finite = [v for v in raw_q.values() if not math.isnan(v)]
    n_full = full.sum()
    stats = BasisStats(
        raw_q,
        float(np.mean(finite)) if len(finite) == 4 else math.nan,
        float(max(finite)) if len(finite) == 4 else math.nan,
        float(win.sum() / n_full) if n_full else math.nan,
        tot,
    )

    # expected dark counts per detector, per run
    acq = np.array([index.acquisition[s] for s in ChannelId])
    dark_full = dark_rate_total / 4.0 * acq
    dark_win = dark_full * duty
    sig_win = win - dark_win[:, None]
    sig_full = full - dark_full[:, None]
    denom = sig_full.sum()
    # an excess within dark-count noise is not evidence of signal
    significant = denom > 3.0 * math.sqrt(max(4.0 * dark_full.sum(), 1.0))
    frac = max(0.0, float(sig_win.sum() / denom)) if significant else 0.0
    sq = {}
    for s in ChannelId:
        right, wrong = sig_win[s, s], sig_win[s, s.partner]
        right, wrong = max(right, 0.0), max(wrong, 0.0)
        sq[s] = float(wrong / (right + wrong)) if right + wrong > 0 else math.nan
    vals = list(sq.values())
    if any(math.isnan(v) for v in vals):
        worst = avg = math.nan
    else:
        worst, avg = float(max(vals)), float(np.mean(vals))
    return WindowStats(
        window=window,
        stats=stats,
        p_dc=dark_rate_total / rate * duty,
        duty=duty,
        signal_fraction=frac,
        signal_qber=sq,
        signal_worst=worst,
        signal_average=avg,
    )
