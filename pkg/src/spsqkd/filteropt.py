"""Two-dimensional temporal-filter optimization over window width and centre.

For every cell ``(dt, tc)`` of a grid, the per-window statistics of the four
input-state runs (dark-subtracted signal fraction, worst-channel signal
QBER, duty-cycle-scaled dark probability) are turned into a
:class:`QkdParams` and evaluated with :func:`gllp_rate`. Window statistics do
not depend on channel loss, so they are computed once per grid and reused
across losses.

The multi-photon bound stays at the unfiltered source value: a receiver-side
filter discards clicks but cannot make Alice's pulses purer. The optional
g2-filtered pathway models active filtering on Alice's side instead, where
both the mean photon number and g2 are those of the filtered emission and an
extra, untrusted modulator insertion loss applies.
"""
from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .correlation import DEFAULT_SIDE_PEAKS, PairIndex, g2_from_areas
from .errors import NoKeyError, UndefinedValueError, ValidationError
from .keyrate import QkdParams, cutoff, gllp_rate, transmission
from .polarimetry import FilterWindow, PhaseIndex, WindowStats, as_runs, window_stats
from .timetag import TagStream

MIN_WINDOW = 4000  # ps


@dataclass(frozen=True)
class GridSpec:
    n_dt: int = 50
    n_tc: int = 50
    dt_range: tuple | None = None  # ps, default (4 ns, period)
    tc_range: tuple | None = None  # ps, default (0, period)
    min_width: int = 1

    def __post_init__(self):
        if self.n_dt < 2 or self.n_tc < 2:
            raise ValidationError("grid needs at least two steps per axis")
        if self.dt_range is not None:
            lo, hi = self.dt_range
            if not 0 < lo <= hi:
                raise ValidationError(f"bad window-width range {self.dt_range}")
            if lo < self.min_width:
                raise ValidationError(f"minimum window {lo} ps is below one histogram bin ({self.min_width} ps)")

    def axes(self, period: int) -> tuple[np.ndarray, np.ndarray]:
        dlo, dhi = self.dt_range or (min(MIN_WINDOW, period), period)
        tlo, thi = self.tc_range or (0, period)
        dt = np.rint(np.linspace(dlo, dhi, self.n_dt)).astype(np.int64)
        tc = np.rint(np.linspace(tlo, thi, self.n_tc)).astype(np.int64)
        return dt, tc

    def to_dict(self, period: int) -> dict:
        dt, tc = self.axes(period)
        return {"n_dt": self.n_dt, "n_tc": self.n_tc, "dt_range": [int(dt[0]), int(dt[-1])],
                "tc_range": [int(tc[0]), int(tc[-1])], "period": period}


@dataclass(frozen=True)
class Optimum:
    dt: int
    tc: int
    value: float
    index: tuple  # (i_dt, i_tc)

    @property
    def window(self) -> FilterWindow:
        return FilterWindow(self.dt, self.tc)


@dataclass(frozen=True)
class Heatmap:
    """``values[i, j]`` belongs to window width ``dt[i]`` and centre ``tc[j]``.
    Absent cells are NaN and never chosen as optimum."""

    grid: GridSpec
    dt: np.ndarray
    tc: np.ndarray
    values: np.ndarray
    optimum: Optimum
    period: int
    quantity: str = "s_inf_per_pulse"
    meta: dict = field(default_factory=dict)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["dt_ps\\tc_ps", *map(int, self.tc)])
        for d, row in zip(self.dt, self.values):
            w.writerow([int(d), *(("" if math.isnan(v) else repr(float(v))) for v in row)])
        return buf.getvalue()

    def summary(self) -> dict:
        o = self.optimum
        return {
            "quantity": self.quantity,
            "grid": self.grid.to_dict(self.period),
            "optimum": {"dt_ps": o.dt, "tc_ps": o.tc, "value": o.value},
            **self.meta,
        }

    def to_json(self) -> str:
        return json.dumps(self.summary(), indent=2, sort_keys=True)


def select_optimum(values: np.ndarray, dt: np.ndarray, tc: np.ndarray, peak: int, maximize: bool = True) -> Optimum:
    """Best finite cell; ties go to larger ``dt``, then to smaller ``|tc - peak|``."""
    v = values if maximize else -values
    finite = np.isfinite(v)
    if not finite.any():
        raise UndefinedValueError("heatmap has no finite cells")
    best = np.max(v[finite])
    cand = np.argwhere(finite & (v == best))
    i, j = min(cand, key=lambda ij: (-dt[ij[0]], abs(int(tc[ij[1]]) - peak), ij[1]))
    return Optimum(int(dt[i]), int(tc[j]), float(values[i, j]), (int(i), int(j)))


def arrival_peak(index: PhaseIndex, bin_width: int = 100) -> int:
    """Centre of the most populated phase bin over all runs and channels."""
    P = index.period
    n = -(-P // bin_width)
    h = np.zeros(n, np.int64)
    for ph in index._phases.values():
        h += np.bincount(ph // bin_width, minlength=n)[:n]
    return int(np.argmax(h)) * bin_width + bin_width // 2


# --------------------------------------------------------------------------
# key-rate cells


def cell_params(params: QkdParams, ws: WindowStats) -> QkdParams | None:
    """QkdParams for one window, or None for a degenerate window."""
    e = ws.signal_worst
    if not (ws.signal_fraction > 0 and 0.0 <= e <= 0.5):
        return None
    return params.replace(acceptance=min(1.0, ws.signal_fraction), p_dc=params.p_dc * ws.duty, e_detector=e)


def evaluate_window(runs, params: QkdParams, loss_db: float, window: FilterWindow, index: PhaseIndex | None = None) -> float:
    """Secret key per pulse for a single window, evaluated standalone."""
    if index is None:
        runs = as_runs(runs)
        index = PhaseIndex(runs)
    ws = window_stats(runs, window, params.p_dc * index.repetition_rate, index=index)
    cp = cell_params(params, ws)
    return 0.0 if cp is None else gllp_rate(cp, loss_db).s_inf_per_pulse


class WindowTable:
    """Per-cell QkdParams for a grid, built once from the runs."""

    def __init__(self, runs, params: QkdParams, grid: GridSpec | None = None, index: PhaseIndex | None = None):
        self.grid = grid or GridSpec()
        self.runs = as_runs(runs)
        self.index = index or PhaseIndex(self.runs)
        self.params = params
        self.period = self.index.period
        self.dt, self.tc = self.grid.axes(self.period)
        self.peak = arrival_peak(self.index)
        full = self.index.counts(None)
        dark = params.p_dc * self.index.repetition_rate
        self.stats = [[window_stats(self.runs, FilterWindow(int(d), int(c)), dark, self.index, full) for c in self.tc] for d in self.dt]
        self.cells = [[cell_params(params, ws) for ws in row] for row in self.stats]
        self.full_stats = window_stats(self.runs, FilterWindow.full(self.period), dark, self.index, full)
        self.full_cell = cell_params(params, self.full_stats)

    def rate_matrix(self, loss_db: float, cells=None) -> np.ndarray:
        cells = self.cells if cells is None else cells
        out = np.zeros((self.dt.size, self.tc.size))
        for i, row in enumerate(cells):
            for j, cp in enumerate(row):
                if cp is not None:
                    out[i, j] = gllp_rate(cp, loss_db).s_inf_per_pulse
        return out

    def heatmap(self, loss_db: float, cells=None, quantity: str = "s_inf_per_pulse") -> Heatmap:
        values = self.rate_matrix(loss_db, cells)
        opt = select_optimum(values, self.dt, self.tc, self.peak)
        return Heatmap(self.grid, self.dt, self.tc, values, opt, self.period, quantity,
                       {"loss_db": loss_db, "arrival_peak_ps": self.peak})

    def unoptimized(self, loss_db: float) -> float:
        return 0.0 if self.full_cell is None else gllp_rate(self.full_cell, loss_db).s_inf_per_pulse


def keyrate_heatmap(runs, params: QkdParams, loss_db: float, grid: GridSpec | None = None) -> Heatmap:
    return WindowTable(runs, params, grid).heatmap(loss_db)


# --------------------------------------------------------------------------
# optimized rate-loss


@dataclass(frozen=True)
class OptimizationResult:
    losses: np.ndarray
    windows: list  # Optimum per loss
    optimized: np.ndarray  # per pulse
    unoptimized: np.ndarray
    optimized_cutoff: float
    unoptimized_cutoff: float
    clock: float

    @property
    def gain_db(self) -> float:
        return self.optimized_cutoff - self.unoptimized_cutoff

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["loss_db", "unoptimized_per_pulse", "optimized_per_pulse", "optimized_per_s", "dt_ps", "tc_ps"])
        for L, u, o, win in zip(self.losses, self.unoptimized, self.optimized, self.windows):
            w.writerow([repr(float(L)), repr(float(u)), repr(float(o)), repr(float(o * self.clock)), win.dt, win.tc])
        return buf.getvalue()

    def summary(self) -> dict:
        return {"optimized_cutoff_db": self.optimized_cutoff, "unoptimized_cutoff_db": self.unoptimized_cutoff,
                "gain_db": self.gain_db}


def _cells_cutoff(cells, resolution: float) -> float:
    best = -math.inf
    for row in cells:
        for cp in row:
            if cp is None:
                continue
            try:
                best = max(best, cutoff(lambda L: gllp_rate(cp, L).s_inf_per_pulse, resolution))
            except NoKeyError:
                pass
    if best == -math.inf:
        raise NoKeyError("no window yields a positive key at 0 dB")
    return best


def optimized_rate_loss(
    runs,
    params: QkdParams,
    losses: Sequence[float],
    grid: GridSpec | None = None,
    table: WindowTable | None = None,
    cells=None,
    resolution: float = 0.01,
) -> OptimizationResult:
    """Per-loss optimum over the grid, plus the cutoff-loss gain.

    ``cells`` substitutes per-cell parameters (see :func:`g2_filtered_cells`);
    the unoptimized reference is always the plain full-period window.
    """
    table = table or WindowTable(runs, params, grid)
    cells = table.cells if cells is None else cells
    losses = np.asarray(losses, dtype=float)
    if losses.ndim != 1 or np.any(np.diff(losses) <= 0):
        raise ValidationError("losses must be strictly increasing")
    windows, opt, unopt = [], [], []
    for L in losses:
        hm = table.heatmap(float(L), cells)
        windows.append(hm.optimum)
        opt.append(hm.optimum.value)
        unopt.append(table.unoptimized(float(L)))
    if table.full_cell is None:
        raise NoKeyError("full-period window is degenerate")
    un_cut = cutoff(lambda L: gllp_rate(table.full_cell, L).s_inf_per_pulse, resolution)
    opt_cut = _cells_cutoff(cells, resolution)
    return OptimizationResult(losses, windows, np.array(opt), np.array(unopt), opt_cut, un_cut, params.clock)


# --------------------------------------------------------------------------
# g2 filtering


class G2Grid:
    """Pair indices of one or more streams for filtered-g2 evaluation.

    Areas of several independent streams (e.g. the four input-state runs)
    are summed before normalizing.
    """

    def __init__(self, streams, n_side_peaks: int = DEFAULT_SIDE_PEAKS):
        if isinstance(streams, TagStream):
            streams = [streams]
        elif hasattr(streams, "values"):
            streams = list(streams.values())
        self.indices = [PairIndex.build(s, n_side_peaks) for s in streams]
        periods = {ix.period for ix in self.indices}
        if len(periods) != 1:
            raise ValidationError("streams use different clock periods")
        self.period = periods.pop()

    def areas(self, window: FilterWindow | None = None) -> np.ndarray:
        accept = None if window is None else window.accept(self.period)
        return sum(ix.areas(accept) for ix in self.indices)


def g2_heatmap(streams, grid: GridSpec | None = None, min_side_counts: float = 10.0,
               n_side_peaks: int = DEFAULT_SIDE_PEAKS, g2grid: G2Grid | None = None) -> Heatmap:
    """Integrated g2 of the time-filtered stream(s) per window; absent cells
    (mean side area below ``min_side_counts``) are NaN. The optimum is the
    minimum g2."""
    grid = grid or GridSpec()
    g2grid = g2grid or G2Grid(streams, n_side_peaks)
    P = g2grid.period
    dt, tc = grid.axes(P)
    values = np.full((dt.size, tc.size), np.nan)
    for i, d in enumerate(dt):
        for j, c in enumerate(tc):
            a = g2grid.areas(FilterWindow(int(d), int(c)))
            n = (a.size - 1) // 2
            if np.delete(a, n).mean() >= min_side_counts:
                values[i, j] = g2_from_areas(a).value
    full = g2_from_areas(g2grid.areas(None))
    opt = select_optimum(values, dt, tc, 0, maximize=False)
    return Heatmap(grid, dt, tc, values, opt, P, "g2",
                   {"unfiltered_g2": full.value, "unfiltered_stderr": full.stderr, "min_side_counts": min_side_counts})


def g2_filtered_cells(table: WindowTable, g2_map: Heatmap, alice_loss_db: float = 3.0):
    """Per-cell parameters when the filter acts on Alice's side.

    Mean photon number and g2 are those of the filtered emission. The
    modulator's insertion loss is treated as untrusted: it is attributed to
    the channel, so it lowers the click probability but leaves the
    multi-photon bound at its pre-modulator value. Cells without a g2
    estimate are dropped.
    """
    if g2_map.values.shape != (table.dt.size, table.tc.size) or not (
        np.array_equal(g2_map.dt, table.dt) and np.array_equal(g2_map.tc, table.tc)
    ):
        raise ValidationError("g2 heatmap grid does not match the key-rate grid")
    if alice_loss_db < 0:
        raise ValidationError("insertion loss must be non-negative")
    t_alice = transmission(alice_loss_db)
    out = []
    for row, grow in zip(table.cells, g2_map.values):
        r = []
        for cp, g in zip(row, grow):
            if cp is None or not math.isfinite(g):
                r.append(None)
            else:
                r.append(cp.replace(mu=cp.mu * cp.acceptance, acceptance=1.0, g2=float(g), eta_bob=cp.eta_bob * t_alice))
        out.append(r)
    return out
