"""Second-order autocorrelation from four-channel click streams.

Coincidences are accumulated over every ordered pair of tags on *distinct*
detectors, so the delay histogram is exactly mirror-symmetric. The zero-delay
value is the integrated centre peak over one full repetition period divided
by the mean integrated side peak; nothing is background-corrected or fitted.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Iterator

import numpy as np

from .errors import ConfigurationError, InsufficientDataError, UndefinedValueError, ValidationError
from .timetag import ChannelId, TagStream, split_blocks

DEFAULT_SIDE_PEAKS = 5
_SHARD = 1 << 21


@dataclass(frozen=True)
class G2Histogram:
    bin_width: int
    delays: np.ndarray  # left bin edges, ps
    coincidences: np.ndarray
    n_side_peaks: int
    period: int

    def peak_areas(self) -> np.ndarray:
        """Integrated counts of peaks -n..n (index n is zero delay)."""
        n = self.n_side_peaks
        k = np.floor_divide(self.delays + self.period // 2, self.period)
        sel = np.abs(k) <= n
        return np.bincount(k[sel] + n, weights=self.coincidences[sel], minlength=2 * n + 1).astype(np.int64)

    def __add__(self, other: "G2Histogram") -> "G2Histogram":
        if (self.bin_width, self.n_side_peaks, self.period) != (other.bin_width, other.n_side_peaks, other.period):
            raise ValidationError("incompatible histograms")
        return G2Histogram(self.bin_width, self.delays, self.coincidences + other.coincidences, self.n_side_peaks, self.period)


@dataclass(frozen=True)
class G2Value:
    value: float
    stderr: float
    center_counts: int
    mean_side_counts: float

    @property
    def relative_error(self) -> float:
        return self.stderr / self.value if self.value > 0 else math.inf


@dataclass(frozen=True)
class BackgroundEstimate:
    S: float
    B: float
    g2_emitter: float = 0.0

    @classmethod
    def from_rho(cls, rho: float, g2_emitter: float = 0.0) -> "BackgroundEstimate":
        return cls(S=rho, B=1.0 - rho, g2_emitter=g2_emitter)

    @property
    def rho(self) -> float:
        return self.S / (self.S + self.B)


def _check_peaks(period: int, bin_width: int):
    if bin_width <= 0 or period % bin_width:
        raise ConfigurationError(f"bin width {bin_width} ps does not divide period {period} ps")


def cross_pairs(timestamps: np.ndarray, channels: np.ndarray, max_delay: int) -> Iterator[tuple[np.ndarray, np.ndarray, np.ndarray]]:
    """Yield ``(i, j, delay)`` for tag pairs with ``0 <= t_j - t_i < max_delay``,
    ``i < j`` and distinct channels, shard by shard."""
    n = timestamps.size
    for a in range(0, n, _SHARD):
        b = min(a + _SHARD, n)
        end = int(np.searchsorted(timestamps, timestamps[b - 1] + max_delay, side="left"))
        ts = timestamps[a:end]
        ch = channels[a:end]
        anchors = b - a
        m = 1
        while m < ts.size:
            lim = min(anchors, ts.size - m)
            d = ts[m : m + lim] - ts[:lim]
            close = d < max_delay
            if not close.any():
                break
            keep = close & (ch[m : m + lim] != ch[:lim])
            i = np.flatnonzero(keep)
            yield a + i, a + i + m, d[i]
            m += 1


def g2_histogram(stream: TagStream, bin_width: int = 1000, n_side_peaks: int = DEFAULT_SIDE_PEAKS) -> G2Histogram:
    period = stream.clock.period
    _check_peaks(period, bin_width)
    if n_side_peaks < 1:
        raise ConfigurationError("need at least one side peak")
    if stream.n_periods < 2 * (n_side_peaks + 1):
        raise InsufficientDataError(
            f"stream spans {stream.n_periods} periods, need {2 * (n_side_peaks + 1)}"
        )
    half = (n_side_peaks + 1) * period
    n_bins = 2 * half // bin_width
    counts = np.zeros(n_bins, np.int64)
    for _, _, d in cross_pairs(stream.timestamps, stream.channels, half):
        counts += np.bincount((half + d) // bin_width, minlength=n_bins)
        counts += np.bincount((half - d - 1) // bin_width, minlength=n_bins)
    delays = np.arange(n_bins, dtype=np.int64) * bin_width - half
    return G2Histogram(bin_width, delays, counts, n_side_peaks, period)


def g2_from_areas(areas: np.ndarray) -> G2Value:
    """Integrated g2 from peak areas -n..n of a mirrored histogram."""
    n = (areas.size - 1) // 2
    if n < 2:
        raise ConfigurationError("integrated g2 needs at least two side peaks per side")
    center = int(areas[n])
    side = np.delete(areas, n)
    total = float(side.sum())
    if total <= 0:
        raise UndefinedValueError("no side-peak coincidences")
    mean_side = total / side.size
    g = center / mean_side
    # every unordered pair appears twice in a mirrored histogram
    var = 2.0 * (center / mean_side**2 + g * g / total)
    return G2Value(g, math.sqrt(var), center, mean_side)


def integrated_g2(hist: G2Histogram) -> G2Value:
    return g2_from_areas(hist.peak_areas())


def background_limited_g2(est: BackgroundEstimate) -> float:
    """g2 of emitter light diluted by uncorrelated background."""
    rho = est.rho
    if not 0.0 <= rho <= 1.0:
        raise ValidationError(f"rho={rho} outside [0, 1]")
    return 1.0 + rho**2 * (est.g2_emitter - 1.0)


# --------------------------------------------------------------------------
# pair index for time-filtered g2


@dataclass(frozen=True)
class PairIndex:
    """Cross-channel coincidences with the folded phases of both partners.

    Lets the integrated g2 of any time-filtered sub-stream be evaluated
    without re-correlating.
    """

    peak: np.ndarray  # 0..n, |delay| rounded to periods
    phase_i: np.ndarray
    phase_j: np.ndarray
    n_side_peaks: int
    period: int

    @classmethod
    def build(cls, stream: TagStream, n_side_peaks: int = DEFAULT_SIDE_PEAKS) -> "PairIndex":
        P = stream.clock.period
        if stream.n_periods < 2 * (n_side_peaks + 1):
            raise InsufficientDataError("stream too short for correlation")
        ph = stream.phases()
        reach = n_side_peaks * P + P // 2
        parts = [[], [], []]
        for i, j, d in cross_pairs(stream.timestamps, stream.channels, reach):
            parts[0].append(((d + P // 2) // P).astype(np.int16))
            parts[1].append(ph[i].astype(np.int32))
            parts[2].append(ph[j].astype(np.int32))
        cat = [np.concatenate(p) if p else np.empty(0, t) for p, t in zip(parts, (np.int16, np.int32, np.int32))]
        return cls(cat[0], cat[1], cat[2], n_side_peaks, P)

    def areas(self, accept=None) -> np.ndarray:
        """Mirrored peak areas -n..n, optionally for pairs where both tags pass ``accept(phase)``."""
        n = self.n_side_peaks
        peak = self.peak if accept is None else self.peak[accept(self.phase_i) & accept(self.phase_j)]
        half = np.bincount(peak, minlength=n + 1)[: n + 1]
        out = np.concatenate([half[:0:-1], [2 * half[0]], half[1:]])
        return out.astype(np.int64)

    def g2(self, accept=None) -> G2Value:
        return g2_from_areas(self.areas(accept))


# --------------------------------------------------------------------------
# monitoring


def windowless_qber(stream: TagStream, reference=None) -> tuple[float, int]:
    """Wrong-channel fraction within the reference basis, and the basis total."""
    ref = stream.label if reference is None else ChannelId.parse(reference)
    if ref is None:
        raise ValidationError("no reference input state")
    counts = stream.channel_counts()
    right, wrong = int(counts[int(ref)]), int(counts[int(ref.partner)])
    total = right + wrong
    return (wrong / total if total else math.nan), total


@dataclass
class MonitorSeries:
    block: float
    starts: np.ndarray  # s
    click_rate: np.ndarray  # Hz
    qber: np.ndarray
    g2: list  # G2Value, or None where a block lacked statistics
    dropped_partial: bool = False
    summary: dict = field(default_factory=dict)

    def g2_values(self) -> np.ndarray:
        return np.array([math.nan if g is None else g.value for g in self.g2])

    def g2_stderrs(self) -> np.ndarray:
        return np.array([math.nan if g is None else g.stderr for g in self.g2])

    def g2_relative_spread(self) -> float:
        """Standard deviation across blocks over the mean, ignoring gaps."""
        v = self.g2_values()
        v = v[np.isfinite(v)]
        return float(np.std(v, ddof=1) / np.mean(v)) if v.size > 1 else math.nan

    def g2_relative_stderr(self) -> float:
        """Mean per-block Poisson standard error over the mean value."""
        v, e = self.g2_values(), self.g2_stderrs()
        ok = np.isfinite(v)
        return float(np.mean(e[ok]) / np.mean(v[ok])) if ok.any() else math.nan


def _mean_std(x: np.ndarray) -> tuple[float, float]:
    x = x[np.isfinite(x)]
    if x.size == 0:
        return math.nan, math.nan
    return float(np.mean(x)), float(np.std(x, ddof=1)) if x.size > 1 else 0.0


def monitor_blocks(
    stream: TagStream,
    block: float,
    qber_reference=None,
    bin_width: int = 1000,
    n_side_peaks: int = DEFAULT_SIDE_PEAKS,
) -> MonitorSeries:
    """Click rate, QBER and integrated g2 for consecutive non-overlapping blocks."""
    split = split_blocks(stream, block)
    rates, qbers, g2s = [], [], []
    for blk in split:
        rates.append(len(blk) / blk.acquisition if blk.duration else math.nan)
        qbers.append(windowless_qber(blk, qber_reference)[0])
        try:
            g2s.append(integrated_g2(g2_histogram(blk, bin_width, n_side_peaks)))
        except (InsufficientDataError, UndefinedValueError):
            g2s.append(None)
    series = MonitorSeries(
        block=block,
        starts=np.array(split.starts, dtype=float) / 1e12,
        click_rate=np.array(rates),
        qber=np.array(qbers),
        g2=g2s,
        dropped_partial=split.dropped_partial,
    )
    for name, arr in (("click_rate", series.click_rate), ("qber", series.qber), ("g2", series.g2_values())):
        m, s = _mean_std(arr)
        series.summary[f"{name}_mean"] = m
        series.summary[f"{name}_std"] = s
    series.summary["g2_relative_spread"] = series.g2_relative_spread()
    series.summary["g2_relative_stderr"] = series.g2_relative_stderr()
    series.summary["n_blocks"] = len(split)
    series.summary["n_gaps"] = sum(g is None for g in g2s)
    return series
