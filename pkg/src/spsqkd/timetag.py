"""Time-tagged detection events: data model, file formats, folding and blocks.

Timestamps are integer picoseconds everywhere in the event path. A stream
carries its :class:`PulseClock`; the excitation sync itself is not stored as
a channel, its phase is the clock's ``phase_offset``.
"""
from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass, field, replace
from enum import IntEnum
from pathlib import Path
from typing import Iterable, Iterator, NamedTuple, Sequence

import numpy as np

from .errors import ConfigurationError, ParseError, ValidationError

PS_PER_S = 1_000_000_000_000

BINARY_MAGIC = b"TTG1"
_HEADER = np.dtype([("magic", "S4"), ("rate", "<u8")])
_RECORD = np.dtype([("channel", "u1"), ("reserved", "V3"), ("timestamp", "<u8")])
CSV_HEADER = ("timestamp_ps", "channel")


class ChannelId(IntEnum):
    """Detector channel of the four-state passive polarization decoder."""

    H = 0
    V = 1
    D = 2
    A = 3

    @property
    def basis(self) -> int:
        """0 for the rectilinear (H/V) basis, 1 for the diagonal (D/A) basis."""
        return int(self) // 2

    @property
    def partner(self) -> "ChannelId":
        """The other channel of the same basis."""
        return ChannelId(int(self) ^ 1)

    @classmethod
    def parse(cls, token: str | int | "ChannelId") -> "ChannelId":
        if isinstance(token, ChannelId):
            return token
        if isinstance(token, (int, np.integer)):
            try:
                return cls(int(token))
            except ValueError:
                raise ValidationError(f"unknown channel code {token!r}") from None
        try:
            return cls[str(token).strip().upper()]
        except KeyError:
            raise ValidationError(f"unknown channel {token!r}") from None


class TimeTag(NamedTuple):
    timestamp: int
    channel: ChannelId


@dataclass(frozen=True)
class PulseClock:
    """Excitation clock. ``phase_offset`` is the folding origin in ps."""

    repetition_rate: float
    phase_offset: int = 0

    def __post_init__(self):
        if not self.repetition_rate > 0:
            raise ValidationError("repetition_rate must be positive")
        if not 0 <= self.phase_offset < self.period:
            raise ValidationError(
                f"phase_offset {self.phase_offset} outside [0, {self.period})"
            )

    @property
    def period(self) -> int:
        return int(round(PS_PER_S / self.repetition_rate))

    def with_phase(self, phase_offset: int) -> "PulseClock":
        return replace(self, phase_offset=int(phase_offset) % self.period)


def _frozen(a: np.ndarray) -> np.ndarray:
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class TagStream:
    """Immutable, time-sorted sequence of detection events.

    Use :meth:`from_arrays` to build one from unsorted data.
    """

    timestamps: np.ndarray
    channels: np.ndarray
    duration: int
    clock: PulseClock
    label: ChannelId | None = None

    def __post_init__(self):
        ts = np.asarray(self.timestamps, dtype=np.int64)
        ch = np.asarray(self.channels, dtype=np.uint8)
        if ts.shape != ch.shape or ts.ndim != 1:
            raise ValidationError("timestamps and channels must be 1-D and equal length")
        if ts.size:
            if ts[0] < 0:
                raise ValidationError("negative timestamp")
            if np.any(np.diff(ts) < 0):
                raise ValidationError("timestamps must be non-decreasing")
            if ts[-1] > self.duration:
                raise ValidationError("tag beyond stream duration")
            if ch.max() > 3:
                raise ValidationError(f"unknown channel code {int(ch.max())}")
        if self.duration < 0:
            raise ValidationError("negative duration")
        # never freeze a caller-owned buffer in place
        object.__setattr__(self, "timestamps", _frozen(ts.copy() if ts.flags.writeable else ts))
        object.__setattr__(self, "channels", _frozen(ch.copy() if ch.flags.writeable else ch))
        object.__setattr__(self, "duration", int(self.duration))
        if self.label is not None:
            object.__setattr__(self, "label", ChannelId.parse(self.label))

    @classmethod
    def from_arrays(
        cls,
        timestamps,
        channels,
        clock: PulseClock,
        duration: int | None = None,
        label: ChannelId | str | None = None,
    ) -> "TagStream":
        ts = np.asarray(timestamps, dtype=np.int64)
        ch = np.asarray(channels, dtype=np.uint8)
        order = np.argsort(ts, kind="stable")
        ts, ch = ts[order], ch[order]
        if duration is None:
            duration = covering_duration(ts, clock.period)
        return cls(ts, ch, duration, clock, label)

    @classmethod
    def from_tags(cls, tags: Iterable[TimeTag | tuple], clock: PulseClock, **kw) -> "TagStream":
        tags = list(tags)
        ts = [int(t[0]) for t in tags]
        ch = [int(ChannelId.parse(t[1])) for t in tags]
        return cls.from_arrays(ts, ch, clock, **kw)

    def __len__(self) -> int:
        return int(self.timestamps.size)

    def __iter__(self) -> Iterator[TimeTag]:
        for t, c in zip(self.timestamps.tolist(), self.channels.tolist()):
            yield TimeTag(t, ChannelId(c))

    def __eq__(self, other) -> bool:
        if not isinstance(other, TagStream):
            return NotImplemented
        return (
            self.duration == other.duration
            and self.clock == other.clock
            and self.label == other.label
            and np.array_equal(self.timestamps, other.timestamps)
            and np.array_equal(self.channels, other.channels)
        )

    __hash__ = None

    @property
    def acquisition(self) -> float:
        """Duration in seconds."""
        return self.duration / PS_PER_S

    @property
    def n_periods(self) -> int:
        return self.duration // self.clock.period

    def phases(self) -> np.ndarray:
        """Arrival time of every tag folded into one clock period, in ps."""
        return (self.timestamps - self.clock.phase_offset) % self.clock.period

    def channel_counts(self) -> np.ndarray:
        return np.bincount(self.channels, minlength=4)[:4]

    def select(self, mask: np.ndarray) -> "TagStream":
        return TagStream(self.timestamps[mask], self.channels[mask], self.duration, self.clock, self.label)

    def with_clock(self, clock: PulseClock) -> "TagStream":
        return replace(self, clock=clock)

    def with_label(self, label) -> "TagStream":
        return replace(self, label=None if label is None else ChannelId.parse(label))


def covering_duration(timestamps: np.ndarray, period: int) -> int:
    """Whole number of clock periods covering the last tag."""
    if len(timestamps) == 0:
        return 0
    last = int(timestamps[-1]) if np.all(np.diff(timestamps) >= 0) else int(np.max(timestamps))
    return (last // period + 1) * period


def merge_streams(streams: Sequence[TagStream], label=None) -> TagStream:
    """Union of events from streams sharing one clock."""
    if not streams:
        raise ValidationError("nothing to merge")
    clock = streams[0].clock
    if any(s.clock != clock for s in streams):
        raise ValidationError("streams have different clocks")
    ts = np.concatenate([s.timestamps for s in streams])
    ch = np.concatenate([s.channels for s in streams])
    return TagStream.from_arrays(ts, ch, clock, max(s.duration for s in streams), label)


# --------------------------------------------------------------------------
# file formats


def emit_timetags(stream: TagStream, format: str = "binary-v1") -> bytes:
    if format == "binary-v1":
        head = np.zeros(1, _HEADER)
        head["magic"] = BINARY_MAGIC
        head["rate"] = int(round(stream.clock.repetition_rate))
        rec = np.zeros(len(stream), _RECORD)
        rec["channel"] = stream.channels
        rec["timestamp"] = stream.timestamps
        return head.tobytes() + rec.tobytes()
    if format == "csv":
        buf = io.StringIO()
        buf.write(",".join(CSV_HEADER) + "\n")
        names = np.array([c.name for c in ChannelId])
        for t, c in zip(stream.timestamps.tolist(), names[stream.channels].tolist()):
            buf.write(f"{t},{c}\n")
        return buf.getvalue().encode("ascii")
    raise ConfigurationError(f"unknown format {format!r}")


def ingest_timetags(
    data: bytes,
    format: str = "binary-v1",
    *,
    repetition_rate: float | None = None,
    phase_offset: int = 0,
    duration: int | None = None,
    label=None,
) -> TagStream:
    """Decode raw bytes into a sorted, validated :class:`TagStream`.

    Neither format stores duration, phase or input label; pass them in to
    reproduce a stream exactly. Without ``duration`` the stream is taken to
    span the whole clock periods up to its last tag.
    """
    if format == "binary-v1":
        ts, ch, header_rate = _decode_binary(data)
        rate = header_rate if header_rate is not None else repetition_rate
    elif format == "csv":
        ts, ch = _decode_csv(data)
        rate = repetition_rate
    else:
        raise ConfigurationError(f"unknown format {format!r}")
    if rate is None:
        raise ConfigurationError("repetition_rate is required for this input")
    clock = PulseClock(rate, phase_offset)
    if duration is None:
        duration = covering_duration(np.sort(ts), clock.period)
    return TagStream.from_arrays(ts, ch, clock, duration, label)


def _decode_binary(data: bytes):
    if len(data) == 0:
        return np.empty(0, np.int64), np.empty(0, np.uint8), None
    if len(data) < _HEADER.itemsize:
        raise ParseError("truncated header", 0)
    head = np.frombuffer(data, _HEADER, count=1)[0]
    if bytes(head["magic"]) != BINARY_MAGIC:
        raise ParseError("bad magic, expected TTG1", 0)
    rate = int(head["rate"])
    if rate == 0:
        raise ParseError("zero repetition rate in header", 4)
    body = len(data) - _HEADER.itemsize
    if body % _RECORD.itemsize:
        whole = body // _RECORD.itemsize
        raise ParseError("truncated record", _HEADER.itemsize + whole * _RECORD.itemsize)
    rec = np.frombuffer(data, _RECORD, offset=_HEADER.itemsize)
    reserved = np.frombuffer(rec["reserved"].tobytes(), np.uint8).reshape(-1, 3)
    bad = np.flatnonzero(reserved.any(axis=1))
    if bad.size:
        raise ParseError("non-zero reserved bytes", _HEADER.itemsize + int(bad[0]) * _RECORD.itemsize + 1)
    bad = np.flatnonzero(rec["channel"] > 3)
    if bad.size:
        i = int(bad[0])
        raise ValidationError(
            f"unknown channel code {int(rec['channel'][i])} at byte {_HEADER.itemsize + i * _RECORD.itemsize}"
        )
    ts = rec["timestamp"]
    if ts.size and ts.max() > np.iinfo(np.int64).max:
        raise ParseError("timestamp overflows int64")
    return ts.astype(np.int64), rec["channel"].copy(), rate


def _decode_csv(data: bytes):
    try:
        text = data.decode("ascii")
    except UnicodeDecodeError as exc:
        raise ParseError("non-ascii input", exc.start) from None
    ts, ch = [], []
    for lineno, row in enumerate(csv.reader(io.StringIO(text)), start=1):
        if not row or all(not f.strip() for f in row):
            continue
        if lineno == 1 and tuple(f.strip() for f in row) == CSV_HEADER:
            continue
        if len(row) != 2:
            raise ParseError(f"expected 2 fields, got {len(row)}", lineno, "line")
        try:
            t = int(row[0])
        except ValueError:
            raise ParseError(f"bad timestamp {row[0]!r}", lineno, "line") from None
        if t < 0:
            raise ParseError("negative timestamp", lineno, "line")
        try:
            c = ChannelId.parse(row[1])
        except ValidationError:
            raise ValidationError(f"unknown channel {row[1]!r} at line {lineno}") from None
        ts.append(t)
        ch.append(int(c))
    return np.array(ts, np.int64), np.array(ch, np.uint8)


def write_stream(path: str | Path, stream: TagStream, format: str = "binary-v1") -> Path:
    """Write a stream plus a ``.meta.json`` sidecar holding what the format omits."""
    path = Path(path)
    path.write_bytes(emit_timetags(stream, format))
    meta = {
        "format": format,
        "repetition_rate": stream.clock.repetition_rate,
        "phase_offset": stream.clock.phase_offset,
        "duration_ps": stream.duration,
        "label": None if stream.label is None else stream.label.name,
    }
    sidecar(path).write_text(json.dumps(meta, indent=2))
    return path


def read_stream(path: str | Path, format: str | None = None, **kw) -> TagStream:
    path = Path(path)
    meta = {}
    if sidecar(path).exists():
        meta = json.loads(sidecar(path).read_text())
    fmt = format or meta.get("format") or ("csv" if path.suffix == ".csv" else "binary-v1")
    args = dict(
        repetition_rate=meta.get("repetition_rate"),
        phase_offset=meta.get("phase_offset", 0),
        duration=meta.get("duration_ps"),
        label=meta.get("label"),
    )
    args.update({k: v for k, v in kw.items() if v is not None})
    return ingest_timetags(path.read_bytes(), fmt, **args)


def sidecar(path: Path) -> Path:
    return path.with_name(path.name + ".meta.json")


# --------------------------------------------------------------------------
# folding


@dataclass(frozen=True)
class ArrivalHistogram:
    bin_width: int
    counts: np.ndarray  # shape (4, n_bins)
    total_events: int
    acquisition: float

    @property
    def edges(self) -> np.ndarray:
        return np.arange(self.counts.shape[1] + 1, dtype=np.int64) * self.bin_width

    @property
    def centers(self) -> np.ndarray:
        return (np.arange(self.counts.shape[1]) + 0.5) * self.bin_width

    def total(self) -> np.ndarray:
        return self.counts.sum(axis=0)


def bin_arrivals(stream: TagStream, bin_width: int) -> ArrivalHistogram:
    period = stream.clock.period
    if bin_width <= 0 or period % bin_width:
        raise ConfigurationError(f"bin width {bin_width} ps does not divide period {period} ps")
    n_bins = period // bin_width
    idx = stream.phases() // bin_width
    flat = np.bincount(stream.channels.astype(np.int64) * n_bins + idx, minlength=4 * n_bins)
    return ArrivalHistogram(bin_width, flat.reshape(4, n_bins), len(stream), stream.acquisition)


def calibrate_phase(stream: TagStream, reference_ps: int = 2000, bin_width: int = 100) -> TagStream:
    """Shift the clock phase so the rising edge of the arrival histogram
    (half-maximum crossing before the peak) lands at ``reference_ps``."""
    hist = bin_arrivals(stream, bin_width).total()
    if hist.sum() == 0:
        return stream
    peak = int(np.argmax(hist))
    half = hist[peak] / 2.0
    n = hist.size
    edge = peak
    for k in range(1, n):
        j = (peak - k) % n
        if hist[j] < half:
            break
        edge = j
    shift = edge * bin_width - reference_ps
    return stream.with_clock(stream.clock.with_phase(stream.clock.phase_offset + shift))


# --------------------------------------------------------------------------
# blocks


@dataclass(frozen=True)
class BlockSplit(Sequence):
    """Result of :func:`split_blocks`; behaves as a sequence of streams."""

    blocks: list
    starts: list = field(default_factory=list)
    dropped_partial: bool = False
    dropped_events: int = 0
    partial_only: bool = False

    def __getitem__(self, i):
        return self.blocks[i]

    def __len__(self):
        return len(self.blocks)


def _slice(stream: TagStream, start: int, stop: int) -> TagStream:
    lo, hi = np.searchsorted(stream.timestamps, [start, stop], side="left")
    clock = stream.clock.with_phase(stream.clock.phase_offset - start)
    return TagStream(stream.timestamps[lo:hi] - start, stream.channels[lo:hi], stop - start, clock, stream.label)


def split_blocks(stream: TagStream, block: float, overlap: float | None = None) -> BlockSplit:
    """Cut a stream into consecutive blocks of ``block`` seconds.

    ``overlap=None`` gives non-overlapping blocks; a float gives a sliding
    window advanced by that many seconds. Trailing partial blocks are dropped
    and flagged. Timestamps are re-based to each block's start.
    """
    if not block > 0:
        raise ConfigurationError("block length must be positive")
    width = int(round(block * PS_PER_S))
    step = width if overlap is None else int(round(overlap * PS_PER_S))
    if step <= 0:
        raise ConfigurationError("sliding step must be positive")
    if width > stream.duration:
        return BlockSplit([stream], [0], dropped_partial=True, partial_only=True)
    starts = list(range(0, stream.duration - width + 1, step))
    blocks = [_slice(stream, s, s + width) for s in starts]
    covered = starts[-1] + width
    dropped = stream.duration > covered
    n_dropped = int(len(stream) - np.searchsorted(stream.timestamps, covered, side="left"))
    return BlockSplit(blocks, starts, dropped_partial=bool(dropped), dropped_events=n_dropped)
