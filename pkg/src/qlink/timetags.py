"""Time-tag streams and their on-disk formats.

Binary layout (little endian)::

    header : b"QTT1" | u32 version (=1) | u64 record count
    record : u64 timestamp_ps | u32 channel_id | u32 reserved (=0)

Records are written in time order (ties broken by channel id).
"""

from __future__ import annotations

import struct
import warnings
from dataclasses import dataclass
from pathlib import Path

import numpy as np

MAGIC = b"QTT1"
VERSION = 1
HEADER = struct.Struct("<4sIQ")
RECORD_DTYPE = np.dtype([("timestamp_ps", "<u8"), ("channel", "<u4"), ("reserved", "<u4")])
PS_PER_S = 10 ** 12


class TagFileError(ValueError):
    """Malformed or unreadable time-tag data."""


@dataclass
class TimeTagStream:
    """Per-channel, strictly increasing picosecond timestamps.

    ``start`` and ``duration`` are in seconds; every tag lies in
    ``[start, start + duration]``.
    """

    channels: dict[int, np.ndarray]
    duration: float
    start: float = 0.0

    def __post_init__(self):
        if self.duration < 0:
            raise ValueError("duration must be non-negative")
        lo = int(round(self.start * PS_PER_S))
        hi = lo + int(round(self.duration * PS_PER_S))
        clean = {}
        for ch, tags in self.channels.items():
            tags = np.asarray(tags, dtype=np.int64)
            if tags.ndim != 1:
                raise ValueError(f"channel {ch}: timestamps must be 1-D")
            if tags.size and np.any(np.diff(tags) <= 0):
                raise ValueError(f"channel {ch}: timestamps must be strictly increasing")
            if tags.size and (tags[0] < lo or tags[-1] > hi):
                raise ValueError(f"channel {ch}: timestamps outside the acquisition window")
            clean[int(ch)] = tags
        self.channels = clean

    @property
    def start_ps(self) -> int:
        return int(round(self.start * PS_PER_S))

    @property
    def end_ps(self) -> int:
        return self.start_ps + int(round(self.duration * PS_PER_S))

    def singles_rate(self, channel: int) -> float:
        return self.channels[channel].size / self.duration if self.duration else float("nan")

    def shifted(self, offset_ps: int) -> "TimeTagStream":
        return TimeTagStream({ch: t + offset_ps for ch, t in self.channels.items()},
                             self.duration, self.start + offset_ps / PS_PER_S)

    def records(self) -> np.ndarray:
        """All tags merged into binary records, sorted by (timestamp, channel)."""
        n = sum(t.size for t in self.channels.values())
        rec = np.zeros(n, dtype=RECORD_DTYPE)
        i = 0
        for ch in sorted(self.channels):
            t = self.channels[ch]
            rec["timestamp_ps"][i:i + t.size] = t
            rec["channel"][i:i + t.size] = ch
            i += t.size
        order = np.lexsort((rec["channel"], rec["timestamp_ps"]))
        return rec[order]


class TagFileWriter:
    """Appends streams to a binary tag file; the record count is patched on close.

    Appended streams must be in time order with respect to each other.
    """

    def __init__(self, path):
        self.path = Path(path)
        self.count = 0
        self._last = -1
        self._fh = open(self.path, "wb")
        self._fh.write(HEADER.pack(MAGIC, VERSION, 0))

    def write(self, stream: TimeTagStream) -> None:
        rec = stream.records()
        if np.any(rec["timestamp_ps"] < 0):
            raise ValueError("negative timestamps cannot be stored")
        if rec.size and int(rec["timestamp_ps"][0]) < self._last:
            raise ValueError("appended stream overlaps data already written")
        if rec.size:
            self._last = int(rec["timestamp_ps"][-1])
        self._fh.write(rec.tobytes())
        self.count += rec.size

    def close(self) -> None:
        if self._fh.closed:
            return
        self._fh.seek(0)
        self._fh.write(HEADER.pack(MAGIC, VERSION, self.count))
        self._fh.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


def write_binary(stream: TimeTagStream, path) -> None:
    with TagFileWriter(path) as w:
        w.write(stream)


def read_records(path) -> np.ndarray:
    """Validated record array (memory-mapped for non-empty files)."""
    path = Path(path)
    try:
        size = path.stat().st_size
        with open(path, "rb") as fh:
            head = fh.read(HEADER.size)
    except OSError as exc:
        raise TagFileError(f"cannot read {path}: {exc}") from exc
    if len(head) < HEADER.size:
        raise TagFileError(f"{path}: truncated header")
    magic, version, count = HEADER.unpack(head)
    if magic != MAGIC:
        raise TagFileError(f"{path}: bad magic {magic!r}")
    if version != VERSION:
        raise TagFileError(f"{path}: unsupported version {version}")
    expected = HEADER.size + count * RECORD_DTYPE.itemsize
    if size != expected:
        raise TagFileError(f"{path}: size {size} does not match {count} records")
    if count == 0:
        return np.zeros(0, dtype=RECORD_DTYPE)
    rec = np.memmap(path, dtype=RECORD_DTYPE, mode="r", offset=HEADER.size, shape=(count,))
    if np.any(rec["reserved"] != 0):
        raise TagFileError(f"{path}: reserved field must be zero")
    return rec


def _split_channels(timestamps: np.ndarray, channels: np.ndarray, chunk: int = 1 << 23):
    """Per-channel timestamp arrays, built chunk by chunk to bound memory."""
    parts: dict[int, list[np.ndarray]] = {}
    for i in range(0, timestamps.size, chunk):
        ts = np.asarray(timestamps[i:i + chunk]).astype(np.int64)
        ch = np.asarray(channels[i:i + chunk])
        for c in np.unique(ch):
            parts.setdefault(int(c), []).append(ts[ch == c])
    return {c: np.concatenate(p) for c, p in parts.items()}


def read_binary(path, duration: float | None = None) -> TimeTagStream:
    """Load a binary tag file; ``duration`` defaults to the last timestamp."""
    rec = read_records(path)
    if rec.size == 0:
        raise TagFileError(f"{path}: no records")
    channels = _split_channels(rec["timestamp_ps"], rec["channel"])
    return _stream_from_channels(channels, duration, path)


def _stream_from_channels(channels, duration, path) -> TimeTagStream:
    last = max(int(t[-1]) for t in channels.values())
    if duration is None:
        duration = last / PS_PER_S
    try:
        return TimeTagStream(channels, duration)
    except ValueError as exc:
        raise TagFileError(f"{path}: {exc}") from exc


def write_csv(stream: TimeTagStream, path) -> None:
    rec = stream.records()
    with open(path, "w", newline="") as fh:
        fh.write("channel,timestamp_ps\n")
        for ts, ch in zip(rec["timestamp_ps"].tolist(), rec["channel"].tolist()):
            fh.write(f"{ch},{ts}\n")


def read_csv(path, duration: float | None = None) -> TimeTagStream:
    path = Path(path)
    try:
        with open(path) as fh:
            header = fh.readline().strip()
            if header != "channel,timestamp_ps":
                raise TagFileError(f"{path}: unexpected header {header!r}")
            with warnings.catch_warnings():
                warnings.simplefilter("ignore", UserWarning)  # empty body is reported below
                data = np.loadtxt(fh, delimiter=",", dtype=np.int64, ndmin=2)
    except OSError as exc:
        raise TagFileError(f"cannot read {path}: {exc}") from exc
    except ValueError as exc:
        raise TagFileError(f"{path}: {exc}") from exc
    if data.size == 0:
        raise TagFileError(f"{path}: no records")
    if data.shape[1] != 2:
        raise TagFileError(f"{path}: expected two columns")
    order = np.lexsort((data[:, 0], data[:, 1]))
    data = data[order]
    channels = {int(c): data[data[:, 0] == c, 1] for c in np.unique(data[:, 0])}
    return _stream_from_channels(channels, duration, path)


def read_tags(path, duration: float | None = None) -> TimeTagStream:
    """Read either format, sniffing the binary magic."""
    path = Path(path)
    try:
        with open(path, "rb") as fh:
            head = fh.read(4)
    except OSError as exc:
        raise TagFileError(f"cannot read {path}: {exc}") from exc
    if head == MAGIC:
        return read_binary(path, duration)
    if head.startswith(b"chan"):
        return read_csv(path, duration)
    raise TagFileError(f"{path}: not a recognised tag file")
