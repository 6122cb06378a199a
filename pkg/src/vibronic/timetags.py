"""Time-tag streams and the PTG1 binary container.

File layout (little-endian)::

    header  (32 bytes)  magic b"PTG1" | version u32 = 1 | resolution_ps u64 = 1 |
                        channel_count u8 | 15 reserved zero bytes
    records (12 bytes)  timestamp u64 (ps) | channel u8 | origin u8 |
                        phonon_count u8 | reserved u8 = 0

``origin`` is 0xFF for measured/unknown events, 0xFE for simulated background
and the emitter index otherwise.
"""

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import FormatError, StreamError

MAGIC = b"PTG1"
VERSION = 1
HEADER = struct.Struct("<4sIQB15s")
RECORD_DTYPE = np.dtype([("timestamp", "<u8"), ("channel", "u1"), ("origin", "u1"),
                         ("phonon_count", "u1"), ("reserved", "u1")])
assert HEADER.size == 32 and RECORD_DTYPE.itemsize == 12

ORIGIN_UNKNOWN = 0xFF
ORIGIN_BACKGROUND = 0xFE
MAX_EMITTERS = ORIGIN_BACKGROUND


def _frozen(a, dtype):
    a = np.asarray(a)
    if a.dtype != dtype or a.flags.writeable or not a.flags.c_contiguous:
        a = np.array(a, dtype=dtype, order="C")
        a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class TimeTagStream:
    """Immutable, timestamp-sorted detection events.

    ``timestamps`` are int64 picoseconds. ``n_channels`` is the number of
    channel labels the stream was recorded with (channels need not all occur).
    """

    timestamps: np.ndarray
    channels: np.ndarray
    origins: np.ndarray
    phonon_counts: np.ndarray
    n_channels: int

    def __post_init__(self):
        ts = _frozen(self.timestamps, np.int64)
        n = ts.shape[0]
        ch = _frozen(self.channels, np.uint8)
        org = _frozen(self.origins, np.uint8)
        ph = _frozen(self.phonon_counts, np.uint8)
        if ts.ndim != 1 or ch.shape != (n,) or org.shape != (n,) or ph.shape != (n,):
            raise StreamError("stream field arrays must be 1-D and of equal length")
        if not 1 <= self.n_channels <= 255:
            raise StreamError(f"channel count must be in 1..255, got {self.n_channels}")
        if n:
            if ts[0] < 0:
                raise StreamError("timestamps must be >= 0")
            if np.any(np.diff(ts) < 0):
                raise StreamError("timestamps must be nondecreasing")
            if int(ch.max()) >= self.n_channels:
                raise StreamError(f"channel {int(ch.max())} out of range for {self.n_channels} channels")
        for name, val in (("timestamps", ts), ("channels", ch), ("origins", org), ("phonon_counts", ph)):
            object.__setattr__(self, name, val)

    @classmethod
    def empty(cls, n_channels=1):
        z = np.zeros(0)
        return cls(z, z, z, z, n_channels)

    @classmethod
    def from_arrays(cls, timestamps, channels=None, origins=None, phonon_counts=None, n_channels=None, sort=True):
        """Build a stream, optionally sorting by (timestamp, channel, origin)."""
        ts = np.asarray(timestamps, dtype=np.int64)
        n = ts.shape[0]
        ch = np.zeros(n, np.uint8) if channels is None else np.asarray(channels, dtype=np.uint8)
        org = np.full(n, ORIGIN_UNKNOWN, np.uint8) if origins is None else np.asarray(origins, dtype=np.uint8)
        ph = np.zeros(n, np.uint8) if phonon_counts is None else np.asarray(phonon_counts, dtype=np.uint8)
        if n_channels is None:
            n_channels = int(ch.max()) + 1 if n else 1
        if sort and n:
            order = np.lexsort((org, ch, ts))
            ts, ch, org, ph = ts[order], ch[order], org[order], ph[order]
        return cls(ts, ch, org, ph, n_channels)

    def __len__(self):
        return int(self.timestamps.shape[0])

    def split_by_channel(self, channel):
        """Sub-stream of events tagged with ``channel`` (order preserved)."""
        if not 0 <= channel < self.n_channels:
            raise StreamError(f"unknown channel {channel}; stream has channels 0..{self.n_channels - 1}")
        idx = np.flatnonzero(self.channels == channel)  # one index array beats four mask scans
        return TimeTagStream(self.timestamps[idx], self.channels[idx], self.origins[idx],
                             self.phonon_counts[idx], self.n_channels)

    def same_events(self, other):
        return (len(self) == len(other)
                and np.array_equal(self.timestamps, other.timestamps)
                and np.array_equal(self.channels, other.channels)
                and np.array_equal(self.origins, other.origins)
                and np.array_equal(self.phonon_counts, other.phonon_counts))

    def counts_per_channel(self):
        return np.bincount(self.channels, minlength=self.n_channels)


def split_by_channel(stream, channel):
    return stream.split_by_channel(channel)


def merge(*streams):
    """Merge streams into one sorted stream (channel count = max of inputs)."""
    n_ch = max(s.n_channels for s in streams)
    return TimeTagStream.from_arrays(
        np.concatenate([s.timestamps for s in streams]),
        np.concatenate([s.channels for s in streams]),
        np.concatenate([s.origins for s in streams]),
        np.concatenate([s.phonon_counts for s in streams]),
        n_channels=n_ch,
    )


def write_ptg(path, stream):
    """Write ``stream`` to ``path`` in PTG1 format."""
    rec = np.zeros(len(stream), dtype=RECORD_DTYPE)
    rec["timestamp"] = stream.timestamps
    rec["channel"] = stream.channels
    rec["origin"] = stream.origins
    rec["phonon_count"] = stream.phonon_counts
    with Path(path).open("wb") as fh:
        fh.write(HEADER.pack(MAGIC, VERSION, 1, stream.n_channels, bytes(15)))
        fh.write(rec.tobytes())


def read_ptg(path):
    """Read a PTG1 file; raises :class:`FormatError` on any layout violation."""
    path = Path(path)
    try:
        raw = path.read_bytes()
    except OSError as exc:
        raise FormatError(f"cannot read {path}: {exc}") from None
    if len(raw) < HEADER.size:
        raise FormatError(f"{path}: truncated header ({len(raw)} bytes)")
    magic, version, resolution, n_channels, _reserved = HEADER.unpack_from(raw)
    if magic != MAGIC:
        raise FormatError(f"{path}: bad magic {magic!r}")
    if version != VERSION:
        raise FormatError(f"{path}: unsupported version {version}")
    if resolution != 1:
        raise FormatError(f"{path}: unsupported timestamp resolution {resolution} ps")
    body = len(raw) - HEADER.size
    if body % RECORD_DTYPE.itemsize:
        raise FormatError(f"{path}: trailing partial record ({body % RECORD_DTYPE.itemsize} bytes)")
    rec = np.frombuffer(raw, dtype=RECORD_DTYPE, offset=HEADER.size)
    ts = rec["timestamp"]
    if ts.size and ts.max() > np.iinfo(np.int64).max:
        raise FormatError(f"{path}: timestamp overflows int64")
    ts = ts.astype(np.int64)
    if np.any(np.diff(ts) < 0):
        bad = int(np.argmax(np.diff(ts) < 0)) + 1
        raise FormatError(f"{path}: timestamps decrease at record {bad}")
    try:
        return TimeTagStream(ts, rec["channel"], rec["origin"], rec["phonon_count"], max(int(n_channels), 1))
    except StreamError as exc:
        raise FormatError(f"{path}: {exc}") from None
