"""Binary formats exchanged between data planes and controllers.

NSKT: versioned epoch snapshot (geometry, level counters, stream lengths,
heavy-hitter dumps, histograms). NSYN: sync message framing.
All integers are little-endian.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from dataplane import Epoch, EpochSnapshot
from sketch_core import MASK64, DimHistogram, MergedUnivSketch, SketchGeometry, UpdateCounters

SNAPSHOT_MAGIC = b"NSKT"
SNAPSHOT_VERSION = 1
SYNC_MAGIC = b"NSYN"

SNAPSHOT_UPLOAD = 1
GLOBAL_ESTIMATE_DOWNLOAD = 2
CENTRAL_SENDER = -1

_SCALES = {"linear": 0, "log": 1}
_SCALE_NAMES = {v: k for k, v in _SCALES.items()}


class WireFormatError(ValueError):
    pass


class Reader:
    def __init__(self, data: bytes):
        self.data = memoryview(data)
        self.pos = 0

    def unpack(self, fmt: str):
        size = struct.calcsize(fmt)
        if self.pos + size > len(self.data):
            raise WireFormatError(f"truncated payload at offset {self.pos}")
        values = struct.unpack_from(fmt, self.data, self.pos)
        self.pos += size
        return values if len(values) > 1 else values[0]

    def take(self, size: int) -> bytes:
        if self.pos + size > len(self.data):
            raise WireFormatError(f"truncated payload at offset {self.pos}")
        out = bytes(self.data[self.pos:self.pos + size])
        self.pos += size
        return out

    def array(self, dtype: str, count: int) -> np.ndarray:
        raw = self.take(np.dtype(dtype).itemsize * count)
        return np.frombuffer(raw, dtype=dtype).copy()

    def text(self) -> str:
        return self.take(self.unpack("<H")).decode("utf-8")

    def done(self) -> bool:
        return self.pos == len(self.data)


def pack_text(value: str) -> bytes:
    raw = value.encode("utf-8")
    return struct.pack("<H", len(raw)) + raw


def encode_histogram(h: DimHistogram) -> bytes:
    head = struct.pack("<ddIBQ", h.low, h.high, h.buckets, _SCALES[h.scale], h.clamped)
    return head + h.counts.astype("<i8").tobytes()


def decode_histogram(r: Reader) -> DimHistogram:
    low, high, buckets, scale, clamped = r.unpack("<ddIBQ")
    if scale not in _SCALE_NAMES:
        raise WireFormatError(f"unknown histogram scale code {scale}")
    counts = r.array("<i8", buckets).astype(np.int64)
    return DimHistogram(low, high, buckets, _SCALE_NAMES[scale], counts, clamped)


# ============================================================
# NSKT snapshots
# ============================================================

def encode_snapshot(snapshot: EpochSnapshot) -> bytes:
    sk = snapshot.sketch
    g = sk.geometry
    parts = [
        SNAPSHOT_MAGIC,
        struct.pack("<H", SNAPSHOT_VERSION),
        struct.pack("<IIIIIQdQ", g.rows, g.columns, g.levels, g.dimensions, g.hh_capacity, g.seed,
                    sk.sampling.probability, sk.sampling.seed & MASK64),
        struct.pack("<iqqqQQ", snapshot.switch_id, snapshot.epoch.index, snapshot.epoch.start,
                    snapshot.epoch.end, snapshot.packets, snapshot.drops),
        struct.pack("<I", len(snapshot.dimensions)),
    ]
    parts.extend(pack_text(name) for name in snapshot.dimensions)
    for table in sk.tables:
        parts.append(table.counters.astype("<i8").tobytes())
    parts.append(bytes(int(t.overflow) for t in sk.tables))
    parts.append(np.array([m & MASK64 for m in sk.m], dtype="<u8").tobytes())
    for row in sk.trackers:
        for tracker in row:
            items = tracker.items()
            parts.append(struct.pack("<I", len(items)))
            parts.append(np.array([k for k, _ in items], dtype="<u8").tobytes())
            parts.append(np.array([e for _, e in items], dtype="<i8").tobytes())
    c = sk.counters
    parts.append(struct.pack("<QQQ", c.records, c.hash_invocations, c.counter_updates))
    parts.append(struct.pack("<I", len(snapshot.histograms)))
    for name in sorted(snapshot.histograms):
        parts.append(pack_text(name))
        parts.append(encode_histogram(snapshot.histograms[name]))
    return b"".join(parts)


def decode_snapshot(data: bytes) -> EpochSnapshot:
    r = Reader(data)
    if r.take(4) != SNAPSHOT_MAGIC:
        raise WireFormatError("not an NSKT snapshot")
    version = r.unpack("<H")
    if version != SNAPSHOT_VERSION:
        raise WireFormatError(f"unsupported snapshot version {version}")
    rows, columns, levels, dims, hh, seed, probability, sampling_seed = r.unpack("<IIIIIQdQ")
    geometry = SketchGeometry(rows, columns, levels, dims, hh, seed)
    switch_id, index, start, end, packets, drops = r.unpack("<iqqqQQ")
    names = tuple(r.text() for _ in range(r.unpack("<I")))

    sk = MergedUnivSketch(geometry, probability, sampling_seed=sampling_seed)
    for table in sk.tables:
        table.counters = r.array("<i8", rows * columns).astype(np.int64).reshape(rows, columns)
    for table, flag in zip(sk.tables, r.take(levels)):
        table.overflow = bool(flag)
    sk.m = [int(v) for v in r.array("<u8", dims)]
    for row in sk.trackers:
        for tracker in row:
            count = r.unpack("<I")
            keys = r.array("<u8", count)
            ests = r.array("<i8", count)
            for k, e in zip(keys.tolist(), ests.tolist()):
                tracker.offer(int(k), int(e))
    sk.counters = UpdateCounters(*r.unpack("<QQQ"))
    histograms = {}
    for _ in range(r.unpack("<I")):
        name = r.text()
        histograms[name] = decode_histogram(r)
    if not r.done():
        raise WireFormatError(f"{len(data) - r.pos} trailing bytes after snapshot")
    return EpochSnapshot(switch_id, Epoch(index, start, end), sk, histograms, names, packets, drops)


# ============================================================
# NSYN framing
# ============================================================

@dataclass(frozen=True)
class SyncMessage:
    kind: int
    payload: bytes
    sender: int
    sync_round: int

    def encode(self) -> bytes:
        head = struct.pack("<QBiI", self.sync_round, self.kind, self.sender, len(self.payload))
        return SYNC_MAGIC + head + self.payload

    @classmethod
    def decode(cls, data: bytes) -> "SyncMessage":
        r = Reader(data)
        if r.take(4) != SYNC_MAGIC:
            raise WireFormatError("not an NSYN message")
        sync_round, kind, sender, length = r.unpack("<QBiI")
        if kind not in (SNAPSHOT_UPLOAD, GLOBAL_ESTIMATE_DOWNLOAD):
            raise WireFormatError(f"unknown sync message kind {kind}")
        payload = r.take(length)
        if not r.done():
            raise WireFormatError("trailing bytes after sync message")
        return cls(kind, payload, sender, sync_round)
