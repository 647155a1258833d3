#!/usr/bin/env python3
"""Hierarchical control plane.

LocalController: one per switch, turns each closed epoch snapshot into a local
EstimateSet and uploads snapshots at sync rounds.
CentralController: merges the uploaded snapshots of all members, computes the
global EstimateSet and sends it back down.
"""

from __future__ import annotations

import logging
import math
import struct
from dataclasses import dataclass, field, replace
from enum import Enum
from typing import Dict, Iterable, List, Mapping, Optional, Sequence, Tuple

import numpy as np

from dataplane import EpochSnapshot
from sketch_core import DimHistogram, EntropyDomainError, MergedUnivSketch, diff_l2, merge_all
from wire import (
    CENTRAL_SENDER, GLOBAL_ESTIMATE_DOWNLOAD, SNAPSHOT_UPLOAD, Reader, SyncMessage, WireFormatError,
    decode_histogram, decode_snapshot, encode_histogram, encode_snapshot, pack_text,
)

LOCAL = "local"
GLOBAL = "global"


class StaleSnapshotError(RuntimeError):
    """Snapshot older than (or equal to) one already processed."""


class RoundOrderError(RuntimeError):
    """Sync round out of order or mixed within one call."""


class NotYetAvailable(LookupError):
    """No estimate of the requested scope has been produced yet."""


class MetricKind(str, Enum):
    ENTROPY = "entropy"
    CARDINALITY = "cardinality"
    HEAVY_HITTERS = "heavy_hitters"
    CHANGE = "change"
    QUANTILES = "quantiles"
    HISTOGRAM = "histogram"
    STREAM_LENGTH = "stream_length"


@dataclass(frozen=True)
class Absent:
    """Placeholder for an estimate that cannot be produced."""
    reason: str


@dataclass(frozen=True)
class MetricPlan:
    """What every controller computes: per dimension name, the metric kinds."""
    metrics: Mapping[str, Tuple[MetricKind, ...]] = field(default_factory=dict)
    hh_threshold: float = 0.01
    quantiles: Tuple[float, ...] = (0.5, 0.9, 0.99)

    def pairs(self) -> List[Tuple[str, str]]:
        return [(name, kind.value) for name, kinds in self.metrics.items() for kind in kinds]


@dataclass
class EstimateSet:
    entries: Dict[Tuple[str, str], object]
    scope: str
    epoch: int
    produced_at: int
    switch_id: int = CENTRAL_SENDER
    sync_round: int = -1
    degraded: bool = False
    stale_members: Tuple[int, ...] = ()

    def value(self, dimension: str, metric) -> object:
        key = (dimension, MetricKind(metric).value)
        return self.entries.get(key, Absent("not configured"))

    def project(self, pairs: Iterable[Tuple[str, str]]) -> "EstimateSet":
        wanted = {(d, MetricKind(m).value) for d, m in pairs}
        entries = {k: self.entries.get(k, Absent("not configured when produced")) for k in sorted(wanted)}
        return replace(self, entries=entries)

    def same_values(self, other: "EstimateSet") -> bool:
        if self.entries.keys() != other.entries.keys():
            return False
        return all(_same(self.entries[k], other.entries[k]) for k in self.entries)


def _same(a, b) -> bool:
    if isinstance(a, DimHistogram) and isinstance(b, DimHistogram):
        return a.config == b.config and np.array_equal(a.counts, b.counts)
    if isinstance(a, float) and isinstance(b, float):
        return a == b or (math.isnan(a) and math.isnan(b))
    return a == b


def compute_estimates(sketch: Optional[MergedUnivSketch], dimensions: Sequence[str],
                      histograms: Mapping[str, DimHistogram], previous: Optional[MergedUnivSketch],
                      plan: MetricPlan) -> Dict[Tuple[str, str], object]:
    """Evaluate every planned (dimension, metric) pair against one sketch.

    `dimensions` is the slot order the sketch was built with; planned names
    that have no slot come out Absent.
    """
    entries: Dict[Tuple[str, str], object] = {}
    for name, kinds in plan.metrics.items():
        slot = dimensions.index(name) if name in dimensions else None
        hist = histograms.get(name)
        for kind in kinds:
            key = (name, kind.value)
            if sketch is None:
                entries[key] = Absent("no snapshot")
            elif kind in (MetricKind.QUANTILES, MetricKind.HISTOGRAM):
                if hist is None:
                    entries[key] = Absent("dimension not tracked in this epoch")
                elif kind is MetricKind.HISTOGRAM:
                    entries[key] = hist.copy()
                elif hist.total == 0:
                    entries[key] = Absent("empty histogram")
                else:
                    entries[key] = tuple((q, hist.quantile(q)) for q in plan.quantiles)
            elif slot is None:
                entries[key] = Absent("dimension not sketched in this epoch")
            elif kind is MetricKind.STREAM_LENGTH:
                entries[key] = float(sketch.m[slot])
            elif kind is MetricKind.CARDINALITY:
                entries[key] = float(sketch.cardinality(slot))
            elif kind is MetricKind.ENTROPY:
                try:
                    entries[key] = float(sketch.entropy(slot))
                except EntropyDomainError:
                    entries[key] = Absent("empty stream")
            elif kind is MetricKind.HEAVY_HITTERS:
                entries[key] = tuple(sketch.heavy_hitters(slot, plan.hh_threshold))
            elif kind is MetricKind.CHANGE:
                if previous is None or previous.geometry != sketch.geometry:
                    entries[key] = Absent("no previous epoch")
                else:
                    entries[key] = float(diff_l2(sketch, previous, slot))
    return entries


# ============================================================
# EstimateSet codec
# ============================================================

_FLOAT, _ABSENT, _PAIRS, _QUANTILES, _HISTOGRAM = range(5)
_SCOPES = {LOCAL: 0, GLOBAL: 1}


def encode_estimate_set(est: EstimateSet) -> bytes:
    parts = [struct.pack("<BqqiqBI", _SCOPES[est.scope], est.epoch, est.produced_at, est.switch_id,
                         est.sync_round, int(est.degraded), len(est.stale_members))]
    parts.extend(struct.pack("<i", s) for s in est.stale_members)
    parts.append(struct.pack("<I", len(est.entries)))
    for (dim, metric), value in sorted(est.entries.items()):
        parts.append(pack_text(dim) + pack_text(metric))
        if isinstance(value, Absent):
            parts.append(struct.pack("<B", _ABSENT) + pack_text(value.reason))
        elif isinstance(value, DimHistogram):
            parts.append(struct.pack("<B", _HISTOGRAM) + encode_histogram(value))
        elif isinstance(value, tuple) and metric == MetricKind.QUANTILES.value:
            parts.append(struct.pack("<BI", _QUANTILES, len(value)))
            parts.extend(struct.pack("<dd", q, v) for q, v in value)
        elif isinstance(value, tuple):
            parts.append(struct.pack("<BI", _PAIRS, len(value)))
            parts.extend(struct.pack("<Qq", k, e) for k, e in value)
        else:
            parts.append(struct.pack("<Bd", _FLOAT, float(value)))
    return b"".join(parts)


def decode_estimate_set(data: bytes) -> EstimateSet:
    r = Reader(data)
    scope_code, epoch, produced_at, switch_id, sync_round, degraded, n_stale = r.unpack("<BqqiqBI")
    scopes = {v: k for k, v in _SCOPES.items()}
    if scope_code not in scopes:
        raise WireFormatError(f"unknown estimate scope {scope_code}")
    stale = tuple(r.unpack("<i") for _ in range(n_stale))
    entries: Dict[Tuple[str, str], object] = {}
    for _ in range(r.unpack("<I")):
        key = (r.text(), r.text())
        tag = r.unpack("<B")
        if tag == _ABSENT:
            entries[key] = Absent(r.text())
        elif tag == _HISTOGRAM:
            entries[key] = decode_histogram(r)
        elif tag == _QUANTILES:
            entries[key] = tuple(r.unpack("<dd") for _ in range(r.unpack("<I")))
        elif tag == _PAIRS:
            entries[key] = tuple(r.unpack("<Qq") for _ in range(r.unpack("<I")))
        elif tag == _FLOAT:
            entries[key] = r.unpack("<d")
        else:
            raise WireFormatError(f"unknown estimate value tag {tag}")
    if not r.done():
        raise WireFormatError("trailing bytes after estimate set")
    return EstimateSet(entries, scopes[scope_code], epoch, produced_at, switch_id, sync_round, bool(degraded), stale)


# ============================================================
# Controllers
# ============================================================

class LocalController:
    def __init__(self, switch_id: int, plan: Optional[MetricPlan] = None):
        self.switch_id = switch_id
        self.plan = plan or MetricPlan()
        self.last_snapshot: Optional[EpochSnapshot] = None
        self.latest_local: Optional[EstimateSet] = None
        self.latest_global: Optional[EstimateSet] = None
        self.global_received_at: Optional[int] = None

    def local_compute(self, snapshot: EpochSnapshot, now: int) -> EstimateSet:
        last = self.last_snapshot
        if last is not None and snapshot.epoch.index <= last.epoch.index:
            raise StaleSnapshotError(
                f"switch {self.switch_id}: epoch {snapshot.epoch.index} already past {last.epoch.index}")
        previous = None
        if last is not None and last.dimensions == snapshot.dimensions:
            previous = last.sketch
        entries = compute_estimates(snapshot.sketch, snapshot.dimensions, snapshot.histograms, previous, self.plan)
        est = EstimateSet(entries, LOCAL, snapshot.epoch.index, now, self.switch_id)
        self.last_snapshot = snapshot
        self.latest_local = est
        return est

    def upload(self, sync_round: int) -> Optional[SyncMessage]:
        """Latest closed-epoch snapshot as a SnapshotUpload, or None before the first epoch."""
        if self.last_snapshot is None:
            return None
        return SyncMessage(SNAPSHOT_UPLOAD, encode_snapshot(self.last_snapshot), self.switch_id, sync_round)

    def receive(self, message: SyncMessage, now: int) -> bool:
        if message.kind != GLOBAL_ESTIMATE_DOWNLOAD:
            raise WireFormatError(f"switch {self.switch_id} expects a global estimate download, got kind {message.kind}")
        if self.latest_global is not None and message.sync_round <= self.latest_global.sync_round:
            logging.warning("switch %d: ignoring download for round %d (holding round %d)",
                            self.switch_id, message.sync_round, self.latest_global.sync_round)
            return False
        self.latest_global = decode_estimate_set(message.payload)
        self.global_received_at = now
        return True

    def freshness_query(self, scope: str, now: int) -> Tuple[EstimateSet, int]:
        """Latest set of `scope` plus its staleness (now - produced_at)."""
        est = self.latest_local if scope == LOCAL else self.latest_global
        if est is None:
            raise NotYetAvailable(f"switch {self.switch_id}: no {scope} estimate yet")
        return est, now - est.produced_at


class CentralController:
    def __init__(self, members: Iterable[int] = (), plan: Optional[MetricPlan] = None):
        self.members = sorted(set(members))
        self.plan = plan or MetricPlan()
        self.round = -1
        self.snapshots: Dict[int, EpochSnapshot] = {}
        self.previous_merged: Optional[MergedUnivSketch] = None
        self.previous_dimensions: Tuple[str, ...] = ()
        self.latest: Optional[EstimateSet] = None

    def register(self, switch_id: int) -> None:
        if switch_id not in self.members:
            self.members = sorted(self.members + [switch_id])

    def sync_round(self, uploads: Sequence[SyncMessage], now: int) -> Tuple[EstimateSet, List[SyncMessage]]:
        """Merge one round of uploads; returns the global set and one download per member."""
        rounds = {m.sync_round for m in uploads}
        if len(rounds) > 1:
            raise RoundOrderError(f"uploads from several rounds in one call: {sorted(rounds)}")
        sync_round = rounds.pop() if rounds else self.round + 1
        if sync_round <= self.round:
            raise RoundOrderError(f"round {sync_round} is not after round {self.round}")

        fresh = set()
        for message in uploads:
            if message.kind != SNAPSHOT_UPLOAD:
                raise WireFormatError(f"central expects snapshot uploads, got kind {message.kind}")
            self.snapshots[message.sender] = decode_snapshot(message.payload)
            self.register(message.sender)
            fresh.add(message.sender)

        usable = [self.snapshots[s] for s in self.members if s in self.snapshots]
        dimensions = max(usable, key=lambda s: s.epoch.index).dimensions if usable else ()
        merged_from = [s for s in usable if s.dimensions == dimensions]
        stale = tuple(s for s in self.members if s not in fresh or self.snapshots[s].dimensions != dimensions)
        if stale:
            logging.warning("sync round %d degraded: stale or missing members %s", sync_round, list(stale))

        if merged_from:
            sketch = merge_all(s.sketch for s in merged_from)
            histograms = _merge_histograms(merged_from)
            epoch = max(s.epoch.index for s in merged_from)
        else:
            sketch, histograms, epoch = None, {}, -1
        previous = self.previous_merged if self.previous_dimensions == dimensions else None
        entries = compute_estimates(sketch, dimensions, histograms, previous, self.plan)
        est = EstimateSet(entries, GLOBAL, epoch, now, CENTRAL_SENDER, sync_round, bool(stale), stale)

        self.round = sync_round
        self.previous_merged = sketch
        self.previous_dimensions = dimensions
        self.latest = est
        payload = encode_estimate_set(est)
        downloads = [SyncMessage(GLOBAL_ESTIMATE_DOWNLOAD, payload, CENTRAL_SENDER, sync_round) for _ in self.members]
        logging.info("sync round %d: merged %d/%d snapshots at epoch %d", sync_round, len(merged_from),
                     len(self.members), epoch)
        return est, downloads


def _merge_histograms(snapshots: Sequence[EpochSnapshot]) -> Dict[str, DimHistogram]:
    out: Dict[str, DimHistogram] = {}
    for snap in snapshots:
        for name, hist in snap.histograms.items():
            out[name] = hist.copy() if name not in out else out[name].merged(hist)
    return out
