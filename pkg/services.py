#!/usr/bin/env python3
"""Network services driven by telemetry estimates.

ReshardService: equi-depth range partitioning of one attribute over storage
nodes, re-computed when the change score spikes or the load imbalance stays
high. HotKeyCache: per-node cache of the heavy hitters of one attribute.
Both run as callbacks of Loose (global) subscriptions; LRU, frozen and
clairvoyant caches and static/hash partitioning run alongside as baselines.
"""

from __future__ import annotations

import logging
import statistics
from collections import OrderedDict
from dataclasses import dataclass
from typing import Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd

from control_plane import Absent, EstimateSet, MetricKind
from sketch_core import DimHistogram, mix64


# ============================================================
# Range partitioning
# ============================================================

@dataclass(frozen=True)
class PartitionMap:
    """Ordered boundaries b_1 < ... < b_{n-1} over [low, high); range i goes to node_ids[i]."""
    dimension: str
    low: float
    high: float
    boundaries: Tuple[float, ...]
    node_ids: Tuple[int, ...]
    version: int = 0
    degenerate: bool = False

    def __post_init__(self):
        if len(self.node_ids) != len(self.boundaries) + 1:
            raise ValueError(f"{len(self.boundaries)} boundaries need {len(self.boundaries) + 1} nodes, "
                             f"got {len(self.node_ids)}")
        b = np.asarray(self.boundaries, dtype=np.float64)
        if b.size and (np.any(np.diff(b) <= 0) or b[0] <= self.low or b[-1] >= self.high):
            raise ValueError(f"boundaries must be strictly increasing inside ({self.low}, {self.high})")

    def route(self, value: float) -> int:
        return self.node_ids[int(np.searchsorted(self.boundaries, value, side="right"))]

    def route_batch(self, values) -> np.ndarray:
        idx = np.searchsorted(np.asarray(self.boundaries, dtype=np.float64), np.asarray(values), side="right")
        return np.asarray(self.node_ids, dtype=np.int64)[idx]

    def to_text(self) -> str:
        head = f"partition {self.dimension} v{self.version} [{self.low!r}, {self.high!r})"
        if self.degenerate:
            head += " degenerate"
        lines = [head]
        edges = (self.low,) + tuple(self.boundaries) + (self.high,)
        for node, lo, hi in zip(self.node_ids, edges[:-1], edges[1:]):
            lines.append(f"{node} {lo!r} {hi!r}")
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str) -> "PartitionMap":
        lines = [ln.split() for ln in text.strip().splitlines()]
        if not lines or lines[0][0] != "partition":
            raise ValueError("not a partition map")
        head = lines[0]
        dimension, version = head[1], int(head[2].lstrip("v"))
        low, high = float(head[3].strip("[,")), float(head[4].rstrip(")"))
        rows = lines[1:]
        return cls(dimension, low, high, tuple(float(r[1]) for r in rows[1:]),
                   tuple(int(r[0]) for r in rows), version, "degenerate" in head)


def equal_width_map(dimension: str, low: float, high: float, node_ids: Sequence[int], version: int = 0,
                    scale: str = "linear") -> PartitionMap:
    n = len(node_ids)
    if scale == "log":
        edges = np.geomspace(low, high, n + 1)
    else:
        edges = np.linspace(low, high, n + 1)
    return PartitionMap(dimension, low, high, tuple(float(e) for e in edges[1:-1]), tuple(node_ids), version)


def compute_partition(histogram: DimHistogram, n_nodes: int, dimension: str = "", version: int = 1,
                      node_ids: Optional[Sequence[int]] = None) -> PartitionMap:
    """Equi-depth boundaries at the i/n quantiles of the histogram.

    Boundaries land on lower edges of non-empty buckets. A quantile that
    repeats the previous boundary advances to the next non-empty bucket;
    when none is left the map gets fewer ranges and is flagged degenerate.
    """
    if n_nodes < 1:
        raise ValueError("need at least one node")
    if histogram.total <= 0:
        raise ValueError("cannot partition an empty histogram")
    node_ids = tuple(range(n_nodes)) if node_ids is None else tuple(node_ids)
    edges = histogram.edges()
    nonempty = np.flatnonzero(histogram.counts)
    candidates = edges[nonempty[1:]]
    degenerate = nonempty.size < n_nodes
    boundaries: List[float] = []
    for i in range(1, n_nodes):
        b = histogram.quantile(i / n_nodes)
        floor = boundaries[-1] if boundaries else edges[nonempty[0]]
        if b <= floor:
            later = candidates[candidates > floor]
            if later.size == 0:
                degenerate = True
                break
            b = float(later[0])
        boundaries.append(float(b))
    if degenerate:
        logging.warning("partition of %s is degenerate: %d ranges for %d nodes", dimension or "attribute",
                        len(boundaries) + 1, n_nodes)
    return PartitionMap(dimension, histogram.low, histogram.high, tuple(boundaries),
                        node_ids[: len(boundaries) + 1], version, degenerate)


def hash_nodes(keys, n_nodes: int) -> np.ndarray:
    """Hash-partitioning baseline: node = mix64(key) mod n."""
    return (mix64(np.asarray(keys, dtype=np.uint64)) % np.uint64(n_nodes)).astype(np.int64)


class LoadLedger:
    """Per-epoch, per-node record counts for one partitioning scheme."""

    def __init__(self, node_ids: Sequence[int], name: str = "closed_loop"):
        self.node_ids = tuple(node_ids)
        self.name = name
        self._lookup = np.full(max(self.node_ids) + 1, -1, dtype=np.int64)
        self._lookup[list(self.node_ids)] = np.arange(len(self.node_ids))
        self.epochs: List[int] = []
        self.loads: List[np.ndarray] = []

    def record(self, epoch: int, nodes: np.ndarray) -> np.ndarray:
        counts = np.bincount(self._lookup[np.asarray(nodes, dtype=np.int64)], minlength=len(self.node_ids))
        if self.epochs and self.epochs[-1] == epoch:
            self.loads[-1] = self.loads[-1] + counts
        else:
            self.epochs.append(epoch)
            self.loads.append(counts)
        return counts

    def imbalance(self, position: int = -1) -> float:
        """max / mean over all nodes; an idle epoch counts as balanced."""
        load = self.loads[position]
        mean = load.mean()
        return float(load.max() / mean) if mean > 0 else 1.0

    def mean_imbalance(self, since_epoch: int = 0, last: Optional[int] = None) -> Optional[float]:
        values = [self.imbalance(i) for i, e in enumerate(self.epochs) if e >= since_epoch]
        if last is not None:
            values = values[-last:]
        return float(np.mean(values)) if values else None

    def to_frame(self) -> pd.DataFrame:
        frame = pd.DataFrame(self.loads, index=self.epochs, columns=[f"node[{n}]" for n in self.node_ids])
        frame.index.name = "epoch"
        frame["imbalance"] = [self.imbalance(i) for i in range(len(self.loads))]
        return frame


@dataclass(frozen=True)
class ReshardPolicy:
    window: int = 5
    imbalance_threshold: float = 1.3
    change_factor: float = 5.0
    change_history: int = 8
    min_history: int = 3


@dataclass
class ReshardEvent:
    epoch: int
    version: int
    reason: str
    moved_mass: float
    degenerate: bool


class ReshardService:
    def __init__(self, dimension: str, low: float, high: float, node_ids: Sequence[int],
                 ledger: LoadLedger, policy: Optional[ReshardPolicy] = None, scale: str = "linear"):
        self.dimension = dimension
        self.node_ids = tuple(node_ids)
        self.ledger = ledger
        self.policy = policy or ReshardPolicy()
        self.current = equal_width_map(dimension, low, high, node_ids, 0, scale)
        self.static_map: Optional[PartitionMap] = None
        self.events: List[ReshardEvent] = []
        self.maps: List[PartitionMap] = []
        self.change_scores: List[float] = []
        self.installed_epoch = 0
        self.last_reshard_epoch: Optional[int] = None

    def on_estimates(self, est: EstimateSet) -> None:
        self.reshard_step(est)

    def reshard_step(self, est: EstimateSet) -> Optional[PartitionMap]:
        """Decide whether to re-shard on this global estimate set; returns the new map if so."""
        hist = est.value(self.dimension, MetricKind.HISTOGRAM)
        change = est.value(self.dimension, MetricKind.CHANGE)
        score = change if isinstance(change, float) else None
        try:
            if not isinstance(hist, DimHistogram) or hist.total == 0:
                return None
            reason = self._trigger(est.epoch, score)
            if reason is None:
                return None
            return self._install(est.epoch, hist, reason)
        finally:
            if score is not None:
                self.change_scores.append(score)

    def _trigger(self, epoch: int, score: Optional[float]) -> Optional[str]:
        p = self.policy
        if self.current.version == 0:
            return "bootstrap"
        if self.last_reshard_epoch is not None and epoch - self.last_reshard_epoch < p.window:
            return None
        history = self.change_scores[-p.change_history:]
        if score is not None and len(history) >= p.min_history:
            baseline = statistics.median(history)
            if score > p.change_factor * baseline:
                return "change"
        recent = [e for e in self.ledger.epochs if e >= self.installed_epoch]
        if len(recent) >= p.window:
            mean = self.ledger.mean_imbalance(self.installed_epoch, p.window)
            if mean is not None and mean > p.imbalance_threshold:
                return "imbalance"
        return None

    def _install(self, epoch: int, hist: DimHistogram, reason: str) -> PartitionMap:
        new = compute_partition(hist, len(self.node_ids), self.dimension, self.current.version + 1, self.node_ids)
        moved = moved_mass(self.current, new, hist)
        self.events.append(ReshardEvent(epoch, new.version, reason, moved, new.degenerate))
        self.maps.append(new)
        logging.info("reshard %s v%d -> v%d at epoch %d (%s), moved %.1f%% of mass", self.dimension,
                     self.current.version, new.version, epoch, reason, 100 * moved)
        if self.static_map is None:
            self.static_map = new
        self.current = new
        self.installed_epoch = epoch + 1
        self.last_reshard_epoch = epoch
        return new


def moved_mass(old: PartitionMap, new: PartitionMap, hist: DimHistogram) -> float:
    """Fraction of histogram mass whose owner differs between two maps (bucket midpoints)."""
    total = hist.total
    if total == 0:
        return 0.0
    edges = hist.edges()
    mids = (edges[:-1] + edges[1:]) / 2
    moved = old.route_batch(mids) != new.route_batch(mids)
    return float(hist.counts[moved].sum() / total)


def reshard_step(service: ReshardService, est: EstimateSet) -> Optional[PartitionMap]:
    return service.reshard_step(est)


class Router:
    """Installed partition map on the workload side; never goes back a version."""

    def __init__(self, partition: PartitionMap):
        self.partition = partition

    def install(self, partition: PartitionMap) -> bool:
        if partition.dimension != self.partition.dimension or partition.version <= self.partition.version:
            return False
        self.partition = partition
        return True

    def route_batch(self, values) -> np.ndarray:
        return self.partition.route_batch(values)


# ============================================================
# Hot-key caches
# ============================================================

@dataclass
class CacheStats:
    hits: int = 0
    misses: int = 0

    @property
    def hit_rate(self) -> float:
        total = self.hits + self.misses
        return self.hits / total if total else 0.0


class HotKeyCache:
    """Fixed resident set refreshed from the heavy-hitter list."""

    def __init__(self, capacity: int, name: str = "telemetry"):
        self.capacity = capacity
        self.name = name
        self.resident: Dict[int, int] = {}
        self.stats = CacheStats()
        self.refreshes = 0

    def lookup(self, key: int) -> bool:
        if key in self.resident:
            self.resident[key] += 1
            self.stats.hits += 1
            return True
        self.stats.misses += 1
        return False

    def lookup_batch(self, keys) -> int:
        keys = np.asarray(keys, dtype=np.uint64)
        if not self.resident:
            self.stats.misses += int(keys.size)
            return 0
        resident = np.fromiter(self.resident, dtype=np.uint64, count=len(self.resident))
        hit = np.isin(keys, resident)
        uniq, counts = np.unique(keys[hit], return_counts=True)
        for k, c in zip(uniq.tolist(), counts.tolist()):
            self.resident[int(k)] += int(c)
        n_hit = int(hit.sum())
        self.stats.hits += n_hit
        self.stats.misses += int(keys.size) - n_hit
        return n_hit

    def refresh(self, hh: Iterable[Tuple[int, int]]) -> List[int]:
        """Make the top-`capacity` heavy hitters resident; surviving keys keep their hit counters."""
        ranked = sorted(hh, key=lambda kv: (-kv[1], kv[0]))[: self.capacity]
        self.resident = {int(k): self.resident.get(int(k), 0) for k, _ in ranked}
        self.refreshes += 1
        return list(self.resident)


def cache_refresh(cache: HotKeyCache, hh: Iterable[Tuple[int, int]]) -> HotKeyCache:
    cache.refresh(hh)
    return cache


class LRUCache:
    """Least-recently-used baseline: every miss is admitted."""

    def __init__(self, capacity: int, name: str = "lru"):
        self.capacity = capacity
        self.name = name
        self.map: "OrderedDict[int, bool]" = OrderedDict()
        self.stats = CacheStats()

    def lookup(self, key: int) -> bool:
        if key in self.map:
            self.map.move_to_end(key)
            self.stats.hits += 1
            return True
        self.stats.misses += 1
        if len(self.map) >= self.capacity:
            self.map.popitem(last=False)
        self.map[key] = True
        return False

    def lookup_batch(self, keys) -> int:
        before = self.stats.hits
        for key in np.asarray(keys, dtype=np.uint64).tolist():
            self.lookup(key)
        return self.stats.hits - before


class CacheService:
    """One telemetry-driven cache plus its baselines, all fed the same key stream.

    The frozen cache keeps the first heavy-hitter list it sees; the
    clairvoyant cache is loaded with the exact top keys up front.
    """

    def __init__(self, dimension: str, capacity: int, clairvoyant_keys: Sequence[int] = ()):
        self.dimension = dimension
        self.telemetry = HotKeyCache(capacity, "telemetry")
        self.frozen = HotKeyCache(capacity, "frozen")
        self.lru = LRUCache(capacity)
        self.clairvoyant = HotKeyCache(capacity, "clairvoyant")
        if clairvoyant_keys:
            self.clairvoyant.refresh((int(k), 0) for k in list(clairvoyant_keys)[:capacity])

    @property
    def caches(self):
        return (self.telemetry, self.frozen, self.lru, self.clairvoyant)

    def on_estimates(self, est: EstimateSet) -> None:
        hh = est.value(self.dimension, MetricKind.HEAVY_HITTERS)
        if isinstance(hh, Absent):
            return
        self.telemetry.refresh(hh)
        if self.frozen.refreshes == 0 and hh:
            self.frozen.refresh(hh)

    def serve(self, keys) -> Dict[str, float]:
        """Look a batch of keys up in every cache; returns per-cache hit rates for the batch."""
        keys = np.asarray(keys, dtype=np.uint64)
        rates = {}
        for cache in self.caches:
            hits = cache.lookup_batch(keys)
            rates[cache.name] = hits / keys.size if keys.size else 0.0
        return rates
