#!/usr/bin/env python3
"""Mergeable sketch primitives for the telemetry data plane.

Provides:
    - seeded 64-bit mix hashing (counter-mode seed expansion)
    - CountSketchTable: signed count sketch with saturating int64 counters
    - HeavyHitterTracker: bounded top-k tracker with lazy heap refresh
    - SamplingState: geometric-skip row sampling shared across dimensions
    - UnivSketch: classical single-dimension universal sketch
    - MergedUnivSketch: one set of level tables shared by all dimensions
    - DimHistogram: fixed-bucket linear/log histogram with quantiles

All state is numpy-backed; batch entry points apply a whole chunk of records
with a handful of vectorized operations.
"""

from __future__ import annotations

import copy
import heapq
import math
from dataclasses import dataclass, field
from typing import Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np

MASK64 = (1 << 64) - 1
GOLDEN = 0x9E3779B97F4A7C15
INT64_MAX = np.iinfo(np.int64).max
INT64_MIN = np.iinfo(np.int64).min
MAX_MOMENT_ORDER = 4


class GeometryError(ValueError):
    """Invalid sketch geometry."""


class DimensionIndexError(GeometryError, IndexError):
    """Dimension index outside the sketch geometry."""


class MergeError(ValueError):
    """Sketches (or histograms) with different geometry/seed/configuration."""


class EntropyDomainError(ValueError):
    """Entropy requested for a dimension with an empty stream."""


class UnsupportedGsumError(ValueError):
    pass


# ============================================================
# Hashing
# ============================================================

def splitmix64(x: int) -> int:
    """Scalar splitmix64 finalizer over Python ints."""
    z = (x + GOLDEN) & MASK64
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & MASK64
    return z ^ (z >> 31)


def mix64(keys: np.ndarray) -> np.ndarray:
    """Vectorized splitmix64 over a uint64 array (wrapping arithmetic)."""
    z = np.array(keys, dtype=np.uint64, copy=True)
    with np.errstate(over="ignore"):
        z += np.uint64(GOLDEN)
        z = (z ^ (z >> np.uint64(30))) * np.uint64(0xBF58476D1CE4E5B9)
        z = (z ^ (z >> np.uint64(27))) * np.uint64(0x94D049BB133111EB)
        z = z ^ (z >> np.uint64(31))
    return z


def expand_seeds(master: int, count: int) -> List[int]:
    """Counter-mode expansion of one master seed into `count` independent seeds."""
    return [splitmix64((master + i * GOLDEN) & MASK64) for i in range(1, count + 1)]


def dim_salt(dim: int) -> int:
    return splitmix64(dim + 1)


def as_keys(keys) -> np.ndarray:
    arr = np.asarray(keys)
    if arr.dtype != np.uint64:
        arr = arr.astype(np.uint64)
    return arr.reshape(-1)


def saturating_add(counters: np.ndarray, delta: np.ndarray) -> Tuple[np.ndarray, bool]:
    """Add int64 arrays, clamping at the int64 range. Returns (result, overflowed)."""
    with np.errstate(over="ignore"):
        result = counters + delta
    overflow = ((counters ^ result) & (delta ^ result)) < 0
    if not overflow.any():
        return result, False
    result[overflow & (delta > 0)] = INT64_MAX
    result[overflow & (delta < 0)] = INT64_MIN
    return result, True


# ============================================================
# Geometry
# ============================================================

@dataclass(frozen=True)
class SketchGeometry:
    rows: int = 5
    columns: int = 2048
    levels: int = 16
    dimensions: int = 1
    hh_capacity: int = 64
    seed: int = 0

    def __post_init__(self):
        if self.rows < 1:
            raise GeometryError(f"rows must be >= 1, got {self.rows}")
        if self.columns < 2 or self.columns & (self.columns - 1):
            raise GeometryError(f"columns must be a power of two >= 2, got {self.columns}")
        if not 1 <= self.levels <= 64:
            raise GeometryError(f"levels must be in [1, 64], got {self.levels}")
        if self.dimensions < 1:
            raise GeometryError(f"dimensions must be >= 1, got {self.dimensions}")
        if self.hh_capacity < 1:
            raise GeometryError(f"hh_capacity must be >= 1, got {self.hh_capacity}")
        if not 0 <= self.seed <= MASK64:
            raise GeometryError("seed must fit in 64 unsigned bits")

    def memory_bytes(self) -> int:
        """Counter tables + tracker entries (key, estimate) + stream lengths."""
        counters = self.levels * self.rows * self.columns * 8
        trackers = self.dimensions * self.levels * self.hh_capacity * 16
        return counters + trackers + self.dimensions * 8

    def with_dimensions(self, dimensions: int) -> "SketchGeometry":
        return SketchGeometry(self.rows, self.columns, self.levels, dimensions, self.hh_capacity, self.seed)


class RowHasher:
    """Bucket hashes h_1..h_d and sign hashes s_1..s_d for one geometry."""

    def __init__(self, geometry: SketchGeometry):
        seeds = expand_seeds(geometry.seed, 2 * geometry.rows)
        self.rows = geometry.rows
        self.mask = np.uint64(geometry.columns - 1)
        self.bucket_seeds = np.array(seeds[: geometry.rows], dtype=np.uint64)
        self.sign_seeds = np.array(seeds[geometry.rows:], dtype=np.uint64)

    def hash(self, keys: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
        """Return (buckets, signs), each shaped (rows, n) int64."""
        keys = as_keys(keys)
        buckets = (mix64(keys[None, :] ^ self.bucket_seeds[:, None]) & self.mask).astype(np.int64)
        sign_bits = (mix64(keys[None, :] ^ self.sign_seeds[:, None]) >> np.uint64(63)).astype(np.int64)
        return buckets, 1 - 2 * sign_bits


class LevelHasher:
    """0/1 level functions g_1..g_{L-1}; level 0 admits every key."""

    def __init__(self, geometry: SketchGeometry):
        # Offset past the row seeds so level functions are independent of rows.
        seeds = expand_seeds(geometry.seed, 2 * geometry.rows + geometry.levels)
        self.levels = geometry.levels
        self.seeds = np.array(seeds[2 * geometry.rows:], dtype=np.uint64)

    def bit(self, level: int, keys: np.ndarray) -> np.ndarray:
        keys = as_keys(keys)
        return (mix64(keys ^ self.seeds[level]) >> np.uint64(63)).astype(np.int64)

    def depth(self, keys: np.ndarray) -> np.ndarray:
        """Deepest level index each key reaches (g_1..g_j all 1)."""
        keys = as_keys(keys)
        depth = np.zeros(keys.shape[0], dtype=np.int64)
        alive = np.ones(keys.shape[0], dtype=bool)
        for level in range(1, self.levels):
            alive &= self.bit(level, keys) == 1
            if not alive.any():
                break
            depth += alive
        return depth


# ============================================================
# Count sketch
# ============================================================

class CountSketchTable:
    """d x w signed count sketch over 64-bit keys."""

    def __init__(self, geometry: SketchGeometry, hasher: Optional[RowHasher] = None):
        self.geometry = geometry
        self.hasher = hasher or RowHasher(geometry)
        self.counters = np.zeros((geometry.rows, geometry.columns), dtype=np.int64)
        self.overflow = False

    def update(self, key: int, weight: int = 1) -> "CountSketchTable":
        return self.update_batch([key], [weight])

    def update_batch(self, keys, weights=None) -> "CountSketchTable":
        keys = as_keys(keys)
        weights = _weights(weights, keys.shape[0])
        buckets, signs = self.hasher.hash(keys)
        self.apply(buckets, signs * weights[None, :])
        return self

    def apply(self, buckets: np.ndarray, values: np.ndarray, selected: Optional[np.ndarray] = None) -> int:
        """Add pre-hashed (rows, n) values. Returns the number of counter updates."""
        d, w = self.counters.shape
        flat = buckets + (np.arange(d, dtype=np.int64) * w)[:, None]
        if selected is not None:
            flat = flat[selected]
            values = values[selected]
        flat = flat.ravel()
        if flat.size == 0:
            return 0
        delta = np.zeros(d * w, dtype=np.int64)
        np.add.at(delta, flat, values.ravel())
        self.counters, overflowed = saturating_add(self.counters, delta.reshape(d, w))
        self.overflow |= overflowed
        return int(flat.size)

    def row_values(self, keys) -> np.ndarray:
        buckets, signs = self.hasher.hash(keys)
        rows = np.arange(self.geometry.rows)[:, None]
        return signs * self.counters[rows, buckets]

    def estimate_batch(self, keys) -> np.ndarray:
        """Median over rows (upper median for an even row count)."""
        keys = as_keys(keys)
        if keys.size == 0:
            return np.zeros(0, dtype=np.int64)
        values = np.sort(self.row_values(keys), axis=0)
        return values[self.geometry.rows // 2]

    def estimate(self, key: int) -> int:
        return int(self.estimate_batch([key])[0])

    def l2(self) -> float:
        sq = np.square(self.counters.astype(np.float64)).sum(axis=1)
        return float(np.median(np.sqrt(sq)))

    def is_zero(self) -> bool:
        return not self.counters.any()

    def copy(self) -> "CountSketchTable":
        clone = CountSketchTable(self.geometry, self.hasher)
        clone.counters = self.counters.copy()
        clone.overflow = self.overflow
        return clone

    def merged(self, other: "CountSketchTable", sign: int = 1) -> "CountSketchTable":
        if self.geometry != other.geometry:
            raise MergeError("count sketch tables differ in geometry or seed")
        out = self.copy()
        out.counters, overflowed = saturating_add(out.counters, sign * other.counters)
        out.overflow = self.overflow or other.overflow or overflowed
        return out

    def difference(self, other: "CountSketchTable") -> "CountSketchTable":
        return self.merged(other, sign=-1)


def cs_update(table: CountSketchTable, key: int, weight: int = 1) -> CountSketchTable:
    return table.update(key, weight)


def cs_estimate(table: CountSketchTable, key: int) -> int:
    return table.estimate(key)


def cs_l2(table: CountSketchTable) -> float:
    return table.l2()


def _weights(weights, n: int) -> np.ndarray:
    if weights is None:
        return np.ones(n, dtype=np.int64)
    return np.asarray(weights, dtype=np.int64).reshape(-1)


# ============================================================
# Heavy-hitter tracking
# ============================================================

class HeavyHitterTracker:
    """Top-k map key -> estimated frequency.

    Heap entries go stale when a tracked key is re-offered; stale entries are
    skipped (and the heap compacted) when the minimum is looked up.
    """

    def __init__(self, capacity: int):
        self.capacity = capacity
        self.entries: Dict[int, int] = {}
        self._heap: List[Tuple[int, int]] = []

    def __len__(self):
        return len(self.entries)

    def __contains__(self, key):
        return key in self.entries

    def _min(self) -> Tuple[int, int]:
        while self._heap:
            est, key = self._heap[0]
            if self.entries.get(key) == est:
                return est, key
            heapq.heappop(self._heap)
        raise LookupError("empty tracker")

    def min_estimate(self) -> Optional[int]:
        if len(self.entries) < self.capacity:
            return None
        return self._min()[0]

    def offer(self, key: int, estimate: int) -> None:
        if key in self.entries:
            self.entries[key] = estimate
            heapq.heappush(self._heap, (estimate, key))
        elif len(self.entries) < self.capacity:
            self.entries[key] = estimate
            heapq.heappush(self._heap, (estimate, key))
        else:
            low, low_key = self._min()
            if estimate <= low:
                return
            heapq.heappop(self._heap)
            del self.entries[low_key]
            self.entries[key] = estimate
            heapq.heappush(self._heap, (estimate, key))
        if len(self._heap) > 4 * self.capacity:
            self._heap = [(e, k) for k, e in self.entries.items()]
            heapq.heapify(self._heap)

    def offer_many(self, keys: np.ndarray, estimates: np.ndarray) -> None:
        floor = self.min_estimate()
        if floor is not None:
            tracked = np.fromiter((int(k) in self.entries for k in keys), dtype=bool, count=len(keys))
            keep = tracked | (estimates > floor)
            keys, estimates = keys[keep], estimates[keep]
        for key, est in zip(keys.tolist(), estimates.tolist()):
            self.offer(int(key), int(est))

    def keys(self) -> List[int]:
        return sorted(self.entries)

    def items(self) -> List[Tuple[int, int]]:
        return sorted(self.entries.items())

    def merged(self, other: "HeavyHitterTracker") -> "HeavyHitterTracker":
        combined = dict(self.entries)
        for key, est in other.entries.items():
            combined[key] = combined.get(key, 0) + est
        ranked = sorted(combined.items(), key=lambda kv: (-kv[1], kv[0]))[: self.capacity]
        out = HeavyHitterTracker(self.capacity)
        for key, est in ranked:
            out.offer(key, est)
        return out

    def copy(self) -> "HeavyHitterTracker":
        out = HeavyHitterTracker(self.capacity)
        out.entries = dict(self.entries)
        out._heap = list(self._heap)
        return out


# ============================================================
# G-sum functions
# ============================================================

@dataclass(frozen=True)
class GsumKind:
    tag: str
    order: int = 0

    def apply(self, estimates: np.ndarray) -> np.ndarray:
        x = np.asarray(estimates, dtype=np.float64)
        if self.tag == "entropy":
            x = np.maximum(x, 1.0)
            return x * np.log2(x)
        if self.tag == "cardinality":
            # every tracked key was observed at least once
            return np.ones_like(x)
        if self.tag == "l2":
            return np.square(np.maximum(x, 0.0))
        if self.tag == "moment":
            if self.order > MAX_MOMENT_ORDER:
                raise UnsupportedGsumError(f"frequency moment order {self.order} > {MAX_MOMENT_ORDER}")
            return np.power(np.maximum(x, 0.0), self.order)
        raise UnsupportedGsumError(f"unknown G-sum kind {self.tag!r}")


CARDINALITY = GsumKind("cardinality")
ENTROPY = GsumKind("entropy")
L2 = GsumKind("l2")


def frequency_moment(order: int) -> GsumKind:
    if order < 0 or order > MAX_MOMENT_ORDER:
        raise UnsupportedGsumError(f"frequency moment order must be in [0, {MAX_MOMENT_ORDER}], got {order}")
    return GsumKind("moment", order)


# ============================================================
# Sampling ("merged compute")
# ============================================================

class SamplingState:
    """Per-row geometric skip sampling.

    One draw is consumed per (record, row); the resulting row mask is reused
    for every dimension of the record.
    """

    def __init__(self, probability: float = 1.0, rows: int = 5, seed: int = 0):
        if not 0.0 < probability <= 1.0:
            raise ValueError(f"sampling probability must be in (0, 1], got {probability}")
        self.probability = float(probability)
        self.rows = rows
        self.seed = seed
        self.rng = np.random.default_rng(seed)
        self.draws = 0
        if self.probability < 1.0:
            self.skip = self.rng.geometric(self.probability, size=rows).astype(np.int64) - 1
            self.draws += rows
        else:
            self.skip = np.zeros(rows, dtype=np.int64)

    @property
    def scale(self) -> float:
        return 1.0 / self.probability

    def draw(self, n: int) -> Optional[np.ndarray]:
        """Row mask (n, rows) for the next n records; None means every row."""
        if self.probability >= 1.0:
            return None
        return self.draw_skips(n)

    def draw_skips(self, n: int) -> np.ndarray:
        p = self.probability
        mask = np.zeros((n, self.rows), dtype=bool)
        for row in range(self.rows):
            pos = int(self.skip[row])
            hits = []
            while pos < n:
                size = int((n - pos) * p) + 16
                gaps = self.rng.geometric(p, size=size)
                self.draws += size
                steps = pos + np.concatenate(([0], np.cumsum(gaps)))
                block = steps[:-1]
                inside = block[block < n]
                hits.append(inside)
                if inside.size < block.size:
                    pos = int(block[inside.size])
                    break
                pos = int(steps[-1])
            if hits:
                mask[np.concatenate(hits), row] = True
            self.skip[row] = pos - n
        return mask

    def copy(self) -> "SamplingState":
        out = SamplingState.__new__(SamplingState)
        out.probability = self.probability
        out.rows = self.rows
        out.seed = self.seed
        out.rng = copy.deepcopy(self.rng)
        out.draws = self.draws
        out.skip = self.skip.copy()
        return out


# ============================================================
# Universal sketches
# ============================================================

@dataclass
class UpdateCounters:
    """Instrumentation for the merged-compute comparison."""
    records: int = 0
    hash_invocations: int = 0
    counter_updates: int = 0

    def add(self, other: "UpdateCounters") -> "UpdateCounters":
        return UpdateCounters(
            self.records + other.records,
            self.hash_invocations + other.hash_invocations,
            self.counter_updates + other.counter_updates,
        )


class _LevelStack:
    """L count-sketch tables sharing one row hasher, plus the level functions."""

    def __init__(self, geometry: SketchGeometry):
        self.geometry = geometry
        self.rows = RowHasher(geometry)
        self.levels = LevelHasher(geometry)
        self.tables = [CountSketchTable(geometry, self.rows) for _ in range(geometry.levels)]

    def apply(self, composite: np.ndarray, weights: np.ndarray, row_mask: Optional[np.ndarray],
              counters: UpdateCounters) -> np.ndarray:
        depth = self.levels.depth(composite)
        buckets, signs = self.rows.hash(composite)
        values = signs * weights[None, :]
        selected = None if row_mask is None else row_mask.T
        counters.hash_invocations += int(composite.size * self.geometry.rows if selected is None else selected.sum())
        for level in range(int(depth.max()) + 1 if depth.size else 0):
            at = depth >= level
            sel = None if selected is None else selected[:, at]
            counters.counter_updates += self.tables[level].apply(buckets[:, at], values[:, at], sel)
        return depth

    def estimates(self, level: int, composite: np.ndarray) -> np.ndarray:
        return self.tables[level].estimate_batch(composite)

    def copy(self) -> "_LevelStack":
        out = _LevelStack.__new__(_LevelStack)
        out.geometry = self.geometry
        out.rows = self.rows
        out.levels = self.levels
        out.tables = [t.copy() for t in self.tables]
        return out


def _scaled(weights: np.ndarray, sampling: SamplingState) -> np.ndarray:
    """Weights divided by p, rounded stochastically so each scaled weight is unbiased."""
    if sampling.probability >= 1.0:
        return weights
    exact = weights * sampling.scale
    nearest = np.rint(exact)
    if np.all(np.abs(exact - nearest) < 1e-9):
        return nearest.astype(np.int64)
    base = np.floor(exact)
    up = sampling.rng.random(exact.size) < (exact - base)
    sampling.draws += int(exact.size)
    return base.astype(np.int64) + up


def _recursive_gsum(stack: _LevelStack, tracker_row: Sequence[HeavyHitterTracker], salt: int, g: GsumKind) -> float:
    top = stack.geometry.levels - 1
    total = 0.0
    for level in range(top, -1, -1):
        keys = tracker_row[level].keys()
        if level < top:
            total *= 2.0
        if not keys:
            continue
        composite = as_keys(keys) ^ np.uint64(salt)
        values = g.apply(stack.estimates(level, composite))
        if level == top:
            total += float(values.sum())
        else:
            nxt = stack.levels.bit(level + 1, composite)
            total += float(((1 - 2 * nxt) * values).sum())
    return max(total, 0.0)


class UnivSketch:
    """Classical single-dimension universal sketch.

    `salt` is XOR-ed into every key before hashing; with salt = dim_salt(i) it
    hashes exactly like dimension i of a MergedUnivSketch.
    """

    def __init__(self, geometry: SketchGeometry, salt: int = 0, probability: float = 1.0,
                 sampling_seed: Optional[int] = None):
        self.geometry = geometry.with_dimensions(1)
        self.salt = salt
        self.stack = _LevelStack(self.geometry)
        self.trackers = [HeavyHitterTracker(geometry.hh_capacity) for _ in range(geometry.levels)]
        self.m = 0
        seed = geometry.seed if sampling_seed is None else sampling_seed
        self.sampling = SamplingState(probability, geometry.rows, seed)
        self.counters = UpdateCounters()

    @property
    def tables(self) -> List[CountSketchTable]:
        return self.stack.tables

    def update(self, key: int, weight: int = 1) -> None:
        self.update_batch([key], [weight])

    def update_batch(self, keys, weights=None) -> None:
        keys = as_keys(keys)
        weights = _weights(weights, keys.size)
        if keys.size == 0:
            return
        mask = self.sampling.draw(keys.size)
        composite = keys ^ np.uint64(self.salt)
        depth = self.stack.apply(composite, _scaled(weights, self.sampling), mask, self.counters)
        self.counters.records += int(keys.size)
        self.m += int(weights.sum())
        _offer_levels(self.stack, self.trackers, keys, composite, depth)

    def estimate(self, key: int, level: int = 0) -> int:
        return int(self.stack.estimates(level, as_keys([key]) ^ np.uint64(self.salt))[0])

    def gsum(self, g: GsumKind) -> float:
        if g.tag == "moment":
            g.apply(np.zeros(0))
        if self.m == 0:
            return 0.0
        return _recursive_gsum(self.stack, self.trackers, self.salt, g)

    def entropy(self) -> float:
        return _entropy_from(self.m, self.gsum(ENTROPY))


def _offer_levels(stack: _LevelStack, trackers: Sequence[HeavyHitterTracker], keys: np.ndarray,
                  composite: np.ndarray, depth: np.ndarray) -> None:
    for level in range(int(depth.max()) + 1 if depth.size else 0):
        at = depth >= level
        uniq, first = np.unique(keys[at], return_index=True)
        est = stack.estimates(level, composite[at][first])
        trackers[level].offer_many(uniq, est)


def _entropy_from(m: int, gsum_entropy: float) -> float:
    if m <= 0:
        raise EntropyDomainError("entropy of an empty stream is undefined")
    upper = math.log2(m)
    return min(max(upper - gsum_entropy / m, 0.0), upper)


class MergedUnivSketch:
    """Universal sketch whose level tables are shared by all D dimensions.

    Dimension `dim` hashes composite keys key ^ dim_salt(dim) into the shared
    tables and keeps its own heavy-hitter trackers and exact stream length.
    """

    def __init__(self, geometry: SketchGeometry, probability: float = 1.0, sampling_seed: Optional[int] = None):
        self.geometry = geometry
        self.stack = _LevelStack(geometry)
        self.trackers = [[HeavyHitterTracker(geometry.hh_capacity) for _ in range(geometry.levels)]
                         for _ in range(geometry.dimensions)]
        self.m = [0] * geometry.dimensions
        seed = geometry.seed if sampling_seed is None else sampling_seed
        self.sampling = SamplingState(probability, geometry.rows, seed)
        self.counters = UpdateCounters()

    @property
    def tables(self) -> List[CountSketchTable]:
        return self.stack.tables

    @property
    def probability(self) -> float:
        return self.sampling.probability

    def _check_dim(self, dim: int) -> None:
        if not 0 <= dim < self.geometry.dimensions:
            raise DimensionIndexError(f"dimension {dim} outside [0, {self.geometry.dimensions})")

    def update(self, dim: int, key: int, weight: int = 1) -> None:
        """merged_update for a single (dim, key); draws a fresh row mask."""
        self._check_dim(dim)
        keys = as_keys([key])
        self._apply_dim(dim, keys, _weights([weight], 1), self.sampling.draw(1))
        self.counters.records += 1

    def update_record(self, keys: Sequence[Optional[int]], weight: int = 1) -> None:
        """One record carrying a key per dimension (None = absent): one draw for all dims."""
        if len(keys) > self.geometry.dimensions:
            raise DimensionIndexError(f"record has {len(keys)} dimensions, sketch holds {self.geometry.dimensions}")
        mask = self.sampling.draw(1)
        for dim, key in enumerate(keys):
            if key is not None:
                self._apply_dim(dim, as_keys([key]), _weights([weight], 1), mask)
        self.counters.records += 1

    def update_records(self, keys: np.ndarray, present: Optional[np.ndarray] = None, weights=None) -> None:
        """Batch of records: keys (n, D') uint64 for dims 0..D'-1, optional presence mask."""
        keys = np.asarray(keys, dtype=np.uint64)
        if keys.ndim == 1:
            keys = keys[:, None]
        n, dims = keys.shape
        if dims > self.geometry.dimensions:
            raise DimensionIndexError(f"batch has {dims} dimensions, sketch holds {self.geometry.dimensions}")
        if n == 0:
            return
        weights = _weights(weights, n)
        mask = self.sampling.draw(n)
        for dim in range(dims):
            rows = slice(None) if present is None else present[:, dim]
            dim_mask = None if mask is None else mask[rows]
            self._apply_dim(dim, keys[rows, dim], weights[rows], dim_mask)
        self.counters.records += n

    def _apply_dim(self, dim: int, keys: np.ndarray, weights: np.ndarray, mask: Optional[np.ndarray]) -> None:
        if keys.size == 0:
            return
        composite = keys ^ np.uint64(dim_salt(dim))
        depth = self.stack.apply(composite, _scaled(weights, self.sampling), mask, self.counters)
        self.m[dim] += int(weights.sum())
        _offer_levels(self.stack, self.trackers[dim], keys, composite, depth)

    def estimate(self, dim: int, key: int, level: int = 0) -> int:
        self._check_dim(dim)
        return int(self.stack.estimates(level, as_keys([key]) ^ np.uint64(dim_salt(dim)))[0])

    def estimate_batch(self, dim: int, keys, level: int = 0) -> np.ndarray:
        self._check_dim(dim)
        return self.stack.estimates(level, as_keys(keys) ^ np.uint64(dim_salt(dim)))

    def univ_gsum(self, dim: int, g: GsumKind) -> float:
        self._check_dim(dim)
        if g.tag == "moment":
            g.apply(np.zeros(0))
        if self.m[dim] == 0:
            return 0.0
        return _recursive_gsum(self.stack, self.trackers[dim], dim_salt(dim), g)

    def entropy(self, dim: int) -> float:
        self._check_dim(dim)
        return _entropy_from(self.m[dim], self.univ_gsum(dim, ENTROPY))

    def cardinality(self, dim: int) -> float:
        return self.univ_gsum(dim, CARDINALITY)

    def heavy_hitters(self, dim: int, threshold_fraction: float) -> List[Tuple[int, int]]:
        self._check_dim(dim)
        m = self.m[dim]
        keys = self.trackers[dim][0].keys()
        if m <= 0 or not keys:
            return []
        est = self.estimate_batch(dim, keys)
        cut = threshold_fraction * m
        found = [(k, int(e)) for k, e in zip(keys, est.tolist()) if e >= cut]
        return sorted(found, key=lambda kv: (-kv[1], kv[0]))

    def is_empty(self) -> bool:
        return all(t.is_zero() for t in self.tables) and not any(self.m)

    def copy(self) -> "MergedUnivSketch":
        out = MergedUnivSketch.__new__(MergedUnivSketch)
        out.geometry = self.geometry
        out.stack = self.stack.copy()
        out.trackers = [[t.copy() for t in row] for row in self.trackers]
        out.m = list(self.m)
        out.sampling = self.sampling.copy()
        out.counters = UpdateCounters(**vars(self.counters))
        return out


def merged_update(sk: MergedUnivSketch, dim: int, key: int, weight: int = 1) -> MergedUnivSketch:
    sk.update(dim, key, weight)
    return sk


def univ_gsum(sk: MergedUnivSketch, dim: int, g: GsumKind) -> float:
    return sk.univ_gsum(dim, g)


def entropy(sk: MergedUnivSketch, dim: int) -> float:
    return sk.entropy(dim)


def heavy_hitters(sk: MergedUnivSketch, dim: int, threshold_fraction: float) -> List[Tuple[int, int]]:
    return sk.heavy_hitters(dim, threshold_fraction)


def merge(a: MergedUnivSketch, b: MergedUnivSketch) -> MergedUnivSketch:
    """Counter-wise sum of two snapshots with identical geometry and seed."""
    if a.geometry != b.geometry:
        raise MergeError(f"cannot merge sketches: {a.geometry} != {b.geometry}")
    out = a.copy()
    out.stack.tables = [ta.merged(tb) for ta, tb in zip(a.tables, b.tables)]
    out.m = [x + y for x, y in zip(a.m, b.m)]
    out.trackers = [[ta.merged(tb) for ta, tb in zip(ra, rb)] for ra, rb in zip(a.trackers, b.trackers)]
    out.counters = a.counters.add(b.counters)
    return out


def merge_all(sketches: Iterable[MergedUnivSketch]) -> MergedUnivSketch:
    sketches = list(sketches)
    if not sketches:
        raise MergeError("nothing to merge")
    out = sketches[0].copy()
    for sk in sketches[1:]:
        out = merge(out, sk)
    return out


def diff_l2(current: MergedUnivSketch, previous: MergedUnivSketch, dim: int = 0) -> float:
    """Change score: L2 of the level-0 table difference.

    The level-0 table is shared by every dimension, so for D > 1 the score
    covers the whole table, not only `dim`.
    """
    if current.geometry != previous.geometry:
        raise MergeError("change score needs sketches with identical geometry and seed")
    current._check_dim(dim)
    return current.tables[0].difference(previous.tables[0]).l2()


# ============================================================
# Histograms
# ============================================================

@dataclass(eq=False)
class DimHistogram:
    low: float
    high: float
    buckets: int = 256
    scale: str = "linear"
    counts: np.ndarray = field(default=None, repr=False)
    clamped: int = 0

    def __post_init__(self):
        if not self.low < self.high:
            raise ValueError(f"histogram domain must satisfy min < max, got [{self.low}, {self.high})")
        if self.buckets < 1:
            raise ValueError("histogram needs at least one bucket")
        if self.scale not in ("linear", "log"):
            raise ValueError(f"unknown histogram scale {self.scale!r}")
        if self.scale == "log" and self.low <= 0:
            raise ValueError("log-scaled histogram needs min > 0")
        if self.counts is None:
            self.counts = np.zeros(self.buckets, dtype=np.int64)

    @property
    def config(self) -> Tuple[float, float, int, str]:
        return (float(self.low), float(self.high), int(self.buckets), self.scale)

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    def edges(self) -> np.ndarray:
        if self.scale == "log":
            return np.geomspace(self.low, self.high, self.buckets + 1)
        return np.linspace(self.low, self.high, self.buckets + 1)

    def bucket_of(self, values) -> Tuple[np.ndarray, np.ndarray]:
        """Bucket index per value plus a mask of values clamped into an edge bucket."""
        v = np.asarray(values, dtype=np.float64).reshape(-1)
        outside = (v < self.low) | (v >= self.high)
        if self.scale == "log":
            with np.errstate(divide="ignore", invalid="ignore"):
                pos = np.log(np.where(v > 0, v, self.low) / self.low) / math.log(self.high / self.low)
        else:
            pos = (v - self.low) / (self.high - self.low)
        idx = np.floor(pos * self.buckets)
        idx = np.clip(np.nan_to_num(idx, nan=0.0), 0, self.buckets - 1).astype(np.int64)
        return idx, outside

    def update(self, value: float, weight: int = 1) -> None:
        self.update_batch([value], [weight])

    def update_batch(self, values, weights=None) -> None:
        idx, outside = self.bucket_of(values)
        w = _weights(weights, idx.size)
        np.add.at(self.counts, idx, w)
        self.clamped += int(outside.sum())

    def merged(self, other: "DimHistogram") -> "DimHistogram":
        if self.config != other.config:
            raise MergeError(f"histogram configurations differ: {self.config} vs {other.config}")
        return DimHistogram(self.low, self.high, self.buckets, self.scale,
                            self.counts + other.counts, self.clamped + other.clamped)

    def quantile(self, q: float) -> float:
        """Lower edge of the first bucket whose cumulative mass reaches q * total."""
        if not 0.0 <= q <= 1.0:
            raise ValueError(f"quantile must be in [0, 1], got {q}")
        total = self.total
        edges = self.edges()
        if total <= 0:
            return float(edges[0])
        cum = np.cumsum(self.counts)
        target = max(q * total, 1)
        return float(edges[int(np.searchsorted(cum, target, side="left"))])

    def copy(self) -> "DimHistogram":
        return DimHistogram(self.low, self.high, self.buckets, self.scale, self.counts.copy(), self.clamped)


def dim_histogram_update(h: DimHistogram, value: float) -> DimHistogram:
    h.update(value)
    return h


def dim_histogram_merge(a: DimHistogram, b: DimHistogram) -> DimHistogram:
    return a.merged(b)


def dim_histogram_quantile(h: DimHistogram, q: float) -> float:
    return h.quantile(q)
