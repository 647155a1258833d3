#!/usr/bin/env python3
"""Simulated switch data planes.

A SwitchDataPlane sees the records entering one leaf switch, feeds every
configured dimension into one MergedUnivSketch (one sampling draw per record,
shared by all dimensions) plus a DimHistogram per dimension, and rotates both
at epoch boundaries.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from typing import TYPE_CHECKING, Dict, Optional, Sequence, Tuple

import numpy as np

from sketch_core import GOLDEN, MASK64, DimHistogram, MergedUnivSketch, SketchGeometry, splitmix64

if TYPE_CHECKING:
    from workload import Record, RecordBatch

QUANT_BITS = 16
QUANT_GRID = 1 << QUANT_BITS


class DimensionError(ValueError):
    """More dimensions configured than the sketch was built for."""


class EpochError(ValueError):
    """Record timestamp outside the current epoch."""


@dataclass(frozen=True)
class DimensionConfig:
    name: str
    low: float
    high: float
    scale: str = "linear"

    def histogram(self, buckets: int) -> DimHistogram:
        return DimHistogram(self.low, self.high, buckets, self.scale)


@dataclass(frozen=True)
class Epoch:
    index: int
    start: int
    end: int

    def contains(self, t: int) -> bool:
        return self.start <= t < self.end


@dataclass
class EpochSnapshot:
    """Closed-epoch state of one switch. Treated as immutable once returned."""
    switch_id: int
    epoch: Epoch
    sketch: MergedUnivSketch
    histograms: Dict[str, DimHistogram]
    dimensions: Tuple[str, ...]
    packets: int = 0
    drops: int = 0

    def slot(self, name: str) -> Optional[int]:
        try:
            return self.dimensions.index(name)
        except ValueError:
            return None


def quantize(values, low: float, high: float) -> np.ndarray:
    """Map real values onto the 2^16 grid over [low, high) (clamped at the edges)."""
    v = np.asarray(values, dtype=np.float64)
    pos = np.floor((v - low) / (high - low) * QUANT_GRID)
    return np.clip(pos, 0, QUANT_GRID - 1).astype(np.uint64)


def dequantize(keys, low: float, high: float) -> np.ndarray:
    """Lower edge of each grid cell."""
    return low + np.asarray(keys, dtype=np.float64) * (high - low) / QUANT_GRID


def epoch_sampling_seed(seed: int, switch_id: int, epoch_index: int) -> int:
    return splitmix64((seed + splitmix64(switch_id + 1) + epoch_index * GOLDEN) & MASK64)


class SwitchDataPlane:
    def __init__(self, switch_id: int, node_ids: Sequence[int], geometry: SketchGeometry,
                 probability: float = 1.0, sampling_seed: int = 0, epoch_length: int = 1000,
                 histogram_buckets: int = 256, dimensions: Sequence[DimensionConfig] = ()):
        self.switch_id = switch_id
        self.node_ids = tuple(node_ids)
        self.geometry = geometry
        self.probability = probability
        self.sampling_seed = sampling_seed
        self.epoch_length = epoch_length
        self.histogram_buckets = histogram_buckets
        self.dimensions: Tuple[DimensionConfig, ...] = ()
        self._pending: Optional[Tuple[DimensionConfig, ...]] = None
        self.epoch = Epoch(0, 0, epoch_length)
        self.previous: Optional[EpochSnapshot] = None
        self.packets = 0
        self.drops = 0
        self._fresh_state()
        if dimensions:
            self.configure(dimensions)

    def _fresh_state(self) -> None:
        seed = epoch_sampling_seed(self.sampling_seed, self.switch_id, self.epoch.index)
        self.active = MergedUnivSketch(self.geometry, self.probability, sampling_seed=seed)
        self.histograms = {d.name: d.histogram(self.histogram_buckets) for d in self.dimensions}
        self.packets = 0
        self.drops = 0

    @property
    def names(self) -> Tuple[str, ...]:
        return tuple(d.name for d in self.dimensions)

    def configure(self, dimensions: Sequence[DimensionConfig]) -> None:
        """Set the sketched dimensions; deferred to the next rotation if the epoch has traffic."""
        dims = tuple(dimensions)
        if len(dims) > self.geometry.dimensions:
            raise DimensionError(
                f"switch {self.switch_id}: {len(dims)} dimensions requested, sketch capacity is {self.geometry.dimensions}")
        if dims == self.dimensions:
            self._pending = None
            return
        if self.packets == 0:
            self.dimensions = dims
            self.histograms = {d.name: d.histogram(self.histogram_buckets) for d in dims}
            self._pending = None
        else:
            self._pending = dims

    def observe(self, record: "Record") -> None:
        if not self.epoch.contains(record.timestamp):
            raise EpochError(f"record at t={record.timestamp} outside epoch {self.epoch}")
        self.packets += 1
        if not self.dimensions:
            return
        values = [record.values.get(d.name) for d in self.dimensions]
        if any(v is None or (isinstance(v, float) and math.isnan(v)) for v in values):
            self.drops += 1
            return
        keys = [int(quantize(v, d.low, d.high)) for v, d in zip(values, self.dimensions)]
        self.active.update_record(keys)
        for v, d in zip(values, self.dimensions):
            self.histograms[d.name].update(v)

    def observe_batch(self, batch: "RecordBatch") -> None:
        n = len(batch)
        if n == 0:
            return
        if batch.timestamps[0] < self.epoch.start or batch.timestamps[-1] >= self.epoch.end:
            raise EpochError(f"batch [{batch.timestamps[0]}, {batch.timestamps[-1]}] outside epoch {self.epoch}")
        self.packets += n
        if not self.dimensions:
            return
        columns = np.full((n, len(self.dimensions)), np.nan)
        for i, d in enumerate(self.dimensions):
            if d.name in batch.names:
                columns[:, i] = batch.column(d.name)
        ok = ~np.isnan(columns).any(axis=1)
        self.drops += int(n - ok.sum())
        columns = columns[ok]
        if columns.shape[0] == 0:
            return
        keys = np.stack([quantize(columns[:, i], d.low, d.high) for i, d in enumerate(self.dimensions)], axis=1)
        self.active.update_records(keys)
        for i, d in enumerate(self.dimensions):
            self.histograms[d.name].update_batch(columns[:, i])

    def rotate_epoch(self) -> EpochSnapshot:
        """Close the current epoch, start a fresh one and return the closed snapshot."""
        snapshot = EpochSnapshot(self.switch_id, self.epoch, self.active, self.histograms,
                                 self.names, self.packets, self.drops)
        self.previous = snapshot
        logging.debug("switch %d closed epoch %d: packets=%d drops=%d", self.switch_id,
                      self.epoch.index, self.packets, self.drops)
        self.epoch = Epoch(self.epoch.index + 1, self.epoch.end, self.epoch.end + self.epoch_length)
        if self._pending is not None:
            self.dimensions = self._pending
            self._pending = None
        self._fresh_state()
        return snapshot
