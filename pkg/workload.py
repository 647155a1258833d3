#!/usr/bin/env python3
"""Synthetic drifting workload and the closed-loop replay harness.

generate() turns a DriftSchedule into one RecordBatch per epoch (fully
determined by the schedule seed). Experiment replays such a stream through
the switch data planes, controllers, northbound API and services on a simpy
clock and collects an ExperimentTrace.

The lognormal "energy" schedule with concentration drift imitates the
qualitative shape of particle-energy distributions in plasma simulations
(mass concentrating on few values over time); its parameters are not fitted
to any published run.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import TYPE_CHECKING, Any, Dict, Iterable, Iterator, List, Mapping, Optional, Tuple

import numpy as np
import pandas as pd
import simpy

from control_plane import (
    GLOBAL, LOCAL, Absent, CentralController, EstimateSet, LocalController, MetricKind, NotYetAvailable,
)
from dataplane import SwitchDataPlane, quantize
from northbound_api import AttributeSpec, EstimateBuffer, NorthboundAPI, Timing
from services import CacheService, LoadLedger, PartitionMap, ReshardPolicy, ReshardService, Router, hash_nodes
from sketch_core import DimHistogram

if TYPE_CHECKING:
    from settings import RunConfig

DISTRIBUTIONS = ("zipf", "lognormal", "mixture")
DRIFTS = ("none", "ramp", "shift", "concentration")
TRACE_COLUMNS = ["epoch", "scope", "switch", "dimension", "metric", "value", "staleness"]


# ============================================================
# Records
# ============================================================

@dataclass(frozen=True)
class Record:
    entity_id: int
    timestamp: int
    values: Mapping[str, float]
    source_node: int


@dataclass
class RecordBatch:
    """Column-wise block of records; `values[:, i]` holds dimension `names[i]`."""
    epoch: int
    names: Tuple[str, ...]
    entity_ids: np.ndarray
    timestamps: np.ndarray
    values: np.ndarray
    sources: np.ndarray

    def __len__(self):
        return int(self.timestamps.shape[0])

    def column(self, name: str) -> np.ndarray:
        return self.values[:, self.names.index(name)]

    def take(self, mask: np.ndarray) -> "RecordBatch":
        return RecordBatch(self.epoch, self.names, self.entity_ids[mask], self.timestamps[mask],
                           self.values[mask], self.sources[mask])

    def records(self) -> Iterator[Record]:
        for i in range(len(self)):
            yield Record(int(self.entity_ids[i]), int(self.timestamps[i]),
                         dict(zip(self.names, self.values[i].tolist())), int(self.sources[i]))


def split_by_switch(batch: RecordBatch, nodes_per_switch: int, switches: int) -> Dict[int, RecordBatch]:
    switch_of = batch.sources // nodes_per_switch
    return {s: batch.take(switch_of == s) for s in range(switches)}


# ============================================================
# Drift schedules
# ============================================================

@dataclass(frozen=True)
class DimensionSchedule:
    name: str
    distribution: str
    low: float
    high: float
    scale: str = "linear"
    zipf_s: float = 1.1
    universe: int = 10_000
    mu: float = 0.0
    sigma: float = 1.0
    mu2: float = 3.0
    sigma2: float = 0.5
    mix_weight: float = 0.3
    drift: str = "none"
    rate: float = 0.0
    shift_epoch: int = 0
    delta: float = 0.0

    def __post_init__(self):
        if self.distribution not in DISTRIBUTIONS:
            raise ValueError(f"{self.name}: distribution must be one of {DISTRIBUTIONS}")
        if self.drift not in DRIFTS:
            raise ValueError(f"{self.name}: drift must be one of {DRIFTS}")
        if not self.low < self.high:
            raise ValueError(f"{self.name}: domain must satisfy min < max")
        if self.scale not in ("linear", "log") or (self.scale == "log" and self.low <= 0):
            raise ValueError(f"{self.name}: scale must be linear, or log with min > 0")
        if self.universe < 1 or self.sigma <= 0 or self.sigma2 <= 0 or self.zipf_s <= 0:
            raise ValueError(f"{self.name}: universe, sigma and zipf_s must be positive")

    def params(self, epoch: int) -> Dict[str, float]:
        """Effective distribution parameters at one epoch."""
        p = dict(s=self.zipf_s, mu=self.mu, sigma=self.sigma, mu2=self.mu2, sigma2=self.sigma2,
                 weight=self.mix_weight, offset=0.0)
        if self.drift == "ramp":
            if self.distribution == "zipf":
                p["offset"] = float(np.floor(self.rate * epoch))
            elif self.distribution == "lognormal":
                p["mu"] += self.rate * epoch
            else:
                p["weight"] = float(np.clip(self.mix_weight + self.rate * epoch, 0.0, 1.0))
        elif self.drift == "shift" and epoch >= self.shift_epoch:
            p["offset"] = self.delta
        elif self.drift == "concentration":
            if self.distribution == "zipf":
                p["s"] += self.rate * epoch
            else:
                shrink = float(np.exp(-self.rate * epoch))
                p["sigma"] *= shrink
                p["sigma2"] *= shrink
        return p

    def sample(self, rng: np.random.Generator, n: int, epoch: int) -> np.ndarray:
        p = self.params(epoch)
        if self.distribution == "zipf":
            ranks = np.arange(1, self.universe + 1, dtype=np.float64)
            cdf = np.cumsum(ranks ** -p["s"])
            cdf /= cdf[-1]
            keys = np.minimum(np.searchsorted(cdf, rng.random(n), side="right"), self.universe - 1)
            values = keys.astype(np.float64)
        elif self.distribution == "lognormal":
            values = rng.lognormal(p["mu"], p["sigma"], n)
        else:
            second = rng.random(n) < p["weight"]
            values = np.where(second, rng.lognormal(p["mu2"], p["sigma2"], n), rng.lognormal(p["mu"], p["sigma"], n))
        return values + p["offset"]


@dataclass(frozen=True)
class DriftSchedule:
    dimensions: Tuple[DimensionSchedule, ...]
    seed: int = 0
    epoch_records: int = 4000
    entities: int = 100_000

    @property
    def names(self) -> Tuple[str, ...]:
        return tuple(d.name for d in self.dimensions)


def generate(schedule: DriftSchedule, n_records: int, n_nodes: int) -> Iterator[RecordBatch]:
    """One RecordBatch per epoch; source nodes assigned round-robin by timestamp."""
    per_epoch = schedule.epoch_records
    for epoch, start in enumerate(range(0, n_records, per_epoch)):
        n = min(per_epoch, n_records - start)
        rng = np.random.default_rng([schedule.seed, epoch])
        values = np.column_stack([d.sample(rng, n, epoch) for d in schedule.dimensions])
        entity_ids = rng.integers(0, schedule.entities, n, dtype=np.uint64)
        timestamps = np.arange(start, start + n, dtype=np.int64)
        yield RecordBatch(epoch, schedule.names, entity_ids, timestamps, values, timestamps % n_nodes)


# ============================================================
# Trace
# ============================================================

def estimate_rows(est: EstimateSet, staleness: int = 0) -> List[tuple]:
    """Flatten one EstimateSet into trace rows (Absent entries are skipped)."""
    rows = []
    for (dim, metric), value in sorted(est.entries.items()):
        head = (est.epoch, est.scope, est.switch_id, dim)
        if isinstance(value, Absent):
            continue
        if isinstance(value, DimHistogram):
            rows.append(head + ("hist_total", float(value.total), staleness))
        elif metric == MetricKind.HEAVY_HITTERS.value:
            rows.append(head + ("hh_count", float(len(value)), staleness))
            rows.extend(head + (f"hh[{k}]", float(e), staleness) for k, e in value)
        elif metric == MetricKind.QUANTILES.value:
            rows.extend(head + (f"q{q:g}", float(v), staleness) for q, v in value)
        else:
            rows.append(head + (metric, float(value), staleness))
    return rows


@dataclass
class ExperimentTrace:
    rows: List[tuple] = field(default_factory=list)
    summary: Dict[str, Any] = field(default_factory=dict)
    partitions: List[PartitionMap] = field(default_factory=list)  # installed maps, in version order

    def add(self, epoch: int, scope: str, switch: int, dimension: str, metric: str, value: float,
            staleness: int = 0) -> None:
        self.rows.append((epoch, scope, switch, dimension, metric, float(value), staleness))

    def add_estimates(self, est: EstimateSet, staleness: int = 0) -> None:
        self.rows.extend(estimate_rows(est, staleness))

    def frame(self) -> pd.DataFrame:
        return pd.DataFrame(self.rows, columns=TRACE_COLUMNS)

    def to_csv(self, path: str) -> None:
        self.frame().to_csv(path, index=False, float_format="%.10g")


# ============================================================
# Closed-loop replay
# ============================================================

class Experiment:
    """Wires data planes, controllers, the northbound API and services for one RunConfig."""

    def __init__(self, config: "RunConfig"):
        from settings import derive_seed

        self.config = config
        self.schedule = config.drift_schedule()
        topo = config.topology
        self.nodes_per_switch = topo.nodes_per_switch
        self.switch_ids = list(range(topo.switches))
        self.node_ids = list(range(config.node_count))
        self.span = config.global_epoch_records
        geometry = config.geometry()
        sampling_seed = derive_seed(config.seed, "sampling")

        self.dataplanes = {
            s: SwitchDataPlane(s, range(s * topo.nodes_per_switch, (s + 1) * topo.nodes_per_switch), geometry,
                               config.sketch.sampling, sampling_seed, self.span, config.sketch.histogram_buckets)
            for s in self.switch_ids
        }
        self.locals = {s: LocalController(s) for s in self.switch_ids}
        self.central = CentralController(self.switch_ids)
        self.api = NorthboundAPI(geometry.dimensions, list(self.dataplanes.values()),
                                 list(self.locals.values()) + [self.central],
                                 config.metrics.hh_threshold, tuple(config.metrics.quantiles))
        self.trace = ExperimentTrace()
        self.env: Optional[simpy.Environment] = None
        self.rounds = 0
        self.degraded_rounds = 0
        self.records = 0
        self.epochs = 0

        for timing in (Timing.TIGHT, Timing.LOOSE):
            specs = [self._spec(a.name, a.metrics) for a in config.attributes if a.timing in (timing.value, "both")]
            if specs:
                sub = self.api.set_attributes(specs, timing=timing)
                self.api.get_estimates(sub, EstimateBuffer(config.metrics.buffer_capacity), self._record)

        self.reshard: Optional[ReshardService] = None
        self.router: Optional[Router] = None
        rs = config.services.reshard
        if rs.enabled:
            dim = config.schedule_of(rs.dimension)
            self.ledgers = {name: LoadLedger(self.node_ids, name) for name in ("closed_loop", "static", "hash")}
            policy = ReshardPolicy(rs.window, rs.imbalance_threshold, rs.change_factor)
            self.reshard = ReshardService(dim.name, dim.low, dim.high, self.node_ids, self.ledgers["closed_loop"],
                                          policy, dim.scale)
            self.router = Router(self.reshard.current)
            sub = self.api.set_attributes([self._spec(dim.name, (MetricKind.HISTOGRAM, MetricKind.CHANGE))],
                                          timing=Timing.LOOSE)
            self.api.get_estimates(sub, EstimateBuffer(config.metrics.buffer_capacity), self._on_reshard)

        self.cache: Optional[CacheService] = None
        cs = config.services.cache
        if cs.enabled:
            self.cache = CacheService(cs.dimension, cs.capacity, self._clairvoyant_keys(cs.dimension, cs.capacity))
            self.cache_hits: Dict[str, List[Tuple[int, float]]] = {c.name: [] for c in self.cache.caches}
            sub = self.api.set_attributes([self._spec(cs.dimension, (MetricKind.HEAVY_HITTERS,))],
                                          timing=Timing.LOOSE, hh_threshold=cs.hh_threshold)
            self.api.get_estimates(sub, EstimateBuffer(config.metrics.buffer_capacity), self.cache.on_estimates)

    def _spec(self, name: str, metrics) -> AttributeSpec:
        dim = self.config.schedule_of(name)
        return AttributeSpec(dim.name, dim.low, dim.high, tuple(metrics), dim.scale)

    def _clairvoyant_keys(self, name: str, capacity: int) -> List[int]:
        """Exact top keys over the stationary segment (before any abrupt shift)."""
        dim = self.config.schedule_of(name)
        end = dim.shift_epoch if dim.drift == "shift" else None
        counts = np.zeros(1 << 16, dtype=np.int64)
        for batch in generate(self.schedule, self.config.workload.records, self.config.node_count):
            if end is not None and batch.epoch >= end:
                break
            counts += np.bincount(quantize(batch.column(name), dim.low, dim.high).astype(np.int64),
                                  minlength=counts.size)
        order = np.lexsort((np.arange(counts.size), -counts))
        return [int(k) for k in order[:capacity] if counts[k] > 0]

    @property
    def now(self) -> int:
        return int(self.env.now) if self.env is not None else 0

    def _record(self, est: EstimateSet) -> None:
        self.trace.add_estimates(est, self.now - est.produced_at)

    def _on_reshard(self, est: EstimateSet) -> None:
        new = self.reshard.reshard_step(est)
        if new is not None:
            event = self.reshard.events[-1]
            self.trace.add(est.epoch, "service", -1, new.dimension, "reshard_version", new.version)
            self.trace.add(est.epoch, "service", -1, new.dimension, "moved_mass", event.moved_mass)

    def run(self, stream: Optional[Iterable[RecordBatch]] = None) -> ExperimentTrace:
        """replay(): observe -> rotate -> local_compute -> sync_round -> callbacks -> services."""
        if stream is None:
            stream = generate(self.schedule, self.config.workload.records, self.config.node_count)
        self.env = simpy.Environment()
        self.env.process(self._drive(stream))
        self.env.run()
        self.trace.summary = self.summary()
        if self.reshard is not None:
            self.trace.partitions = list(self.reshard.maps)
        return self.trace

    def _drive(self, stream: Iterable[RecordBatch]):
        for batch in stream:
            self._serve(batch)
            for switch, part in split_by_switch(batch, self.nodes_per_switch, len(self.switch_ids)).items():
                self.dataplanes[switch].observe_batch(part)
            self.records += len(batch)
            yield self.env.timeout(self.span)
            self._close_epoch(batch.epoch)
            self.epochs += 1

    def _serve(self, batch: RecordBatch) -> None:
        e = batch.epoch
        if self.reshard is not None:
            dim = self.config.schedule_of(self.reshard.dimension)
            values = batch.column(dim.name)
            closed = self.router.route_batch(values)
            self.ledgers["closed_loop"].record(e, closed)
            static = self.reshard.static_map or self.router.partition
            self.ledgers["static"].record(e, static.route_batch(values))
            keys = quantize(values, dim.low, dim.high)
            self.ledgers["hash"].record(e, hash_nodes(keys, len(self.node_ids)))
            load = self.ledgers["closed_loop"].loads[-1]
            for node, count in zip(self.node_ids, load.tolist()):
                self.trace.add(e, "load", -1, dim.name, f"node[{node}]", count)
            self.trace.add(e, "load", -1, dim.name, "partition_version", self.router.partition.version)
            for name, ledger in self.ledgers.items():
                self.trace.add(e, "load", -1, dim.name, f"{name}_imbalance", ledger.imbalance())
        if self.cache is not None:
            dim = self.config.schedule_of(self.cache.dimension)
            keys = quantize(batch.column(dim.name), dim.low, dim.high)
            for name, rate in self.cache.serve(keys).items():
                self.cache_hits[name].append((e, rate))
                self.trace.add(e, "cache", -1, dim.name, f"{name}_hit_rate", rate)

    def _close_epoch(self, epoch: int) -> None:
        now = self.now
        self._sample_staleness(epoch, now)
        for s in self.switch_ids:
            snapshot = self.dataplanes[s].rotate_epoch()
            self.trace.add(epoch, LOCAL, s, "", "packets", snapshot.packets)
            self.trace.add(epoch, LOCAL, s, "", "drops", snapshot.drops)
            self.api.deliver(self.locals[s].local_compute(snapshot, now))
        if (epoch + 1) % self.config.timing.sync_period == 0:
            self._sync(now)
        self.api.apply_pending()
        if self.reshard is not None:
            self.router.install(self.reshard.current)

    def _sync(self, now: int) -> None:
        sync_round = self.rounds
        self.rounds += 1
        uploads = [m for m in (self.locals[s].upload(sync_round) for s in self.switch_ids) if m is not None]
        est, downloads = self.central.sync_round(uploads, now)
        self.degraded_rounds += int(est.degraded)
        self.api.deliver(est)
        for switch, message in zip(self.central.members, downloads):
            self.env.process(self._download(switch, message))

    def _download(self, switch: int, message):
        yield self.env.timeout(self.config.timing.sync_delay)
        self.locals[switch].receive(message, self.now)

    def _sample_staleness(self, epoch: int, now: int) -> None:
        for s in self.switch_ids:
            for scope in (LOCAL, GLOBAL):
                try:
                    _, staleness = self.locals[s].freshness_query(scope, now)
                except NotYetAvailable:
                    continue
                self.trace.add(epoch, "staleness", s, "", scope, staleness / self.span, staleness)

    # ------------------------------------------------------------

    def summary(self) -> Dict[str, Any]:
        frame = self.trace.frame()
        stale = frame[frame["scope"] == "staleness"]
        out: Dict[str, Any] = {
            "records": self.records,
            "epochs": self.epochs,
            "sync_rounds": self.rounds,
            "degraded_rounds": self.degraded_rounds,
            "max_local_staleness_epochs": float(stale[stale["metric"] == LOCAL]["value"].max()) if len(stale) else 0.0,
            "max_global_staleness_epochs": float(stale[stale["metric"] == GLOBAL]["value"].max()) if len(stale) else 0.0,
        }
        if self.reshard is not None:
            since = self._static_since()
            out["reshard_events"] = len(self.reshard.events)
            out["reshard_reasons"] = [e.reason for e in self.reshard.events]
            for name, ledger in self.ledgers.items():
                value = ledger.mean_imbalance(since) if since is not None else None
                out[f"mean_imbalance_{name}"] = value if value is not None else float("nan")
        if self.cache is not None:
            for name, series in self.cache_hits.items():
                out[f"hit_rate_{name}"] = float(np.mean([r for _, r in series])) if series else 0.0
        return out

    def _static_since(self) -> Optional[int]:
        events = self.reshard.events
        return events[0].epoch + 1 if events else None


def print_summary(summary: Dict[str, Any]) -> None:
    print("\n" + "=" * 60)
    print("SIMULATION RESULTS")
    print("=" * 60)
    print(f"Records: {summary['records']} over {summary['epochs']} epochs, {summary['sync_rounds']} sync rounds")
    print(f"Max staleness (epochs): local {summary['max_local_staleness_epochs']:.2f}, "
          f"global {summary['max_global_staleness_epochs']:.2f}")
    if "reshard_events" in summary:
        print(f"\nRe-shards: {summary['reshard_events']} ({', '.join(summary['reshard_reasons']) or 'none'})")
        print(f"Mean imbalance: closed-loop {summary['mean_imbalance_closed_loop']:.3f} | "
              f"static {summary['mean_imbalance_static']:.3f} | hash {summary['mean_imbalance_hash']:.3f}")
    if "hit_rate_telemetry" in summary:
        print(f"\nCache hit rate: telemetry {summary['hit_rate_telemetry']:.3f} | frozen {summary['hit_rate_frozen']:.3f}"
              f" | LRU {summary['hit_rate_lru']:.3f} | clairvoyant {summary['hit_rate_clairvoyant']:.3f}")
    print("=" * 60 + "\n")


def replay(config: "RunConfig", stream: Optional[Iterable[RecordBatch]] = None) -> ExperimentTrace:
    logging.info("replaying %d records over %d switches", config.workload.records, config.topology.switches)
    return Experiment(config).run(stream)
