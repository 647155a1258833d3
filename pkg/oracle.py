"""Exact hash-map oracle for the telemetry trace.

Replays the generated stream with exact counting, per switch and globally,
and writes the same CSV schema as the simulator so the two traces can be
joined on (epoch, scope, switch, dimension, metric).
"""

from __future__ import annotations

import logging
import math
from typing import TYPE_CHECKING, Dict, List, Optional, Sequence

import numpy as np
import pandas as pd

from control_plane import GLOBAL, LOCAL
from dataplane import quantize
from services import LoadLedger, PartitionMap
from wire import CENTRAL_SENDER
from workload import TRACE_COLUMNS, ExperimentTrace, RecordBatch, generate, split_by_switch

if TYPE_CHECKING:
    from settings import RunConfig

KEY = ["epoch", "scope", "switch", "dimension", "metric"]


def exact_counts(keys) -> pd.Series:
    return pd.Series(np.asarray(keys, dtype=np.uint64)).value_counts()


def exact_entropy(counts: pd.Series) -> float:
    m = counts.sum()
    if m <= 0:
        return 0.0
    p = counts.to_numpy(dtype=np.float64) / m
    return float(max(-(p * np.log2(p)).sum(), 0.0))


def exact_quantile(values, q: float) -> float:
    """Smallest value whose rank reaches max(q * n, 1)."""
    v = np.sort(np.asarray(values, dtype=np.float64))
    if v.size == 0:
        return float("nan")
    rank = max(int(math.ceil(q * v.size)), 1)
    return float(v[rank - 1])


def change_l2(current: Dict[str, pd.Series], previous: Dict[str, pd.Series]) -> float:
    """L2 norm of the frequency difference over all (dimension, key) pairs."""
    total = 0.0
    for name in set(current) | set(previous):
        a = current.get(name, pd.Series(dtype=np.int64))
        b = previous.get(name, pd.Series(dtype=np.int64))
        diff = a.sub(b, fill_value=0)
        total += float(np.square(diff.to_numpy(dtype=np.float64)).sum())
    return math.sqrt(total)


def exact_partition(values, node_ids: Sequence[int], dimension: str, low: float, high: float,
                    version: int = 1) -> PartitionMap:
    """Equi-depth map from the sorted data itself."""
    v = np.sort(np.clip(np.asarray(values, dtype=np.float64), low, high))
    n = len(node_ids)
    boundaries: List[float] = []
    for i in range(1, n):
        b = float(v[min(int(math.ceil(i * v.size / n)), v.size - 1)]) if v.size else high
        if low < b < high and (not boundaries or b > boundaries[-1]):
            boundaries.append(b)
    return PartitionMap(dimension, low, high, tuple(boundaries), tuple(node_ids)[: len(boundaries) + 1],
                        version, len(boundaries) + 1 < n)


class ExactTelemetry:
    """Exact counterpart of the simulator's estimate rows for one RunConfig."""

    def __init__(self, config: "RunConfig"):
        self.config = config
        self.sketched = config.sketched_dimensions()
        self.tight = [a for a in config.attributes if a.timing in ("tight", "both")]
        self.loose = [a for a in config.attributes if a.timing in ("loose", "both")]
        self.trace = ExperimentTrace()
        self.previous_local: Dict[int, Dict[str, pd.Series]] = {}
        self.previous_global: Optional[Dict[str, pd.Series]] = None
        self.static_map: Optional[PartitionMap] = None
        self.ledger = LoadLedger(range(config.node_count), "oracle_static")

    def run(self, stream: Optional[Sequence[RecordBatch]] = None) -> ExperimentTrace:
        cfg = self.config
        if stream is None:
            stream = generate(cfg.drift_schedule(), cfg.workload.records, cfg.node_count)
        for batch in stream:
            self._loads(batch)
            parts = split_by_switch(batch, cfg.topology.nodes_per_switch, cfg.topology.switches)
            for switch, part in parts.items():
                self.trace.add(batch.epoch, LOCAL, switch, "", "packets", len(part))
                self.trace.add(batch.epoch, LOCAL, switch, "", "drops", 0)
                counts = self._counts(part)
                self._emit(batch.epoch, LOCAL, switch, part, counts, self.previous_local.get(switch), self.tight)
                self.previous_local[switch] = counts
            if (batch.epoch + 1) % cfg.timing.sync_period == 0:
                counts = self._counts(batch)
                self._emit(batch.epoch, GLOBAL, CENTRAL_SENDER, batch, counts, self.previous_global, self.loose)
                self.previous_global = counts
                if self.static_map is None and cfg.services.reshard.enabled:
                    dim = cfg.schedule_of(cfg.services.reshard.dimension)
                    self.static_map = exact_partition(batch.column(dim.name), list(range(cfg.node_count)),
                                                      dim.name, dim.low, dim.high)
        logging.info("oracle trace: %d rows", len(self.trace.rows))
        return self.trace

    def _counts(self, part: RecordBatch) -> Dict[str, pd.Series]:
        out = {}
        for name in self.sketched:
            dim = self.config.schedule_of(name)
            out[name] = exact_counts(quantize(part.column(name), dim.low, dim.high))
        return out

    def _emit(self, epoch, scope, switch, part: RecordBatch, counts, previous, attributes) -> None:
        thr = self.config.metrics.hh_threshold
        change = change_l2(counts, previous) if previous is not None else None
        for attr in attributes:
            c = counts[attr.name]
            m = int(c.sum())
            rows = {"stream_length": float(m)}
            if "entropy" in attr.metrics and m > 0:
                rows["entropy"] = exact_entropy(c)
            if "cardinality" in attr.metrics:
                rows["cardinality"] = float(len(c))
            if "change" in attr.metrics and change is not None:
                rows["change"] = change
            if "histogram" in attr.metrics:
                rows["hist_total"] = float(m)
            if "quantiles" in attr.metrics and m > 0:
                values = part.column(attr.name)
                for q in self.config.metrics.quantiles:
                    rows[f"q{q:g}"] = exact_quantile(values, q)
            if "heavy_hitters" in attr.metrics:
                heavy = c[c >= thr * m] if m > 0 else c.iloc[:0]
                heavy = heavy.sort_index()
                rows["hh_count"] = float(len(heavy))
                for key, f in heavy.items():
                    rows[f"hh[{int(key)}]"] = float(f)
            for metric in sorted(rows):
                self.trace.add(epoch, scope, switch, attr.name, metric, rows[metric])

    def _loads(self, batch: RecordBatch) -> None:
        if self.static_map is None:
            return
        values = batch.column(self.static_map.dimension)
        counts = self.ledger.record(batch.epoch, self.static_map.route_batch(values))
        for node, count in zip(self.ledger.node_ids, counts.tolist()):
            self.trace.add(batch.epoch, "load", -1, self.static_map.dimension, f"static_node[{node}]", count)
        self.trace.add(batch.epoch, "load", -1, self.static_map.dimension, "static_imbalance", self.ledger.imbalance())


def run_oracle(config: "RunConfig", stream=None) -> ExperimentTrace:
    return ExactTelemetry(config).run(stream)


def compare_traces(sim: pd.DataFrame, oracle: pd.DataFrame) -> pd.DataFrame:
    """Join simulator and oracle rows; adds abs_err and rel_err columns."""
    merged = sim[KEY + ["value"]].merge(oracle[KEY + ["value"]], on=KEY, suffixes=("_sim", "_oracle"))
    merged["abs_err"] = (merged["value_sim"] - merged["value_oracle"]).abs()
    denom = merged["value_oracle"].abs().replace(0, np.nan)
    merged["rel_err"] = merged["abs_err"] / denom
    return merged


def heavy_hitter_scores(sim: pd.DataFrame, oracle: pd.DataFrame) -> pd.DataFrame:
    """Precision/recall of the reported heavy-hitter key sets per (epoch, scope, switch, dimension)."""
    group = ["epoch", "scope", "switch", "dimension"]

    def key_sets(frame):
        hh = frame[frame["metric"].str.startswith("hh[")]
        return hh.groupby(group)["metric"].apply(set)

    reported, exact = key_sets(sim), key_sets(oracle)
    rows = []
    for idx in exact.index.union(reported.index):
        r = reported.get(idx, set())
        e = exact.get(idx, set())
        hit = len(r & e)
        rows.append(idx + (hit / len(r) if r else 1.0, hit / len(e) if e else 1.0))
    return pd.DataFrame(rows, columns=group + ["precision", "recall"])


def load_trace(path: str) -> pd.DataFrame:
    # empty dimension strings stay strings; only an empty value is NaN
    return pd.read_csv(path, dtype={"scope": str, "dimension": str, "metric": str}, keep_default_na=False,
                       na_values={"value": [""]})[TRACE_COLUMNS]
