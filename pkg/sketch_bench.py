"""Sketch microbenchmark: merged vs separate sketches, sampled vs unsampled.

For every sampling probability the same skewed multi-dimension stream is fed
to (a) one MergedUnivSketch and (b) D standalone UnivSketches whose columns
add up to the merged width. Reported per configuration: memory, hash
invocations, counter updates, sampling draws and errors against exact counts.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Dict, List, Sequence, Tuple

import numpy as np
import pandas as pd

from sketch_core import MergedUnivSketch, SketchGeometry, UnivSketch, UpdateCounters, dim_salt, splitmix64

CHUNK = 10_000


@dataclass(frozen=True)
class BenchDimension:
    universe: int
    zipf_s: float
    share: float    # fraction of records carrying this dimension


@dataclass(frozen=True)
class BenchSpec:
    dimensions: Tuple[BenchDimension, ...]
    records: int = 200_000
    seed: int = 0
    probabilities: Tuple[float, ...] = (1.0, 0.5, 0.1)
    hh_threshold: float = 0.01


def skew_mix(dimensions: int = 4, records: int = 200_000, seed: int = 0) -> BenchSpec:
    """One heavy dimension over 10^4 keys, the rest light (a tenth of the volume) over 10^3 keys."""
    dims = [BenchDimension(10_000, 1.1, 1.0)]
    dims += [BenchDimension(1_000, 1.1, 0.1) for _ in range(dimensions - 1)]
    return BenchSpec(tuple(dims), records, seed)


def make_stream(spec: BenchSpec) -> Tuple[np.ndarray, np.ndarray]:
    """Keys (n, D) uint64 plus a presence mask (n, D)."""
    rng = np.random.default_rng(spec.seed)
    n = spec.records
    keys = np.zeros((n, len(spec.dimensions)), dtype=np.uint64)
    present = np.zeros((n, len(spec.dimensions)), dtype=bool)
    for i, dim in enumerate(spec.dimensions):
        cdf = np.cumsum(np.arange(1, dim.universe + 1, dtype=np.float64) ** -dim.zipf_s)
        cdf /= cdf[-1]
        keys[:, i] = np.minimum(np.searchsorted(cdf, rng.random(n), side="right"), dim.universe - 1)
        present[:, i] = rng.random(n) < dim.share
    return keys, present


def separate_geometry(geometry: SketchGeometry, dimensions: int) -> SketchGeometry:
    """Per-dimension geometry with columns w / D (rounded down to a power of two)."""
    columns = max(2, 1 << int(math.floor(math.log2(geometry.columns / dimensions))))
    return SketchGeometry(geometry.rows, columns, geometry.levels, 1, geometry.hh_capacity, geometry.seed)


def _errors(estimate, keys: np.ndarray, present: np.ndarray, hh_threshold: float) -> Dict[str, float]:
    """Pooled and per-dimension frequency errors; `estimate(dim, keys)` returns estimates."""
    abs_errors: List[np.ndarray] = []
    heavy_errors: List[np.ndarray] = []
    out: Dict[str, float] = {}
    for dim in range(keys.shape[1]):
        counts = pd.Series(keys[present[:, dim], dim]).value_counts()
        if counts.empty:
            continue
        uniq = counts.index.to_numpy(dtype=np.uint64)
        exact = counts.to_numpy(dtype=np.float64)
        err = np.abs(estimate(dim, uniq) - exact)
        abs_errors.append(err)
        heavy = exact >= hh_threshold * exact.sum()
        heavy_errors.append(err[heavy])
        out[f"freq_mae_dim{dim}"] = float(err.mean())
    out["freq_mae"] = float(np.concatenate(abs_errors).mean()) if abs_errors else 0.0
    pooled = np.concatenate(heavy_errors) if heavy_errors else np.zeros(0)
    out["hh_mae"] = float(pooled.mean()) if pooled.size else 0.0
    return out


def _entropy_errors(entropy_of, keys: np.ndarray, present: np.ndarray) -> float:
    rel = []
    for dim in range(keys.shape[1]):
        counts = pd.Series(keys[present[:, dim], dim]).value_counts().to_numpy(dtype=np.float64)
        if counts.size == 0:
            continue
        p = counts / counts.sum()
        exact = float(-(p * np.log2(p)).sum())
        if exact > 0:
            rel.append(abs(entropy_of(dim) - exact) / exact)
    return float(np.mean(rel)) if rel else 0.0


def bench_merged(geometry: SketchGeometry, keys: np.ndarray, present: np.ndarray, probability: float,
                 sampling_seed: int, hh_threshold: float = 0.01) -> Dict[str, float]:
    g = SketchGeometry(geometry.rows, geometry.columns, geometry.levels, keys.shape[1], geometry.hh_capacity,
                       geometry.seed)
    sk = MergedUnivSketch(g, probability, sampling_seed=sampling_seed)
    for start in range(0, keys.shape[0], CHUNK):
        sk.update_records(keys[start:start + CHUNK], present[start:start + CHUNK])
    row = {"mode": "merged", "p": probability, "memory_bytes": g.memory_bytes(),
           "hash_invocations": sk.counters.hash_invocations, "counter_updates": sk.counters.counter_updates,
           "sampling_draws": sk.sampling.draws}
    row.update(_errors(lambda d, k: sk.estimate_batch(d, k).astype(np.float64), keys, present, hh_threshold))
    row["entropy_rel_err"] = _entropy_errors(sk.entropy, keys, present)
    return row


def bench_separate(geometry: SketchGeometry, keys: np.ndarray, present: np.ndarray, probability: float,
                   sampling_seeds: Sequence[int], hh_threshold: float = 0.01) -> Dict[str, float]:
    dims = keys.shape[1]
    g = separate_geometry(geometry, dims)
    sketches = [UnivSketch(g, dim_salt(d), probability, sampling_seed=sampling_seeds[d]) for d in range(dims)]
    for start in range(0, keys.shape[0], CHUNK):
        block, mask = keys[start:start + CHUNK], present[start:start + CHUNK]
        for d, sk in enumerate(sketches):
            sk.update_batch(block[mask[:, d], d])
    counters = UpdateCounters()
    for sk in sketches:
        counters = counters.add(sk.counters)
    row = {"mode": "separate", "p": probability, "memory_bytes": dims * g.memory_bytes(),
           "hash_invocations": counters.hash_invocations, "counter_updates": counters.counter_updates,
           "sampling_draws": sum(sk.sampling.draws for sk in sketches)}

    def estimate(d, k):
        salted = np.asarray(k, dtype=np.uint64) ^ np.uint64(sketches[d].salt)
        return sketches[d].stack.estimates(0, salted).astype(np.float64)

    row.update(_errors(estimate, keys, present, hh_threshold))
    row["entropy_rel_err"] = _entropy_errors(lambda d: sketches[d].entropy(), keys, present)
    return row


def run_bench(geometry: SketchGeometry, spec: BenchSpec, sampling_seed: int = 0) -> pd.DataFrame:
    """cmd_sketch_bench body: one merged and one separate row per sampling probability."""
    keys, present = make_stream(spec)
    seeds = [splitmix64(sampling_seed + d) for d in range(keys.shape[1])]
    rows = []
    for p in spec.probabilities:
        rows.append(bench_merged(geometry, keys, present, p, seeds[0], spec.hh_threshold))
        rows.append(bench_separate(geometry, keys, present, p, seeds, spec.hh_threshold))
    return pd.DataFrame(rows)


def format_report(frame: pd.DataFrame) -> str:
    cols = ["mode", "p", "memory_bytes", "hash_invocations", "counter_updates", "freq_mae", "hh_mae",
            "entropy_rel_err"]
    return frame[cols].to_string(index=False, float_format=lambda v: f"{v:.4g}")
