import math
import os
import sys

import numpy as np
import pandas as pd
import pytest

TEST_DIR = os.path.dirname(__file__)
PROJECT_ROOT = os.path.normpath(os.path.join(TEST_DIR, os.pardir))
if PROJECT_ROOT not in sys.path:
    sys.path.insert(0, PROJECT_ROOT)

from oracle import (
    change_l2, compare_traces, exact_counts, exact_entropy, exact_partition, exact_quantile, heavy_hitter_scores,
    load_trace, run_oracle,
)
from settings import RunConfig, SketchConfig, TimingConfig, TopologyConfig, WorkloadConfig, reference_dimensions
from sketch_core import DimHistogram
from workload import TRACE_COLUMNS, replay


def small_config(records=3000):
    return RunConfig(
        seed=5,
        topology=TopologyConfig(switches=2, nodes_per_switch=2),
        sketch=SketchConfig(columns=512, levels=10, hh_capacity=32),
        timing=TimingConfig(epoch_records=300, sync_period=1),
        workload=WorkloadConfig(records=records, entities=500, dimensions=reference_dimensions()),
    ).validate()


def test_exact_entropy():
    assert exact_entropy(exact_counts([7] * 10)) == 0.0
    assert exact_entropy(exact_counts([1, 2] * 50)) == pytest.approx(1.0)
    assert exact_entropy(exact_counts([])) == 0.0


def test_exact_quantile_rank_rule():
    values = np.arange(1, 11, dtype=np.float64)
    assert exact_quantile(values, 0.5) == 5.0
    assert exact_quantile(values, 0.0) == 1.0
    assert exact_quantile(values, 1.0) == 10.0
    assert math.isnan(exact_quantile([], 0.5))


def test_change_l2_over_dimensions():
    current = {"a": pd.Series({1: 3})}
    previous = {"a": pd.Series({1: 1, 2: 2}), "b": pd.Series({9: 1})}
    assert change_l2(current, previous) == pytest.approx(3.0)


def test_exact_partition():
    pmap = exact_partition(np.arange(100), [0, 1, 2, 3], "x", 0.0, 100.0)
    assert pmap.boundaries == (25.0, 50.0, 75.0)
    assert not pmap.degenerate

    flat = exact_partition(np.full(50, 5.0), [0, 1, 2, 3], "x", 0.0, 100.0)
    assert flat.boundaries == (5.0,)
    assert flat.node_ids == (0, 1)
    assert flat.degenerate


def test_empty_workload_gives_empty_traces():
    config = small_config(records=0)
    assert run_oracle(config).rows == []
    assert replay(config).rows == []


def test_oracle_matches_simulator_on_small_replay(tmp_path):
    config = small_config()
    sim_path, oracle_path = tmp_path / "trace.csv", tmp_path / "oracle.csv"
    replay(config).to_csv(str(sim_path))
    run_oracle(config).to_csv(str(oracle_path))
    sim, exact = load_trace(str(sim_path)), load_trace(str(oracle_path))
    assert list(exact.columns) == TRACE_COLUMNS

    joined = compare_traces(sim, exact)
    packets = joined[joined["metric"] == "packets"]
    assert len(packets) == 2 * 5
    assert (packets["abs_err"] == 0).all()
    lengths = joined[(joined["metric"] == "stream_length") & (joined["scope"] == "local")]
    assert len(lengths) and (lengths["abs_err"] == 0).all()

    quantiles = joined[joined["metric"].str.startswith("q")]
    assert len(quantiles)
    for row in quantiles.itertuples():
        dim = config.schedule_of(row.dimension)
        hist = DimHistogram(dim.low, dim.high, config.sketch.histogram_buckets, dim.scale)
        idx, _ = hist.bucket_of([row.value_sim, row.value_oracle])
        assert abs(int(idx[0]) - int(idx[1])) <= 1

    scores = heavy_hitter_scores(sim, exact)
    assert list(scores.columns) == ["epoch", "scope", "switch", "dimension", "precision", "recall"]
    assert scores["precision"].between(0, 1).all() and scores["recall"].between(0, 1).all()
    assert scores[scores["dimension"] == "cell"]["recall"].mean() >= 0.6


def test_simulator_within_accuracy_targets_when_trackers_hold_every_key():
    config = RunConfig(
        seed=9,
        topology=TopologyConfig(switches=2, nodes_per_switch=2),
        sketch=SketchConfig(columns=16384, levels=6, hh_capacity=2048),
        timing=TimingConfig(epoch_records=1000, sync_period=1),
        workload=WorkloadConfig(records=6000, entities=500, dimensions=reference_dimensions()),
    ).validate()
    sim, exact = replay(config).frame(), run_oracle(config).frame()
    joined = compare_traces(sim, exact)

    entropy = joined[joined["metric"] == "entropy"]
    cardinality = joined[joined["metric"] == "cardinality"]
    assert set(entropy["scope"]) == {"local", "global"}
    assert len(entropy) == 3 * 3 * 3 and len(cardinality) == 3 * 3 * 3
    assert (entropy["rel_err"] <= 0.10).all()
    assert (cardinality["rel_err"] <= 0.15).all()

    scores = heavy_hitter_scores(sim, exact)
    assert len(scores)
    assert scores["precision"].mean() >= 0.9 and scores["recall"].mean() >= 0.9
    cell = scores[scores["dimension"] == "cell"]
    assert cell["precision"].mean() >= 0.9 and cell["recall"].mean() >= 0.9
