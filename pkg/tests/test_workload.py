import os
import sys
from dataclasses import replace

import numpy as np
import pytest

TEST_DIR = os.path.dirname(__file__)
PROJECT_ROOT = os.path.normpath(os.path.join(TEST_DIR, os.pardir))
if PROJECT_ROOT not in sys.path:
    sys.path.insert(0, PROJECT_ROOT)

from settings import (
    AttributeConfig, RunConfig, ServicesConfig, SketchConfig, TimingConfig, TopologyConfig, WorkloadConfig,
    reference_dimensions,
)
from workload import TRACE_COLUMNS, DimensionSchedule, DriftSchedule, Experiment, generate

# chi-squared critical value, 9 degrees of freedom, alpha = 0.01
CHI2_9_001 = 21.666


def small_config(records=12_000, epoch_records=300, sync_period=2, dims=None, seed=3):
    return RunConfig(
        seed=seed,
        topology=TopologyConfig(switches=2, nodes_per_switch=2),
        sketch=SketchConfig(columns=512, levels=10, hh_capacity=32),
        timing=TimingConfig(epoch_records=epoch_records, sync_period=sync_period),
        services=ServicesConfig(),
        workload=WorkloadConfig(records=records, entities=1000, dimensions=dims or reference_dimensions()),
    ).validate()


def test_generation_is_deterministic_and_round_robin():
    schedule = DriftSchedule(tuple(reference_dimensions()), seed=11, epoch_records=500)
    first = list(generate(schedule, 1200, 4))
    second = list(generate(schedule, 1200, 4))
    assert [len(b) for b in first] == [500, 500, 200]
    for a, b in zip(first, second):
        assert np.array_equal(a.values, b.values)
        assert np.array_equal(a.entity_ids, b.entity_ids)
    assert np.array_equal(first[1].sources, first[1].timestamps % 4)
    assert first[2].timestamps[0] == 1000


def test_stationary_schedule_keeps_its_distribution():
    dim = DimensionSchedule("energy", "lognormal", 0.01, 1000.0, scale="log", sigma=1.5)
    rng = np.random.default_rng(1)
    a = dim.sample(rng, 20_000, 0)
    b = dim.sample(rng, 20_000, 100)
    edges = np.quantile(np.concatenate([a, b]), np.linspace(0, 1, 11))
    edges[0], edges[-1] = -np.inf, np.inf
    ca, _ = np.histogram(a, edges)
    cb, _ = np.histogram(b, edges)
    chi2 = float((np.square(ca - cb) / (ca + cb)).sum())
    assert chi2 < CHI2_9_001
    assert abs(np.log(a).mean() - 0.0) < 5 * 1.5 / np.sqrt(a.size)


def test_shift_moves_keys_by_delta():
    dim = DimensionSchedule("cell", "zipf", 0.0, 65536.0, universe=1000, drift="shift", shift_epoch=3, delta=5000.0)
    rng = np.random.default_rng(2)
    before, after = dim.sample(rng, 5000, 2), dim.sample(rng, 5000, 3)
    assert before.max() < 1000
    assert after.min() >= 5000
    assert abs((after.mean() - before.mean()) - 5000.0) < 100.0


def test_concentration_narrows_energy():
    dim = reference_dimensions()[1]
    rng = np.random.default_rng(3)
    early = np.log(dim.sample(rng, 20_000, 0)).std()
    late = np.log(dim.sample(rng, 20_000, 100)).std()
    assert late < 0.6 * early
    assert dim.params(100)["sigma"] == pytest.approx(1.5 * np.exp(-1.0))


def test_mixture_ramp_raises_second_component():
    dim = reference_dimensions()[2]
    assert dim.params(0)["weight"] == pytest.approx(0.2)
    assert dim.params(100)["weight"] == pytest.approx(0.4)
    assert dim.params(10_000)["weight"] == 1.0


def test_schedule_validation():
    with pytest.raises(ValueError):
        DimensionSchedule("x", "pareto", 0.0, 1.0)
    with pytest.raises(ValueError):
        DimensionSchedule("x", "lognormal", 0.0, 1.0, scale="log")
    with pytest.raises(ValueError):
        DimensionSchedule("x", "zipf", 0.0, 1.0, drift="teleport")


def test_small_replay_produces_a_complete_trace():
    config = small_config()
    trace = Experiment(config).run()
    frame = trace.frame()
    assert list(frame.columns) == TRACE_COLUMNS
    assert {"local", "global", "load", "cache", "staleness", "service"} <= set(frame["scope"])
    assert trace.summary["records"] == 12_000
    assert trace.summary["epochs"] == 20
    assert trace.summary["sync_rounds"] == 10
    assert trace.summary["degraded_rounds"] == 0
    assert trace.summary["reshard_events"] >= 1

    packets = frame[(frame["scope"] == "local") & (frame["metric"] == "packets")]
    assert packets.groupby("epoch")["value"].sum().eq(600).all()
    # Tight within one local epoch, Loose within one sync period plus one epoch
    assert trace.summary["max_local_staleness_epochs"] <= 1.0
    assert trace.summary["max_global_staleness_epochs"] <= config.timing.sync_period + 1


def test_replay_is_deterministic():
    config = small_config(records=3000)
    a = Experiment(config).run().frame()
    b = Experiment(config).run().frame()
    assert a.equals(b)


def test_download_delay_shows_up_as_staleness():
    config = small_config(records=6000)
    config.timing.sync_delay = 150
    experiment = Experiment(config)
    trace = experiment.run()
    assert trace.summary["max_global_staleness_epochs"] <= config.timing.sync_period + 1
    assert experiment.locals[0].global_received_at is not None


def test_closed_loop_beats_static_map_under_concentration():
    dims = reference_dimensions()
    dims[1] = replace(dims[1], rate=0.04)
    config = small_config(records=60_000, epoch_records=500, sync_period=1, dims=dims)
    trace = Experiment(config).run()
    summary = trace.summary
    assert "imbalance" in summary["reshard_reasons"]
    assert summary["mean_imbalance_closed_loop"] < summary["mean_imbalance_static"]


def test_cache_recovers_after_key_shift():
    dims = reference_dimensions()
    dims[0] = replace(dims[0], shift_epoch=10)
    config = small_config(records=24_000, epoch_records=500, sync_period=1, dims=dims)
    experiment = Experiment(config)
    experiment.run()

    def after(name):
        return np.mean([r for e, r in experiment.cache_hits[name] if e >= 13])

    assert after("telemetry") > 0.2
    assert after("telemetry") >= 1.5 * after("frozen")


def test_key_shift_spikes_change_score_and_triggers_a_change_reshard():
    dims = reference_dimensions()
    dims[0] = replace(dims[0], shift_epoch=10)
    dims[1] = replace(dims[1], drift="none")
    config = small_config(records=84_000, epoch_records=3000, sync_period=1, dims=dims)
    config.attributes = [AttributeConfig("cell", ["change"], "loose")]
    experiment = Experiment(config)
    frame = experiment.run().frame()

    scores = frame[(frame["scope"] == "global") & (frame["metric"] == "change")].set_index("epoch")["value"]
    assert scores.index.min() == 1 and scores.index.max() == 13
    assert scores[10] >= 5 * np.median(scores.loc[5:9])

    events = experiment.reshard.events
    assert events[0].reason == "bootstrap"
    window = config.services.reshard.window
    assert any(e.reason == "change" and 10 <= e.epoch <= 10 + config.timing.sync_period + 1 for e in events)
    assert all(b.epoch - a.epoch >= window for a, b in zip(events, events[1:]))


def test_telemetry_cache_tracks_clairvoyant_on_stationary_keys():
    config = small_config(records=60_000, epoch_records=2500, sync_period=1)
    config.sketch.columns = 2048
    config.sketch.hh_capacity = 64
    experiment = Experiment(config.validate())
    experiment.run()

    def mean_rate(name):
        return np.mean([r for e, r in experiment.cache_hits[name] if e >= 1])

    assert mean_rate("clairvoyant") > 0.4
    assert mean_rate("clairvoyant") - mean_rate("telemetry") <= 0.10
