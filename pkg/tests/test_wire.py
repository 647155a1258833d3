import os
import sys

import numpy as np
import pytest

TEST_DIR = os.path.dirname(__file__)
PROJECT_ROOT = os.path.normpath(os.path.join(TEST_DIR, os.pardir))
if PROJECT_ROOT not in sys.path:
    sys.path.insert(0, PROJECT_ROOT)

from control_plane import GLOBAL, Absent, EstimateSet, decode_estimate_set, encode_estimate_set
from dataplane import DimensionConfig, SwitchDataPlane
from sketch_core import DimHistogram, SketchGeometry
from wire import SNAPSHOT_UPLOAD, SyncMessage, WireFormatError, decode_snapshot, encode_snapshot
from workload import RecordBatch


def closed_snapshot():
    g = SketchGeometry(rows=3, columns=128, levels=5, dimensions=2, hh_capacity=8, seed=9)
    dp = SwitchDataPlane(3, [6, 7], g, probability=0.5, sampling_seed=1, epoch_length=500,
                         dimensions=[DimensionConfig("cell", 0.0, 65536.0), DimensionConfig("energy", 0.01, 1000.0, "log")])
    rng = np.random.default_rng(2)
    n = 500
    values = np.column_stack([rng.integers(0, 50, n).astype(np.float64), rng.lognormal(0.0, 1.5, n)])
    ts = np.arange(n, dtype=np.int64)
    dp.observe_batch(RecordBatch(0, ("cell", "energy"), np.zeros(n, dtype=np.uint64), ts, values, ts % 8))
    return dp.rotate_epoch()


def test_snapshot_survives_the_wire():
    snap = closed_snapshot()
    data = encode_snapshot(snap)
    back = decode_snapshot(data)
    assert back.switch_id == 3 and back.epoch == snap.epoch
    assert back.dimensions == ("cell", "energy")
    assert back.packets == 500 and back.drops == snap.drops
    assert back.sketch.geometry == snap.sketch.geometry
    assert back.sketch.m == snap.sketch.m
    for a, b in zip(back.sketch.tables, snap.sketch.tables):
        assert np.array_equal(a.counters, b.counters)
    assert back.sketch.trackers[1][0].items() == snap.sketch.trackers[1][0].items()
    assert np.array_equal(back.histograms["energy"].counts, snap.histograms["energy"].counts)
    assert encode_snapshot(back) == data


def test_corrupt_snapshots_are_rejected():
    data = encode_snapshot(closed_snapshot())
    with pytest.raises(WireFormatError):
        decode_snapshot(b"XXXX" + data[4:])
    with pytest.raises(WireFormatError):
        decode_snapshot(data[:-3])
    with pytest.raises(WireFormatError):
        decode_snapshot(data + b"\x00")


def test_sync_message_framing():
    msg = SyncMessage(SNAPSHOT_UPLOAD, b"payload", 2, 17)
    assert SyncMessage.decode(msg.encode()) == msg
    with pytest.raises(WireFormatError):
        SyncMessage.decode(msg.encode()[:-1])


def test_estimate_set_codec_keeps_every_value_kind():
    hist = DimHistogram(0.0, 10.0, 4)
    hist.update_batch([1.0, 2.0, 9.0])
    est = EstimateSet({
        ("cell", "entropy"): 3.25,
        ("cell", "heavy_hitters"): ((7, 120), (3, 99)),
        ("cell", "change"): Absent("no previous epoch"),
        ("energy", "quantiles"): ((0.5, 2.5), (0.9, 7.5)),
        ("energy", "histogram"): hist,
    }, GLOBAL, epoch=4, produced_at=2000, sync_round=4, degraded=True, stale_members=(1,))
    back = decode_estimate_set(encode_estimate_set(est))
    assert back.same_values(est)
    assert (back.scope, back.epoch, back.produced_at, back.sync_round) == (GLOBAL, 4, 2000, 4)
    assert back.degraded and back.stale_members == (1,)
