import os
import sys

import pytest

TEST_DIR = os.path.dirname(__file__)
PROJECT_ROOT = os.path.normpath(os.path.join(TEST_DIR, os.pardir))
if PROJECT_ROOT not in sys.path:
    sys.path.insert(0, PROJECT_ROOT)

from settings import ConfigError, RunConfig, derive_seed, load_config

MINIMAL = """\
attributes:
- name: cell
services:
  reshard: {enabled: false}
workload:
  records: 100
  dimensions:
  - name: cell
    distribution: zipf
    min: 0
    max: 65536
"""


def write(tmp_path, text):
    path = tmp_path / "run.yaml"
    path.write_text(text, encoding="utf-8")
    return str(path)


def error_of(path, **kwargs):
    with pytest.raises(ConfigError) as info:
        load_config(path, **kwargs)
    return info.value


def test_reference_config_loads():
    cfg = load_config(os.path.join(PROJECT_ROOT, "config.yaml"))
    assert cfg.seed == 7
    assert cfg.node_count == 8
    cell = cfg.schedule_of("cell")
    assert (cell.low, cell.high) == (0.0, 65536.0)
    assert cfg.schedule_of("energy").scale == "log"
    assert cfg.sketched_dimensions() == ["cell", "energy", "temperature"]
    assert cfg.geometry().dimensions == 3


def test_minimal_config_uses_defaults(tmp_path):
    cfg = load_config(write(tmp_path, MINIMAL), seed=1)
    assert cfg.workload.records == 100
    assert cfg.sketch.columns == 2048
    assert cfg.attributes[0].metrics == ["entropy", "cardinality", "heavy_hitters", "quantiles"]
    assert cfg.services.cache.dimension == "cell"


def test_workload_block_is_required(tmp_path):
    err = error_of(write(tmp_path, "seed: 1\n"))
    assert err.field == "workload"


def test_errors_name_field_and_line(tmp_path):
    err = error_of(write(tmp_path, "timing:\n  epoch_records: 10\n  sync_period: 0\n" + MINIMAL))
    assert err.field == "timing.sync_period"
    assert err.line == 3

    err = error_of(write(tmp_path, MINIMAL + "sketch:\n  colums: 10\n"))
    assert err.field == "sketch.colums"
    assert err.line == 13

    err = error_of(write(tmp_path, MINIMAL.replace("distribution: zipf", "distribution: pareto")))
    assert err.field == "workload.dimensions[0]"
    assert err.line == 8


def test_invalid_yaml_reports_a_line(tmp_path):
    err = error_of(write(tmp_path, "workload:\n  records: [1, 2\n"))
    assert err.field == "config"
    assert err.line is not None


def test_capacity_error_for_too_few_sketch_dimensions(tmp_path):
    with open(os.path.join(PROJECT_ROOT, "config.yaml"), encoding="utf-8") as f:
        text = f.read().replace("  dimensions: 3\n", "  dimensions: 2\n")
    err = error_of(write(tmp_path, text))
    assert err.field == "sketch.dimensions"
    assert err.line == 11

    cfg = RunConfig()
    cfg.sketch.dimensions = 2
    with pytest.raises(ConfigError) as info:
        cfg.validate()
    assert info.value.field == "sketch.dimensions"


def test_seed_precedence(tmp_path, monkeypatch):
    path = write(tmp_path, MINIMAL)
    monkeypatch.setenv("TELEMETRY_SEED", "42")
    assert load_config(path).seed == 42
    assert load_config(path, seed=9).seed == 9
    assert load_config(write(tmp_path, "seed: 3\n" + MINIMAL)).seed == 3
    monkeypatch.delenv("TELEMETRY_SEED")
    assert load_config(path).seed == 0


def test_derive_seed_is_stable_and_named():
    a = derive_seed(7, "workload")
    assert a == derive_seed(7, "workload")
    assert 0 <= a < 2 ** 64
    assert a != derive_seed(7, "sketch")
    assert a != derive_seed(8, "workload")
