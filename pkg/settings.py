"""Run configuration: YAML file + environment overrides + dataclass defaults.

Every field has a default except the `workload` block, which a config file
must carry. Randomness is derived from the single `seed` through named
sub-seeds (workload, sketch, sampling).
"""

from __future__ import annotations

import dataclasses
import hashlib
import os
from dataclasses import dataclass, field
from typing import Any, Dict, List, Optional

import yaml
from dotenv import load_dotenv

from sketch_core import GeometryError, SketchGeometry
from workload import DimensionSchedule, DriftSchedule

load_dotenv()

METRIC_NAMES = ("entropy", "cardinality", "heavy_hitters", "change", "quantiles", "histogram", "stream_length")


class ConfigError(ValueError):
    def __init__(self, field_name: str, message: str, line: Optional[int] = None):
        self.field = field_name
        self.message = message
        self.line = line
        where = f" (line {line})" if line else ""
        super().__init__(f"{field_name}: {message}{where}")


def derive_seed(seed: int, name: str) -> int:
    """64-bit sub-seed for one named component."""
    digest = hashlib.blake2b(f"{name}:{seed}".encode("utf-8"), digest_size=8).digest()
    return int.from_bytes(digest, "little")


@dataclass
class TopologyConfig:
    switches: int = 4
    nodes_per_switch: int = 2


@dataclass
class SketchConfig:
    rows: int = 5
    columns: int = 2048
    levels: int = 16
    dimensions: int = 3
    hh_capacity: int = 64
    sampling: float = 1.0
    histogram_buckets: int = 256


@dataclass
class TimingConfig:
    epoch_records: int = 1000   # per switch
    sync_period: int = 1        # epochs between sync rounds
    sync_delay: int = 0         # simulated time units for a download


@dataclass
class AttributeConfig:
    name: str = ""
    metrics: List[str] = field(default_factory=lambda: ["entropy", "cardinality", "heavy_hitters", "quantiles"])
    timing: str = "both"


@dataclass
class MetricsConfig:
    hh_threshold: float = 0.01
    quantiles: List[float] = field(default_factory=lambda: [0.5, 0.9, 0.99])
    buffer_capacity: int = 64


@dataclass
class ReshardConfig:
    enabled: bool = True
    dimension: str = "energy"
    window: int = 5
    imbalance_threshold: float = 1.3
    change_factor: float = 5.0


@dataclass
class CacheConfig:
    enabled: bool = True
    dimension: str = "cell"
    capacity: int = 64
    hh_threshold: float = 0.0005


@dataclass
class ServicesConfig:
    reshard: ReshardConfig = field(default_factory=ReshardConfig)
    cache: CacheConfig = field(default_factory=CacheConfig)


@dataclass
class WorkloadConfig:
    records: int = 1_000_000
    entities: int = 100_000
    dimensions: List[DimensionSchedule] = field(default_factory=list)


def reference_dimensions() -> List[DimensionSchedule]:
    """Reference scenario: heavy-tailed cell ids, drifting energy, mixed temperature."""
    return [
        DimensionSchedule("cell", "zipf", 0.0, 65536.0, zipf_s=1.1, universe=10_000,
                          drift="shift", shift_epoch=150, delta=5000.0),
        DimensionSchedule("energy", "lognormal", 0.01, 1000.0, scale="log", mu=0.0, sigma=1.5,
                          drift="concentration", rate=0.01),
        DimensionSchedule("temperature", "mixture", 0.0, 100.0, mu=3.0, sigma=0.3, mu2=4.0, sigma2=0.2,
                          mix_weight=0.2, drift="ramp", rate=0.002),
    ]


@dataclass
class RunConfig:
    seed: int = 0
    output_dir: str = "out"
    topology: TopologyConfig = field(default_factory=TopologyConfig)
    sketch: SketchConfig = field(default_factory=SketchConfig)
    timing: TimingConfig = field(default_factory=TimingConfig)
    attributes: List[AttributeConfig] = field(default_factory=lambda: [
        AttributeConfig("cell"), AttributeConfig("energy"), AttributeConfig("temperature")])
    metrics: MetricsConfig = field(default_factory=MetricsConfig)
    services: ServicesConfig = field(default_factory=ServicesConfig)
    workload: WorkloadConfig = field(default_factory=lambda: WorkloadConfig(dimensions=reference_dimensions()))

    @property
    def node_count(self) -> int:
        return self.topology.switches * self.topology.nodes_per_switch

    @property
    def global_epoch_records(self) -> int:
        return self.timing.epoch_records * self.topology.switches

    def geometry(self) -> SketchGeometry:
        s = self.sketch
        return SketchGeometry(s.rows, s.columns, s.levels, s.dimensions, s.hh_capacity,
                              derive_seed(self.seed, "sketch"))

    def drift_schedule(self) -> DriftSchedule:
        return DriftSchedule(tuple(self.workload.dimensions), derive_seed(self.seed, "workload"),
                             self.global_epoch_records, self.workload.entities)

    def schedule_of(self, name: str) -> DimensionSchedule:
        for dim in self.workload.dimensions:
            if dim.name == name:
                return dim
        raise KeyError(name)

    def sketched_dimensions(self) -> List[str]:
        names = [a.name for a in self.attributes]
        if self.services.reshard.enabled:
            names.append(self.services.reshard.dimension)
        if self.services.cache.enabled:
            names.append(self.services.cache.dimension)
        return list(dict.fromkeys(names))

    def to_dict(self) -> Dict[str, Any]:
        return dataclasses.asdict(self)

    def validate(self, lines: Optional[Dict[str, int]] = None) -> "RunConfig":
        lines = lines or {}

        def fail(name, message):
            raise ConfigError(name, message, lines.get(name))

        if not 0 <= self.seed < 2 ** 64:
            fail("seed", "must be an unsigned 64-bit integer")
        if self.topology.switches < 1 or self.topology.nodes_per_switch < 1:
            fail("topology", "switches and nodes_per_switch must be >= 1")
        try:
            self.geometry()
        except GeometryError as e:
            fail("sketch", str(e))
        if not 0.0 < self.sketch.sampling <= 1.0:
            fail("sketch.sampling", "must be in (0, 1]")
        if self.sketch.histogram_buckets < 1:
            fail("sketch.histogram_buckets", "must be >= 1")
        if self.timing.epoch_records < 1:
            fail("timing.epoch_records", "must be >= 1")
        if self.timing.sync_period < 1:
            fail("timing.sync_period", "must be >= 1")
        if self.timing.sync_delay < 0:
            fail("timing.sync_delay", "must be >= 0")
        if not 0.0 < self.metrics.hh_threshold < 1.0:
            fail("metrics.hh_threshold", "must be in (0, 1)")
        if any(not 0.0 <= q <= 1.0 for q in self.metrics.quantiles):
            fail("metrics.quantiles", "quantiles must be in [0, 1]")
        if self.workload.records < 0:
            fail("workload.records", "must be >= 0")
        if not self.workload.dimensions:
            fail("workload.dimensions", "at least one dimension is required")
        names = [d.name for d in self.workload.dimensions]
        if len(set(names)) != len(names):
            fail("workload.dimensions", "dimension names must be unique")
        for i, attr in enumerate(self.attributes):
            key = f"attributes[{i}]"
            if attr.name not in names:
                fail(key, f"attribute {attr.name!r} is not a workload dimension")
            if attr.timing not in ("tight", "loose", "both"):
                fail(key, f"timing must be tight, loose or both, got {attr.timing!r}")
            unknown = [m for m in attr.metrics if m not in METRIC_NAMES]
            if unknown or not attr.metrics:
                fail(key, f"unknown or empty metric list {attr.metrics}")
        reshard, cache = self.services.reshard, self.services.cache
        if reshard.enabled and reshard.dimension not in names:
            fail("services.reshard.dimension", f"{reshard.dimension!r} is not a workload dimension")
        if reshard.window < 1:
            fail("services.reshard.window", "must be >= 1")
        if cache.enabled and cache.dimension not in names:
            fail("services.cache.dimension", f"{cache.dimension!r} is not a workload dimension")
        if cache.capacity < 1:
            fail("services.cache.capacity", "must be >= 1")
        if len(self.sketched_dimensions()) > self.sketch.dimensions:
            fail("sketch.dimensions", f"{len(self.sketched_dimensions())} attributes requested, "
                                      f"capacity is {self.sketch.dimensions}")
        return self


# ============================================================
# Loading
# ============================================================

def _field_lines(text: str) -> Dict[str, int]:
    """Dotted field path -> 1-based line of its key in the YAML text."""
    lines: Dict[str, int] = {}

    def walk(node, prefix):
        if isinstance(node, yaml.MappingNode):
            for key_node, value_node in node.value:
                path = f"{prefix}.{key_node.value}" if prefix else str(key_node.value)
                lines[path] = key_node.start_mark.line + 1
                walk(value_node, path)
        elif isinstance(node, yaml.SequenceNode):
            for i, item in enumerate(node.value):
                path = f"{prefix}[{i}]"
                lines[path] = item.start_mark.line + 1
                walk(item, path)

    walk(yaml.compose(text), "")
    return lines


def _build(cls, raw: Any, path: str, lines: Dict[str, int]):
    if raw is None:
        return cls()
    if not isinstance(raw, dict):
        raise ConfigError(path, "expected a mapping", lines.get(path))
    known = {f.name: f for f in dataclasses.fields(cls)}
    values = {}
    for key, value in raw.items():
        name = f"{path}.{key}" if path else str(key)
        if key not in known:
            raise ConfigError(name, "unknown field", lines.get(name))
        values[key] = _coerce(value, _type_name(known[key]), name, lines)
    try:
        return cls(**values)
    except (TypeError, ValueError) as e:
        raise ConfigError(path, str(e), lines.get(path)) from None


def _type_name(f: dataclasses.Field) -> str:
    return f.type if isinstance(f.type, str) else getattr(f.type, "__name__", str(f.type))


def _coerce(value, kind: str, name, lines):
    try:
        if kind == "bool":
            if not isinstance(value, bool):
                raise ValueError(f"expected true/false, got {value!r}")
            return value
        if kind == "int":
            if isinstance(value, float) and not value.is_integer():
                raise ValueError(f"expected an integer, got {value!r}")
            return int(value)
        if kind == "float":
            return float(value)
        if kind.startswith("List"):
            if not isinstance(value, list):
                raise ValueError(f"expected a list, got {value!r}")
            return list(value)
        if kind == "str":
            return str(value)
    except (TypeError, ValueError) as e:
        raise ConfigError(name, str(e), lines.get(name)) from None
    return value


def _domain_keys(raw):
    """Workload dimensions spell their domain as min/max in YAML."""
    if not isinstance(raw, dict):
        return raw
    return {{"min": "low", "max": "high"}.get(k, k): v for k, v in raw.items()}


def config_from_dict(raw: Dict[str, Any], lines: Optional[Dict[str, int]] = None) -> RunConfig:
    lines = lines or {}
    known = {f.name for f in dataclasses.fields(RunConfig)}
    for key in raw:
        if key not in known:
            raise ConfigError(str(key), "unknown section", lines.get(str(key)))
    cfg = RunConfig()
    if "seed" in raw:
        cfg.seed = _coerce(raw["seed"], "int", "seed", lines)
    if "output_dir" in raw:
        cfg.output_dir = str(raw["output_dir"])
    cfg.topology = _build(TopologyConfig, raw.get("topology"), "topology", lines)
    cfg.sketch = _build(SketchConfig, raw.get("sketch"), "sketch", lines)
    cfg.timing = _build(TimingConfig, raw.get("timing"), "timing", lines)
    cfg.metrics = _build(MetricsConfig, raw.get("metrics"), "metrics", lines)
    services = raw.get("services") or {}
    cfg.services = ServicesConfig(
        _build(ReshardConfig, services.get("reshard"), "services.reshard", lines),
        _build(CacheConfig, services.get("cache"), "services.cache", lines),
    )
    if "attributes" in raw:
        items = raw["attributes"] or []
        cfg.attributes = [_build(AttributeConfig, item, f"attributes[{i}]", lines) for i, item in enumerate(items)]
    if "workload" in raw:
        block = dict(raw["workload"] or {})
        dims = block.pop("dimensions", None) or []
        cfg.workload = _build(WorkloadConfig, block, "workload", lines)
        cfg.workload.dimensions = [_build(DimensionSchedule, _domain_keys(d), f"workload.dimensions[{i}]", lines)
                                   for i, d in enumerate(dims)]
    return cfg


def load_config(path: Optional[str] = None, seed: Optional[int] = None, output_dir: Optional[str] = None) -> RunConfig:
    """Load, override and validate a RunConfig.

    Seed precedence: argument, config file, TELEMETRY_SEED, 0.
    """
    raw: Dict[str, Any] = {}
    lines: Dict[str, int] = {}
    if path is not None:
        try:
            with open(path, "r", encoding="utf-8") as f:
                text = f.read()
        except OSError as e:
            raise ConfigError("config", f"cannot read {path}: {e.strerror}") from None
        try:
            raw = yaml.safe_load(text) or {}
            lines = _field_lines(text)
        except yaml.YAMLError as e:
            mark = getattr(e, "problem_mark", None)
            raise ConfigError("config", f"invalid YAML: {getattr(e, 'problem', e)}",
                              mark.line + 1 if mark else None) from None
        if not isinstance(raw, dict):
            raise ConfigError("config", "top level must be a mapping", 1)
        if "workload" not in raw:
            raise ConfigError("workload", "required block missing")
    cfg = config_from_dict(raw, lines)
    if seed is not None:
        cfg.seed = seed
    elif "seed" not in raw and os.getenv("TELEMETRY_SEED"):
        cfg.seed = _coerce(os.getenv("TELEMETRY_SEED"), "int", "TELEMETRY_SEED", lines)
    if output_dir is not None:
        cfg.output_dir = output_dir
    elif "output_dir" not in raw and os.getenv("TELEMETRY_OUT"):
        cfg.output_dir = os.getenv("TELEMETRY_OUT")
    return cfg.validate(lines)
