"""Northbound telemetry interface for network services.

A service declares the attributes it wants telemetry on (name, domain,
metrics) and a timing requirement, then registers a buffer and a callback.
Tight subscriptions are answered by every local controller, Loose ones by the
central controller.
"""

from __future__ import annotations

import itertools
import logging
from collections import deque
from dataclasses import dataclass, replace
from enum import Enum
from typing import Callable, Deque, Dict, List, Optional, Sequence, Tuple

from control_plane import EstimateSet, MetricKind, MetricPlan, LOCAL, GLOBAL
from dataplane import DimensionConfig


class CapacityError(ValueError):
    """More attributes across all subscriptions than the data plane can sketch."""


class UnknownMetricError(ValueError):
    pass


class SubscriptionError(LookupError):
    pass


class Timing(str, Enum):
    TIGHT = "tight"
    LOOSE = "loose"


@dataclass(frozen=True)
class AttributeSpec:
    name: str
    low: float
    high: float
    metrics: Tuple[MetricKind, ...] = ()
    scale: str = "linear"

    def __post_init__(self):
        if not self.low < self.high:
            raise ValueError(f"attribute {self.name!r}: domain must satisfy min < max")
        if self.scale == "log" and self.low <= 0:
            raise ValueError(f"attribute {self.name!r}: log scale needs min > 0")

    @property
    def dimension(self) -> DimensionConfig:
        return DimensionConfig(self.name, self.low, self.high, self.scale)


def parse_metrics(names: Sequence) -> Tuple[MetricKind, ...]:
    out = []
    for name in names:
        try:
            out.append(MetricKind(name))
        except ValueError:
            raise UnknownMetricError(f"unknown metric {name!r}; known: {[m.value for m in MetricKind]}") from None
    return tuple(out)


class EstimateBuffer:
    """Bounded ring buffer of delivered estimate sets; oldest are overwritten."""

    def __init__(self, capacity: int = 64):
        if capacity < 1:
            raise ValueError("buffer capacity must be >= 1")
        self.capacity = capacity
        self._items: Deque[EstimateSet] = deque(maxlen=capacity)
        self.appended = 0
        self.overwritten = 0

    def append(self, est: EstimateSet) -> None:
        if len(self._items) == self.capacity:
            self.overwritten += 1
        self._items.append(est)
        self.appended += 1

    def latest(self) -> Optional[EstimateSet]:
        return self._items[-1] if self._items else None

    def items(self) -> List[EstimateSet]:
        return list(self._items)

    def __len__(self):
        return len(self._items)


@dataclass
class Subscription:
    id: int
    attributes: Tuple[AttributeSpec, ...]
    timing: Timing
    hh_threshold: float
    buffer: Optional[EstimateBuffer] = None
    callback: Optional[Callable[[EstimateSet], None]] = None
    pending: Optional[Tuple[Tuple[AttributeSpec, ...], Timing, float]] = None
    delivered: int = 0

    @property
    def placement(self) -> str:
        return LOCAL if self.timing is Timing.TIGHT else GLOBAL

    def pairs(self) -> List[Tuple[str, str]]:
        return [(a.name, m.value) for a in self.attributes for m in a.metrics]


class NorthboundAPI:
    """set_attributes / get_estimates on top of the controller hierarchy.

    `targets` are objects with a configure(dimensions) method (the data
    planes); `controllers` expose a writable `plan`.
    """

    def __init__(self, capacity: int, targets: Sequence = (), controllers: Sequence = (),
                 hh_threshold: float = 0.01, quantiles: Tuple[float, ...] = (0.5, 0.9, 0.99)):
        self.capacity = capacity
        self.targets = list(targets)
        self.controllers = list(controllers)
        self.hh_threshold = hh_threshold
        self.quantiles = tuple(quantiles)
        self.subscriptions: Dict[int, Subscription] = {}
        self._ids = itertools.count(1)

    def set_attributes(self, attribute_list: Sequence[AttributeSpec], estimate_list: Sequence = (),
                       timing=Timing.LOOSE, subscription: Optional[Subscription] = None,
                       hh_threshold: Optional[float] = None) -> Subscription:
        """Register (or reconfigure) a subscription.

        Attributes without their own metrics get `estimate_list`. A
        reconfiguration takes effect at the next epoch boundary.
        """
        timing = Timing(timing)
        default_metrics = parse_metrics(estimate_list)
        specs = []
        for attr in attribute_list:
            metrics = parse_metrics(attr.metrics) if attr.metrics else default_metrics
            if not metrics:
                raise ValueError(f"attribute {attr.name!r} has no metrics to estimate")
            specs.append(AttributeSpec(attr.name, attr.low, attr.high, metrics, attr.scale))
        specs = tuple(specs)
        threshold = self.hh_threshold if hh_threshold is None else hh_threshold

        others = [s for s in self.subscriptions.values() if subscription is None or s.id != subscription.id]
        self._check_capacity([a for s in others for a in self._next(s)] + list(specs))

        if subscription is None:
            sub = Subscription(next(self._ids), specs, timing, threshold)
            self.subscriptions[sub.id] = sub
            logging.info("subscription %d: %s %s", sub.id, timing.value, [a.name for a in specs])
        else:
            sub = self._get(subscription)
            sub.pending = (specs, timing, threshold)
            logging.info("subscription %d: reconfiguration staged for the next epoch", sub.id)
        self._push()
        return sub

    def get_estimates(self, subscription: Subscription, buffer: EstimateBuffer,
                      callback: Optional[Callable[[EstimateSet], None]] = None) -> None:
        sub = self._get(subscription)
        sub.buffer = buffer
        sub.callback = callback

    def deliver(self, est: EstimateSet) -> int:
        """Hand a freshly produced set to every subscription placed at its scope."""
        count = 0
        for sub in self.subscriptions.values():
            if sub.placement != est.scope or sub.buffer is None:
                continue
            view = _filter_heavy_hitters(est, sub.hh_threshold).project(sub.pairs())
            sub.buffer.append(view)
            sub.delivered += 1
            count += 1
            if sub.callback is not None:
                sub.callback(view)
        return count

    def apply_pending(self) -> None:
        """Epoch boundary: swap in staged reconfigurations."""
        changed = False
        for sub in self.subscriptions.values():
            if sub.pending is not None:
                sub.attributes, sub.timing, sub.hh_threshold = sub.pending
                sub.pending = None
                changed = True
        if changed:
            self._push()

    def plan_threshold(self) -> float:
        thresholds = [s.hh_threshold for s in self.subscriptions.values()]
        thresholds += [p[2] for p in (s.pending for s in self.subscriptions.values()) if p is not None]
        return min(thresholds, default=self.hh_threshold)

    def dimensions(self) -> List[DimensionConfig]:
        """Attributes the data planes sketch from the next epoch on, first-registered first."""
        seen: Dict[str, DimensionConfig] = {}
        for sub in self.subscriptions.values():
            for attr in self._next(sub):
                seen.setdefault(attr.name, attr.dimension)
        return list(seen.values())

    def plan(self) -> MetricPlan:
        metrics: Dict[str, List[MetricKind]] = {}
        for sub in self.subscriptions.values():
            for attr in self._effective(sub):
                kinds = metrics.setdefault(attr.name, [MetricKind.STREAM_LENGTH])
                kinds.extend(m for m in attr.metrics if m not in kinds)
        return MetricPlan({k: tuple(v) for k, v in metrics.items()}, self.plan_threshold(), self.quantiles)

    def _next(self, sub: Subscription) -> Tuple[AttributeSpec, ...]:
        return sub.attributes if sub.pending is None else sub.pending[0]

    def _effective(self, sub: Subscription) -> Tuple[AttributeSpec, ...]:
        # the closing epoch still answers the old attributes, the next one the staged ones
        if sub.pending is None:
            return sub.attributes
        names = {a.name for a in sub.pending[0]}
        return tuple(sub.pending[0]) + tuple(a for a in sub.attributes if a.name not in names)

    def _check_capacity(self, attributes: Sequence[AttributeSpec]) -> None:
        domains: Dict[str, DimensionConfig] = {}
        for attr in attributes:
            known = domains.setdefault(attr.name, attr.dimension)
            if known != attr.dimension:
                raise ValueError(f"attribute {attr.name!r} requested with two different domains")
        if len(domains) > self.capacity:
            raise CapacityError(f"{len(domains)} attributes requested, data plane capacity is {self.capacity}")

    def _push(self) -> None:
        dims = self.dimensions()
        for target in self.targets:
            target.configure(dims)
        plan = self.plan()
        for controller in self.controllers:
            controller.plan = plan

    def _get(self, subscription: Subscription) -> Subscription:
        sub = self.subscriptions.get(subscription.id)
        if sub is None:
            raise SubscriptionError(f"unknown subscription {subscription.id}")
        return sub


def _filter_heavy_hitters(est: EstimateSet, threshold: float) -> EstimateSet:
    entries = dict(est.entries)
    for (dim, metric), value in est.entries.items():
        if metric != MetricKind.HEAVY_HITTERS.value or not isinstance(value, tuple):
            continue
        m = est.entries.get((dim, MetricKind.STREAM_LENGTH.value))
        if isinstance(m, float):
            entries[(dim, metric)] = tuple((k, e) for k, e in value if e >= threshold * m)
    return replace(est, entries=entries)
