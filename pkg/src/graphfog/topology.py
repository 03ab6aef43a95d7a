"""Arbitrary-graph physical topology: heterogeneous devices, weighted
bidirectional links, deterministic link delay, shortest-path routing, and
runtime topology events (device failure/recovery, link parameter changes).
"""

from __future__ import annotations

import json
from copy import deepcopy
from dataclasses import dataclass, field
from enum import Enum
from heapq import heappop, heappush
from math import inf
from typing import Iterable, Iterator

from .core import NS_PER_S, ms_to_ns
from .errors import (
    DanglingLink,
    DeviceDown,
    DuplicateId,
    LinkDown,
    NonPositiveBandwidth,
    UnknownSource,
    UnknownTarget,
    Unreachable,
)


class Architecture(str, Enum):
    CPU = "CPU"
    FPGA = "FPGA"
    GPU = "GPU"


class Status(str, Enum):
    UP = "UP"
    DOWN = "DOWN"


@dataclass
class Device:
    """A compute node. ``level`` is an informational tier tag that grows from
    the cloud (0) toward the edge; ``parallelism_degree`` is the number of
    tuples that may be in service concurrently, each at full per-tuple MIPS.
    """

    id: str
    mips: float
    ram_mb: float = 0.0
    architecture: Architecture = Architecture.CPU
    parallelism_degree: int = 1
    rate_per_mips: float = 0.0
    power_idle_w: float = 0.0
    power_busy_w: float = 0.0
    status: Status = Status.UP
    level: int = 0

    def __post_init__(self):
        if self.mips <= 0:
            raise ValueError(f"device {self.id!r}: mips must be positive")
        if self.parallelism_degree < 1:
            raise ValueError(f"device {self.id!r}: parallelism_degree must be >= 1")
        if not (self.power_busy_w >= self.power_idle_w >= 0):
            raise ValueError(f"device {self.id!r}: need power_busy >= power_idle >= 0")


@dataclass
class Link:
    """Bidirectional weighted edge; delay is identical in both directions.

    ``weight_km`` is the optional road distance used by scenario routing.
    """

    a: str
    b: str
    latency_ms: float
    bandwidth_bps: float
    weight_km: float | None = None
    status: Status = Status.UP

    def __post_init__(self):
        if self.latency_ms < 0:
            raise ValueError(f"link {self.a}-{self.b}: latency must be >= 0")
        if self.bandwidth_bps <= 0:
            raise NonPositiveBandwidth(f"link {self.a}-{self.b}: bandwidth must be > 0")

    @property
    def key(self) -> tuple[str, str]:
        return (self.a, self.b) if self.a <= self.b else (self.b, self.a)

    def other(self, device_id: str) -> str:
        return self.b if device_id == self.a else self.a


class PhysicalGraph:
    """Adjacency-list topology over registered devices.

    No self-loops; at most one link per device pair; every link endpoint must
    be a registered device.
    """

    def __init__(self):
        self.devices: dict[str, Device] = {}
        self._links: dict[tuple[str, str], Link] = {}
        self._adjacency: dict[str, list[Link]] = {}
        # Incremented on every mutation so routing caches can invalidate.
        self.epoch: int = 0

    def add_device(self, device: Device) -> None:
        if device.id in self.devices:
            raise DuplicateId(f"device id {device.id!r} already registered")
        self.devices[device.id] = device
        self._adjacency[device.id] = []
        self.epoch += 1

    def add_link(self, link: Link) -> None:
        if link.a == link.b:
            raise ValueError(f"self-loop on {link.a!r} not allowed")
        for end in (link.a, link.b):
            if end not in self.devices:
                raise DanglingLink(f"link endpoint {end!r} is not a registered device")
        if link.key in self._links:
            raise DuplicateId(f"duplicate link between {link.a!r} and {link.b!r}")
        self._links[link.key] = link
        self._adjacency[link.a].append(link)
        self._adjacency[link.b].append(link)
        self.epoch += 1

    def device(self, device_id: str) -> Device:
        try:
            return self.devices[device_id]
        except KeyError:
            raise UnknownTarget(f"unknown device {device_id!r}") from None

    def link_between(self, a: str, b: str) -> Link:
        key = (a, b) if a <= b else (b, a)
        try:
            return self._links[key]
        except KeyError:
            raise UnknownTarget(f"no link between {a!r} and {b!r}") from None

    def links(self) -> Iterator[Link]:
        return iter(self._links.values())

    def adjacent(self, device_id: str) -> list[Link]:
        return self._adjacency[device_id]

    def up_neighbors(self, device_id: str) -> Iterable[tuple[str, Link]]:
        """(neighbor, link) pairs usable under the current UP-subgraph."""
        for link in self._adjacency[device_id]:
            if link.status is not Status.UP:
                continue
            other = link.other(device_id)
            if self.devices[other].status is Status.UP:
                yield other, link

    @property
    def device_count(self) -> int:
        return len(self.devices)

    @property
    def link_count(self) -> int:
        return len(self._links)

    def snapshot(self) -> dict:
        """Canonical state snapshot (used by fail/recover bit-identity checks)."""
        return {
            "devices": {
                d.id: (d.mips, d.ram_mb, d.architecture.value, d.parallelism_degree,
                       d.rate_per_mips, d.power_idle_w, d.power_busy_w, d.status.value, d.level)
                for d in sorted(self.devices.values(), key=lambda d: d.id)
            },
            "links": {
                f"{k[0]}|{k[1]}": (l.latency_ms, l.bandwidth_bps, l.weight_km, l.status.value)
                for k, l in sorted(self._links.items())
            },
        }

    def copy(self) -> "PhysicalGraph":
        return deepcopy(self)


def build_graph(spec: dict) -> PhysicalGraph:
    """Build and validate a PhysicalGraph from a topology description.

    Expected shape::

        {"devices": [{"id", "mips", "ramMb", "architecture", "parallelismDegree",
                      "ratePerMips", "powerIdleW", "powerBusyW", "level"}],
         "links":   [{"a", "b", "latencyMs", "bandwidthBps", "weightKm"?}]}
    """
    graph = PhysicalGraph()
    for entry in spec.get("devices", []):
        arch = Architecture(entry.get("architecture", "CPU"))
        if "parallelismDegree" in entry:
            degree = int(entry["parallelismDegree"])
        else:
            # CPU devices default to strictly serial execution.
            degree = 1
        graph.add_device(Device(
            id=entry["id"],
            mips=float(entry["mips"]),
            ram_mb=float(entry.get("ramMb", 0.0)),
            architecture=arch,
            parallelism_degree=degree,
            rate_per_mips=float(entry.get("ratePerMips", 0.0)),
            power_idle_w=float(entry.get("powerIdleW", 0.0)),
            power_busy_w=float(entry.get("powerBusyW", 0.0)),
            level=int(entry.get("level", 0)),
        ))
    for entry in spec.get("links", []):
        graph.add_link(Link(
            a=entry["a"],
            b=entry["b"],
            latency_ms=float(entry["latencyMs"]),
            bandwidth_bps=float(entry["bandwidthBps"]),
            weight_km=float(entry["weightKm"]) if entry.get("weightKm") is not None else None,
        ))
    return graph


def load_topology(path) -> PhysicalGraph:
    with open(path, encoding="utf-8") as fh:
        return build_graph(json.load(fh))


def link_delay(file_size_bits: int, link: Link) -> int:
    """Transfer duration in ns: fileSize/bandwidth plus fixed propagation delay.

    Deterministic; rounding is half-up on the exact integer quotient so equal
    inputs always quantize identically.
    """
    if link.status is not Status.UP:
        raise LinkDown(f"link {link.a}-{link.b} is DOWN")
    return transmission_ns(file_size_bits, link.bandwidth_bps) + ms_to_ns(link.latency_ms)


def transmission_ns(file_size_bits: int, bandwidth_bps: float) -> int:
    if file_size_bits < 0:
        raise ValueError("file size must be non-negative")
    if float(bandwidth_bps).is_integer():
        q, r = divmod(file_size_bits * NS_PER_S, int(bandwidth_bps))
        return q + (1 if 2 * r >= int(bandwidth_bps) else 0)
    return round(file_size_bits / bandwidth_bps * NS_PER_S)


def compute_service_time(tuple_mi: float, device: Device) -> int:
    """Pure service duration in ns for a workload of ``tuple_mi`` on ``device``
    (t = MI / MIPS). Queueing, when the device is saturated, is handled by the
    runtime executor, not here.
    """
    if device.status is not Status.UP:
        raise DeviceDown(f"device {device.id!r} is DOWN")
    if tuple_mi < 0:
        raise ValueError("tuple MI must be non-negative")
    return round(tuple_mi / device.mips * NS_PER_S)


def _edge_weight(link: Link, weight_kind: str) -> float:
    if weight_kind == "distanceKm":
        if link.weight_km is None:
            return inf
        return link.weight_km
    if weight_kind == "latencyMs":
        return link.latency_ms
    raise ValueError(f"unknown weight kind {weight_kind!r}")


def _dijkstra(graph: PhysicalGraph, source: str, weight_kind: str):
    """Single-source shortest paths over the UP-subgraph.

    Returns ``(dist, pred)``. Ties at equal distance resolve toward the
    lexicographically smallest predecessor id, making paths deterministic.
    """
    if source not in graph.devices:
        raise UnknownSource(f"unknown source {source!r}")
    dist: dict[str, float] = {d: inf for d in graph.devices}
    pred: dict[str, str | None] = {d: None for d in graph.devices}
    if graph.devices[source].status is not Status.UP:
        return dist, pred
    dist[source] = 0.0
    heap: list[tuple[float, str]] = [(0.0, source)]
    done: set[str] = set()
    while heap:
        d_u, u = heappop(heap)
        if u in done:
            continue
        done.add(u)
        for v, link in graph.up_neighbors(u):
            w = _edge_weight(link, weight_kind)
            if w < 0:
                raise ValueError(f"negative weight on link {link.a}-{link.b}")
            alt = d_u + w
            if alt < dist[v]:
                dist[v] = alt
                pred[v] = u
                heappush(heap, (alt, v))
            elif alt == dist[v] and pred[v] is not None and u < pred[v]:
                pred[v] = u
    return dist, pred


def shortest_paths(graph: PhysicalGraph, source: str, weight_kind: str = "latencyMs") -> dict[str, float]:
    """Exact single-source shortest distances; unreachable nodes map to inf."""
    dist, _ = _dijkstra(graph, source, weight_kind)
    return dist


def route_next_hop(graph: PhysicalGraph, current: str, destination: str,
                   weight_kind: str = "latencyMs") -> str:
    """Next hop on the latency-weighted shortest path from current to
    destination, under the current UP-subgraph."""
    if current not in graph.devices:
        raise UnknownSource(f"unknown device {current!r}")
    if destination not in graph.devices:
        raise UnknownTarget(f"unknown device {destination!r}")
    if current == destination:
        return destination
    dist, pred = _dijkstra(graph, current, weight_kind)
    if dist[destination] == inf:
        raise Unreachable(f"no UP path from {current!r} to {destination!r}")
    node = destination
    while pred[node] != current:
        node = pred[node]
        assert node is not None
    return node


@dataclass(frozen=True)
class TopologyEvent:
    """A scheduled runtime mutation of the physical graph."""

    at: int  # ns
    action: str  # FAIL_DEVICE | RECOVER_DEVICE | SET_LINK_LATENCY | SET_LINK_BANDWIDTH
    args: dict = field(default_factory=dict)


ACTIONS = ("FAIL_DEVICE", "RECOVER_DEVICE", "SET_LINK_LATENCY", "SET_LINK_BANDWIDTH")


def apply_topology_event(event: TopologyEvent, graph: PhysicalGraph) -> None:
    """Apply one topology mutation in place.

    A DOWN device makes its incident links unusable via the UP-subgraph rule;
    link records themselves are untouched, so FAIL + RECOVER restores the
    exact pre-failure state. In-flight transmissions keep the parameters in
    force when they started (delays are computed at send time).
    """
    action = event.action
    if action == "FAIL_DEVICE":
        graph.device(event.args["id"]).status = Status.DOWN
    elif action == "RECOVER_DEVICE":
        graph.device(event.args["id"]).status = Status.UP
    elif action == "SET_LINK_LATENCY":
        link = graph.link_between(event.args["a"], event.args["b"])
        new = float(event.args["newMs"])
        if new < 0:
            raise ValueError("latency must be >= 0")
        link.latency_ms = new
    elif action == "SET_LINK_BANDWIDTH":
        link = graph.link_between(event.args["a"], event.args["b"])
        new = float(event.args["newBps"])
        if new <= 0:
            raise NonPositiveBandwidth("bandwidth must be > 0")
        link.bandwidth_bps = new
    else:
        raise ValueError(f"unknown topology action {action!r}")
    graph.epoch += 1


def load_fault_script(path) -> list[TopologyEvent]:
    """Parse an ordered fault script: ``[{"atMs", "action", ...args}]``."""
    with open(path, encoding="utf-8") as fh:
        raw = json.load(fh)
    events = []
    for entry in raw:
        action = entry["action"]
        if action not in ACTIONS:
            raise ValueError(f"unknown fault action {action!r}")
        args = {k: v for k, v in entry.items() if k not in ("atMs", "action")}
        events.append(TopologyEvent(at=ms_to_ns(entry["atMs"]), action=action, args=args))
    events.sort(key=lambda e: e.at)
    return events
