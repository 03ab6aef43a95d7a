"""Application DAG: tuples, stateful modules with lifecycle hooks, selectivity
edges, battery-bounded sensors, actuators, loops, and placement policies.
"""

from __future__ import annotations

import json
from copy import deepcopy
from dataclasses import dataclass, field
from enum import Enum

from .core import NS_PER_MS, RngStream, ms_to_ns
from .errors import DeviceDown, UnplaceableModule
from .topology import Device, PhysicalGraph, Status, shortest_paths


class Direction(str, Enum):
    UP = "UP"
    DOWN = "DOWN"
    ACTUATOR = "ACTUATOR"


@dataclass
class LatencyBreakdown:
    """Accumulated end-to-end components, carried along a tuple chain."""

    propagation_ns: int = 0
    transmission_ns: int = 0
    queue_wait_ns: int = 0
    service_ns: int = 0

    @property
    def total_ns(self) -> int:
        return self.propagation_ns + self.transmission_ns + self.queue_wait_ns + self.service_ns

    def copy(self) -> "LatencyBreakdown":
        return LatencyBreakdown(self.propagation_ns, self.transmission_ns,
                                self.queue_wait_ns, self.service_ns)


@dataclass
class Tuple:
    """The unit of work flowing through the DAG.

    ``origin_created_at`` and ``breakdown`` are inherited by output tuples so
    loop samples measure the whole chain back to the originating sensor tuple.
    """

    id: int
    app_id: str
    tuple_type: str
    direction: Direction
    cloudlet_length_mi: float
    file_size_bits: int
    src_module: str
    dst_module: str
    created_at: int
    loop_tags: frozenset[str] = frozenset()
    hop_trace: list[tuple[str, int]] = field(default_factory=list)
    origin_created_at: int = 0
    breakdown: LatencyBreakdown = field(default_factory=LatencyBreakdown)
    data: dict = field(default_factory=dict)
    dst_device: str | None = None

    def __post_init__(self):
        if self.cloudlet_length_mi < 0:
            raise ValueError("cloudlet length must be >= 0")
        if self.file_size_bits < 0:
            raise ValueError("file size must be >= 0")


@dataclass(frozen=True)
class Selectivity:
    """Edge emission model: ALWAYS, or FRACTIONAL(p) on a dedicated stream."""

    kind: str  # ALWAYS | FRACTIONAL
    p: float = 1.0

    @classmethod
    def always(cls) -> "Selectivity":
        return cls("ALWAYS")

    @classmethod
    def fractional(cls, p: float) -> "Selectivity":
        if not 0.0 <= p <= 1.0:
            raise ValueError("selectivity probability must be in [0, 1]")
        return cls("FRACTIONAL", p)

    def decide(self, rng: RngStream) -> bool:
        if self.kind == "ALWAYS":
            return True
        return rng.random() < self.p


@dataclass(frozen=True)
class AppEdge:
    """Directed DAG edge. ``src``/``dst`` are module names, or sensor/actuator
    kind labels for endpoint edges. ``tuple_mi`` is charged to the destination.
    """

    src: str
    dst: str
    tuple_type: str
    direction: Direction
    tuple_mi: float
    tuple_size_bits: int
    selectivity: Selectivity = field(default_factory=Selectivity.always)


@dataclass
class Emission:
    """One requested output from a module hook. ``dst_device`` pins the target
    instance (used for per-unit dispatch); None lets the runtime resolve it."""

    edge: AppEdge
    dst_device: str | None = None
    data: dict | None = None


@dataclass
class ModuleResult:
    emissions: list[Emission]
    extra_service_mi: float = 0.0


class AppModule:
    """A placed module instance with private persistent state.

    Subclasses override the lifecycle hooks; the default behaviour forwards on
    every outgoing edge (selectivity applied by the caller). ``state_store``
    survives between tuple arrivals and round-trips through checkpoints.
    """

    def __init__(self, name: str, required_ram_mb: float = 0.0):
        self.name = name
        self.required_ram_mb = required_ram_mb
        self.host_device: str | None = None
        self.state_store: dict = {}

    def instantiate(self, device_id: str) -> "AppModule":
        inst = type(self)(self.name, self.required_ram_mb)
        inst.host_device = device_id
        return inst

    # -- lifecycle hooks -------------------------------------------------
    def on_init(self, ctx) -> None:
        pass

    def on_tuple_arrival(self, tup: Tuple, ctx) -> ModuleResult | None:
        """Return a ModuleResult to control emissions, or None for the default
        one-output-per-outgoing-edge behaviour."""
        return None

    def on_checkpoint(self) -> dict:
        return deepcopy(self.state_store)

    def on_restore(self, snapshot: dict) -> None:
        self.state_store = deepcopy(snapshot)


_EPSILON_INTERVAL_NS = NS_PER_MS  # 1 ms floor on emission intervals


@dataclass
class Sensor:
    """Battery-bounded emitter. ``kind`` groups sensors for edge/loop wiring
    (e.g. every zone's situation sensor shares kind "SAS")."""

    id: str
    kind: str
    attached_device: str
    tuple_type: str
    nominal_interval_ms: float = 1000.0
    jitter_fraction: float = 0.02
    battery_capacity_mj: float = 0.0
    tx_energy_per_tuple_mj: float = 0.0
    emissions: int = 0

    def __post_init__(self):
        # Integer nanojoules keep the depletion countdown exact.
        self._remaining_nj = round(self.battery_capacity_mj * 1e6)
        self._tx_nj = round(self.tx_energy_per_tuple_mj * 1e6)
        self.halted = False

    @property
    def remaining_mj(self) -> float:
        return self._remaining_nj / 1e6

    @property
    def energy_spent_mj(self) -> float:
        return (round(self.battery_capacity_mj * 1e6) - self._remaining_nj) / 1e6

    def can_emit(self) -> bool:
        return not self.halted and self._remaining_nj >= self._tx_nj

    def drain(self) -> None:
        self._remaining_nj -= self._tx_nj
        self.emissions += 1
        if self._remaining_nj < self._tx_nj:
            self.halted = True


def next_interval_ns(sensor: Sensor, rng: RngStream) -> int:
    """Sample the next emission interval: Gaussian around the nominal period,
    clipped at +/-3 sigma, floored at 1 ms. jitter_fraction == 0 means the
    exact nominal period with no draw."""
    nominal = sensor.nominal_interval_ms
    if sensor.jitter_fraction == 0.0:
        return ms_to_ns(nominal)
    sigma = sensor.jitter_fraction * nominal
    value = rng.normal(nominal, sigma)
    value = min(max(value, nominal - 3.0 * sigma), nominal + 3.0 * sigma)
    return max(_EPSILON_INTERVAL_NS, ms_to_ns(value))


def emit_sensor_tuple(sensor: Sensor, now: int, rng: RngStream, device: Device,
                      alloc_id, edge: AppEdge, loop_tags: frozenset[str],
                      data: dict | None = None) -> tuple[Tuple, int] | None:
    """Emit one tuple and return (tuple, next_emission_ns), or None once the
    battery can no longer fund an emission. A DOWN host skips the emission
    without draining the battery."""
    if device.status is not Status.UP:
        raise DeviceDown(f"sensor {sensor.id!r} host {device.id!r} is DOWN")
    if not sensor.can_emit():
        return None
    sensor.drain()
    tup = Tuple(
        id=alloc_id(),
        app_id="",
        tuple_type=edge.tuple_type,
        direction=edge.direction,
        cloudlet_length_mi=edge.tuple_mi,
        file_size_bits=edge.tuple_size_bits,
        src_module=sensor.kind,
        dst_module=edge.dst,
        created_at=now,
        loop_tags=loop_tags,
        origin_created_at=now,
        data=dict(data or {}),
    )
    return tup, now + next_interval_ns(sensor, rng)


@dataclass
class Actuator:
    id: str
    kind: str
    attached_device: str
    accepts: str  # tuple type


@dataclass
class AppLoop:
    """A source-to-sink label path (sensor kind, modules..., actuator kind)
    over which end-to-end latency samples are recorded."""

    id: str
    module_sequence: list[str]


class Application:
    """Modules, edges, sensors, actuators, and loops for one application."""

    def __init__(self, app_id: str):
        self.app_id = app_id
        self.modules: dict[str, AppModule] = {}
        self.edges: list[AppEdge] = []
        self.sensors: dict[str, Sensor] = {}
        self.actuators: dict[str, Actuator] = {}
        self.loops: dict[str, AppLoop] = {}

    def add_module(self, module: AppModule) -> None:
        self.modules[module.name] = module

    def add_edge(self, edge: AppEdge) -> None:
        self.edges.append(edge)

    def add_sensor(self, sensor: Sensor) -> None:
        self.sensors[sensor.id] = sensor

    def add_actuator(self, actuator: Actuator) -> None:
        self.actuators[actuator.id] = actuator

    def add_loop(self, loop: AppLoop) -> None:
        for a, b in zip(loop.module_sequence, loop.module_sequence[1:]):
            if not any(e.src == a and e.dst == b for e in self.edges):
                raise ValueError(f"loop {loop.id!r}: no edge {a!r} -> {b!r}")
        self.loops[loop.id] = loop

    def outgoing(self, module_name: str) -> list[AppEdge]:
        return [e for e in self.edges if e.src == module_name]

    def validate_dag(self) -> None:
        """Modules plus endpoint labels must form a DAG (sensors as sources,
        actuators as sinks)."""
        nodes = set(self.modules)
        nodes.update(s.kind for s in self.sensors.values())
        nodes.update(a.kind for a in self.actuators.values())
        adj: dict[str, list[str]] = {n: [] for n in nodes}
        indeg = {n: 0 for n in nodes}
        for e in self.edges:
            if e.src not in nodes or e.dst not in nodes:
                raise ValueError(f"edge {e.src!r}->{e.dst!r} references unknown endpoint")
            adj[e.src].append(e.dst)
            indeg[e.dst] += 1
        order = [n for n in sorted(nodes) if indeg[n] == 0]
        seen = 0
        queue = list(order)
        while queue:
            n = queue.pop()
            seen += 1
            for m in adj[n]:
                indeg[m] -= 1
                if indeg[m] == 0:
                    queue.append(m)
        if seen != len(nodes):
            raise ValueError("application edges contain a cycle")


# -- placement ---------------------------------------------------------------

CLOUD_ONLY = "CLOUD_ONLY"
EDGEWARD = "EDGEWARD"
EXPLICIT = "EXPLICIT"


def _hostable(module: AppModule, device: Device) -> bool:
    return device.status is Status.UP and device.ram_mb >= module.required_ram_mb


def place_modules(app: Application, graph: PhysicalGraph, policy: str,
                  explicit: dict[str, list[str] | str] | None = None) -> dict[str, list[str]]:
    """Map every module to one or more UP devices.

    CLOUD_ONLY puts everything on the level-0 device; EDGEWARD picks, per
    module, the most edgeward device (highest level number, ties broken by
    lexicographic id) that satisfies the module's RAM constraint; EXPLICIT
    validates a user-supplied map. Replicated modules (a list of devices)
    yield one instance per device.
    """
    placement: dict[str, list[str]] = {}
    if policy == CLOUD_ONLY:
        candidates = [d for d in graph.devices.values() if d.status is Status.UP]
        if not candidates:
            raise UnplaceableModule("*", "no UP devices")
        cloud = min(candidates, key=lambda d: (d.level, d.id))
        for name, module in app.modules.items():
            if not _hostable(module, cloud):
                raise UnplaceableModule(name, f"cloud device {cloud.id!r} cannot host it")
            placement[name] = [cloud.id]
    elif policy == EDGEWARD:
        for name, module in app.modules.items():
            eligible = [d for d in graph.devices.values() if _hostable(module, d)]
            if not eligible:
                raise UnplaceableModule(name, "no UP device satisfies its host constraint")
            best = min(eligible, key=lambda d: (-d.level, d.id))
            placement[name] = [best.id]
    elif policy == EXPLICIT:
        if explicit is None:
            raise ValueError("EXPLICIT placement requires a module->device map")
        for name, module in app.modules.items():
            raw = explicit.get(name)
            if raw is None:
                raise UnplaceableModule(name, "missing from explicit map")
            device_ids = [raw] if isinstance(raw, str) else list(raw)
            for device_id in device_ids:
                if device_id not in graph.devices:
                    raise UnplaceableModule(name, f"unknown device {device_id!r}")
                if not _hostable(module, graph.devices[device_id]):
                    raise UnplaceableModule(name, f"device {device_id!r} cannot host it")
            placement[name] = device_ids
    else:
        raise ValueError(f"unknown placement policy {policy!r}")
    return placement


def nearest_instance(graph: PhysicalGraph, from_device: str, candidates: list[str]) -> str:
    """Deterministically pick the candidate device nearest (latency-weighted)
    to ``from_device``; ties resolve to the lexicographically smallest id."""
    if from_device in candidates:
        return from_device
    dist = shortest_paths(graph, from_device, "latencyMs")
    best = min(sorted(candidates), key=lambda d: (dist[d], d))
    if dist[best] == float("inf"):
        from .errors import Unreachable

        raise Unreachable(f"no candidate for reachable from {from_device!r}")
    return best


# -- application file loading --------------------------------------------------

def _parse_selectivity(raw) -> Selectivity:
    if raw is None or raw == "ALWAYS":
        return Selectivity.always()
    if isinstance(raw, dict):
        if raw.get("kind", "FRACTIONAL") == "ALWAYS":
            return Selectivity.always()
        return Selectivity.fractional(float(raw["p"]))
    return Selectivity.fractional(float(raw))


def build_application(spec: dict, module_classes: dict[str, type] | None = None) -> tuple[Application, dict]:
    """Build an Application from its JSON description.

    ``module_classes`` maps a module's ``behavior`` label to an AppModule
    subclass; unlisted modules get the default forwarding behaviour. Returns
    the application and the raw placement section.
    """
    module_classes = module_classes or {}
    app = Application(spec.get("appId", "app"))
    for entry in spec.get("modules", []):
        cls = module_classes.get(entry.get("behavior", ""), AppModule)
        app.add_module(cls(entry["name"], float(entry.get("ramMb", 0.0))))
    for entry in spec.get("edges", []):
        app.add_edge(AppEdge(
            src=entry["src"],
            dst=entry["dst"],
            tuple_type=entry["type"],
            direction=Direction(entry.get("direction", "UP")),
            tuple_mi=float(entry["tupleMI"]),
            tuple_size_bits=int(entry["tupleSizeBits"]),
            selectivity=_parse_selectivity(entry.get("selectivity")),
        ))
    for entry in spec.get("sensors", []):
        app.add_sensor(Sensor(
            id=entry["id"],
            kind=entry["kind"],
            attached_device=entry["attachedDevice"],
            tuple_type=entry["tupleType"],
            nominal_interval_ms=float(entry.get("nominalIntervalMs", 1000.0)),
            jitter_fraction=float(entry.get("jitterFraction", 0.02)),
            battery_capacity_mj=float(entry.get("batteryCapacityMilliJ", 0.0)),
            tx_energy_per_tuple_mj=float(entry.get("txEnergyPerTupleMilliJ", 0.0)),
        ))
    for entry in spec.get("actuators", []):
        app.add_actuator(Actuator(
            id=entry["id"],
            kind=entry["kind"],
            attached_device=entry["attachedDevice"],
            accepts=entry["accepts"],
        ))
    for entry in spec.get("loops", []):
        app.add_loop(AppLoop(entry["id"], list(entry["modules"])))
    app.validate_dag()
    return app, spec.get("placement", {})


def load_application(path, module_classes: dict[str, type] | None = None) -> tuple[Application, dict]:
    with open(path, encoding="utf-8") as fh:
        return build_application(json.load(fh), module_classes)
