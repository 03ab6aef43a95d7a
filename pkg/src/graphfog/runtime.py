"""Simulation runtime: binds the event engine to a physical graph and an
application, moving tuples hop-by-hop, executing modules on bounded-parallel
devices, applying fault scripts, and filling the metrics ledger.
"""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass
from typing import Any

from .application import (
    Actuator,
    AppModule,
    Application,
    Emission,
    ModuleResult,
    Sensor,
    Tuple,
    emit_sensor_tuple,
    nearest_instance,
    next_interval_ns,
)
from .core import Engine, Event, RunSummary
from .errors import ModuleNotPlaced, Unreachable
from .metrics import LoopSample, MetricsLedger
from .topology import (
    PhysicalGraph,
    Status,
    TopologyEvent,
    apply_topology_event,
    compute_service_time,
    link_delay,
    ms_to_ns,
    route_next_hop,
    transmission_ns,
)

_SIM = "sim"  # single event target; kinds distinguish handlers


@dataclass
class SimContext:
    """What a module hook may touch: the clock, named rng streams, and the
    scenario-shared blackboard."""

    now: int
    sim: "Simulation"

    def rng(self, stream_id: str):
        return self.sim.engine.stream(stream_id)

    @property
    def blackboard(self) -> dict:
        return self.sim.blackboard


class _Executor:
    """FIFO execution on one device: at most ``parallelism_degree`` tuples in
    service concurrently, each at full per-tuple MIPS."""

    def __init__(self, device):
        self.device = device
        self.queue: deque[tuple[AppModule, Tuple, int]] = deque()
        self.in_service: list[Tuple] = []
        self.generation = 0

    @property
    def utilization(self) -> float:
        return len(self.in_service) / self.device.parallelism_degree


class Simulation:
    """One deterministic simulation instance (single-threaded)."""

    def __init__(self, graph: PhysicalGraph, app: Application,
                 placement: dict[str, list[str] | str], master_seed: int = 0,
                 *, link_serialization: bool = False, record_trace: bool = False):
        self.graph = graph
        self.app = app
        self.engine = Engine(master_seed, record_trace=record_trace)
        self.engine.register(_SIM, self._handle)
        self.ledger = MetricsLedger()
        self.blackboard: dict = {}
        self.link_serialization = link_serialization
        self._link_free_at: dict[tuple[tuple[str, str], str], int] = {}
        self._next_tuple_id = 0
        self._route_memo: dict[tuple[str, str], str] = {}
        self._route_epoch = graph.epoch
        self._halted_periodic: set[str] = set()
        self._finalized = False

        self.placement: dict[str, list[str]] = {
            name: [devs] if isinstance(devs, str) else list(devs)
            for name, devs in placement.items()
        }
        self.instances: dict[tuple[str, str], AppModule] = {}
        ctx = SimContext(0, self)
        for name, device_ids in self.placement.items():
            template = app.modules[name]
            for device_id in device_ids:
                inst = template.instantiate(device_id)
                inst.on_init(ctx)
                self.instances[(name, device_id)] = inst

        self.executors = {d.id: _Executor(d) for d in graph.devices.values()}
        for device in graph.devices.values():
            self.ledger.ensure_device(device)

        self._actuators_by_kind: dict[str, list[Actuator]] = {}
        for actuator in app.actuators.values():
            self._actuators_by_kind.setdefault(actuator.kind, []).append(actuator)

    # -- public API --------------------------------------------------------

    @property
    def now(self) -> int:
        return self.engine.clock

    def alloc_tuple_id(self) -> int:
        self._next_tuple_id += 1
        return self._next_tuple_id

    def start_periodic_sensor(self, sensor_id: str, first_at: int = 0) -> None:
        self.engine.schedule(first_at, _SIM, "SENSOR_EMIT",
                             {"sensor": sensor_id, "periodic": True, "data": None})

    def trigger_sensor(self, sensor_id: str, at: int, data: dict | None = None) -> None:
        """One-shot emission (e.g. an incident alert) at an absolute time."""
        self.engine.schedule(at, _SIM, "SENSOR_EMIT",
                             {"sensor": sensor_id, "periodic": False, "data": data})

    def schedule_fault(self, event: TopologyEvent) -> None:
        # Validate targets eagerly, at scheduling time.
        if event.action in ("FAIL_DEVICE", "RECOVER_DEVICE"):
            self.graph.device(event.args["id"])
        else:
            self.graph.link_between(event.args["a"], event.args["b"])
        self.engine.schedule(event.at, _SIM, "TOPOLOGY", event)

    def apply_fault_script(self, events: list[TopologyEvent]) -> None:
        for event in events:
            self.schedule_fault(event)

    def run(self, horizon: int, finalize: bool = True) -> RunSummary:
        summary = self.engine.run_until(horizon)
        if finalize and not self._finalized:
            self._finalized = True
            self.ledger.finalize(horizon, self.graph.devices)
            for sensor in self.app.sensors.values():
                self.ledger.sensor_reports.append(_sensor_report(sensor))
        return summary

    def checkpoint_modules(self) -> dict:
        return {f"{n}@{d}": inst.on_checkpoint() for (n, d), inst in sorted(self.instances.items())}

    def restore_modules(self, snapshots: dict) -> None:
        for (n, d), inst in self.instances.items():
            inst.on_restore(snapshots[f"{n}@{d}"])

    def snapshot_state(self) -> dict:
        """Observable state for bit-identity checks (graph plus queue contents)."""
        return {
            "graph": self.graph.snapshot(),
            "executors": {
                device_id: {
                    "queued": [t.id for _, t, _ in ex.queue],
                    "in_service": [t.id for t in ex.in_service],
                }
                for device_id, ex in sorted(self.executors.items())
            },
        }

    def audit_in_flight(self) -> int:
        """Independently count live tuples: pending arrivals plus device queues
        plus in-service work."""
        pending = sum(1 for _, _, e in self.engine._heap if e.kind == "TUPLE_ARRIVE")
        queued = sum(len(ex.queue) for ex in self.executors.values())
        serving = sum(len(ex.in_service) for ex in self.executors.values())
        return pending + queued + serving

    def run_metadata(self) -> dict:
        return self.engine.metadata()

    # -- event handling ------------------------------------------------------

    def _handle(self, engine: Engine, event: Event) -> None:
        kind = event.kind
        if kind == "TUPLE_ARRIVE":
            self._on_arrive(event.payload)
        elif kind == "SERVICE_COMPLETE":
            self._on_complete(event.payload)
        elif kind == "SENSOR_EMIT":
            self._on_sensor_emit(event.payload)
        elif kind == "TOPOLOGY":
            self._on_topology(event.payload)
        else:
            raise ValueError(f"unknown event kind {kind!r}")

    def _on_sensor_emit(self, payload: dict) -> None:
        sensor = self.app.sensors[payload["sensor"]]
        periodic = payload["periodic"]
        device = self.graph.devices[sensor.attached_device]
        rng = self.engine.stream(f"sensor.{sensor.id}")
        if device.status is not Status.UP:
            # Emission skipped, battery untouched; a periodic sensor retries.
            if periodic and not sensor.halted:
                self.engine.schedule(self.now + next_interval_ns(sensor, rng),
                                     _SIM, "SENSOR_EMIT", payload)
            return
        edges = [e for e in self.app.outgoing(sensor.kind) if e.tuple_type == sensor.tuple_type]
        if not edges:
            raise ValueError(f"sensor {sensor.id!r}: no outgoing edge of type {sensor.tuple_type!r}")
        edge = edges[0]
        loop_tags = frozenset(
            loop.id for loop in self.app.loops.values()
            if loop.module_sequence and loop.module_sequence[0] == sensor.kind
        )
        result = emit_sensor_tuple(sensor, self.now, rng, device,
                                   self.alloc_tuple_id, edge, loop_tags,
                                   payload.get("data"))
        if result is None:
            self._halted_periodic.add(sensor.id)
            return
        tup, next_at = result
        tup.app_id = self.app.app_id
        self.ledger.counters["created"] += 1
        tup.hop_trace.append((device.id, self.now))
        dst_device = self._resolve_destination(edge, device.id, None)
        if dst_device is None:
            self._drop(tup)
        else:
            tup.dst_device = dst_device
            self._send(tup, device.id)
        if periodic:
            self.engine.schedule(next_at, _SIM, "SENSOR_EMIT", payload)

    def _on_arrive(self, payload: dict) -> None:
        tup: Tuple = payload["tuple"]
        device_id: str = payload["at"]
        device = self.graph.devices[device_id]
        if device.status is not Status.UP:
            self._drop(tup)
            return
        tup.hop_trace.append((device_id, self.now))
        if device_id != tup.dst_device:
            self._send(tup, device_id)
            return
        actuator = self._actuator_at(device_id, tup)
        if actuator is not None:
            self._on_actuate(actuator, tup)
            return
        instance = self.instances.get((tup.dst_module, device_id))
        if instance is None:
            raise ModuleNotPlaced(f"module {tup.dst_module!r} has no instance on {device_id!r}")
        self._submit(instance, tup)

    def _on_actuate(self, actuator: Actuator, tup: Tuple) -> None:
        self.ledger.counters["consumed"] += 1
        for loop in self.app.loops.values():
            if loop.id in tup.loop_tags and loop.module_sequence[-1] == actuator.kind:
                sample_ns = self.now - tup.origin_created_at
                self.ledger.add_loop_sample(LoopSample(
                    loop_id=loop.id,
                    sample_ns=sample_ns,
                    propagation_ns=tup.breakdown.propagation_ns,
                    transmission_ns=tup.breakdown.transmission_ns,
                    queue_wait_ns=tup.breakdown.queue_wait_ns,
                    service_ns=tup.breakdown.service_ns,
                    incident_id=tup.data.get("incident"),
                ))

    # -- device execution ------------------------------------------------------

    def _submit(self, instance: AppModule, tup: Tuple) -> None:
        executor = self.executors[instance.host_device]
        if len(executor.in_service) < executor.device.parallelism_degree:
            self._start_service(executor, instance, tup, arrived=self.now)
        else:
            executor.queue.append((instance, tup, self.now))
        self._record_telemetry(executor)

    def _start_service(self, executor: _Executor, instance: AppModule,
                       tup: Tuple, arrived: int) -> None:
        tup.breakdown.queue_wait_ns += self.now - arrived
        outputs, extra_mi = self._module_outputs(instance, tup)
        service_ns = compute_service_time(tup.cloudlet_length_mi + extra_mi, executor.device)
        tup.breakdown.service_ns += service_ns
        executor.in_service.append(tup)
        self.ledger.update_device(self.now, executor.device, executor.utilization)
        telemetry = self.ledger.telemetry[executor.device.id]
        telemetry.total_service_ns += service_ns
        self.engine.schedule(self.now + service_ns, _SIM, "SERVICE_COMPLETE", {
            "device": executor.device.id,
            "generation": executor.generation,
            "tuple": tup,
            "outputs": outputs,
        })

    def _on_complete(self, payload: dict) -> None:
        executor = self.executors[payload["device"]]
        if payload["generation"] != executor.generation:
            return  # device failed mid-service; work already counted dropped
        tup: Tuple = payload["tuple"]
        executor.in_service.remove(tup)
        self.ledger.counters["consumed"] += 1
        telemetry = self.ledger.telemetry[executor.device.id]
        telemetry.completions += 1
        self.ledger.update_device(self.now, executor.device, executor.utilization)
        for out in payload["outputs"]:
            self.ledger.counters["created"] += 1
            self._send(out, executor.device.id)
        if executor.queue and len(executor.in_service) < executor.device.parallelism_degree:
            instance, queued, arrived = executor.queue.popleft()
            self._start_service(executor, instance, queued, arrived)
        self._record_telemetry(executor)

    def _module_outputs(self, instance: AppModule, tup: Tuple) -> tuple[list[Tuple], float]:
        """Run the arrival hook and materialize its emissions (default: one
        output per outgoing edge, subject to selectivity)."""
        ctx = SimContext(self.now, self)
        result = instance.on_tuple_arrival(tup, ctx)
        if result is None:
            emissions = [Emission(edge) for edge in self.app.outgoing(instance.name)]
            extra_mi = 0.0
        elif isinstance(result, ModuleResult):
            emissions, extra_mi = result.emissions, result.extra_service_mi
        else:
            raise TypeError("on_tuple_arrival must return ModuleResult or None")
        outputs: list[Tuple] = []
        for emission in emissions:
            edge = emission.edge
            stream = self.engine.stream(f"selectivity.{edge.src}->{edge.dst}.{edge.tuple_type}")
            if not edge.selectivity.decide(stream):
                continue
            dst_device = self._resolve_destination(edge, instance.host_device, emission.dst_device)
            if dst_device is None:
                continue  # currently unreachable; nothing was created yet
            out = Tuple(
                id=self.alloc_tuple_id(),
                app_id=tup.app_id,
                tuple_type=edge.tuple_type,
                direction=edge.direction,
                cloudlet_length_mi=edge.tuple_mi,
                file_size_bits=edge.tuple_size_bits,
                src_module=instance.name,
                dst_module=edge.dst,
                created_at=self.now,
                loop_tags=tup.loop_tags,
                hop_trace=list(tup.hop_trace),
                origin_created_at=tup.origin_created_at,
                breakdown=tup.breakdown.copy(),
                data={**tup.data, **(emission.data or {})},
                dst_device=dst_device,
            )
            outputs.append(out)
        return outputs, extra_mi

    # -- transmission ------------------------------------------------------------

    def _resolve_destination(self, edge, from_device: str, pinned: str | None) -> str | None:
        if pinned is not None:
            return pinned
        if edge.dst in self._actuators_by_kind:
            candidates = [a.attached_device for a in self._actuators_by_kind[edge.dst]
                          if a.accepts == edge.tuple_type]
        elif edge.dst in self.placement:
            candidates = self.placement[edge.dst]
        else:
            raise ModuleNotPlaced(f"edge destination {edge.dst!r} is neither placed nor an actuator kind")
        candidates = [c for c in candidates if self.graph.devices[c].status is Status.UP]
        if not candidates:
            return None
        try:
            return nearest_instance(self.graph, from_device, candidates)
        except Unreachable:
            return None

    def _next_hop(self, current: str, destination: str) -> str:
        if self._route_epoch != self.graph.epoch:
            self._route_memo.clear()
            self._route_epoch = self.graph.epoch
        key = (current, destination)
        hop = self._route_memo.get(key)
        if hop is None:
            hop = route_next_hop(self.graph, current, destination)
            self._route_memo[key] = hop
        return hop

    def _send(self, tup: Tuple, from_device: str) -> None:
        """Forward one hop toward ``tup.dst_device``; delay parameters are the
        ones in force now, so in-flight transfers survive later link edits."""
        if from_device == tup.dst_device:
            self.engine.schedule(self.now, _SIM, "TUPLE_ARRIVE", {"tuple": tup, "at": from_device})
            return
        try:
            next_hop = self._next_hop(from_device, tup.dst_device)
        except Unreachable:
            self._drop(tup)
            return
        link = self.graph.link_between(from_device, next_hop)
        trans = transmission_ns(tup.file_size_bits, link.bandwidth_bps)
        total = link_delay(tup.file_size_bits, link)
        depart = self.now
        if self.link_serialization:
            key = (link.key, from_device)
            free_at = self._link_free_at.get(key, 0)
            depart = max(self.now, free_at)
            tup.breakdown.queue_wait_ns += depart - self.now
            self._link_free_at[key] = depart + trans
        tup.breakdown.transmission_ns += trans
        tup.breakdown.propagation_ns += total - trans
        self.engine.schedule(depart + total, _SIM, "TUPLE_ARRIVE", {"tuple": tup, "at": next_hop})

    def _drop(self, tup: Tuple) -> None:
        self.ledger.counters["dropped"] += 1

    # -- topology events -----------------------------------------------------------

    def _on_topology(self, event: TopologyEvent) -> None:
        apply_topology_event(event, self.graph)
        if event.action == "FAIL_DEVICE":
            executor = self.executors[event.args["id"]]
            for _, queued, _ in executor.queue:
                self._drop(queued)
            for serving in executor.in_service:
                self._drop(serving)
            executor.queue.clear()
            executor.in_service.clear()
            executor.generation += 1
            self.ledger.update_device(self.now, executor.device, 0.0)
            self._record_telemetry(executor)

    def _record_telemetry(self, executor: _Executor) -> None:
        self.ledger.telemetry[executor.device.id].record(
            self.now, len(executor.queue), len(executor.in_service))

    def _actuator_at(self, device_id: str, tup: Tuple) -> Actuator | None:
        for actuator in self._actuators_by_kind.get(tup.dst_module, []):
            if actuator.attached_device == device_id and actuator.accepts == tup.tuple_type:
                return actuator
        return None


def _sensor_report(sensor: Sensor):
    from .metrics import SensorReport

    return SensorReport(
        sensor_id=sensor.id,
        emissions=sensor.emissions,
        energy_spent_mj=sensor.energy_spent_mj,
        remaining_mj=sensor.remaining_mj,
        halted=sensor.halted,
    )
