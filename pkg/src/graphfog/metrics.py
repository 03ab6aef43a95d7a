"""Energy, cost, and latency accounting plus per-device queue telemetry.

Energy integrates a linear power model p(u) = idle + (busy - idle) * u over
piecewise-constant utilization; cost integrates rate * u * MIPS the same way.
Both accumulators are pure functions of the event trace.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field

from .core import ns_to_ms, ns_to_s
from .errors import ClockRegression
from .topology import Device

Z95 = 1.96  # normal-approximation 95% interval


@dataclass
class EnergyAccount:
    device_id: str
    last_update: int = 0
    last_utilization: float = 0.0
    total_joules: float = 0.0


def update_energy(account: EnergyAccount, now: int, new_utilization: float, device: Device) -> EnergyAccount:
    """Accumulate p(u)*dt for the elapsed interval, then record the new level."""
    if now < account.last_update:
        raise ClockRegression(f"energy update at {now} before {account.last_update}")
    power = device.power_idle_w + (device.power_busy_w - device.power_idle_w) * account.last_utilization
    account.total_joules += power * ns_to_s(now - account.last_update)
    account.last_utilization = new_utilization
    account.last_update = now
    return account


@dataclass
class CostAccount:
    device_id: str
    last_update: int = 0
    last_utilization: float = 0.0
    total_cost: float = 0.0


def update_cost(account: CostAccount, now: int, new_utilization: float, device: Device) -> CostAccount:
    """Accumulate rate * u * MIPS * dt; cost units are dimensionless rate-units."""
    if now < account.last_update:
        raise ClockRegression(f"cost update at {now} before {account.last_update}")
    account.total_cost += (
        device.rate_per_mips * account.last_utilization * device.mips * ns_to_s(now - account.last_update)
    )
    account.last_utilization = new_utilization
    account.last_update = now
    return account


@dataclass
class LatencyStats:
    loop_id: str
    samples_ms: list[float]
    mean: float
    variance: float
    ci95: tuple[float, float] | None  # None when n < 2


def loop_stats(loop_id: str, samples_ms: list[float]) -> LatencyStats:
    """Sample mean, unbiased variance, and normal-approximation 95% CI."""
    n = len(samples_ms)
    if n == 0:
        return LatencyStats(loop_id, [], math.nan, math.nan, None)
    mean = sum(samples_ms) / n
    if n < 2:
        return LatencyStats(loop_id, list(samples_ms), mean, math.nan, None)
    variance = sum((x - mean) ** 2 for x in samples_ms) / (n - 1)
    half = Z95 * math.sqrt(variance / n)
    return LatencyStats(loop_id, list(samples_ms), mean, variance, (mean - half, mean + half))


@dataclass
class QueueTelemetry:
    """Per-device queue-length and in-service trace plus observed service rate."""

    device_id: str
    samples: list[tuple[int, int, int]] = field(default_factory=list)  # (ns, queue, inService)
    completions: int = 0
    total_service_ns: int = 0
    mean_service_rate: float = 0.0  # tuples/second, set at finalize

    def record(self, now: int, queue_length: int, in_service: int) -> None:
        self.samples.append((now, queue_length, in_service))

    def finalize(self, horizon: int) -> None:
        self.mean_service_rate = self.completions / ns_to_s(horizon) if horizon > 0 else 0.0


def time_weighted_mean_in_service(telemetry: QueueTelemetry, horizon: int) -> float:
    """Time average of the in-service count over [0, horizon]."""
    if horizon <= 0:
        return 0.0
    total = 0.0
    prev_t, prev_v = 0, 0
    for t, _q, s in telemetry.samples:
        total += prev_v * (t - prev_t)
        prev_t, prev_v = t, s
    total += prev_v * (horizon - prev_t)
    return total / horizon


@dataclass
class SensorReport:
    sensor_id: str
    emissions: int
    energy_spent_mj: float
    remaining_mj: float
    halted: bool


@dataclass
class LoopSample:
    loop_id: str
    sample_ns: int
    propagation_ns: int
    transmission_ns: int
    queue_wait_ns: int
    service_ns: int
    incident_id: str | None = None

    @property
    def sample_ms(self) -> float:
        return ns_to_ms(self.sample_ns)


class MetricsLedger:
    """All metric accumulators for one simulation instance."""

    def __init__(self):
        self.energy: dict[str, EnergyAccount] = {}
        self.cost: dict[str, CostAccount] = {}
        self.telemetry: dict[str, QueueTelemetry] = {}
        self.loop_samples: dict[str, list[LoopSample]] = {}
        self.sensor_reports: list[SensorReport] = []
        self.counters = {"created": 0, "consumed": 0, "dropped": 0}

    def ensure_device(self, device: Device) -> None:
        if device.id not in self.energy:
            self.energy[device.id] = EnergyAccount(device.id)
            self.cost[device.id] = CostAccount(device.id)
            self.telemetry[device.id] = QueueTelemetry(device.id)

    def update_device(self, now: int, device: Device, utilization: float) -> None:
        update_energy(self.energy[device.id], now, utilization, device)
        update_cost(self.cost[device.id], now, utilization, device)

    def add_loop_sample(self, sample: LoopSample) -> None:
        self.loop_samples.setdefault(sample.loop_id, []).append(sample)

    def finalize(self, horizon: int, devices: dict[str, Device]) -> None:
        for device_id, account in self.energy.items():
            update_energy(account, horizon, account.last_utilization, devices[device_id])
        for device_id, account in self.cost.items():
            update_cost(account, horizon, account.last_utilization, devices[device_id])
        for telemetry in self.telemetry.values():
            telemetry.finalize(horizon)

    @property
    def in_flight(self) -> int:
        return self.counters["created"] - self.counters["consumed"] - self.counters["dropped"]

    def loop_stats(self) -> list[LatencyStats]:
        return [
            loop_stats(loop_id, [s.sample_ms for s in samples])
            for loop_id, samples in sorted(self.loop_samples.items())
        ]

    def to_dict(self) -> dict:
        """JSON-ready snapshot of every ledger."""
        return {
            "energy": [
                {"device_id": a.device_id, "total_joules": a.total_joules}
                for a in sorted(self.energy.values(), key=lambda a: a.device_id)
            ],
            "cost": [
                {"device_id": a.device_id, "total_cost": a.total_cost}
                for a in sorted(self.cost.values(), key=lambda a: a.device_id)
            ],
            "loops": [
                {
                    "loop_id": st.loop_id,
                    "n": len(st.samples_ms),
                    "mean_ms": st.mean,
                    "variance_ms2": st.variance if not math.isnan(st.variance) else None,
                    "ci95_low_ms": st.ci95[0] if st.ci95 else None,
                    "ci95_high_ms": st.ci95[1] if st.ci95 else None,
                }
                for st in self.loop_stats()
            ],
            "telemetry": [
                {
                    "device_id": t.device_id,
                    "mean_service_rate": t.mean_service_rate,
                    "completions": t.completions,
                    "samples": len(t.samples),
                }
                for t in sorted(self.telemetry.values(), key=lambda t: t.device_id)
            ],
            "sensors": [
                {
                    "sensor_id": r.sensor_id,
                    "emissions": r.emissions,
                    "energy_spent_mj": r.energy_spent_mj,
                    "remaining_mj": r.remaining_mj,
                    "halted": r.halted,
                }
                for r in sorted(self.sensor_reports, key=lambda r: r.sensor_id)
            ],
            "tuples": dict(self.counters, in_flight=self.in_flight),
        }


LATENCY_CSV_HEADER = ["loop_id", "n", "mean_ms", "variance_ms2", "ci95_low_ms", "ci95_high_ms"]


def write_latency_csv(path, stats: list[LatencyStats]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(LATENCY_CSV_HEADER)
        for st in stats:
            n = len(st.samples_ms)
            writer.writerow([
                st.loop_id,
                n,
                repr(st.mean),
                repr(st.variance) if n >= 2 else "",
                repr(st.ci95[0]) if st.ci95 else "",
                repr(st.ci95[1]) if st.ci95 else "",
            ])


def write_energy_csv(path, accounts: list[EnergyAccount]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["device_id", "total_joules"])
        for account in sorted(accounts, key=lambda a: a.device_id):
            writer.writerow([account.device_id, repr(account.total_joules)])


def write_cost_csv(path, accounts: list[CostAccount]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["device_id", "total_cost"])
        for account in sorted(accounts, key=lambda a: a.device_id):
            writer.writerow([account.device_id, repr(account.total_cost)])


def write_telemetry_csv(path, telemetry: list[QueueTelemetry]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["device_id", "t_ms", "queue_length", "in_service"])
        for t in sorted(telemetry, key=lambda t: t.device_id):
            for ns, queue, in_service in t.samples:
                writer.writerow([t.device_id, repr(ns_to_ms(ns)), queue, in_service])


def write_sensors_csv(path, reports: list[SensorReport]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["sensor_id", "emissions", "energy_spent_mj", "remaining_mj", "halted"])
        for r in sorted(reports, key=lambda r: r.sensor_id):
            writer.writerow([r.sensor_id, r.emissions, repr(r.energy_spent_mj), repr(r.remaining_mj), int(r.halted)])
