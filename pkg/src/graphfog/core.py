"""Deterministic discrete-event engine: integer-nanosecond clock, ordered event
queue, and named seeded random-number streams.

All simulation timestamps are non-negative integer nanoseconds, which makes
repeated runs bit-comparable. Values expressed in milliseconds or seconds are
converted at module boundaries with the helpers below.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass
from heapq import heappop, heappush
from typing import Any, Callable

import numpy as np

from .errors import SchedulingInPast, UnknownTarget

ENGINE_VERSION = "0.1.0"
GENERATOR_ID = "numpy-philox4x64"

NS_PER_US = 1_000
NS_PER_MS = 1_000_000
NS_PER_S = 1_000_000_000

_MASK64 = (1 << 64) - 1


def ms_to_ns(ms: float) -> int:
    return round(ms * NS_PER_MS)


def s_to_ns(s: float) -> int:
    return round(s * NS_PER_S)


def ns_to_ms(ns: int) -> float:
    return ns / NS_PER_MS


def ns_to_s(ns: int) -> float:
    return ns / NS_PER_S


def _stream_entropy(stream_id: str) -> list[int]:
    # Stable across processes and platforms (unlike hash()).
    digest = hashlib.sha256(stream_id.encode("utf-8")).digest()
    return [int.from_bytes(digest[i : i + 8], "little") for i in range(0, 32, 8)]


class RngStream:
    """A named random stream backed by a counter-based generator (Philox).

    Two streams built from the same ``(master_seed, stream_id)`` produce
    identical draw sequences; streams with different ids are statistically
    independent and never perturb one another.
    """

    __slots__ = ("master_seed", "stream_id", "_gen")

    def __init__(self, master_seed: int, stream_id: str):
        self.master_seed = master_seed
        self.stream_id = stream_id
        entropy = [master_seed & _MASK64, *_stream_entropy(stream_id)]
        self._gen = np.random.Generator(np.random.Philox(np.random.SeedSequence(entropy)))

    def random(self) -> float:
        """Uniform draw in [0, 1)."""
        return float(self._gen.random())

    def normal(self, mean: float = 0.0, sigma: float = 1.0) -> float:
        return float(self._gen.normal(mean, sigma))

    def uniform(self, low: float, high: float) -> float:
        return float(self._gen.uniform(low, high))

    def integers(self, low: int, high: int) -> int:
        """Integer draw in [low, high)."""
        return int(self._gen.integers(low, high))

    def __repr__(self) -> str:
        return f"RngStream(seed={self.master_seed}, id={self.stream_id!r})"


def rng_stream(master_seed: int, stream_id: str) -> RngStream:
    """Build a fresh deterministic stream for ``(master_seed, stream_id)``."""
    return RngStream(master_seed, stream_id)


@dataclass(frozen=True)
class Event:
    """A timestamped unit of work. ``(fire_at, seq)`` totally orders events."""

    fire_at: int
    seq: int
    target: str
    kind: str
    payload: Any = None


@dataclass(frozen=True)
class RunSummary:
    events_processed: int
    final_clock: int


Handler = Callable[["Engine", Event], None]


class Engine:
    """Single-threaded event loop over a (fire_at, seq)-ordered queue.

    An instance is self-contained: several instances may run on different
    threads, but no instance may be driven from two threads at once.
    """

    def __init__(self, master_seed: int = 0, record_trace: bool = False):
        self.master_seed = master_seed
        self.clock: int = 0
        self.events_processed: int = 0
        self._heap: list[tuple[int, int, Event]] = []
        self._next_seq = 0
        self._handlers: dict[str, Handler] = {}
        self._streams: dict[str, RngStream] = {}
        self._trace: list[tuple[int, int, str, str]] | None = [] if record_trace else None

    def stream(self, stream_id: str) -> RngStream:
        """Per-engine memoized stream (one shared generator per id)."""
        st = self._streams.get(stream_id)
        if st is None:
            st = RngStream(self.master_seed, stream_id)
            self._streams[stream_id] = st
        return st

    def register(self, target: str, handler: Handler) -> None:
        self._handlers[target] = handler

    def schedule(self, fire_at: int, target: str, kind: str, payload: Any = None) -> Event:
        if fire_at < self.clock:
            raise SchedulingInPast(f"fire_at={fire_at} < clock={self.clock}")
        event = Event(fire_at, self._next_seq, target, kind, payload)
        self._next_seq += 1
        heappush(self._heap, (event.fire_at, event.seq, event))
        return event

    def run_until(self, horizon: int) -> RunSummary:
        """Process every event with ``fire_at <= horizon`` in total order.

        The clock ends at ``horizon`` (idempotent on an empty queue).
        """
        if horizon < self.clock:
            raise SchedulingInPast(f"horizon={horizon} < clock={self.clock}")
        processed = 0
        while self._heap and self._heap[0][0] <= horizon:
            _, _, event = heappop(self._heap)
            self.clock = event.fire_at
            if self._trace is not None:
                self._trace.append((event.fire_at, event.seq, event.target, event.kind))
            handler = self._handlers.get(event.target)
            if handler is None:
                raise UnknownTarget(f"no handler registered for {event.target!r}")
            handler(self, event)
            processed += 1
        self.clock = horizon
        self.events_processed += processed
        return RunSummary(events_processed=processed, final_clock=self.clock)

    def pending(self) -> int:
        return len(self._heap)

    def trace_json(self) -> str:
        """Canonical serialization of the processed-event trace."""
        if self._trace is None:
            raise ValueError("engine was created with record_trace=False")
        return json.dumps(self._trace, separators=(",", ":"))

    def metadata(self) -> dict:
        """Run metadata emitted into every report."""
        return {
            "master_seed": self.master_seed,
            "generator": GENERATOR_ID,
            "engine_version": ENGINE_VERSION,
            "events_processed": self.events_processed,
            "final_clock_ns": self.clock,
        }
