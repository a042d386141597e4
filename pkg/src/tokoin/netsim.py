"""Deterministic discrete-event simulation primitives.

A seeded scheduler plus a point-to-point message network with per-link
random delays. Delivery order within one (sender, receiver) channel is
FIFO; across channels the interleaving is whatever the seeded delays
produce, which is exactly the nondeterminism the consensus safety tests
want to explore.
"""

from __future__ import annotations

import heapq
import random
from typing import Any, Callable


class Scheduler:
    def __init__(self):
        self.now = 0.0
        self._seq = 0
        self._heap: list[tuple[float, int, Callable[[], None]]] = []

    def at(self, delay_s: float, fn: Callable[[], None]) -> None:
        self._seq += 1
        heapq.heappush(self._heap, (self.now + max(delay_s, 0.0), self._seq, fn))

    def step(self) -> bool:
        if not self._heap:
            return False
        when, _, fn = heapq.heappop(self._heap)
        self.now = when
        fn()
        return True

    def run(self, until_s: float | None = None, stop: Callable[[], bool] | None = None,
            max_events: int | None = None) -> int:
        events = 0
        while self._heap:
            if until_s is not None and self._heap[0][0] > until_s:
                break
            if stop is not None and stop():
                break
            if max_events is not None and events >= max_events:
                break
            self.step()
            events += 1
        return events


class SimNet:
    """Message fabric between named endpoints with seeded link delays."""

    def __init__(self, scheduler: Scheduler, rng: random.Random,
                 delay_range_s: tuple[float, float] = (0.001, 0.02)):
        self.scheduler = scheduler
        self.rng = rng
        self.delay_lo, self.delay_hi = delay_range_s
        self.handlers: dict[Any, Callable[[Any, Any], None]] = {}
        self._last_arrival: dict[tuple[Any, Any], float] = {}
        self.dropped: int = 0
        self.partition: Callable[[Any, Any], bool] | None = None

    def join(self, name: Any, handler: Callable[[Any, Any], None]) -> None:
        self.handlers[name] = handler

    def peers_of(self, name: Any) -> list[Any]:
        return [n for n in self.handlers if n != name]

    def send(self, src: Any, dst: Any, payload: Any) -> None:
        if dst not in self.handlers:
            return
        if self.partition is not None and self.partition(src, dst):
            self.dropped += 1
            return
        delay = self.rng.uniform(self.delay_lo, self.delay_hi)
        arrival = self.scheduler.now + delay
        # one peer's stream must never reorder
        key = (src, dst)
        arrival = max(arrival, self._last_arrival.get(key, 0.0) + 1e-9)
        self._last_arrival[key] = arrival
        self.scheduler.at(arrival - self.scheduler.now, lambda: self.handlers[dst](src, payload))

    def broadcast(self, src: Any, payload: Any) -> None:
        for dst in self.peers_of(src):
            self.send(src, dst, payload)
