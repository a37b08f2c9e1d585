"""Min-ordered event queue with a monotone virtual clock."""
from __future__ import annotations

import heapq
from typing import Any


class EventQueue:
    """Events dequeue in (time, sequence) order; the sequence breaks ties by insertion."""

    def __init__(self, start: float = 0.0):
        self.now = start
        self._heap: list[tuple[float, int, Any]] = []
        self._seq = 0

    def __len__(self) -> int:
        return len(self._heap)

    def push(self, t: float, event: Any) -> None:
        if t < self.now:
            raise ValueError(f"event at {t} is before the clock ({self.now})")
        heapq.heappush(self._heap, (t, self._seq, event))
        self._seq += 1

    def peek_time(self) -> float | None:
        return self._heap[0][0] if self._heap else None

    def pop(self) -> tuple[float, Any]:
        t, _, event = heapq.heappop(self._heap)
        self.now = t
        return t, event
