"""Event queue ordered by (time, insertion)."""

from __future__ import annotations

import enum
import heapq
import itertools
from dataclasses import dataclass, field
from typing import Any


class EventKind(str, enum.Enum):
    BROADCAST = "Broadcast"
    BLOCK_FOUND = "BlockFound"
    ORDER_SUBMIT = "OrderSubmit"
    CYCLE_BOUNDARY = "CycleBoundary"
    ATTACK_STEP = "AttackStep"
    AUDIT_REQUEST = "AuditRequest"
    SLOT = "Slot"


@dataclass(order=True)
class SimEvent:
    time: float
    order: int
    kind: EventKind = field(compare=False)
    payload: Any = field(compare=False, default=None)


class EventQueue:
    def __init__(self) -> None:
        self._heap: list[SimEvent] = []
        self._counter = itertools.count()
        self.now = 0.0
        self.processed = 0

    def push(self, time: float, kind: EventKind, payload: Any = None) -> SimEvent:
        if time < self.now:
            raise ValueError("cannot schedule into the past")
        ev = SimEvent(time, next(self._counter), kind, payload)
        heapq.heappush(self._heap, ev)
        return ev

    def pop(self) -> SimEvent:
        ev = heapq.heappop(self._heap)
        self.now = ev.time
        self.processed += 1
        return ev

    def __bool__(self) -> bool:
        return bool(self._heap)

    def __len__(self) -> int:
        return len(self._heap)
