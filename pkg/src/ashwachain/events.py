"""Deterministic event queue and line-oriented trace shared by the engine and driver."""

from __future__ import annotations

import heapq
import itertools
from dataclasses import dataclass
from typing import Any, Iterator


class EventQueue:
    """Priority queue keyed by (time, sequence); the sequence breaks ties in push order."""

    def __init__(self) -> None:
        self._heap: list[tuple[float, int, Any]] = []
        self._seq = itertools.count()

    def push(self, time: float, item: Any) -> None:
        heapq.heappush(self._heap, (time, next(self._seq), item))

    def pop(self) -> tuple[float, Any]:
        time, _, item = heapq.heappop(self._heap)
        return time, item

    def peek_time(self) -> float | None:
        return self._heap[0][0] if self._heap else None

    def __len__(self) -> int:
        return len(self._heap)

    def __bool__(self) -> bool:
        return bool(self._heap)


@dataclass(frozen=True)
class TraceEvent:
    time: float
    seq: int
    kind: str
    actor: str
    payload: str

    def line(self) -> str:
        return f"{self.time:.6f} {self.kind} {self.actor} {self.payload}"


class Trace:
    """Event log rendered one event per line: ``time kind actor payload-digest``.

    Events may be recorded out of time order (an agreement is resolved in one
    go); rendering sorts by (time, record order).
    """

    def __init__(self) -> None:
        self._events: list[TraceEvent] = []
        self._seq = itertools.count()

    def record(self, time: float, kind: str, actor: str = "-", payload: bytes | str = "-") -> None:
        if isinstance(payload, bytes):
            payload = payload.hex()
        self._events.append(TraceEvent(time, next(self._seq), kind, actor or "-", payload or "-"))

    def events(self) -> list[TraceEvent]:
        return sorted(self._events, key=lambda e: (e.time, e.seq))

    def __iter__(self) -> Iterator[TraceEvent]:
        return iter(self.events())

    def __len__(self) -> int:
        return len(self._events)

    def of_kind(self, *kinds: str) -> list[TraceEvent]:
        return [e for e in self.events() if e.kind in kinds]

    def render(self) -> str:
        return "".join(e.line() + "\n" for e in self.events())


def parse_trace(text: str) -> list[tuple[float, str, str, str]]:
    out = []
    for line in text.splitlines():
        if not line.strip():
            continue
        time, kind, actor, payload = line.split(" ")
        out.append((float(time), kind, actor, payload))
    return out
