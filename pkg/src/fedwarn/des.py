"""Event queue and seeded random streams for the simulator."""

from __future__ import annotations

import hashlib
import heapq
from dataclasses import dataclass, field
from enum import Enum
from typing import Any

import numpy as np


class CausalityViolation(RuntimeError):
    pass


class EventKind(str, Enum):
    DEVICE_TRANSMIT = "DeviceTransmit"
    ENDORSE_ARRIVE = "EndorseArrive"
    ENDORSE_RETURN = "EndorseReturn"
    ORDERER_ARRIVE = "OrdererArrive"
    BLOCK_CUT = "BlockCut"
    VALIDATE_DONE = "ValidateDone"
    CONFIRM_ARRIVE = "ConfirmArrive"
    EDGE_ARRIVE = "EdgeArrive"
    AGGREGATION_WINDOW_CLOSE = "AggregationWindowClose"
    EPIDEMIC_STEP = "EpidemicStep"


@dataclass(order=True, frozen=True)
class Event:
    t: float
    seq: int
    kind: EventKind = field(compare=False)
    payload: Any = field(default=None, compare=False)


class EventQueue:
    """Min-heap on (t, seq); seq is assigned at schedule time."""

    def __init__(self, start: float = 0.0):
        self._heap: list[Event] = []
        self._seq = 0
        self.now = float(start)

    def __len__(self) -> int:
        return len(self._heap)

    def schedule(self, t: float, kind: EventKind, payload: Any = None) -> Event:
        if t < self.now:
            raise CausalityViolation(f"event {kind} at t={t} before clock {self.now}")
        event = Event(float(t), self._seq, kind, payload)
        self._seq += 1
        heapq.heappush(self._heap, event)
        return event

    def next(self) -> Event:
        event = heapq.heappop(self._heap)
        self.now = event.t
        return event


def derive_stream(seed: int, name: str) -> np.random.Generator:
    """Independent generator for one purpose, keyed by (seed, name).

    The stream name is hashed to a 32-bit word appended to the seed's
    entropy, so streams never depend on how many others exist.
    """
    word = int.from_bytes(hashlib.sha256(name.encode()).digest()[:4], "big")
    return np.random.default_rng(np.random.SeedSequence([seed & (2**64 - 1), word]))


def derive_int(seed: int, name: str) -> int:
    """Deterministic 64-bit integer derived from (seed, name)."""
    data = (seed & (2**64 - 1)).to_bytes(8, "big") + name.encode()
    return int.from_bytes(hashlib.sha256(data).digest()[:8], "big")
