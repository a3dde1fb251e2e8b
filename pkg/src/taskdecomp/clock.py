"""Clocks used for wall/model latency accounting.

``SimulatedClock`` is the default: it reads real time but treats model
latency as an offset instead of sleeping, so framework overhead is measured
for real while mock runs stay fast.  ``FrozenClock`` drops real time
entirely, which makes every timing field deterministic.
"""

from __future__ import annotations

import time
from typing import Protocol


class Clock(Protocol):
    def now(self) -> float: ...

    def sleep(self, seconds: float) -> None: ...


class SystemClock:
    def now(self) -> float:
        return time.perf_counter()

    def sleep(self, seconds: float) -> None:
        if seconds > 0:
            time.sleep(seconds)


class SimulatedClock:
    def __init__(self) -> None:
        self._offset = 0.0

    def now(self) -> float:
        return time.perf_counter() + self._offset

    def sleep(self, seconds: float) -> None:
        self._offset += max(seconds, 0.0)


class FrozenClock:
    def __init__(self) -> None:
        self._t = 0.0

    def now(self) -> float:
        return self._t

    def sleep(self, seconds: float) -> None:
        self._t += max(seconds, 0.0)


CLOCKS = {"system": SystemClock, "simulated": SimulatedClock, "frozen": FrozenClock}


def make_clock(kind: str) -> Clock:
    try:
        return CLOCKS[kind]()
    except KeyError:
        raise ValueError(f"unknown clock {kind!r}; choose from {sorted(CLOCKS)}") from None
