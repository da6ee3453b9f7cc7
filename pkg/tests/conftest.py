import threading

import pytest


class FakeClock:
    """Virtual timeline: ``sleep`` advances ``time`` instantly.

    Hand ``time`` to every component in a test (sampler, simulator, server)
    so they share one deterministic clock; only sleepers move it forward.
    """

    def __init__(self, start: float = 0.0):
        self._now = start
        self._lock = threading.Lock()

    def time(self) -> float:
        with self._lock:
            return self._now

    def sleep(self, dt: float) -> None:
        with self._lock:
            if dt > 0:
                self._now += dt


@pytest.fixture
def fake_clock():
    return FakeClock()
