"""Pluggable inference backends.

A backend is a callable taking one raw sample (bytes) and returning a score
vector.  Built-ins keep CI hardware-free: real ML-framework wrappers belong
in user modules loaded by dotted path.
"""

from __future__ import annotations

import importlib
import time
from typing import Callable, Sequence

Backend = Callable[[bytes], Sequence[float]]


class BackendLoadError(Exception):
    pass


class SleepStub:
    """Pretends to infer by sleeping; records each call's actual duration."""

    def __init__(self, seconds: float):
        self.seconds = seconds
        self.durations: list[float] = []

    def __call__(self, sample: bytes) -> Sequence[float]:
        start = time.perf_counter()
        time.sleep(self.seconds)
        self.durations.append(time.perf_counter() - start)
        return [1.0]


def identity(sample: bytes) -> Sequence[float]:
    """Interpret the sample as text floats (comma or whitespace separated)."""
    text = sample.decode("utf-8").replace(",", " ")
    return [float(token) for token in text.split()]


def load_backend(spec: str) -> Backend:
    """Resolve a backend id: ``stub:sleep:<s>``, ``identity``, or ``module:attr``."""
    if spec == "identity":
        return identity
    if spec.startswith("stub:sleep:"):
        try:
            seconds = float(spec.rsplit(":", 1)[1])
        except ValueError as exc:
            raise BackendLoadError(f"bad sleep duration in {spec!r}") from exc
        if seconds < 0:
            raise BackendLoadError("sleep duration must be non-negative")
        return SleepStub(seconds)
    if ":" in spec:
        module_name, _, attr = spec.partition(":")
        try:
            module = importlib.import_module(module_name)
            backend = getattr(module, attr)
        except (ImportError, AttributeError) as exc:
            raise BackendLoadError(f"cannot load backend {spec!r}: {exc}") from exc
        if not callable(backend):
            raise BackendLoadError(f"backend {spec!r} is not callable")
        return backend
    raise BackendLoadError(f"unknown backend {spec!r}")
