"""PSU sampling loop and idle-window analysis for the monitoring device.

The sampler polls the supply at a fixed interval and appends one CSV line per
successful read, stamped at request time on the monitor clock.  Failed reads
become gaps, never fabricated samples.  The output file is line-buffered so
it can be parsed at any instant without hitting a torn line.
"""

from __future__ import annotations

import logging
import threading
import time
from dataclasses import dataclass
from typing import Callable, Optional, Sequence

from . import psu
from .model import BatchInterval, PowerSample, format_timestamp

log = logging.getLogger(__name__)


class SamplerDied(Exception):
    """More than ``MAX_CONSECUTIVE_FAILURES`` reads failed in a row."""


class WindowTooSparse(ValueError):
    pass


class WindowOverlapsInference(ValueError):
    pass


MAX_CONSECUTIVE_FAILURES = 10
MIN_IDLE_SAMPLES = 10


@dataclass
class SamplerConfig:
    """Configuration for one sampling session."""

    port_path: str = "sim:const:2.5"
    interval: float = 0.1
    out_path: str = "power.csv"
    register_profile: str = "hm310p-community"
    live: bool = False
    unit_id: int = 1
    timeout: float = 0.2
    retries: int = 2

    def __post_init__(self):
        if self.interval <= 0:
            raise ValueError(f"interval must be positive, got {self.interval}")


@dataclass
class SamplerStats:
    sample_count: int = 0
    gap_count: int = 0


class SamplerHandle:
    """Running sampler; ``stop()`` joins the thread and returns the stats."""

    def __init__(self):
        self.stats = SamplerStats()
        self._stop = threading.Event()
        self._thread: Optional[threading.Thread] = None
        self._error: Optional[BaseException] = None

    @property
    def sample_count(self) -> int:
        return self.stats.sample_count

    @property
    def gap_count(self) -> int:
        return self.stats.gap_count

    def stop(self) -> SamplerStats:
        self._stop.set()
        if self._thread is not None:
            self._thread.join()
        if self._error is not None:
            raise self._error
        return self.stats

    def join(self, timeout: Optional[float] = None) -> None:
        if self._thread is not None:
            self._thread.join(timeout)


def run_sampler(
    config: SamplerConfig,
    *,
    port: Optional[psu.Port] = None,
    register_map: Optional[psu.RegisterMap] = None,
    clock: Callable[[], float] = time.time,
    sleep: Callable[[float], None] = time.sleep,
) -> SamplerHandle:
    """Start sampling in a background thread.

    ``clock`` and ``sleep`` are injectable so tests can drive the loop on a
    virtual timeline.  The sampler owns the port exclusively until stopped.
    """
    register_map = register_map or psu.PROFILES[config.register_profile]
    own_port = port is None
    if port is None:
        port = psu.open_port(config.port_path, clock=clock)

    handle = SamplerHandle()
    out = open(config.out_path, "w", buffering=1, encoding="utf-8")

    def read_once(stamp: float) -> PowerSample:
        sample = psu.read_measurements(
            port,
            register_map,
            unit_id=config.unit_id,
            timeout=config.timeout,
            retries=config.retries,
            clock=lambda: stamp,
        )
        return sample

    def loop():
        consecutive_failures = 0
        last_stamp: Optional[float] = None
        start = clock()

        # Prime with one read to estimate the serial round trip; the interval
        # should be at least twice that or samples will queue up.
        wall0 = time.monotonic()
        try:
            read_once(start)
        except psu.PsuError:
            pass
        first_rtt = time.monotonic() - wall0
        if config.interval < 2 * first_rtt:
            log.warning(
                "interval %.3fs is below twice the measured round trip %.3fs",
                config.interval,
                first_rtt,
            )

        n = 1
        try:
            while not handle._stop.is_set():
                target = start + n * config.interval
                n += 1
                delay = target - clock()
                if delay > 0:
                    sleep(delay)
                stamp = clock()
                if last_stamp is not None and stamp <= last_stamp:
                    stamp = last_stamp + 1e-6  # keep timestamps strictly increasing
                try:
                    sample = read_once(stamp)
                except (psu.Timeout, psu.CrcMismatch):
                    handle.stats.gap_count += 1
                    consecutive_failures += 1
                    if consecutive_failures > MAX_CONSECUTIVE_FAILURES:
                        raise SamplerDied(
                            f"{consecutive_failures} consecutive read failures"
                        )
                    continue
                consecutive_failures = 0
                last_stamp = stamp
                out.write(
                    f"{format_timestamp(sample.t)},{sample.current:.6f},"
                    f"{sample.voltage:.6f},{sample.power:.6f}\n"
                )
                handle.stats.sample_count += 1
                if config.live:
                    print(
                        f"\r{sample.t:.3f}s  {sample.voltage:.3f} V  "
                        f"{sample.current:.3f} A  {sample.power:.3f} W ",
                        end="",
                        flush=True,
                    )
        except BaseException as exc:
            handle._error = exc
        finally:
            out.close()
            if own_port:
                port.close()

    thread = threading.Thread(target=loop, name="wattbench-sampler", daemon=True)
    handle._thread = thread
    thread.start()
    return handle


def measure_idle(
    power_samples: Sequence[PowerSample],
    window: tuple[float, float],
    intervals: Sequence[BatchInterval] = (),
) -> float:
    """Mean power over an idle window that no batch interval intersects."""
    t0, t1 = window
    if t0 > t1:
        raise ValueError(f"window start {t0} after end {t1}")
    for interval in intervals:
        if interval.start <= t1 and t0 <= interval.end:
            raise WindowOverlapsInference(
                f"window [{t0}, {t1}] intersects batch {interval.index}"
            )
    inside = [s.power for s in power_samples if t0 <= s.t <= t1]
    if len(inside) < MIN_IDLE_SAMPLES:
        raise WindowTooSparse(
            f"window [{t0}, {t1}] holds {len(inside)} samples, need {MIN_IDLE_SAMPLES}"
        )
    return sum(inside) / len(inside)
