"""Clock offset estimation between monitor and device under test.

A Cristian-style probe: the DUT records t1 before sending, the monitor
answers with its receive/send stamps (t2, t3), the DUT records t4 on
arrival.  The probe with the smallest round trip gives the estimate; the
classic bound |error| <= rtt/2 holds under arbitrary delay asymmetry.

Offsets follow the convention "DUT clock minus monitor clock", so
subtracting the offset from a DUT timestamp moves it onto the monitor
timeline.  Corrections are done in whole microseconds, which matches the
on-disk timestamp resolution and makes correct-then-uncorrect restore the
input bit-exactly.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

from .model import EventMark

DEFAULT_PROBE_COUNT = 8
DEFAULT_DISPERSION_BOUND_S = 0.005
PROBE_TIMEOUT_S = 1.0


class ProbeTimeout(Exception):
    pass


class ClockSkewTooLarge(Exception):
    pass


@dataclass(frozen=True)
class SyncEstimate:
    """Result of one sync round: offset is DUT clock minus monitor clock."""

    offset: float
    rtt: float
    probe_count: int
    dispersion: float

    def __post_init__(self):
        if self.rtt < 0:
            raise ValueError(f"rtt must be non-negative, got {self.rtt}")
        if self.probe_count < 1:
            raise ValueError(f"probe_count must be >= 1, got {self.probe_count}")
        if self.dispersion < 0:
            raise ValueError(f"dispersion must be non-negative, got {self.dispersion}")


def probe_offset(t1: float, t2: float, t3: float, t4: float) -> float:
    """Per-probe offset (DUT minus monitor) from one exchange."""
    return ((t1 - t2) + (t4 - t3)) / 2


def probe_rtt(t1: float, t2: float, t3: float, t4: float) -> float:
    """Round-trip time excluding the monitor's processing gap."""
    return (t4 - t1) - (t3 - t2)


ProbeExchange = Callable[[], tuple[float, float, float, float]]


def estimate_offset(
    probe_exchange: ProbeExchange,
    k: int = DEFAULT_PROBE_COUNT,
    *,
    dispersion_bound: float = DEFAULT_DISPERSION_BOUND_S,
) -> SyncEstimate:
    """Run ``k`` probes and keep the offset of the one with minimal rtt.

    Raises ProbeTimeout when a probe round trip exceeds 1 s (or the exchange
    itself times out) and ClockSkewTooLarge when the spread of per-probe
    offsets exceeds ``dispersion_bound``.
    """
    if k < 3:
        raise ValueError(f"need at least 3 probes, got {k}")
    offsets: list[float] = []
    best_rtt = float("inf")
    best_offset = 0.0
    for _ in range(k):
        try:
            t1, t2, t3, t4 = probe_exchange()
        except (TimeoutError, OSError) as exc:
            raise ProbeTimeout(str(exc)) from exc
        rtt = probe_rtt(t1, t2, t3, t4)
        if rtt < 0:
            raise ValueError(f"probe returned negative rtt {rtt}")
        if rtt > PROBE_TIMEOUT_S:
            raise ProbeTimeout(f"probe rtt {rtt:.3f}s exceeds {PROBE_TIMEOUT_S}s")
        offset = probe_offset(t1, t2, t3, t4)
        offsets.append(offset)
        if rtt < best_rtt:
            best_rtt = rtt
            best_offset = offset
    dispersion = max(offsets) - min(offsets)
    if dispersion > dispersion_bound:
        raise ClockSkewTooLarge(
            f"offset dispersion {dispersion * 1e3:.3f}ms exceeds "
            f"{dispersion_bound * 1e3:.3f}ms over {k} probes"
        )
    return SyncEstimate(offset=best_offset, rtt=best_rtt, probe_count=k, dispersion=dispersion)


def correct_timestamp(t: float, offset: float) -> float:
    """Move a DUT timestamp onto the monitor timeline, exact in microseconds."""
    return (round(t * 1e6) - round(offset * 1e6)) / 1e6


def correct_events(events: Sequence[EventMark], est: SyncEstimate) -> list[EventMark]:
    """Apply the clock correction to every event, preserving order."""
    return [EventMark(e.label, correct_timestamp(e.t, est.offset)) for e in events]
