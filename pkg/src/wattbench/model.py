"""Core measurement types and the text file formats shared by every module.

Timestamps are decimal seconds since the Unix epoch, serialized with six
fractional digits (microseconds).  Power and event files are headerless CSV;
lines starting with ``#`` are provenance comments and are ignored.
"""

from __future__ import annotations

import json
import math
import re
from dataclasses import dataclass, field
from typing import Iterable, Optional, Sequence

LABEL_PATTERN = re.compile(r"^(test_start|test_end|inf_(start|end)_batch_(\d+))$")

# Timestamps may jitter backwards by up to 1 ms before the trace is
# considered corrupt.
MONOTONIC_SLACK_S = 1e-3


class FileFormatError(ValueError):
    """Base for file parsing failures; carries the 1-based line number."""

    def __init__(self, message: str, line_no: int | None = None):
        super().__init__(message if line_no is None else f"line {line_no}: {message}")
        self.line_no = line_no


class MalformedLine(FileFormatError):
    pass


class NonMonotonicTime(FileFormatError):
    pass


class UnknownLabel(FileFormatError):
    pass


class DuplicateLabel(FileFormatError):
    pass


class UnpairedLabel(ValueError):
    """A batch has a start without an end, or vice versa."""

    def __init__(self, index: int):
        super().__init__(f"batch {index} has an unpaired start/end label")
        self.index = index


class OverlappingIntervals(ValueError):
    def __init__(self, i: int, j: int):
        super().__init__(f"batch intervals {i} and {j} overlap")
        self.indices = (i, j)


def format_timestamp(t: float) -> str:
    """Canonical on-disk form of a timestamp: six fractional digits."""
    return f"{t:.6f}"


def _require_finite(value: float, what: str) -> None:
    if not math.isfinite(value):
        raise ValueError(f"{what} must be finite, got {value!r}")


@dataclass(frozen=True)
class PowerSample:
    """One timestamped PSU reading: current [A], voltage [V], power [W]."""

    t: float
    current: float
    voltage: float
    power: float

    def __post_init__(self):
        for name in ("t", "current", "voltage", "power"):
            value = getattr(self, name)
            _require_finite(value, name)
            if value < 0:
                raise ValueError(f"{name} must be non-negative, got {value!r}")

    def power_consistent(self, rel: float = 0.01) -> bool:
        # The PSU reports power independently of V and I; callers may check
        # agreement but parsing never enforces it.
        return abs(self.power - self.current * self.voltage) <= rel * max(self.power, 0.1)


@dataclass(frozen=True)
class EventMark:
    """A labeled timestamp emitted by the device under test."""

    label: str
    t: float

    def __post_init__(self):
        if not LABEL_PATTERN.match(self.label):
            raise ValueError(f"invalid event label {self.label!r}")
        _require_finite(self.t, "t")
        if self.t < 0:
            raise ValueError(f"t must be non-negative, got {self.t!r}")

    @property
    def batch_index(self) -> int | None:
        m = LABEL_PATTERN.match(self.label)
        return int(m.group(3)) if m.group(3) is not None else None


@dataclass(frozen=True)
class BatchInterval:
    """The [start, end] window bracketing one inference batch."""

    index: int
    start: float
    end: float

    def __post_init__(self):
        if self.index < 0:
            raise ValueError(f"index must be non-negative, got {self.index}")
        if self.start > self.end:
            raise ValueError(f"batch {self.index}: start {self.start} > end {self.end}")

    @property
    def duration(self) -> float:
        return self.end - self.start


@dataclass(frozen=True)
class InferenceResult:
    """Top-k classification output for one sample, best guess first."""

    sample_id: str
    topk: tuple[tuple[int, float], ...]

    def __post_init__(self):
        scores = [s for _, s in self.topk]
        if any(a < b for a, b in zip(scores, scores[1:])):
            raise ValueError(f"{self.sample_id}: top-k scores must be non-increasing")
        indices = [i for i, _ in self.topk]
        if len(set(indices)) != len(indices):
            raise ValueError(f"{self.sample_id}: duplicate class index in top-k")


@dataclass
class RunManifest:
    """Metadata binding one benchmark run to its on-disk trace files.

    ``batch_count`` is the number of complete (start, end) label pairs in the
    events file.  Clock fields record the sync quality achieved by the agent.
    """

    run_id: str
    batch_count: int
    batch_size: int
    device_name: str
    model_name: str
    clock_offset: float
    clock_rtt: float
    power_file: Optional[str]
    events_file: str
    results_file: Optional[str] = None
    clock_dispersion: Optional[float] = None

    def to_json(self) -> str:
        return json.dumps(self.__dict__, indent=2) + "\n"

    @classmethod
    def from_json(cls, text: str) -> "RunManifest":
        data = json.loads(text)
        return cls(**data)


@dataclass
class PerBatch:
    """Per-batch analysis row: duration and mean power inside the interval."""

    index: int
    duration_s: float
    mean_w: Optional[float]
    sample_count: int


@dataclass
class AggregateReport:
    """Timing, energy and accuracy outputs for one run.

    ``wm_inf`` is always ``w_mean_inf * t_inf / 60`` by construction.
    """

    t_inf: float
    t_mean_inf: float
    t_test: Optional[float]
    w_mean_inf: float
    wm_inf: float
    per_batch: list[PerBatch] = field(default_factory=list)
    idle_power: Optional[float] = None
    top1: Optional[float] = None
    top5: Optional[float] = None
    empty_batch_count: int = 0
    clock_dispersion: Optional[float] = None
    run_id: Optional[str] = None

    def __post_init__(self):
        if self.t_test is not None and self.t_inf > self.t_test + 1e-9:
            raise ValueError(f"t_inf {self.t_inf} exceeds t_test {self.t_test}")
        if self.top1 is not None and self.top5 is not None:
            if not (0 <= self.top1 <= self.top5 <= 1):
                raise ValueError(f"need 0 <= top1 <= top5 <= 1, got {self.top1}, {self.top5}")

    def to_json(self) -> str:
        data = {
            "run_id": self.run_id,
            "t_inf": self.t_inf,
            "t_mean_inf": self.t_mean_inf,
            "t_test": self.t_test,
            "w_mean_inf": self.w_mean_inf,
            "wm_inf": self.wm_inf,
            "idle_power": self.idle_power,
            "top1": self.top1,
            "top5": self.top5,
            "empty_batch_count": self.empty_batch_count,
            "clock_dispersion": self.clock_dispersion,
            "per_batch": [
                [b.index, b.duration_s, b.mean_w, b.sample_count] for b in self.per_batch
            ],
        }
        return json.dumps(data, indent=2) + "\n"

    @classmethod
    def from_json(cls, text: str) -> "AggregateReport":
        data = json.loads(text)
        per_batch = [PerBatch(*row) for row in data.pop("per_batch", [])]
        return cls(per_batch=per_batch, **data)


def _data_lines(data: bytes | str) -> Iterable[tuple[int, str]]:
    text = data.decode("utf-8") if isinstance(data, bytes) else data
    for line_no, line in enumerate(text.split("\n"), start=1):
        stripped = line.strip()
        if not stripped or stripped.startswith("#"):
            continue
        yield line_no, stripped


def parse_power_file(data: bytes | str) -> list[PowerSample]:
    """Parse a power trace: ``time_s,current_a,voltage_v,power_w`` per line.

    Raises MalformedLine for anything that is not four non-negative decimals,
    and NonMonotonicTime when a timestamp steps backwards by more than 1 ms.
    """
    samples: list[PowerSample] = []
    prev_t: float | None = None
    for line_no, line in _data_lines(data):
        parts = line.split(",")
        if len(parts) != 4:
            raise MalformedLine(f"expected 4 fields, got {len(parts)}", line_no)
        try:
            t, current, voltage, power = (float(p) for p in parts)
            sample = PowerSample(t, current, voltage, power)
        except ValueError as exc:
            raise MalformedLine(str(exc), line_no) from exc
        if prev_t is not None and t < prev_t - MONOTONIC_SLACK_S:
            raise NonMonotonicTime(f"time {t} after {prev_t}", line_no)
        prev_t = t
        samples.append(sample)
    return samples


def serialize_power_file(samples: Iterable[PowerSample]) -> str:
    return "".join(
        f"{format_timestamp(s.t)},{s.current:.6f},{s.voltage:.6f},{s.power:.6f}\n"
        for s in samples
    )


def parse_events_file(
    data: bytes | str,
) -> tuple[list[EventMark], list[BatchInterval], Optional[tuple[float, float]]]:
    """Parse an events file (``label,time_s``) and pair batch intervals.

    Returns the events in file order, the batch intervals sorted by index,
    and the (test_start, test_end) window when both marks are present.
    """
    events: list[EventMark] = []
    for line_no, line in _data_lines(data):
        parts = line.split(",")
        if len(parts) != 2:
            raise MalformedLine(f"expected 2 fields, got {len(parts)}", line_no)
        label, raw_t = parts
        if not LABEL_PATTERN.match(label):
            raise UnknownLabel(f"unknown label {label!r}", line_no)
        try:
            t = float(raw_t)
            event = EventMark(label, t)
        except ValueError as exc:
            raise MalformedLine(str(exc), line_no) from exc
        events.append(event)
    intervals, window = pair_events(events)
    return events, intervals, window


def pair_events(
    events: Sequence[EventMark],
) -> tuple[list[BatchInterval], Optional[tuple[float, float]]]:
    """Pair inf_start/inf_end labels into intervals and extract the test window.

    Pairing must be a bijection: duplicate or unpaired labels are rejected, as
    is any overlap between intervals (the batch loop cannot produce one, so
    overlap means corrupt data).
    """
    starts: dict[int, float] = {}
    ends: dict[int, float] = {}
    singles: dict[str, float] = {}
    for event in events:
        index = event.batch_index
        if index is None:
            if event.label in singles:
                raise DuplicateLabel(f"duplicate {event.label}")
            singles[event.label] = event.t
        else:
            bucket = starts if event.label.startswith("inf_start") else ends
            if index in bucket:
                raise DuplicateLabel(f"duplicate {event.label}")
            bucket[index] = event.t

    for index in sorted(starts.keys() | ends.keys()):
        if index not in starts or index not in ends:
            raise UnpairedLabel(index)

    intervals = [BatchInterval(i, starts[i], ends[i]) for i in sorted(starts)]
    by_start = sorted(intervals, key=lambda iv: (iv.start, iv.end))
    for a, b in zip(by_start, by_start[1:]):
        if b.start < a.end:  # touching endpoints are fine
            i, j = sorted((a.index, b.index))
            raise OverlappingIntervals(i, j)

    window = None
    if "test_start" in singles and "test_end" in singles:
        window = (singles["test_start"], singles["test_end"])
    return intervals, window


def serialize_events_file(events: Iterable[EventMark]) -> str:
    return "".join(f"{e.label},{format_timestamp(e.t)}\n" for e in events)


def parse_results_file(data: bytes | str) -> list[InferenceResult]:
    """Parse inference results: ``sample_id,idx1,score1,...,idxK,scoreK``.

    K is fixed per file; a line with a different K is malformed.
    """
    results: list[InferenceResult] = []
    k: int | None = None
    for line_no, line in _data_lines(data):
        parts = line.split(",")
        if len(parts) < 3 or len(parts) % 2 == 0:
            raise MalformedLine("expected sample_id plus (index,score) pairs", line_no)
        pairs = (len(parts) - 1) // 2
        if k is None:
            k = pairs
        elif pairs != k:
            raise MalformedLine(f"expected {k} (index,score) pairs, got {pairs}", line_no)
        try:
            topk = tuple(
                (int(parts[1 + 2 * j]), float(parts[2 + 2 * j])) for j in range(pairs)
            )
            results.append(InferenceResult(parts[0], topk))
        except ValueError as exc:
            raise MalformedLine(str(exc), line_no) from exc
    return results


def serialize_results_file(results: Iterable[InferenceResult]) -> str:
    lines = []
    for r in results:
        cells = [r.sample_id]
        for index, score in r.topk:
            cells.append(str(index))
            cells.append(f"{score:.6f}")
        lines.append(",".join(cells) + "\n")
    return "".join(lines)


def parse_ground_truth(data: bytes | str) -> dict[str, int]:
    """Parse ground truth lines of ``sample_id label_index``."""
    truth: dict[str, int] = {}
    for line_no, line in _data_lines(data):
        parts = line.split()
        if len(parts) != 2:
            raise MalformedLine("expected 'sample_id label_index'", line_no)
        try:
            truth[parts[0]] = int(parts[1])
        except ValueError as exc:
            raise MalformedLine(str(exc), line_no) from exc
    return truth
