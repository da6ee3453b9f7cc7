"""Analysis core: interval timing, interval-aligned energy, top-k accuracy.

Timing sums the per-batch interval durations.  Energy extracts the power
samples falling inside each interval (boundaries inclusive), averages them
per batch, then averages the batch means; the energy over all inference
intervals is that mean times the total inference time, expressed in
watt-minutes.  Batches that caught no power sample are excluded from the
mean and surfaced in the report instead of aborting the analysis: with short
inferences a large share of samples may be unassignable, and repetition is
the intended mitigation.
"""

from __future__ import annotations

from bisect import bisect_left, bisect_right
from dataclasses import dataclass
from typing import Iterable, Mapping, Optional, Sequence

from .model import (
    AggregateReport,
    BatchInterval,
    EventMark,
    InferenceResult,
    PerBatch,
    PowerSample,
    RunManifest,
    pair_events,
)


class AllBatchesEmpty(ValueError):
    pass


class ManifestMismatch(ValueError):
    pass


class MissingGroundTruth(KeyError):
    def __init__(self, sample_id: str):
        super().__init__(sample_id)
        self.sample_id = sample_id


class TopKTooShort(ValueError):
    pass


@dataclass(frozen=True)
class BatchPower:
    """Power samples assigned to one batch interval and their mean."""

    index: int
    watts: tuple[float, ...]
    mean: Optional[float]

    @classmethod
    def of(cls, index: int, watts: Sequence[float]) -> "BatchPower":
        mean = sum(watts) / len(watts) if watts else None
        return cls(index, tuple(watts), mean)


def compute_timing(
    intervals: Sequence[BatchInterval],
    test_window: Optional[tuple[float, float]] = None,
    n: Optional[int] = None,
) -> tuple[float, float, Optional[float]]:
    """Return (t_inf, t_mean_inf, t_test); t_test is None without a window."""
    if not intervals:
        raise ValueError("need at least one batch interval")
    if n is None:
        n = len(intervals)
    elif n != len(intervals):
        raise ManifestMismatch(f"N={n} but {len(intervals)} intervals found")
    t_inf = sum(iv.end - iv.start for iv in intervals)
    t_test = test_window[1] - test_window[0] if test_window is not None else None
    return t_inf, t_inf / n, t_test


def align_power(
    samples: Sequence[PowerSample],
    intervals: Sequence[BatchInterval],
) -> list[BatchPower]:
    """Assign samples to intervals with inclusive boundaries.

    Membership is evaluated per interval (a sample sitting exactly on two
    touching interval endpoints belongs to both).  Sample order does not
    matter; they are sorted internally.
    """
    ordered = sorted(samples, key=lambda s: s.t)
    times = [s.t for s in ordered]
    out = []
    for interval in intervals:
        lo = bisect_left(times, interval.start)
        hi = bisect_right(times, interval.end)
        out.append(BatchPower.of(interval.index, [s.power for s in ordered[lo:hi]]))
    return out


def compute_energy(
    batch_powers: Sequence[BatchPower],
    t_inf: float,
    n: Optional[int] = None,
) -> tuple[float, float]:
    """Return (w_mean_inf, wm_inf) from per-batch means.

    The mean is taken over batches that caught at least one sample; callers
    can read the empty count off ``batch_powers``.
    """
    if n is not None and n != len(batch_powers):
        raise ManifestMismatch(f"N={n} but {len(batch_powers)} batches aligned")
    means = [bp.mean for bp in batch_powers if bp.mean is not None]
    if not means:
        raise AllBatchesEmpty(f"no power samples inside any of {len(batch_powers)} batches")
    w_mean_inf = sum(means) / len(means)
    return w_mean_inf, w_mean_inf * t_inf / 60


def rank_of_truth(
    topk: Sequence[tuple[int, float]],
    truth: int,
    label_offset: int = 0,
) -> Optional[int]:
    """1-based rank of the true class in a top-k list, or None if absent.

    Entries are re-ranked by descending score with ties broken by ascending
    class index, so the rank is deterministic regardless of how the producer
    ordered equal scores.
    """
    ranked = sorted(topk, key=lambda pair: (-pair[1], pair[0]))
    for position, (index, _) in enumerate(ranked, start=1):
        if index - label_offset == truth:
            return position
    return None


def score_topk(
    results: Sequence[InferenceResult],
    ground_truth: Mapping[str, int],
    ks: Iterable[int] = (1, 5),
    label_offset: int = 0,
) -> dict[int, float]:
    """Top-k accuracy for each requested k."""
    ks = sorted(set(ks))
    if not results:
        raise ValueError("no results to score")
    correct = {k: 0 for k in ks}
    for result in results:
        if result.sample_id not in ground_truth:
            raise MissingGroundTruth(result.sample_id)
        if len(result.topk) < max(ks):
            raise TopKTooShort(
                f"{result.sample_id}: top-{len(result.topk)} list cannot answer top-{max(ks)}"
            )
        rank = rank_of_truth(result.topk, ground_truth[result.sample_id], label_offset)
        for k in ks:
            if rank is not None and rank <= k:
                correct[k] += 1
    return {k: correct[k] / len(results) for k in ks}


def build_report(
    manifest: RunManifest,
    samples: Sequence[PowerSample],
    events: Sequence[EventMark],
    results: Optional[Sequence[InferenceResult]] = None,
    ground_truth: Optional[Mapping[str, int]] = None,
    idle_window: Optional[tuple[float, float]] = None,
    label_offset: int = 0,
) -> AggregateReport:
    """Assemble the full report for one run from parsed inputs."""
    intervals, window = pair_events(events)
    if manifest.batch_count != len(intervals):
        raise ManifestMismatch(
            f"manifest declares {manifest.batch_count} batches, "
            f"events pair into {len(intervals)}"
        )
    t_inf, t_mean_inf, t_test = compute_timing(intervals, window)
    batch_powers = align_power(samples, intervals)
    w_mean_inf, wm_inf = compute_energy(batch_powers, t_inf)

    by_index = {bp.index: bp for bp in batch_powers}
    per_batch = [
        PerBatch(
            index=iv.index,
            duration_s=iv.duration,
            mean_w=by_index[iv.index].mean,
            sample_count=len(by_index[iv.index].watts),
        )
        for iv in intervals
    ]

    idle_power = None
    if idle_window is not None:
        from .monitor import measure_idle

        idle_power = measure_idle(samples, idle_window, intervals)

    top1 = top5 = None
    if results and ground_truth is not None:
        accuracies = score_topk(results, ground_truth, label_offset=label_offset)
        top1, top5 = accuracies.get(1), accuracies.get(5)

    return AggregateReport(
        t_inf=t_inf,
        t_mean_inf=t_mean_inf,
        t_test=t_test,
        w_mean_inf=w_mean_inf,
        wm_inf=wm_inf,
        per_batch=per_batch,
        idle_power=idle_power,
        top1=top1,
        top5=top5,
        empty_batch_count=sum(1 for bp in batch_powers if bp.mean is None),
        clock_dispersion=manifest.clock_dispersion,
        run_id=manifest.run_id,
    )
