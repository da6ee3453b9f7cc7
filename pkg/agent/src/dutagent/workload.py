"""The batch-loop workload: fetch, label, infer, report.

Labels bracket only the inference calls.  Each batch's samples are fetched
and decoded before its start label, so transfer and preprocessing time land
inside the test window but outside the measured inference intervals.
Results are sent after the final inference; emitted events are never
retracted.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Protocol, Sequence

from .backends import Backend


class KTooLarge(ValueError):
    pass


class Session(Protocol):
    """What run_workload needs from a monitor connection."""

    def event(self, label: str) -> None: ...

    def result(self, sample_id: str, topk) -> None: ...

    def fetch(self, path: str) -> bytes: ...


@dataclass
class WorkloadSpec:
    """One benchmark run: N batches of B samples through a backend."""

    run_id: str
    backend: str
    batch_count: int
    batch_size: int = 1
    dataset_manifest: list[str] = field(default_factory=list)
    repeat_samples: bool = False  # reuse the first B samples for every batch
    topk: int = 5
    label_offset: int = 0

    def __post_init__(self):
        if self.batch_count < 1:
            raise ValueError(f"batch_count must be >= 1, got {self.batch_count}")
        if self.batch_size < 1:
            raise ValueError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.dataset_manifest:
            needed = (
                self.batch_size
                if self.repeat_samples
                else self.batch_count * self.batch_size
            )
            if len(self.dataset_manifest) < needed:
                raise ValueError(
                    f"dataset manifest lists {len(self.dataset_manifest)} samples, "
                    f"run needs {needed}"
                )

    def batch_sample_ids(self, index: int) -> list[str]:
        if not self.dataset_manifest:
            # no dataset: synthetic ids, backends get empty input
            base = 0 if self.repeat_samples else index * self.batch_size
            return [f"synthetic/{base + j}" for j in range(self.batch_size)]
        if self.repeat_samples:
            return self.dataset_manifest[: self.batch_size]
        start = index * self.batch_size
        return self.dataset_manifest[start : start + self.batch_size]


def extract_topk(
    output_vector: Sequence[float],
    k: int,
    label_offset: int = 0,
) -> list[tuple[int, float]]:
    """Best k (class_index, score) pairs: descending score, ties by index.

    Indices are shifted down by ``label_offset`` for models with a leading
    background class.
    """
    if k > len(output_vector):
        raise KTooLarge(f"k={k} exceeds vector length {len(output_vector)}")
    ranked = sorted(enumerate(output_vector), key=lambda pair: (-pair[1], pair[0]))
    return [(index - label_offset, float(score)) for index, score in ranked[:k]]


def run_workload(spec: WorkloadSpec, session: Session, backend: Backend) -> int:
    """Execute the batch loop; returns the number of results sent."""
    outputs: list[tuple[str, Sequence[float]]] = []
    seen: set[str] = set()

    session.event("test_start")
    for index in range(spec.batch_count):
        sample_ids = spec.batch_sample_ids(index)
        samples = [
            session.fetch(sid) if spec.dataset_manifest else b"" for sid in sample_ids
        ]
        session.event(f"inf_start_batch_{index}")
        batch_outputs = [backend(sample) for sample in samples]
        session.event(f"inf_end_batch_{index}")
        for sid, vector in zip(sample_ids, batch_outputs):
            if sid not in seen:  # repeat mode inferences the same samples N times
                seen.add(sid)
                outputs.append((sid, vector))

    sent = 0
    for sid, vector in outputs:
        k = min(spec.topk, len(vector))
        if k:
            session.result(sid, extract_topk(vector, k, spec.label_offset))
            sent += 1
    session.event("test_end")
    return sent
