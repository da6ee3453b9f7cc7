import random

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from wattbench.aggregate import (
    AllBatchesEmpty,
    BatchPower,
    ManifestMismatch,
    MissingGroundTruth,
    TopKTooShort,
    align_power,
    build_report,
    compute_energy,
    compute_timing,
    rank_of_truth,
    score_topk,
)
from wattbench.model import (
    BatchInterval,
    EventMark,
    InferenceResult,
    PowerSample,
    RunManifest,
)


def brute_force_align(samples, intervals):
    """Oracle: scan every sample against every interval, inclusive ends."""
    out = []
    for interval in intervals:
        watts = [s.power for s in samples if interval.start <= s.t <= interval.end]
        out.append((interval.index, watts))
    return out


class TestComputeTiming:
    def test_two_intervals(self):
        intervals = [BatchInterval(0, 0.0, 0.5), BatchInterval(1, 1.0, 2.5)]
        t_inf, t_mean, t_test = compute_timing(intervals, (0.0, 10.0))
        assert t_inf == 2.0
        assert t_mean == 1.0
        assert t_test == 10.0

    def test_mean_inference_time_fixture(self):
        # 5000 equal batches summing to 685.490 s of inference
        duration = 685.490 / 5000
        intervals = [
            BatchInterval(i, float(i), float(i) + duration) for i in range(5000)
        ]
        t_inf, t_mean, _ = compute_timing(intervals)
        assert t_inf == pytest.approx(685.490, rel=1e-9)
        assert t_mean == pytest.approx(0.137098, abs=1e-6)
        assert round(t_mean, 3) == 0.137

    def test_zero_length_interval(self):
        t_inf, t_mean, t_test = compute_timing([BatchInterval(0, 5.0, 5.0)])
        assert t_inf == 0.0
        assert t_mean == 0.0
        assert t_test is None

    def test_missing_window_leaves_others_computed(self):
        t_inf, t_mean, t_test = compute_timing([BatchInterval(0, 0.0, 1.0)], None)
        assert t_inf == 1.0 and t_test is None

    def test_n_mismatch(self):
        with pytest.raises(ManifestMismatch):
            compute_timing([BatchInterval(0, 0.0, 1.0)], None, n=2)


class TestAlignPower:
    def test_inclusive_boundaries(self):
        samples = [PowerSample(t, 0.0, 0.0, 2.0) for t in (1.0, 2.0, 3.0)]
        [bp] = align_power(samples, [BatchInterval(0, 1.0, 3.0)])
        assert bp.watts == (2.0, 2.0, 2.0)
        assert bp.mean == 2.0

    def test_empty_batch_reported_not_raised(self):
        samples = [PowerSample(float(t), 0.0, 0.0, 1.0) for t in (1, 2)]
        [bp] = align_power(samples, [BatchInterval(0, 1.4, 1.6)])
        assert bp.watts == ()
        assert bp.mean is None

    def test_square_wave_plateaus(self):
        # 1 W idle, 3 W busy; busy plateaus exactly covered by the intervals
        samples = []
        for tick in range(0, 120):
            t = tick * 0.1
            busy = any(2 + 4 * i < t < 4 + 4 * i for i in range(3))
            samples.append(PowerSample(t, 0.0, 0.0, 3.0 if busy else 1.0))
        intervals = [BatchInterval(i, 2.05 + 4 * i, 3.95 + 4 * i) for i in range(3)]
        aligned = align_power(samples, intervals)
        oracle = brute_force_align(samples, intervals)
        for bp, (index, watts) in zip(aligned, oracle):
            assert bp.index == index
            assert list(bp.watts) == watts
            assert bp.mean == 3.0

    def test_touching_intervals_share_boundary_sample(self):
        samples = [PowerSample(2.0, 0.0, 0.0, 5.0)]
        aligned = align_power(
            samples, [BatchInterval(0, 1.0, 2.0), BatchInterval(1, 2.0, 3.0)]
        )
        assert aligned[0].watts == (5.0,)
        assert aligned[1].watts == (5.0,)

    @settings(max_examples=60)
    @given(st.data())
    def test_matches_brute_force(self, data):
        n_samples = data.draw(st.integers(0, 50))
        samples = [
            PowerSample(
                data.draw(st.floats(0, 100, allow_nan=False)),
                0.0,
                0.0,
                data.draw(st.floats(0, 10, allow_nan=False)),
            )
            for _ in range(n_samples)
        ]
        edges = sorted(
            data.draw(
                st.lists(
                    st.floats(0, 100, allow_nan=False), min_size=2, max_size=10
                )
            )
        )
        intervals = [
            BatchInterval(i, a, b)
            for i, (a, b) in enumerate(zip(edges[::2], edges[1::2]))
        ]
        aligned = align_power(samples, intervals)
        for bp, (index, watts) in zip(aligned, brute_force_align(samples, intervals)):
            assert bp.index == index
            assert sorted(bp.watts) == sorted(watts)

    def test_permutation_invariance(self):
        rng = random.Random(7)
        samples = [
            PowerSample(rng.uniform(0, 10), 0.0, 0.0, rng.uniform(0, 5))
            for _ in range(40)
        ]
        intervals = [BatchInterval(0, 2.0, 4.0), BatchInterval(1, 6.0, 9.0)]
        baseline = align_power(samples, intervals)
        shuffled = samples[:]
        rng.shuffle(shuffled)
        assert align_power(shuffled, intervals) == baseline


class TestComputeEnergy:
    def test_simple_mean(self):
        batches = [BatchPower.of(i, [2.0]) for i in range(4)]
        w_mean, wm = compute_energy(batches, t_inf=30.0)
        assert w_mean == 2.0
        assert wm == 1.0  # 2 W for half a minute

    def test_energy_identity_for_quantized_coral_run(self):
        # run shape: t_inf=20.788 s over 5000 batches at the mean power that
        # yields 1.543 wattminutes under the energy identity
        w_mean = 1.543 * 60 / 20.788
        batches = [BatchPower.of(i, [w_mean]) for i in range(5000)]
        _, wm = compute_energy(batches, t_inf=20.788)
        assert wm == pytest.approx(1.543, rel=1e-9)
        assert round(wm, 3) == 1.543

    def test_empty_batches_excluded_from_mean(self):
        batches = [BatchPower.of(0, [4.0]), BatchPower.of(1, [])]
        w_mean, _ = compute_energy(batches, t_inf=10.0)
        assert w_mean == 4.0

    def test_all_batches_empty(self):
        with pytest.raises(AllBatchesEmpty):
            compute_energy([BatchPower.of(0, [])], t_inf=1.0)


class TestScoreTopk:
    def craft(self, sample_id, scores):
        ranked = tuple(
            sorted(enumerate(scores), key=lambda pair: (-pair[1], pair[0]))
        )
        return InferenceResult(sample_id, ranked)

    def test_top1_correct(self):
        result = self.craft("a", [0.1, 0.5, 0.2, 0.15, 0.05])
        accuracy = score_topk([result], {"a": 1})
        assert accuracy == {1: 1.0, 5: 1.0}

    def test_truth_ranked_fourth(self):
        result = self.craft("a", [0.1, 0.5, 0.2, 0.15, 0.05])
        accuracy = score_topk([result], {"a": 0})  # 0.1 ranks 4th
        assert accuracy == {1: 0.0, 5: 1.0}

    def test_reference_accuracy_fractions(self):
        # 1000 samples: 733 where truth ranks 1st, 175 more inside the top
        # five, 92 outside entirely -> 0.733 / 0.908 exactly
        results, truth = [], {}
        for i in range(1000):
            sid = f"img{i}"
            if i < 733:
                scores = [0.9, 0.05, 0.02, 0.01, 0.005]
            elif i < 908:
                scores = [0.05, 0.9, 0.02, 0.01, 0.005]
            else:
                scores = [0.0, 0.0, 0.0, 0.0, 0.0]
            topk = tuple(
                sorted(enumerate(scores), key=lambda pair: (-pair[1], pair[0]))
            )
            results.append(InferenceResult(sid, topk))
            truth[sid] = 0 if i < 908 else 999  # 999 never appears in topk
        accuracy = score_topk(results, truth)
        assert accuracy[1] == 0.733
        assert accuracy[5] == 0.908

    def test_ties_break_by_ascending_index(self):
        topk = ((7, 0.5), (2, 0.5), (9, 0.1))
        assert rank_of_truth(topk, 2) == 1
        assert rank_of_truth(topk, 7) == 2

    def test_label_offset(self):
        topk = ((67, 0.9), (3, 0.1))
        assert rank_of_truth(topk, 66, label_offset=1) == 1

    def test_missing_ground_truth(self):
        with pytest.raises(MissingGroundTruth):
            score_topk([self.craft("a", [1, 0, 0, 0, 0])], {"b": 0})

    def test_topk_too_short(self):
        result = InferenceResult("a", ((1, 0.9), (0, 0.1)))
        with pytest.raises(TopKTooShort):
            score_topk([result], {"a": 1}, ks=(1, 5))

    def test_argsort_invariance(self):
        # scores on a coarse grid so an affine transform is exact
        rng = random.Random(3)
        results, truth = [], {}
        for i in range(200):
            scores = [rng.randrange(0, 64) / 64 for _ in range(8)]
            ranked = tuple(
                sorted(enumerate(scores), key=lambda pair: (-pair[1], pair[0]))
            )
            transformed = tuple((idx, 2 * s + 3) for idx, s in ranked)
            sid = f"s{i}"
            results.append((InferenceResult(sid, ranked), InferenceResult(sid, transformed)))
            truth[sid] = rng.randrange(0, 8)
        plain = score_topk([a for a, _ in results], truth)
        scaled = score_topk([b for _, b in results], truth)
        assert plain == scaled


def make_run(intervals, samples, window=(0.0, 100.0)):
    events = []
    if window:
        events.append(EventMark("test_start", window[0]))
    for iv in intervals:
        events.append(EventMark(f"inf_start_batch_{iv.index}", iv.start))
        events.append(EventMark(f"inf_end_batch_{iv.index}", iv.end))
    if window:
        events.append(EventMark("test_end", window[1]))
    manifest = RunManifest(
        run_id="test-run",
        batch_count=len(intervals),
        batch_size=1,
        device_name="dev",
        model_name="model",
        clock_offset=0.0,
        clock_rtt=0.0,
        power_file="power.csv",
        events_file="events.csv",
        clock_dispersion=0.0002,
    )
    return manifest, samples, events


class TestBuildReport:
    def test_report_identity_and_passthrough(self):
        intervals = [BatchInterval(0, 10.0, 20.0), BatchInterval(1, 30.0, 40.0)]
        samples = [
            PowerSample(t, 0.0, 0.0, 2.0 if t <= 20 else 4.0)
            for t in (10.0, 15.0, 20.0, 30.0, 35.0, 40.0)
        ]
        manifest, samples, events = make_run(intervals, samples)
        report = build_report(manifest, samples, events)
        assert report.t_inf == 20.0
        assert report.t_mean_inf == 10.0
        assert report.t_test == 100.0
        assert report.w_mean_inf == 3.0
        assert report.wm_inf == report.w_mean_inf * report.t_inf / 60
        assert report.empty_batch_count == 0
        assert report.clock_dispersion == 0.0002
        assert [b.sample_count for b in report.per_batch] == [3, 3]

    def test_no_results_means_no_accuracy(self):
        intervals = [BatchInterval(0, 1.0, 2.0)]
        samples = [PowerSample(1.5, 0.0, 0.0, 1.0)]
        manifest, samples, events = make_run(intervals, samples)
        report = build_report(manifest, samples, events)
        assert report.top1 is None and report.top5 is None

    def test_manifest_batch_count_must_match(self):
        intervals = [BatchInterval(0, 1.0, 2.0)]
        samples = [PowerSample(1.5, 0.0, 0.0, 1.0)]
        manifest, samples, events = make_run(intervals, samples)
        manifest.batch_count = 5
        with pytest.raises(ManifestMismatch):
            build_report(manifest, samples, events)

    def test_thousand_batches_have_thousand_rows(self):
        intervals = [
            BatchInterval(i, 10.0 * i, 10.0 * i + 5.0) for i in range(1000)
        ]
        samples = [
            PowerSample(10.0 * i + 2.5, 0.0, 0.0, 2.0) for i in range(1000)
        ]
        manifest, samples, events = make_run(intervals, samples, window=(0.0, 10001.0))
        manifest.batch_size = 5
        report = build_report(manifest, samples, events)
        assert len(report.per_batch) == 1000

    def test_report_json_roundtrip(self):
        intervals = [BatchInterval(0, 1.0, 2.0)]
        samples = [PowerSample(1.5, 0.0, 0.0, 1.0)]
        manifest, samples, events = make_run(intervals, samples)
        report = build_report(manifest, samples, events)
        from wattbench.model import AggregateReport

        assert AggregateReport.from_json(report.to_json()) == report


class TestScalingInvariance:
    def test_power_of_two_scaling_is_exact(self):
        rng = random.Random(11)
        intervals = [BatchInterval(i, 10.0 * i, 10.0 * i + 4.0) for i in range(5)]
        samples = [
            PowerSample(rng.uniform(0, 50), 0.0, 0.0, rng.uniform(0.1, 6.0))
            for _ in range(300)
        ]
        manifest, _, events = make_run(intervals, samples, window=(0.0, 60.0))
        report = build_report(manifest, samples, events)
        for c in (0.5, 2.0, 8.0):
            scaled_samples = [
                PowerSample(s.t, s.current, s.voltage, s.power * c) for s in samples
            ]
            scaled = build_report(manifest, scaled_samples, events)
            assert scaled.w_mean_inf == report.w_mean_inf * c
            assert scaled.wm_inf == report.wm_inf * c
            assert scaled.t_inf == report.t_inf
            assert scaled.t_mean_inf == report.t_mean_inf
