import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from wattbench.model import (
    BatchInterval,
    DuplicateLabel,
    EventMark,
    InferenceResult,
    MalformedLine,
    NonMonotonicTime,
    OverlappingIntervals,
    PowerSample,
    UnknownLabel,
    UnpairedLabel,
    pair_events,
    parse_events_file,
    parse_ground_truth,
    parse_power_file,
    parse_results_file,
    serialize_events_file,
    serialize_power_file,
    serialize_results_file,
)


class TestParsePowerFile:
    def test_single_well_formed_line(self):
        samples = parse_power_file(b"1000.000000,0.500000,5.000000,2.500000\n")
        assert samples == [PowerSample(1000.0, 0.5, 5.0, 2.5)]

    def test_empty_file(self):
        assert parse_power_file(b"") == []

    def test_non_numeric_is_malformed(self):
        with pytest.raises(MalformedLine) as exc:
            parse_power_file(b"abc,1,2,3\n")
        assert exc.value.line_no == 1

    def test_wrong_field_count(self):
        with pytest.raises(MalformedLine):
            parse_power_file(b"1.0,2.0,3.0\n")

    def test_negative_value_rejected(self):
        with pytest.raises(MalformedLine):
            parse_power_file(b"1.0,-0.5,5.0,2.5\n")

    def test_comment_lines_ignored(self):
        data = b"# provenance comment\n1.0,0.1,5.0,0.5\n"
        assert len(parse_power_file(data)) == 1

    def test_small_backwards_jitter_tolerated(self):
        data = b"1.0000,0,0,1\n0.9995,0,0,1\n"
        assert len(parse_power_file(data)) == 2

    def test_non_monotonic_time(self):
        data = b"1.0,0,0,1\n0.99,0,0,1\n"
        with pytest.raises(NonMonotonicTime) as exc:
            parse_power_file(data)
        assert exc.value.line_no == 2

    def test_reported_line_numbers_skip_comments(self):
        data = b"# c\n1.0,0,0,1\nbogus\n"
        with pytest.raises(MalformedLine) as exc:
            parse_power_file(data)
        assert exc.value.line_no == 3


class TestParseEventsFile:
    def test_minimal_run(self):
        data = b"test_start,10.0\ninf_start_batch_0,11.0\ninf_end_batch_0,11.5\ntest_end,12.0\n"
        events, intervals, window = parse_events_file(data)
        assert len(events) == 4
        assert intervals == [BatchInterval(0, 11.0, 11.5)]
        assert window == (10.0, 12.0)

    def test_unpaired_start(self):
        data = b"inf_start_batch_3,1.0\n"
        with pytest.raises(UnpairedLabel) as exc:
            parse_events_file(data)
        assert exc.value.index == 3

    def test_overlapping_intervals(self):
        data = (
            b"inf_start_batch_0,1.0\ninf_end_batch_0,2.0\n"
            b"inf_start_batch_1,1.5\ninf_end_batch_1,3.0\n"
        )
        with pytest.raises(OverlappingIntervals) as exc:
            parse_events_file(data)
        assert exc.value.indices == (0, 1)

    def test_touching_intervals_allowed(self):
        data = (
            b"inf_start_batch_0,1.0\ninf_end_batch_0,2.0\n"
            b"inf_start_batch_1,2.0\ninf_end_batch_1,3.0\n"
        )
        _, intervals, _ = parse_events_file(data)
        assert len(intervals) == 2

    def test_unknown_label(self):
        with pytest.raises(UnknownLabel) as exc:
            parse_events_file(b"warmup_begin,1.0\n")
        assert exc.value.line_no == 1

    def test_duplicate_label(self):
        data = b"inf_start_batch_0,1.0\ninf_start_batch_0,1.1\ninf_end_batch_0,2.0\n"
        with pytest.raises(DuplicateLabel):
            parse_events_file(data)

    def test_window_absent_without_both_marks(self):
        data = b"test_start,1.0\ninf_start_batch_0,2.0\ninf_end_batch_0,3.0\n"
        _, _, window = parse_events_file(data)
        assert window is None


class TestResultsAndGroundTruth:
    def test_results_roundtrip(self):
        results = [
            InferenceResult("img1", ((66, 0.539), (55, 0.085))),
            InferenceResult("img2", ((3, 0.9), (1, 0.05))),
        ]
        parsed = parse_results_file(serialize_results_file(results))
        assert parsed == results

    def test_ragged_k_rejected(self):
        data = "a,1,0.5,2,0.25\nb,1,0.5\n"
        with pytest.raises(MalformedLine) as exc:
            parse_results_file(data)
        assert exc.value.line_no == 2

    def test_ground_truth(self):
        assert parse_ground_truth("img1 65\nimg2 3\n") == {"img1": 65, "img2": 3}


# one-microsecond grid keeps six-decimal serialization lossless
ts_values = st.integers(min_value=0, max_value=4_000_000_000_000).map(lambda u: u / 1e6)
small_values = st.integers(min_value=0, max_value=100_000_000).map(lambda u: u / 1e6)


@settings(max_examples=60)
@given(
    st.lists(
        st.tuples(ts_values, small_values, small_values, small_values),
        max_size=40,
    )
)
def test_power_file_roundtrip(rows):
    rows.sort(key=lambda r: r[0])
    samples = [PowerSample(*row) for row in rows]
    text = serialize_power_file(samples)
    parsed = parse_power_file(text)
    assert parsed == samples
    assert serialize_power_file(parsed) == text  # canonical content is a fixpoint


@settings(max_examples=60)
@given(
    st.lists(
        st.tuples(st.integers(1, 10**7), st.integers(0, 10**7)),
        max_size=20,
    ),
    st.integers(0, 10**9),
)
def test_events_file_roundtrip(pairs, base_us):
    # built on an integer-microsecond grid so serialization is lossless
    events = [EventMark("test_start", base_us / 1e6)]
    t_us = base_us
    for i, (gap_us, width_us) in enumerate(pairs):
        start_us = t_us + gap_us
        end_us = start_us + width_us
        events.append(EventMark(f"inf_start_batch_{i}", start_us / 1e6))
        events.append(EventMark(f"inf_end_batch_{i}", end_us / 1e6))
        t_us = end_us
    events.append(EventMark("test_end", (t_us + 10**6) / 1e6))
    text = serialize_events_file(events)
    parsed_events, intervals, window = parse_events_file(text)
    assert parsed_events == events
    assert serialize_events_file(parsed_events) == text
    assert len(intervals) == len(pairs)
    assert window is not None


@settings(max_examples=40)
@given(st.integers(min_value=0, max_value=30))
def test_interval_pairing_is_bijection(n):
    events = []
    for i in range(n):
        events.append(EventMark(f"inf_start_batch_{i}", float(2 * i)))
        events.append(EventMark(f"inf_end_batch_{i}", float(2 * i + 1)))
    intervals, _ = pair_events(events)
    assert [iv.index for iv in intervals] == list(range(n))


def test_interval_requires_start_before_end():
    with pytest.raises(ValueError):
        BatchInterval(0, 2.0, 1.0)


def test_power_sample_consistency_check_is_advisory():
    # power disagreeing with V*I parses fine; the check only reports it
    sample = PowerSample(0.0, 1.0, 5.0, 9.0)
    assert not sample.power_consistent()
    assert PowerSample(0.0, 0.5, 5.0, 2.5).power_consistent()
