import time

import pytest

from wattbench.model import BatchInterval, PowerSample, parse_power_file
from wattbench.monitor import (
    SamplerConfig,
    WindowOverlapsInference,
    WindowTooSparse,
    measure_idle,
    run_sampler,
)
from wattbench.psu import SimulatedPsu, constant_power, square_power


def wait_for_samples(handle, count, timeout=10.0):
    deadline = time.monotonic() + timeout
    while handle.sample_count < count:
        if time.monotonic() > deadline:
            raise AssertionError(
                f"only {handle.sample_count} samples after {timeout}s"
            )
        time.sleep(0.002)


class TestSamplerRealTime:
    def test_sample_rate_arithmetic(self, tmp_path):
        out = tmp_path / "power.csv"
        config = SamplerConfig(interval=0.1, out_path=str(out))
        port = SimulatedPsu(constant_power(2.5))
        handle = run_sampler(config, port=port)
        time.sleep(2.05)
        stats = handle.stop()
        assert abs(stats.sample_count - 20) <= 1

    def test_constant_power_field_formatting(self, tmp_path):
        out = tmp_path / "power.csv"
        config = SamplerConfig(interval=0.01, out_path=str(out))
        handle = run_sampler(config, port=SimulatedPsu(constant_power(2.5)))
        wait_for_samples(handle, 10)
        handle.stop()
        lines = out.read_text().strip().split("\n")
        assert lines
        for line in lines:
            assert line.endswith(",2.500000")

    def test_gap_counting_with_dropped_responses(self, tmp_path):
        out = tmp_path / "power.csv"
        config = SamplerConfig(interval=0.005, out_path=str(out), retries=0, timeout=0.01)
        port = SimulatedPsu(constant_power(2.5), drop_every=5)
        handle = run_sampler(config, port=port)
        wait_for_samples(handle, 40)
        stats = handle.stop()
        attempts = stats.sample_count + stats.gap_count
        assert abs(stats.gap_count - attempts // 5) <= 1
        # dropped reads never fabricate lines
        assert len(parse_power_file(out.read_text())) == stats.sample_count

    def test_mean_period_within_five_percent(self, tmp_path):
        out = tmp_path / "power.csv"
        config = SamplerConfig(interval=0.02, out_path=str(out))
        handle = run_sampler(config, port=SimulatedPsu(constant_power(1.0)))
        wait_for_samples(handle, 50)
        handle.stop()
        samples = parse_power_file(out.read_text())
        periods = [b.t - a.t for a, b in zip(samples, samples[1:])]
        mean_period = sum(periods) / len(periods)
        assert abs(mean_period - config.interval) / config.interval < 0.05

    def test_timestamps_strictly_increasing(self, tmp_path):
        out = tmp_path / "power.csv"
        config = SamplerConfig(interval=0.001, out_path=str(out))
        handle = run_sampler(config, port=SimulatedPsu(constant_power(1.0)))
        wait_for_samples(handle, 100)
        handle.stop()
        samples = parse_power_file(out.read_text())
        assert all(a.t < b.t for a, b in zip(samples, samples[1:]))

    def test_file_parseable_while_running(self, tmp_path):
        out = tmp_path / "power.csv"
        config = SamplerConfig(interval=0.002, out_path=str(out))
        handle = run_sampler(config, port=SimulatedPsu(constant_power(1.0)))
        wait_for_samples(handle, 20)
        # no torn lines at any instant
        for _ in range(10):
            parse_power_file(out.read_text())
            time.sleep(0.005)
        handle.stop()


class TestSamplerVirtualTime:
    def test_square_wave_sampling_on_virtual_clock(self, tmp_path, fake_clock):
        fake_clock.sleep(0.05)  # offset the grid off the wave edges
        out = tmp_path / "power.csv"
        config = SamplerConfig(interval=0.1, out_path=str(out))
        port = SimulatedPsu(square_power(1.0, 3.0, period=4.0), clock=fake_clock.time)
        handle = run_sampler(
            config, port=port, clock=fake_clock.time, sleep=fake_clock.sleep
        )
        wait_for_samples(handle, 100)
        handle.stop()
        samples = parse_power_file(out.read_text())
        for sample in samples:
            expected = 1.0 if (sample.t % 4.0) < 2.0 else 3.0
            assert sample.power == expected


class TestMeasureIdle:
    def test_constant_trace(self):
        samples = [PowerSample(float(t), 0.0, 0.0, 1.391) for t in range(20)]
        assert measure_idle(samples, (0.0, 19.0)) == pytest.approx(1.391)

    def test_alternating_values_average(self):
        samples = [
            PowerSample(float(t), 0.0, 0.0, 2.0 if t % 2 == 0 else 4.0)
            for t in range(20)
        ]
        assert measure_idle(samples, (0.0, 19.0)) == 3.0

    def test_window_overlapping_inference_rejected(self):
        samples = [PowerSample(float(t), 0.0, 0.0, 1.0) for t in range(20)]
        intervals = [BatchInterval(7, 5.0, 6.0)]
        with pytest.raises(WindowOverlapsInference) as exc:
            measure_idle(samples, (0.0, 19.0), intervals)
        assert "batch 7" in str(exc.value)

    def test_sparse_window_rejected(self):
        samples = [PowerSample(float(t), 0.0, 0.0, 1.0) for t in range(5)]
        with pytest.raises(WindowTooSparse):
            measure_idle(samples, (0.0, 4.0))

    def test_boundaries_inclusive(self):
        samples = [PowerSample(float(t), 0.0, 0.0, float(t)) for t in range(15)]
        # samples 0..10 inclusive -> mean 5.0
        assert measure_idle(samples, (0.0, 10.0)) == 5.0
