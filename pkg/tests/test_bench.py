import numpy as np
import pytest

from tinyfqa import bench
from tinyfqa.bench import (
    estimate_scanner_throughput,
    format_timing_table,
    model_size_report,
    time_patch_scoring,
)
from tinyfqa.data import crop_positions
from tinyfqa.model import param_count, serialize

from conftest import make_params


@pytest.fixture
def small_patch(rng):
    return rng.random((300, 300, 3)).astype(np.float32)


class TestTimePatchScoring:
    def test_single_run_report(self, rng, small_patch):
        report = time_patch_scoring(make_params(rng), small_patch, runs=1)
        assert report.runs == 1
        assert len(report.samples) == 1
        assert report.mean_seconds == report.samples[0]
        assert report.std_seconds == 0.0

    def test_call_count_is_runs_times_positions(self, rng, small_patch):
        params = make_params(rng)
        runs = 4
        report = time_patch_scoring(params, small_patch, runs=runs)
        per_axis = len(crop_positions(300))
        assert report.positions == per_axis * per_axis
        assert report.forward_calls == runs * report.positions

    def test_mean_between_min_and_max(self, rng, small_patch):
        report = time_patch_scoring(make_params(rng), small_patch, runs=5)
        assert min(report.samples) <= report.mean_seconds <= max(report.samples)

    def test_zero_runs_rejected(self, rng, small_patch):
        with pytest.raises(ValueError):
            time_patch_scoring(make_params(rng), small_patch, runs=0)

    def test_table_mentions_published_reference(self, rng, small_patch):
        report = time_patch_scoring(make_params(rng), small_patch, runs=1, host="test-host")
        table = format_timing_table(report)
        assert "0.017" in table
        assert "i9-7920X" in table
        assert "test-host" in table

    def test_csv_export(self, rng, small_patch, tmp_path):
        report = time_patch_scoring(make_params(rng), small_patch, runs=3)
        path = tmp_path / "timing.csv"
        bench.write_timing_csv(report, path, comment="bench")
        lines = path.read_text().splitlines()
        assert lines[0] == "# bench"
        assert lines[1] == "run,seconds"
        assert len(lines) == 2 + 3 + 2  # header rows + samples + mean/std


class TestThroughputEstimator:
    def test_published_fast_model_case(self):
        assert estimate_scanner_throughput(2500, 300, 0.017) == pytest.approx(
            3.54, abs=0.005
        )

    def test_published_slow_model_case(self):
        assert estimate_scanner_throughput(2500, 300, 0.355) == pytest.approx(
            73.96, abs=0.005
        )

    def test_unit_case(self):
        assert estimate_scanner_throughput(1, 1, 3600) == 1.0

    def test_linear_in_each_argument(self):
        base = estimate_scanner_throughput(100, 10, 0.5)
        assert estimate_scanner_throughput(200, 10, 0.5) == pytest.approx(2 * base)
        assert estimate_scanner_throughput(100, 30, 0.5) == pytest.approx(3 * base)
        assert estimate_scanner_throughput(100, 10, 1.5) == pytest.approx(3 * base)

    def test_non_positive_rejected(self):
        with pytest.raises(ValueError):
            estimate_scanner_throughput(0, 300, 0.017)
        with pytest.raises(ValueError):
            estimate_scanner_throughput(2500, 300, -1.0)


class TestModelSizeReport:
    @pytest.mark.parametrize("n,count", [(1, 151), (10, 1501)])
    def test_counts(self, rng, n, count):
        params = make_params(rng, n)
        reported, size_bytes = model_size_report(params)
        assert reported == count
        assert size_bytes == len(serialize(params))
        assert size_bytes == 12 + 4 * param_count(params)
