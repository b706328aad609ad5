"""CPU timing harness for dense patch scoring and the scanner-throughput model.

Timing uses the monotonic wall clock at second-scale granularity. Image decode
is excluded (the patch must be in memory); crop extraction, normalization,
forward passes, and averaging are all inside the timed region. One untimed
warm-up run precedes measurement to absorb first-touch page faults.
"""

from __future__ import annotations

import csv
import statistics
import time
from dataclasses import dataclass
from pathlib import Path

from .data import DENSE_STRIDE, crop_positions, dense_score
from .model import INPUT_SIZE, ModelParams, param_count, serialize

#: published single-patch reference for the 1-kernel model
REFERENCE_SEC_PER_PATCH = 0.017
REFERENCE_HOST = "Intel i9-7920X @ 2.90GHz"

SECONDS_PER_HOUR = 3600.0


@dataclass(frozen=True)
class TimingReport:
    model_tag: str
    patch_dims: tuple[int, int, int]
    runs: int
    mean_seconds: float
    std_seconds: float
    samples: tuple[float, ...]
    host: str
    threads: int
    forward_calls: int
    positions: int


def time_patch_scoring(
    params: ModelParams,
    patch,
    runs: int = 100,
    stride: int = DENSE_STRIDE,
    threads: int = 1,
    host: str = "",
    model_tag: str = "",
) -> TimingReport:
    """Time the full dense-scoring pipeline over `runs` repetitions.

    Every run re-executes crop extraction and all forward passes (no caching;
    the forward call count is recorded so harness users can verify it equals
    runs * positions). Reports mean, sample std, and the raw samples.
    """
    if runs < 1:
        raise ValueError("runs must be >= 1")
    n_positions = len(crop_positions(patch.shape[0], INPUT_SIZE, stride)) * len(
        crop_positions(patch.shape[1], INPUT_SIZE, stride)
    )
    calls = 0

    def count() -> None:
        nonlocal calls
        calls += 1

    dense_score(params, patch, stride, threads)  # warm-up, untimed
    samples = []
    for _ in range(runs):
        t0 = time.perf_counter()
        dense_score(params, patch, stride, threads, on_crop=count)
        samples.append(time.perf_counter() - t0)

    return TimingReport(
        model_tag=model_tag or f"{params.n_kernels}-kernel",
        patch_dims=(patch.shape[0], patch.shape[1], patch.shape[2]),
        runs=runs,
        mean_seconds=statistics.fmean(samples),
        std_seconds=statistics.stdev(samples) if runs > 1 else 0.0,
        samples=tuple(samples),
        host=host,
        threads=threads,
        forward_calls=calls,
        positions=n_positions,
    )


def estimate_scanner_throughput(
    patches_per_wsi: float, n_wsi: float, sec_per_patch: float
) -> float:
    """Hours to score a scanner load: patches/slide x slides x sec/patch."""
    if patches_per_wsi <= 0 or n_wsi <= 0 or sec_per_patch <= 0:
        raise ValueError("all throughput inputs must be positive")
    return patches_per_wsi * n_wsi * sec_per_patch / SECONDS_PER_HOUR


def model_size_report(params: ModelParams) -> tuple[int, int]:
    """(trainable parameter count, serialized weight-file size in bytes)."""
    return param_count(params), len(serialize(params))


def format_timing_table(report: TimingReport) -> str:
    lines = [
        f"model:          {report.model_tag}",
        f"patch:          {report.patch_dims[0]}x{report.patch_dims[1]}x{report.patch_dims[2]}",
        f"runs:           {report.runs}",
        f"threads:        {report.threads}",
        f"mean:           {report.mean_seconds:.6f} s/patch",
        f"std:            {report.std_seconds:.6f} s",
        f"min/max:        {min(report.samples):.6f} / {max(report.samples):.6f} s",
        f"forward calls:  {report.forward_calls} ({report.runs} runs x {report.positions} positions)",
        f"reference:      {REFERENCE_SEC_PER_PATCH} s/patch published for the 1-kernel model on {REFERENCE_HOST}",
    ]
    if report.host:
        lines.insert(1, f"host:           {report.host}")
    return "\n".join(lines)


def write_timing_csv(report: TimingReport, path: str | Path, comment: str = "") -> None:
    with open(path, "w", newline="") as fh:
        if comment:
            fh.write(f"# {comment}\n")
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["run", "seconds"])
        for i, s in enumerate(report.samples):
            writer.writerow([i, repr(s)])
        writer.writerow(["mean", repr(report.mean_seconds)])
        writer.writerow(["std", repr(report.std_seconds)])
