"""Micro-benchmark harness: warmup discard, repeated timing, CSV rows."""

from __future__ import annotations

import csv
import statistics
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Callable

MIN_REPS = 5
MIN_WARMUP = 2

CSV_COLUMNS = (
    "op", "shape", "reps", "min_s", "median_s", "mean_s", "images_per_s", "speedup_vs_naive",
)


@dataclass
class BenchResult:
    op: str
    shape: tuple
    reps: int
    min_s: float
    median_s: float
    mean_s: float
    images_per_s: float
    speedup_vs_naive: float | None = None  # only for ops with a naive twin

    def row(self) -> list:
        return [
            self.op,
            "x".join(str(d) for d in self.shape),
            self.reps,
            f"{self.min_s:.6g}",
            f"{self.median_s:.6g}",
            f"{self.mean_s:.6g}",
            f"{self.images_per_s:.6g}",
            "" if self.speedup_vs_naive is None else f"{self.speedup_vs_naive:.6g}",
        ]


def time_op(
    fn: Callable[[], object],
    op: str,
    shape: tuple,
    reps: int = MIN_REPS,
    warmup: int = MIN_WARMUP,
) -> BenchResult:
    """Median-of-reps wall time after discarded warmups.

    Repetition and warmup counts are clamped up to the harness minimums.
    """
    reps = max(reps, MIN_REPS)
    warmup = max(warmup, MIN_WARMUP)
    for _ in range(warmup):
        fn()
    times = []
    for _ in range(reps):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    median = statistics.median(times)
    return BenchResult(
        op=op,
        shape=shape,
        reps=reps,
        min_s=min(times),
        median_s=median,
        mean_s=statistics.fmean(times),
        images_per_s=shape[0] / median if median > 0 else float("inf"),
    )


def write_bench_csv(results: list[BenchResult], path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(CSV_COLUMNS)
        for r in results:
            writer.writerow(r.row())
