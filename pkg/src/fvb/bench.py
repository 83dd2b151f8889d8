"""Wall-clock timing of encoder forward passes on the host CPU."""

from __future__ import annotations

import csv
import io
import os
import time
from dataclasses import asdict, dataclass

import numpy as np
from threadpoolctl import threadpool_limits

from .encoder import EncoderModel, check_resolution, count_flops, forward, token_count
from .errors import ShapeError, UsageError
from .tensor import DTYPE

DEFAULT_WARMUP = 3
DEFAULT_ITERS = 11
BENCH_FIELDS = (
    "encoder",
    "resolution",
    "form",
    "threads",
    "iterations",
    "warmup",
    "min_ms",
    "median_ms",
    "p90_ms",
    "flops",
    "tokens",
)


@dataclass(frozen=True)
class LatencyRecord:
    encoder: str
    resolution: int
    form: str
    threads: int
    iterations: int
    warmup: int
    min_ms: float
    median_ms: float
    p90_ms: float
    flops: int
    tokens: int


def thread_cap(requested: int | None = None) -> int:
    """Requested thread count, capped by the FVB_THREADS environment variable."""
    n = 1 if requested is None else requested
    env = os.environ.get("FVB_THREADS")
    if env:
        try:
            n = min(n, max(1, int(env)))
        except ValueError:
            raise UsageError(f"FVB_THREADS must be an integer, got {env!r}") from None
    return max(1, n)


def bench_input(model: EncoderModel, res: int, seed: int = 0) -> np.ndarray:
    rng = np.random.default_rng(seed)
    return rng.uniform(-1.0, 1.0, (1, model.config.in_channels, res, res)).astype(DTYPE)


def time_encoder(model: EncoderModel, res: int, warmup: int = DEFAULT_WARMUP, iters: int = DEFAULT_ITERS, threads: int = 1, seed: int = 0) -> LatencyRecord:
    """Untimed warmup passes, then ``iters`` timed passes on one seeded input."""
    if iters < 3:
        raise UsageError(f"need at least 3 timed iterations, got {iters}")
    if warmup < 0:
        raise UsageError("warmup must be non-negative")
    check_resolution(model.config, res)
    threads = thread_cap(threads)
    x = bench_input(model, res, seed)
    samples = []
    with threadpool_limits(limits=threads):
        for _ in range(warmup):
            forward(model, x)
        for _ in range(iters):
            t0 = time.perf_counter_ns()
            forward(model, x)
            samples.append((time.perf_counter_ns() - t0) / 1e6)
    ms = np.asarray(samples)
    return LatencyRecord(
        encoder=model.config.name,
        resolution=res,
        form=model.form,
        threads=threads,
        iterations=iters,
        warmup=warmup,
        min_ms=float(ms.min()),
        median_ms=float(np.median(ms)),
        p90_ms=float(np.percentile(ms, 90)),
        flops=count_flops(model.config, res, model.form),
        tokens=token_count(model.config, res),
    )


def sweep(model: EncoderModel, resolutions, **kwargs) -> list:
    """One record per resolution, in input order. Validates every resolution first."""
    resolutions = list(resolutions)
    if not resolutions:
        raise UsageError("empty resolution list")
    for r in resolutions:
        check_resolution(model.config, r)
    return [time_encoder(model, r, **kwargs) for r in resolutions]


def records_to_csv(records) -> str:
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=BENCH_FIELDS, lineterminator="\n")
    writer.writeheader()
    for rec in records:
        row = asdict(rec)
        for k in ("min_ms", "median_ms", "p90_ms"):
            row[k] = f"{row[k]:.3f}"
        writer.writerow(row)
    return buf.getvalue()


def count_inversions(values) -> int:
    """Adjacent decreases in a sequence (jitter check for latency sweeps)."""
    return sum(1 for a, b in zip(values, values[1:]) if b < a)


__all__ = [
    "LatencyRecord",
    "ShapeError",
    "count_inversions",
    "records_to_csv",
    "sweep",
    "thread_cap",
    "time_encoder",
]
