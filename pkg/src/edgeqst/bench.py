"""Single-threaded per-inference latency harness."""

from __future__ import annotations

import math
import time
import tracemalloc
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class BenchStats:
    engine: str
    n: int
    mean_ms: float
    median_ms: float
    p95_ms: float
    std_ms: float
    total_s: float
    warmup: int = 0


@dataclass
class BenchRun:
    stats: BenchStats
    latencies_ms: np.ndarray
    # net bytes still allocated after the timed loop, if measured
    retained_bytes: int | None = None


def summarize_stats(latencies_ms, engine: str = "", warmup: int = 0,
                    total_s: float | None = None) -> BenchStats:
    """Mean, median, nearest-rank p95 and population std of the samples (ms)."""
    x = np.asarray(latencies_ms, dtype=np.float64)
    if x.size == 0:
        raise ValueError("no latency samples")
    srt = np.sort(x)
    p95 = float(srt[math.ceil(0.95 * len(srt)) - 1])
    if total_s is None:
        total_s = float(np.sum(x)) / 1e3
    return BenchStats(engine, int(x.size), float(np.mean(x)), float(np.median(x)), p95,
                      float(np.std(x)), float(total_s), warmup)


def time_engine(engine, dataset, n: int = 10_000, warmup: int = 100,
                track_memory: bool = False) -> BenchRun:
    """Time ``n`` single-sequence inferences, cycling through the dataset.

    The sequence views and the latency buffer are prepared before the loop,
    so the timed loop itself only calls the engine and stores one float.
    """
    if n <= 0:
        raise ValueError("n must be > 0")
    values = np.asarray(dataset.values)
    if len(values) == 0:
        raise ValueError("benchmark dataset is empty")
    seqs = [values[i] for i in range(len(values))]
    m = len(seqs)
    lat = np.empty(n, dtype=np.float64)
    infer = engine.infer_one
    clock = time.perf_counter_ns
    for i in range(warmup):
        infer(seqs[i % m])

    if track_memory:
        tracemalloc.start()
        before = tracemalloc.get_traced_memory()[0]
    start = clock()
    t0 = start
    for i in range(n):
        infer(seqs[i % m])
        t1 = clock()
        lat[i] = t1 - t0
        t0 = t1
    total_ns = clock() - start
    retained = None
    if track_memory:
        retained = tracemalloc.get_traced_memory()[0] - before
        tracemalloc.stop()
    lat /= 1e6
    stats = summarize_stats(lat, getattr(engine, "tag", ""), warmup, total_ns / 1e9)
    return BenchRun(stats, lat, retained)


def throughput(engine, dataset, n: int = 10_000, threads: int = 1, batch: int = 64) -> float:
    """Inferences per second with batched, multi-threaded execution."""
    values = np.asarray(dataset.values)
    reps = -(-n // len(values))
    data = np.concatenate([values] * reps)[:n]
    chunks = [data[i : i + batch] for i in range(0, n, batch)]
    start = time.perf_counter()
    with ThreadPoolExecutor(max(1, threads)) as pool:
        list(pool.map(engine.predict, chunks))
    return n / (time.perf_counter() - start)
