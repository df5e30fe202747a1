"""Wall-time and peak-allocation benchmarks over a grid of sequence lengths."""
from __future__ import annotations

import csv
import io
import statistics
import time
import tracemalloc
from dataclasses import dataclass

import numpy as np

from .attention import SourceTargetSplit, qla_forward, softmax_attn
from .data import SequenceBatch
from .delivery import ExportLog, SummaryCache, SummaryTokens, consume, fetch_for_inference, publish
from .model import ModelConfig, VistaModel

DEFAULT_GRID = (1024, 4096, 16384, 65536)


@dataclass
class BenchRow:
    kernel: str
    n: int
    wall_time: float  # median seconds
    peak_alloc: int  # bytes, from one extra traced run


def _median_time(fn, reps):
    times = []
    for _ in range(reps):
        start = time.perf_counter()
        fn()
        times.append(time.perf_counter() - start)
    return statistics.median(times)


def _peak(fn):
    tracemalloc.start()
    try:
        fn()
        return tracemalloc.get_traced_memory()[1]
    finally:
        tracemalloc.stop()


def _measure(kernel, n, fn, reps, trace):
    fn()  # warm-up
    wall = _median_time(fn, reps)
    return BenchRow(kernel, n, wall, _peak(fn) if trace else 0)


def kernel_bench(grid=DEFAULT_GRID, d=64, reps=5, seed=0, kernels=("qla", "softmax"), trace=True):
    """Self-attention over N rows with QLA and with full softmax attention."""
    rows = []
    rng = np.random.default_rng(seed)
    for n in grid:
        q, k, v = (rng.normal(scale=0.5, size=(n, d)).astype(np.float32) for _ in range(3))
        if "qla" in kernels:
            split = SourceTargetSplit.sources_only(q, k, v)
            rows.append(_measure("qla", n, lambda: qla_forward(split), reps, trace))
        if "softmax" in kernels:
            scale = 1.0 / np.sqrt(d)
            rows.append(_measure("softmax", n, lambda: softmax_attn(q, k, v, scale=scale, chunk=512),
                                 reps, trace))
    return rows


def latency_bench(grid=DEFAULT_GRID, d=64, k=32, candidates=8, reps=5, requests=20, seed=0, trace=True):
    """Per-request latency of cached inference versus the full two-stage pipeline.

    Cached requests fetch and dequantize stored tokens and run stage two only;
    the full pipeline embeds and summarises the whole history first. Cached
    requests are timed one at a time, round-robin over the grid, so slow drift
    in machine state lands on every length equally; the row reports the median.
    """
    model = VistaModel.create(ModelConfig(d=d, k=k, item_buckets=1 << 12), seed=seed)
    rng = np.random.default_rng(seed)
    log, cache = ExportLog(), SummaryCache()
    cand_items = rng.integers(0, 10_000, candidates)
    cand_cats = rng.integers(0, 16, candidates)
    batches = {}
    for n in grid:
        items = rng.integers(0, 10_000, n)
        cats = rng.integers(0, 16, n)
        batches[n] = SequenceBatch(f"user{n}", items, cats, cand_items, cand_cats, np.zeros(candidates))
        publish(log, SummaryTokens(batches[n].user_id, 1, model.summary_tokens(batches[n])))
    consume(log, cache)

    def request(uid):
        tokens = fetch_for_inference(cache, uid).tokens
        return model.predict_from_tokens(tokens, cand_items, cand_cats)

    for n in grid:
        request(batches[n].user_id)  # warm-up
    times = {n: [] for n in grid}
    for _ in range(reps):
        for n in grid:
            uid = batches[n].user_id
            for _ in range(requests):
                start = time.perf_counter()
                request(uid)
                times[n].append(time.perf_counter() - start)

    rows = []
    for n in grid:
        uid = batches[n].user_id
        rows.append(BenchRow("cached", n, statistics.median(times[n]), _peak(lambda: request(uid)) if trace else 0))
        rows.append(_measure("full", n, lambda b=batches[n]: model.predict_batch(b), reps, trace))
    return rows


def loglog_slope(rows, kernel):
    pts = sorted((r.n, r.wall_time) for r in rows if r.kernel == kernel)
    x = np.log([p[0] for p in pts])
    y = np.log([p[1] for p in pts])
    return float(np.polyfit(x, y, 1)[0])


def to_csv(rows) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["kernel", "N", "wall_time", "peak_alloc"])
    for r in rows:
        writer.writerow([r.kernel, r.n, f"{r.wall_time:.6g}", r.peak_alloc])
    return buf.getvalue()
