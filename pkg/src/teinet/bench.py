"""Latency and throughput microbenchmarks.

Latency is measured at batch size 1 and throughput at batch size 16, each
iteration being one eval-mode forward pass. Warmup iterations are discarded
and the remaining timings summarised by median and interquartile range.
"""
import time
from dataclasses import dataclass

import numpy as np
from threadpoolctl import threadpool_info, threadpool_limits

from .backbone import Model, forward_logits
from .errors import ContractError


@dataclass
class LatencyStats:
    batch: int
    iters: int
    median_ms: float
    iqr_ms: float
    min_ms: float
    workers: int

    def clips_per_s(self):
        return 1000.0 * self.batch / self.median_ms


def _as_callable(model, batch, seed):
    if isinstance(model, Model):
        spec = model.spec
        clips = np.random.default_rng(seed).random(
            (batch, spec.frames, 3, spec.input_spatial, spec.input_spatial)).astype(np.float32)
        model.eval()
        return lambda: forward_logits(model, clips)
    if callable(model):
        return lambda: model(batch)
    raise ContractError("bench target must be a Model or a callable taking the batch size")


def _time(fn, batch, warmup, iters, workers):
    if iters < 3:
        raise ContractError(f"need at least 3 timed iterations, got {iters}")
    if warmup < 0:
        raise ContractError("warmup must be nonnegative")
    with threadpool_limits(limits=workers):
        for _ in range(warmup):
            fn()
        times = np.empty(iters)
        for i in range(iters):
            t0 = time.perf_counter()
            fn()
            times[i] = (time.perf_counter() - t0) * 1000.0
    q1, med, q3 = np.percentile(times, [25, 50, 75])
    return LatencyStats(batch, iters, float(med), float(q3 - q1), float(times.min()), workers)


def bench_latency(model, batch=1, warmup=3, iters=10, workers=1, seed=0):
    """Per-call wall time in ms. ``model`` is a Model or a callable ``f(batch)``."""
    return _time(_as_callable(model, batch, seed), batch, warmup, iters, workers)


def bench_throughput(model, batch=16, warmup=2, iters=5, workers=1, seed=0):
    """Same measurement at a larger batch; use ``.clips_per_s()`` for the rate."""
    return _time(_as_callable(model, batch, seed), batch, warmup, iters, workers)


def stability(model, runs=3, **kw):
    """Repeat bench_latency ``runs`` times; returns (medians, relative spread).

    Spread is (max - min) / min of the per-run medians; the stability gate
    requires it to stay below 0.2.
    """
    medians = [bench_latency(model, **kw).median_ms for _ in range(runs)]
    return medians, (max(medians) - min(medians)) / min(medians)


def blas_threads():
    return sum(p.get("num_threads", 0) for p in threadpool_info()) or 1
