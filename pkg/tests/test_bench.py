import time

import pytest

from teinet.backbone import NetworkSpec, build_network
from teinet.bench import bench_latency, bench_throughput, stability
from teinet.errors import ContractError

SPEC = NetworkSpec(stages=((1, 8), (1, 16), (1, 32)), stem_stride=2, insertion=(0, 1, 2),
                   variant="mem+tim")


def test_iters_minimum():
    with pytest.raises(ContractError):
        bench_latency(lambda b: None, iters=2)


def test_statistics_fields():
    s = bench_latency(build_network(SPEC), batch=1, warmup=1, iters=5)
    assert s.batch == 1 and s.iters == 5 and s.workers == 1
    assert s.median_ms > 0 and s.iqr_ms >= 0 and s.min_ms <= s.median_ms


def test_identity_faster_than_conv():
    ident = bench_latency(lambda b: None, warmup=1, iters=5)
    conv = bench_latency(build_network(SPEC), warmup=1, iters=5)
    assert ident.median_ms < conv.median_ms


def test_batching_does_not_hurt_throughput():
    model = build_network(SPEC)
    single = bench_latency(model, batch=1, warmup=1, iters=5)
    batched = bench_throughput(model, batch=16, warmup=1, iters=3)
    # clips/s at batch 16 is at least that at batch 1, up to a 25% noise allowance
    assert batched.clips_per_s() >= 0.75 * single.clips_per_s()


def test_sleep_callable_median():
    s = bench_latency(lambda b: time.sleep(0.005), warmup=0, iters=5)
    assert 4.5 <= s.median_ms < 50


def test_stability_gate():
    medians, spread = stability(build_network(SPEC), runs=3, warmup=2, iters=7)
    assert len(medians) == 3
    assert spread < 0.2
