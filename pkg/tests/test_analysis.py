import csv
import io

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from teinet.analysis import (
    GraphSpec,
    LayerSpec,
    cost_report,
    count_macs,
    count_params,
    layer_params,
    mini_graph,
    resnet50_block_inputs,
    resnet50_teinet_spec,
)
from teinet.backbone import NetworkSpec
from teinet.errors import ContractError

# Frozen from an independent oracle: torchvision's resnet50(num_classes=174),
# parameters summed, MACs tallied with forward hooks on Conv2d/Linear for one
# 224x224 frame.
TORCHVISION_R50_174_PARAMS = 23_864_558
TORCHVISION_R50_MACS_PER_FRAME = 4_087_492_608


def _single(kind, **kw):
    return LayerSpec(kind, "x", **kw)


class TestUnitFormulas:
    def test_conv3d(self):
        assert layer_params(_single("conv3d", c_in=64, c_out=64, t=3, d=3)) == 64 * 64 * 3 * 3 * 3 == 110_592

    def test_temporal_full(self):
        assert layer_params(_single("temporal1d_full", c_in=64, c_out=64, t=3)) == 64 * 64 * 3 == 12_288

    def test_tim(self):
        assert layer_params(_single("tim", c_in=64, c_out=64, t=3)) == 192

    @given(st.integers(1, 4096), st.sampled_from([1, 3, 5, 7]))
    @settings(max_examples=50)
    def test_tim_is_c_times_k(self, c, k):
        assert layer_params(_single("tim", c_in=c, c_out=c, t=k)) == c * k

    def test_mem(self):
        # 2 * C * C/r reduction weights + C/r * C expansion + biases
        assert layer_params(_single("mem", c_in=64, reduction=8)) == 2 * 64 * 8 + 8 * 64 + 8 + 8 + 64

    def test_bn_linear(self):
        assert layer_params(_single("bn", c_in=32)) == 64
        assert layer_params(_single("linear", c_in=10, c_out=3, bias=True)) == 33
        assert layer_params(_single("linear", c_in=10, c_out=3)) == 30

    def test_conv2d_macs(self):
        g = GraphSpec(input_shape=(1, 3, 32, 32))
        g.add("conv2d", "c", c_in=3, c_out=16, d=3, pad=1)
        assert count_macs(g) == 3 * 16 * 9 * 32 * 32 == 442_368

    def test_unknown_kind(self):
        with pytest.raises(ContractError):
            GraphSpec().add("lstm", "x")
        with pytest.raises(ContractError):
            layer_params(_single("lstm"))

    def test_channel_mismatch(self):
        g = GraphSpec(input_shape=(1, 3, 8, 8))
        g.add("conv2d", "c", c_in=4, c_out=8, d=3, pad=1)
        with pytest.raises(ContractError):
            count_macs(g)

    @pytest.mark.parametrize("c1,c2", [(8, 512), (64, 64), (512, 8)])
    def test_tim_cost_independent_of_channel_product(self, c1, c2):
        # tim at width C costs the same whatever the surrounding convs are
        def graph(c_prev):
            g = GraphSpec(input_shape=(8, 3, 4, 4))
            g.add("conv2d", "a", c_in=3, c_out=c_prev, d=1)
            g.add("conv2d", "b", c_in=c_prev, c_out=64, d=1)
            g.add("tim", "t", c_in=64, c_out=64, t=3)
            return cost_report(g).rows[-1]
        r1, r2 = graph(c1), graph(c2)
        assert r1["params"] == r2["params"] == 192
        assert r1["macs"] == r2["macs"] == 8 * 64 * 4 * 4 * 3


class TestResNet50:
    def test_params_vs_torchvision(self):
        assert count_params(resnet50_teinet_spec(8, 224, 174, variant="none")) == TORCHVISION_R50_174_PARAMS

    def test_params_published_figure(self):
        p = count_params(resnet50_teinet_spec(8, 224, 174, variant="none"))
        assert abs(p - 24.3e6) / 24.3e6 <= 0.02

    @pytest.mark.parametrize("frames,published", [(8, 33e9), (16, 66e9)])
    def test_macs_published_figure(self, frames, published):
        for variant in ("none", "mem+tim"):
            macs = count_macs(resnet50_teinet_spec(frames, 224, 174, variant=variant))
            assert abs(macs - published) / published <= 0.05

    def test_macs_vs_torchvision(self):
        assert count_macs(resnet50_teinet_spec(1, 224, 174, variant="none")) == TORCHVISION_R50_MACS_PER_FRAME

    @pytest.mark.parametrize("variant", ["none", "mem+tim", "tsm", "se+tim"])
    def test_linear_in_frames(self, variant):
        m8 = count_macs(resnet50_teinet_spec(8, 224, variant=variant))
        assert count_macs(resnet50_teinet_spec(16, 224, variant=variant)) == 2 * m8

    def test_added_tim_params(self):
        # block input widths per stage: first block reads the previous stage's output
        widths = [64, 256, 256] + [256] + [512] * 3 + [512] + [1024] * 5 + [1024] + [2048] * 2
        assert resnet50_block_inputs() == widths
        base = count_params(resnet50_teinet_spec(variant="none"))
        tim = count_params(resnet50_teinet_spec(variant="tim"))
        assert tim - base == sum(3 * c for c in widths) == 39_360

    def test_tei_overhead(self):
        base = count_macs(resnet50_teinet_spec(8, 224, variant="none"))
        tei = count_macs(resnet50_teinet_spec(8, 224, variant="mem+tim"))
        assert 0 < (tei - base) / base <= 0.02

    def test_tei_params_documented_gap(self):
        # MEM at block-input width: about 29.9M total, below the 30.4M reported
        p = count_params(resnet50_teinet_spec(8, 224, 174, variant="mem+tim"))
        assert p == 29_893_822

    def test_insertion_subset(self):
        full = count_params(resnet50_teinet_spec(variant="mem+tim"))
        part = count_params(resnet50_teinet_spec(variant="mem+tim", insertion_stages=(1, 2)))
        base = count_params(resnet50_teinet_spec(variant="none"))
        assert base < part < full

    @pytest.mark.parametrize("stages", [(4,), (-1,), (0, 7)])
    def test_invalid_stages(self, stages):
        with pytest.raises(ContractError):
            resnet50_teinet_spec(insertion_stages=stages, variant="tim")

    def test_deterministic(self):
        assert resnet50_teinet_spec(variant="mem+tim").layers == resnet50_teinet_spec(variant="mem+tim").layers


class TestReport:
    def test_totals_are_sums(self):
        r = cost_report(resnet50_teinet_spec(8, 224, variant="mem+tim"))
        assert r.params == sum(row["params"] for row in r.rows)
        assert r.macs == sum(row["macs"] for row in r.rows)

    def test_csv(self):
        r = cost_report(mini_graph(NetworkSpec(variant="mem+tim")))
        rows = list(csv.DictReader(io.StringIO(r.to_csv())))
        assert rows[-1]["layer"] == "total"
        assert int(rows[-1]["params"]) == r.params
        assert sum(int(x["macs"]) for x in rows[:-1]) == r.macs

    def test_table_mentions_mac_convention(self):
        text = cost_report(mini_graph(NetworkSpec())).format_table("mini")
        assert "multiply-accumulate" in text

    def test_concatenation_additive(self):
        a = GraphSpec(input_shape=(4, 8, 6, 6))
        a.add("conv2d", "a1", c_in=8, c_out=8, d=3, pad=1)
        a.add("tim", "a2", c_in=8, c_out=8, t=3)
        b = GraphSpec()
        b.add("mem", "b1", c_in=8, reduction=2)
        b.add("conv2d", "b2", c_in=8, c_out=8, d=3, pad=1)
        assert count_macs(a + b) == count_macs(a) + count_macs(b, (4, 8, 6, 6))
        assert count_params(a + b) == count_params(a) + count_params(b)

    @given(st.integers(1, 32))
    @settings(max_examples=20, deadline=None)
    def test_mini_linear_in_frames(self, t):
        spec = NetworkSpec(variant="mem+tim", frames=max(t, 2))
        one = NetworkSpec(variant="mem+tim", frames=2)
        m = count_macs(mini_graph(spec))
        # every layer before the head is per-frame; the head is a single linear layer
        head = 128 * 4
        assert (m - head) % spec.frames == 0
        assert (m - head) // spec.frames == (count_macs(mini_graph(one)) - head) // 2

    def test_add_shape_mismatch(self):
        g = GraphSpec(input_shape=(1, 4, 4, 4))
        g.add("conv2d", "a", c_in=4, c_out=8, d=1)
        g.add("add", "b", input="a", other=None)
        with pytest.raises(ContractError):
            count_macs(g)
