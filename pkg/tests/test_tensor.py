import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from teinet.errors import ContractError, ShapeError
from teinet.tensor import (
    ParamStore,
    Tape,
    Tensor,
    add,
    backward,
    batch_norm_2d,
    channel_project,
    conv2d,
    cross_entropy,
    gap_spatial,
    mul,
    mul_broadcast_channel,
    relu,
    scale,
    sgd_step,
    sigmoid,
    sub,
    sum_all,
)

from conftest import t64


def _conv_loop(x, k, stride, pad):
    """Direct nested-loop cross-correlation."""
    m, ci, h, w = x.shape
    co, _, kh, kw = k.shape
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    ho, wo = (h + 2 * pad - kh) // stride + 1, (w + 2 * pad - kw) // stride + 1
    out = np.zeros((m, co, ho, wo))
    for a in range(m):
        for o in range(co):
            for i in range(ho):
                for j in range(wo):
                    patch = xp[a, :, i * stride:i * stride + kh, j * stride:j * stride + kw]
                    out[a, o, i, j] = (patch * k[o]).sum()
    return out


class TestTensor:
    def test_default_dtype_is_float32(self):
        assert Tensor([1.0, 2.0]).dtype == np.float32

    def test_float64_kept(self):
        assert Tensor(np.zeros(3)).dtype == np.float64

    def test_zero_extent_rejected(self):
        with pytest.raises(ShapeError):
            Tensor(np.zeros((2, 0)))

    def test_size_matches_shape(self):
        t = Tensor(np.zeros((2, 3, 4)))
        assert t.size == 24 == math.prod(t.shape)


class TestGap:
    def test_constant(self):
        x = Tensor(np.full((2, 3, 4, 5, 6), 1.75))
        np.testing.assert_array_equal(gap_spatial(x).data, np.full((2, 3, 4), 1.75))

    def test_two_by_two(self):
        x = np.zeros((1, 1, 1, 2, 2))
        x[0, 0, 0] = [[1, 2], [3, 4]]
        assert gap_spatial(Tensor(x)).data[0, 0, 0] == 2.5

    def test_unit_spatial_is_squeeze(self, rng):
        x = rng.standard_normal((2, 3, 4, 1, 1))
        np.testing.assert_array_equal(gap_spatial(Tensor(x)).data, x[..., 0, 0])

    def test_rank_error(self):
        with pytest.raises(ShapeError):
            gap_spatial(Tensor(np.zeros((2, 3, 4, 5))))

    def test_backward_spreads_uniformly(self, rng):
        x = t64(rng.standard_normal((1, 2, 3, 2, 5)), grad=True)
        with Tape() as tape:
            loss = sum_all(gap_spatial(x))
        backward(loss, tape)
        np.testing.assert_allclose(x.grad, np.full(x.shape, 0.1))

    def test_gap_then_ones_gate_reproduces_input(self, rng):
        x = Tensor(rng.standard_normal((2, 3, 4, 5, 5)).astype(np.float32))
        ones = Tensor(np.ones_like(gap_spatial(x).data))
        np.testing.assert_array_equal(mul_broadcast_channel(x, ones).data, x.data)


class TestChannelProject:
    def test_identity(self, rng):
        x = rng.standard_normal((2, 3, 4))
        out = channel_project(t64(x), t64(np.eye(4)), t64(np.zeros(4)))
        np.testing.assert_array_equal(out.data, x)

    def test_dot_product(self):
        out = channel_project(t64([[[3.0, 5.0]]]), t64([[1.0, -1.0]]))
        assert out.data.item() == -2.0

    def test_reduction_width(self, rng):
        out = channel_project(t64(rng.standard_normal((1, 2, 64))), t64(rng.standard_normal((8, 64))))
        assert out.shape == (1, 2, 8)

    def test_extent_mismatch(self):
        with pytest.raises(ShapeError):
            channel_project(t64(np.zeros((1, 1, 3))), t64(np.zeros((2, 4))))


class TestPointwise:
    def test_sigmoid_zero(self):
        assert sigmoid(t64([0.0])).data[0] == 0.5

    @pytest.mark.parametrize("v", [40.0, -40.0, 800.0, -800.0])
    def test_sigmoid_extremes_match_high_precision(self, v):
        import mpmath

        mpmath.mp.dps = 50
        ref = float(1 / (1 + mpmath.exp(-mpmath.mpf(v))))
        got = sigmoid(t64([v])).data[0]
        # correctly rounded: sigma(40) = 1 - 4e-18 rounds to exactly 1.0 in float64
        assert np.isfinite(got) and 0 <= got <= 1
        assert got == pytest.approx(ref, rel=1e-14, abs=1e-300)
        if v == -40.0:
            assert 0 < got < 1

    def test_mul_broadcast_ones(self, rng):
        x = rng.standard_normal((2, 3, 4, 2, 2))
        out = mul_broadcast_channel(t64(x), t64(np.ones((2, 3, 4))))
        np.testing.assert_array_equal(out.data, x)

    def test_mul_broadcast_shape_error(self):
        with pytest.raises(ShapeError):
            mul_broadcast_channel(t64(np.zeros((1, 2, 3, 2, 2))), t64(np.zeros((1, 2, 4))))

    @pytest.mark.parametrize("op", [add, sub, mul])
    def test_binary_shape_mismatch(self, op):
        with pytest.raises(ShapeError):
            op(t64(np.zeros(3)), t64(np.zeros(4)))

    def test_relu(self):
        np.testing.assert_array_equal(relu(t64([-1.0, 0.0, 2.0])).data, [0.0, 0.0, 2.0])

    def test_operators(self):
        a, b = t64([1.0, 2.0]), t64([3.0, 5.0])
        np.testing.assert_array_equal((a + b).data, [4, 7])
        np.testing.assert_array_equal((a - b).data, [-2, -3])
        np.testing.assert_array_equal((a * b).data, [3, 10])
        np.testing.assert_array_equal((a * 2).data, [2, 4])


class TestConv2d:
    def test_identity_1x1(self, rng):
        x = rng.standard_normal((2, 3, 4, 5))
        k = np.eye(3).reshape(3, 3, 1, 1)
        np.testing.assert_array_equal(conv2d(t64(x), t64(k)).data, x)

    def test_all_ones_centre_is_nine(self):
        out = conv2d(t64(np.ones((1, 1, 3, 3))), t64(np.ones((1, 1, 3, 3))), pad=1)
        assert out.data[0, 0, 1, 1] == 9.0
        assert _conv_loop(np.ones((1, 1, 3, 3)), np.ones((1, 1, 3, 3)), 1, 1)[0, 0, 1, 1] == 9.0

    @pytest.mark.parametrize("h", [4, 8, 10])
    def test_stride_two_halves_even(self, h):
        out = conv2d(t64(np.zeros((1, 1, h, h))), t64(np.zeros((2, 1, 3, 3))), stride=2, pad=1)
        assert out.shape == (1, 2, h // 2, h // 2)

    @pytest.mark.parametrize("stride,pad,k", [(1, 0, 3), (1, 1, 3), (2, 1, 3), (2, 0, 1), (3, 2, 5)])
    def test_matches_loop(self, rng, stride, pad, k):
        x, w = rng.standard_normal((2, 3, 7, 6)), rng.standard_normal((4, 3, k, k))
        np.testing.assert_allclose(conv2d(t64(x), t64(w), stride, pad).data,
                                   _conv_loop(x, w, stride, pad), atol=1e-12)

    def test_even_kernel_rejected(self):
        with pytest.raises(ShapeError):
            conv2d(t64(np.zeros((1, 1, 4, 4))), t64(np.zeros((1, 1, 2, 2))))

    def test_empty_output_rejected(self):
        with pytest.raises(ShapeError):
            conv2d(t64(np.zeros((1, 1, 2, 2))), t64(np.zeros((1, 1, 5, 5))))

    def test_channel_mismatch(self):
        with pytest.raises(ShapeError):
            conv2d(t64(np.zeros((1, 2, 4, 4))), t64(np.zeros((1, 3, 3, 3))))


class TestBatchNorm:
    def test_training_normalizes(self, rng):
        x = t64(rng.standard_normal((6, 3, 4, 4)) * 3 + 2)
        out = batch_norm_2d(x, t64(np.ones(3)), t64(np.zeros(3)), np.zeros(3), np.ones(3), True).data
        np.testing.assert_allclose(out.mean(axis=(0, 2, 3)), 0, atol=1e-12)
        np.testing.assert_allclose(out.var(axis=(0, 2, 3)), 1, atol=1e-4)

    def test_eval_identity_stats(self, rng):
        x = rng.standard_normal((2, 3, 4, 4))
        out = batch_norm_2d(t64(x), t64(np.ones(3)), t64(np.zeros(3)), np.zeros(3), np.ones(3), False)
        np.testing.assert_allclose(out.data, x / np.sqrt(1 + 1e-5))

    def test_constant_channel_gives_zero(self):
        out = batch_norm_2d(t64(np.full((2, 1, 3, 3), 7.0)), t64([1.0]), t64([0.0]),
                            np.zeros(1), np.ones(1), True)
        assert np.all(np.isfinite(out.data)) and np.all(out.data == 0)

    def test_running_stats_update(self, rng):
        x = rng.standard_normal((4, 2, 3, 3))
        rm, rv = np.zeros(2), np.ones(2)
        batch_norm_2d(t64(x), t64(np.ones(2)), t64(np.zeros(2)), rm, rv, True)
        np.testing.assert_allclose(rm, 0.1 * x.mean(axis=(0, 2, 3)))
        np.testing.assert_allclose(rv, 0.9 + 0.1 * x.var(axis=(0, 2, 3), ddof=1))

    def test_gamma_mismatch(self):
        with pytest.raises(ShapeError):
            batch_norm_2d(t64(np.zeros((1, 2, 2, 2))), t64(np.ones(3)), t64(np.zeros(3)),
                          np.zeros(3), np.ones(3), True)


class TestCrossEntropy:
    @pytest.mark.parametrize("k", [2, 4, 10])
    def test_uniform_logits(self, k):
        loss = cross_entropy(t64(np.zeros((3, k))), np.zeros(3, dtype=int))
        assert loss.item() == pytest.approx(math.log(k), abs=1e-12)

    def test_saturated(self):
        logits = np.zeros((2, 4))
        logits[0, 1] = logits[1, 3] = 20.0
        assert cross_entropy(t64(logits), np.array([1, 3])).item() < 1e-8

    def test_label_out_of_range(self):
        with pytest.raises(ContractError):
            cross_entropy(t64(np.zeros((1, 3))), np.array([3]))

    def test_large_logits_stable(self):
        assert np.isfinite(cross_entropy(t64([[1e4, -1e4]]), np.array([1])).item())


class TestBackward:
    def test_sum_gives_ones(self, rng):
        x = t64(rng.standard_normal((3, 4)), grad=True)
        with Tape() as tape:
            loss = sum_all(x)
        backward(loss, tape)
        np.testing.assert_array_equal(x.grad, np.ones((3, 4)))

    def test_sigmoid_at_zero(self):
        w = t64([[0.0, 0.0]], grad=True)
        x = np.array([[[1.5, -2.0]]])
        with Tape() as tape:
            loss = sum_all(sigmoid(channel_project(t64(x), w)))
        backward(loss, tape)
        np.testing.assert_allclose(w.grad, 0.25 * x[0])

    def test_non_scalar_loss(self):
        x = t64([1.0, 2.0], grad=True)
        with Tape() as tape:
            y = scale(x, 2.0)
        with pytest.raises(ContractError):
            backward(y, tape)

    def test_accumulates(self, rng):
        x = t64(rng.standard_normal(3), grad=True)
        for _ in range(2):
            with Tape() as tape:
                loss = sum_all(x)
            backward(loss, tape)
        np.testing.assert_array_equal(x.grad, np.full(3, 2.0))

    def test_no_tape_records_nothing(self):
        x = t64([1.0], grad=True)
        y = scale(x, 3.0)
        assert not y.requires_grad

    def test_each_record_visited_once(self, rng):
        # x feeds two branches; the shared node's gradient must be summed exactly once
        x = t64(rng.standard_normal(4), grad=True)
        with Tape() as tape:
            y = scale(x, 2.0)
            loss = sum_all(add(y, mul(y, y)))
        backward(loss, tape)
        np.testing.assert_allclose(x.grad, 2.0 + 8.0 * x.data)

    def test_linearity(self, rng):
        x0 = rng.standard_normal((2, 3))
        a, b = 0.7, -1.3

        def grad_of(fn):
            x = t64(x0, grad=True)
            with Tape() as tape:
                loss = fn(x)
            backward(loss, tape)
            return x.grad

        f1 = lambda x: sum_all(sigmoid(x))
        f2 = lambda x: sum_all(mul(x, x))
        combo = grad_of(lambda x: add(scale(f1(x), a), scale(f2(x), b)))
        np.testing.assert_allclose(combo, a * grad_of(f1) + b * grad_of(f2), rtol=1e-14, atol=1e-15)


class TestParamStore:
    def test_duplicate_name(self):
        s = ParamStore()
        s.add("w", np.zeros(2))
        with pytest.raises(ContractError):
            s.add("w", np.zeros(2))

    def test_shapes_consistent(self):
        p = ParamStore().add("w", np.zeros((2, 3)))
        assert p.data.shape == p.grad.shape == p.momentum_buf.shape

    def test_state_roundtrip(self, rng):
        s = ParamStore(np.float64)
        s.add("a", rng.standard_normal(3))
        s.add_buffer("b", rng.standard_normal(2))
        state = {k: v.copy() for k, v in s.state().items()}
        s2 = ParamStore(np.float64)
        s2.add("a", np.zeros(3))
        s2.add_buffer("b", np.zeros(2))
        s2.load_state(state)
        np.testing.assert_array_equal(s2["a"].data, state["a"])
        np.testing.assert_array_equal(s2.buffers["b"], state["b"])

    def test_load_state_mismatch(self):
        s = ParamStore()
        s.add("a", np.zeros(3))
        with pytest.raises(ContractError):
            s.load_state({"z": np.zeros(3)})


class TestSgd:
    def _store(self, value, grad):
        s = ParamStore(np.float64)
        p = s.add("w", np.array(value, dtype=float))
        p.grad = np.array(grad, dtype=float)
        return s, p

    def test_zero_grad_no_decay(self):
        s, p = self._store([1.0, -2.0], [0.0, 0.0])
        sgd_step(s, 0.1, weight_decay=0.0)
        np.testing.assert_array_equal(p.data, [1.0, -2.0])

    def test_one_step(self):
        s, p = self._store([1.0, -2.0], [0.5, 0.25])
        sgd_step(s, 0.1, momentum=0.9, weight_decay=1e-4)
        np.testing.assert_allclose(p.data, [1.0, -2.0] - 0.1 * (np.array([0.5, 0.25]) + 1e-4 * np.array([1.0, -2.0])))

    def test_two_steps_constant_grad(self):
        lr, m, g = 0.1, 0.9, 0.5
        s, p = self._store([0.0], [g])
        sgd_step(s, lr, momentum=m, weight_decay=0.0)
        sgd_step(s, lr, momentum=m, weight_decay=0.0)
        assert p.data[0] == pytest.approx(-lr * g * (1 + (1 + m)), abs=1e-15)

    @given(st.lists(st.floats(-1e3, 1e3), min_size=1, max_size=8))
    @settings(max_examples=50, deadline=None)
    def test_lr_zero_bit_identical(self, values):
        s, p = self._store(values, np.ones(len(values)))
        before = p.data.copy()
        sgd_step(s, 0.0)
        np.testing.assert_array_equal(p.data, before)

    def test_frozen_untouched(self):
        s = ParamStore(np.float64)
        p = s.add("w", np.ones(2), frozen=True)
        p.grad = np.ones(2)
        sgd_step(s, 1.0)
        np.testing.assert_array_equal(p.data, np.ones(2))
