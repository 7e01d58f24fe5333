"""Temporal operators over [N, T, C, H, W] feature tensors.

* MEM: channel gate from the sigmoid of a projected difference between the
  spatially pooled features of frame t and frame t+1. The last frame has no
  successor and is passed through unchanged.
* TIM: depthwise (per-channel) 1-D convolution along time, zero padded so the
  number of frames is preserved. No bias.
* SE: squeeze-and-excitation self gating, applied to every frame.
* TSM: fixed temporal shift of a contiguous block of channels.

A TSM shift is a TIM whose rows are one-hot, see :func:`tim_from_shift_spec`.
"""
from dataclasses import dataclass
from fractions import Fraction

import numpy as np

from .errors import ContractError, ShapeError
from .tensor import (
    DEFAULT_DTYPE,
    ParamStore,
    Tensor,
    apply_op,
    channel_project,
    concat,
    gap_spatial,
    mul_broadcast_channel,
    relu,
    sigmoid,
    slice_axis,
    sub,
)


def _check_video(x, channels, op):
    if x.ndim != 5:
        raise ShapeError(f"{op} expects [N,T,C,H,W], got shape {x.shape}")
    if x.shape[2] != channels:
        raise ShapeError(f"{op}: module has {channels} channels, input has {x.shape[2]}")


def _uniform(rng, fan_in, shape):
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape)


def reduced_width(channels, reduction):
    return max(1, channels // reduction)


# ---------------------------------------------------------------- primitives

def channelwise_temporal_conv(u, v):
    """y[n,t,c] = sum_i v[c, i+p] * u[n, t+i, c] for i in [-p, p]; out-of-range frames are zero."""
    if u.ndim != 5:
        raise ShapeError(f"temporal conv expects [N,T,C,H,W], got {u.shape}")
    c, k = v.shape
    if u.shape[2] != c:
        raise ShapeError(f"temporal conv: kernel has {c} channels, input has {u.shape[2]}")
    if k % 2 == 0:
        raise ContractError(f"temporal kernel extent must be odd, got {k}")
    t = u.shape[1]
    p = (k - 1) // 2
    taps = []
    for j in range(k):
        off = j - p
        lo, hi = max(0, -off), min(t, t - off)
        if lo < hi:
            taps.append((j, slice(lo, hi), slice(lo + off, hi + off)))

    y = np.zeros_like(u.data)
    for j, dst, src in taps:
        y[:, dst] += u.data[:, src] * v.data[:, j][:, None, None]

    def back(g):
        gu = np.zeros_like(u.data) if u.requires_grad else None
        gv = np.zeros_like(v.data)
        for j, dst, src in taps:
            if gu is not None:
                gu[:, src] += g[:, dst] * v.data[:, j][:, None, None]
            gv[:, j] = np.einsum("ntchw,ntchw->c", g[:, dst], u.data[:, src])
        return gu, gv

    return apply_op(y, (u, v), back)


def temporal_shift(x, n_backward, n_forward):
    """Shift channels [0, n_backward) one frame later and the next n_forward one frame earlier.

    Vacated frames are zero filled; remaining channels are copied.
    """
    nb, nf = n_backward, n_forward
    out = x.data.copy()
    out[:, 1:, :nb] = x.data[:, :-1, :nb]
    out[:, :1, :nb] = 0
    out[:, :-1, nb:nb + nf] = x.data[:, 1:, nb:nb + nf]
    out[:, -1:, nb:nb + nf] = 0

    def back(g):
        gx = g.copy()
        gx[:, :-1, :nb] = g[:, 1:, :nb]
        gx[:, -1:, :nb] = 0
        gx[:, 1:, nb:nb + nf] = g[:, :-1, nb:nb + nf]
        gx[:, :1, nb:nb + nf] = 0
        return (gx,)

    return apply_op(out, (x,), back)


# ---------------------------------------------------------------- MEM

class MemModule:
    """Motion-enhancement gate parameters.

    ``w_theta`` and ``w_phi`` reduce C channels to ``max(1, C // reduction)``;
    ``w_psi`` expands back to C.
    """

    def __init__(self, w_theta, b_theta, w_phi, b_phi, w_psi, b_psi, reduction):
        self.w_theta, self.b_theta = w_theta, b_theta
        self.w_phi, self.b_phi = w_phi, b_phi
        self.w_psi, self.b_psi = w_psi, b_psi
        self.reduction = reduction
        cr, c = w_theta.shape
        if w_phi.shape != (cr, c) or w_psi.shape != (c, cr):
            raise ShapeError(
                f"inconsistent MEM weights {w_theta.shape}, {w_phi.shape}, {w_psi.shape}")

    @classmethod
    def create(cls, channels, reduction=8, rng=None, store=None, prefix="mem", dtype=None,
               tied=False):
        """With ``tied=True`` the two reduction projections start equal, so the
        gate input is a projection of the pure frame difference."""
        if channels < 1:
            raise ShapeError("MEM needs at least one channel")
        if reduction < 1:
            raise ContractError(f"reduction ratio must be a positive integer, got {reduction}")
        rng = rng if rng is not None else np.random.default_rng(0)
        store = store if store is not None else ParamStore(dtype or DEFAULT_DTYPE)
        cr = reduced_width(channels, reduction)
        w_theta = _uniform(rng, channels, (cr, channels))
        w_phi = w_theta.copy() if tied else _uniform(rng, channels, (cr, channels))
        return cls(
            store.add(f"{prefix}.w_theta", w_theta),
            store.add(f"{prefix}.b_theta", np.zeros(cr)),
            store.add(f"{prefix}.w_phi", w_phi),
            store.add(f"{prefix}.b_phi", np.zeros(cr)),
            store.add(f"{prefix}.w_psi", _uniform(rng, cr, (channels, cr))),
            store.add(f"{prefix}.b_psi", np.zeros(channels)),
            reduction,
        )

    @property
    def channels(self):
        return self.w_theta.shape[1]

    @property
    def reduced(self):
        return self.w_theta.shape[0]

    def parameters(self):
        return [self.w_theta, self.b_theta, self.w_phi, self.b_phi, self.w_psi, self.b_psi]

    def num_weights(self):
        return 2 * self.channels * self.reduced + self.reduced * self.channels

    def num_params(self):
        return sum(p.size for p in self.parameters())


def mem_gates(mem, x):
    """Channel gates for frames 1..T-1, shape [N, T-1, C]."""
    _check_video(x, mem.channels, "mem_forward")
    t = x.shape[1]
    if t < 2:
        raise ContractError("MEM requires at least two frames")
    pooled = gap_spatial(x)
    cur = slice_axis(pooled, 1, 0, t - 1)
    nxt = slice_axis(pooled, 1, 1, t)
    diff = sub(channel_project(cur, mem.w_theta, mem.b_theta),
               channel_project(nxt, mem.w_phi, mem.b_phi))
    return sigmoid(channel_project(diff, mem.w_psi, mem.b_psi))


def mem_forward(mem, x):
    gates = mem_gates(mem, x)
    n, _, c = gates.shape
    # multiplying the last frame by exactly 1.0 copies it bit for bit
    ones = Tensor(np.ones((n, 1, c), dtype=x.dtype))
    return mul_broadcast_channel(x, concat([gates, ones], axis=1))


# ---------------------------------------------------------------- TIM / TSM

@dataclass(frozen=True)
class ShiftSpec:
    """Fractions of channels shifted backward (t-1 -> t) and forward (t+1 -> t).

    Channels are partitioned contiguously: the lowest indices shift backward,
    the next block forward, and the rest are left in place.
    """

    fraction_backward: Fraction = Fraction(1, 8)
    fraction_forward: Fraction = Fraction(1, 8)

    def __post_init__(self):
        fb, ff = Fraction(self.fraction_backward), Fraction(self.fraction_forward)
        if fb < 0 or ff < 0 or fb + ff > 1:
            raise ContractError(
                f"shift fractions must be nonnegative with sum <= 1, got {fb}, {ff}")
        object.__setattr__(self, "fraction_backward", fb)
        object.__setattr__(self, "fraction_forward", ff)

    def partition(self, channels):
        """Number of (backward, forward) shifted channels for a given width."""
        nb = int(channels * self.fraction_backward)
        nf = int(channels * self.fraction_forward)
        return nb, nf


class TimModule:
    """Per-channel temporal kernel ``v`` of shape [C, K]."""

    def __init__(self, v):
        if v.ndim != 2:
            raise ShapeError(f"TIM kernel must be [C, K], got {v.shape}")
        if v.shape[1] % 2 == 0:
            raise ContractError(f"TIM kernel extent must be odd, got {v.shape[1]}")
        self.v = v

    @classmethod
    def create(cls, channels, kernel=3, init="identity", shift=None, store=None,
               prefix="tim", dtype=None, frozen=False):
        """``init`` is ``"identity"`` (every row a centred one-hot) or ``"shift"``
        (TSM-style one-hot rows partitioned by ``shift``)."""
        if kernel % 2 == 0 or kernel < 1:
            raise ContractError(f"TIM kernel extent must be odd, got {kernel}")
        if init == "identity":
            v = np.zeros((channels, kernel))
            v[:, kernel // 2] = 1.0
        elif init == "shift":
            v = _shift_kernels(shift or ShiftSpec(), channels, kernel)
        else:
            raise ContractError(f"unknown TIM init {init!r}; expected 'identity' or 'shift'")
        store = store if store is not None else ParamStore(dtype or DEFAULT_DTYPE)
        return cls(store.add(f"{prefix}.v", v, frozen=frozen))

    @property
    def channels(self):
        return self.v.shape[0]

    @property
    def kernel(self):
        return self.v.shape[1]

    @property
    def pad(self):
        return (self.kernel - 1) // 2

    def parameters(self):
        return [self.v]

    def num_params(self):
        return self.v.size


def _shift_kernels(spec, channels, kernel):
    nb, nf = spec.partition(channels)
    v = np.zeros((channels, kernel))
    v[:, kernel // 2] = 1.0
    v[:nb] = 0.0
    v[:nb, 0] = 1.0
    v[nb:nb + nf] = 0.0
    v[nb:nb + nf, -1] = 1.0
    return v


def tim_forward(tim, u):
    _check_video(u, tim.channels, "tim_forward")
    return channelwise_temporal_conv(u, tim.v)


def tsm_forward(spec, x):
    if x.ndim != 5:
        raise ShapeError(f"tsm_forward expects [N,T,C,H,W], got shape {x.shape}")
    nb, nf = spec.partition(x.shape[2])
    return temporal_shift(x, nb, nf)


def tim_from_shift_spec(spec, channels, kernel=3, dtype=None):
    """Frozen TIM equivalent to the shift described by ``spec``."""
    if kernel != 3:
        raise ContractError(f"a shift corresponds to a 3-tap kernel, got K={kernel}")
    return TimModule.create(channels, kernel, init="shift", shift=spec, dtype=dtype, frozen=True)


def tei_forward(mem, tim, x):
    return tim_forward(tim, mem_forward(mem, x))


# ---------------------------------------------------------------- SE baseline

class SeModule:
    def __init__(self, w_theta, b_theta, w_psi, b_psi, reduction):
        self.w_theta, self.b_theta = w_theta, b_theta
        self.w_psi, self.b_psi = w_psi, b_psi
        self.reduction = reduction

    @classmethod
    def create(cls, channels, reduction=8, rng=None, store=None, prefix="se", dtype=None):
        if channels < 1:
            raise ShapeError("SE needs at least one channel")
        rng = rng if rng is not None else np.random.default_rng(0)
        store = store if store is not None else ParamStore(dtype or DEFAULT_DTYPE)
        cr = reduced_width(channels, reduction)
        return cls(
            store.add(f"{prefix}.w_theta", _uniform(rng, channels, (cr, channels))),
            store.add(f"{prefix}.b_theta", np.zeros(cr)),
            store.add(f"{prefix}.w_psi", _uniform(rng, cr, (channels, cr))),
            store.add(f"{prefix}.b_psi", np.zeros(channels)),
            reduction,
        )

    @property
    def channels(self):
        return self.w_theta.shape[1]

    @property
    def reduced(self):
        return self.w_theta.shape[0]

    def parameters(self):
        return [self.w_theta, self.b_theta, self.w_psi, self.b_psi]

    def num_params(self):
        return sum(p.size for p in self.parameters())


def se_forward(se, x):
    _check_video(x, se.channels, "se_forward")
    if x.shape[1] < 2:
        raise ContractError("SE baseline requires at least two frames")
    hidden = relu(channel_project(gap_spatial(x), se.w_theta, se.b_theta))
    gates = sigmoid(channel_project(hidden, se.w_psi, se.b_psi))
    return mul_broadcast_channel(x, gates)
