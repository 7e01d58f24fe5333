"""Dense tensors with tape-based reverse-mode differentiation.

Every primitive takes and returns :class:`Tensor` objects. When a :class:`Tape`
is active (``with Tape() as tape:``) and at least one input requires a
gradient, the primitive appends a record holding its inputs and a closure that
maps the output gradient to input gradients. :func:`backward` replays the
records in reverse order.

Without an active tape nothing is recorded, which is how inference runs.
"""
from collections import OrderedDict

import numpy as np
from scipy import special

from .errors import ContractError, ShapeError

DEFAULT_DTYPE = np.float32

_active_tapes = []
_relu_watchers = []


class Tensor:
    __slots__ = ("data", "grad", "requires_grad")

    def __init__(self, data, requires_grad=False, dtype=None):
        if dtype is None:
            if isinstance(data, np.ndarray) and np.issubdtype(data.dtype, np.floating):
                dtype = data.dtype
            else:
                dtype = DEFAULT_DTYPE
        arr = np.asarray(data, dtype=dtype)
        if not arr.flags.c_contiguous:
            arr = np.ascontiguousarray(arr)
        if any(n < 1 for n in arr.shape):
            raise ShapeError(f"all extents must be >= 1, got shape {arr.shape}")
        self.data = arr
        self.grad = None
        self.requires_grad = requires_grad

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self):
        return self.data

    def item(self):
        return self.data.item()

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        if isinstance(other, Tensor):
            return mul(self, other)
        return scale(self, other)

    __rmul__ = __mul__


class Parameter(Tensor):
    """Named trainable tensor with gradient and momentum buffer of identical shape."""

    __slots__ = ("name", "momentum_buf", "frozen")

    def __init__(self, name, data, dtype=None, frozen=False):
        super().__init__(data, requires_grad=not frozen, dtype=dtype)
        self.name = name
        self.grad = np.zeros_like(self.data)
        self.momentum_buf = np.zeros_like(self.data)
        self.frozen = frozen

    def zero_grad(self):
        self.grad = np.zeros_like(self.data)

    def __repr__(self):
        return f"Parameter({self.name!r}, shape={self.shape}, dtype={self.dtype})"


class ParamStore:
    """Ordered collection of uniquely named parameters plus non-trainable buffers.

    Buffers hold state such as batch-norm running statistics; they are saved in
    checkpoints but never touched by the optimizer.
    """

    def __init__(self, dtype=DEFAULT_DTYPE):
        self.dtype = np.dtype(dtype)
        self._params = OrderedDict()
        self.buffers = OrderedDict()

    def add(self, name, data, frozen=False):
        if name in self._params or name in self.buffers:
            raise ContractError(f"duplicate parameter name {name!r}")
        p = Parameter(name, data, dtype=self.dtype, frozen=frozen)
        self._params[name] = p
        return p

    def add_buffer(self, name, data):
        if name in self._params or name in self.buffers:
            raise ContractError(f"duplicate buffer name {name!r}")
        arr = np.array(data, dtype=self.dtype)
        self.buffers[name] = arr
        return arr

    def __getitem__(self, name):
        return self._params[name]

    def __contains__(self, name):
        return name in self._params

    def __iter__(self):
        return iter(self._params.values())

    def __len__(self):
        return len(self._params)

    def names(self):
        return list(self._params)

    def trainable(self):
        return [p for p in self._params.values() if not p.frozen]

    def zero_grad(self):
        for p in self._params.values():
            p.zero_grad()

    def num_scalars(self, include_frozen=False):
        return sum(p.size for p in self._params.values() if include_frozen or not p.frozen)

    def state(self):
        """All parameter and buffer arrays keyed by name, parameters first."""
        out = OrderedDict((name, p.data) for name, p in self._params.items())
        out.update(self.buffers)
        return out

    def load_state(self, state):
        expected = set(self._params) | set(self.buffers)
        if set(state) != expected:
            missing = sorted(expected - set(state))
            extra = sorted(set(state) - expected)
            raise ContractError(f"state mismatch: missing {missing}, unexpected {extra}")
        for name, arr in state.items():
            target = self._params[name].data if name in self._params else self.buffers[name]
            if target.shape != tuple(arr.shape):
                raise ShapeError(f"{name}: expected shape {target.shape}, got {tuple(arr.shape)}")
            target[...] = arr


class _Record:
    __slots__ = ("out", "inputs", "backward")

    def __init__(self, out, inputs, backward):
        self.out = out
        self.inputs = inputs
        self.backward = backward


class Tape:
    """Ordered log of the primitive ops executed while the tape is active."""

    def __init__(self):
        self.records = []

    def __enter__(self):
        _active_tapes.append(self)
        return self

    def __exit__(self, *exc):
        _active_tapes.pop()
        return False

    def __len__(self):
        return len(self.records)


def apply_op(data, inputs, backward_fn):
    """Wrap ``data`` as a Tensor and record it on the active tape if needed.

    ``backward_fn(grad_out)`` must return one gradient (or None) per input.
    """
    data = np.asarray(data)
    out = Tensor(data, dtype=data.dtype)
    if _active_tapes and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        _active_tapes[-1].records.append(_Record(out, tuple(inputs), backward_fn))
    return out


def backward(loss, tape):
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every leaf tensor that requires it."""
    if loss.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    pending = {id(loss): (loss, np.ones_like(loss.data))}
    for rec in reversed(tape.records):
        entry = pending.pop(id(rec.out), None)
        if entry is None:
            continue
        for inp, g in zip(rec.inputs, rec.backward(entry[1])):
            if g is None or not inp.requires_grad:
                continue
            key = id(inp)
            if key in pending:
                pending[key] = (inp, pending[key][1] + g)
            else:
                pending[key] = (inp, g)
    for t, g in pending.values():
        g = np.asarray(g, dtype=t.data.dtype).reshape(t.shape)
        if t.grad is None:
            t.grad = g.copy()
        else:
            t.grad += g


def sgd_step(store, lr, momentum=0.9, weight_decay=1e-4):
    """SGD with heavy-ball momentum and L2 weight decay folded into the gradient."""
    for p in store.trainable():
        d = p.grad + weight_decay * p.data
        p.momentum_buf = (momentum * p.momentum_buf + d).astype(p.data.dtype, copy=False)
        p.data -= (lr * p.momentum_buf).astype(p.data.dtype, copy=False)


class watch_relu:
    """Collect the activation mask of every relu call made inside the block.

    Used by finite-difference checks to detect stencils that straddle a kink.
    """

    def __enter__(self):
        self.masks = []
        _relu_watchers.append(self.masks)
        return self.masks

    def __exit__(self, *exc):
        _relu_watchers[:] = [w for w in _relu_watchers if w is not self.masks]
        return False


def as_tensor(x, dtype=None):
    return x if isinstance(x, Tensor) else Tensor(x, dtype=dtype)


def _same_shape(a, b, op):
    if a.shape != b.shape:
        raise ShapeError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


# ---------------------------------------------------------------- pointwise

def add(a, b):
    _same_shape(a, b, "add")
    return apply_op(a.data + b.data, (a, b), lambda g: (g, g))


def sub(a, b):
    _same_shape(a, b, "sub")
    return apply_op(a.data - b.data, (a, b), lambda g: (g, -g))


def mul(a, b):
    _same_shape(a, b, "mul")
    return apply_op(a.data * b.data, (a, b), lambda g: (g * b.data, g * a.data))


def scale(x, factor):
    factor = x.data.dtype.type(factor)
    return apply_op(x.data * factor, (x,), lambda g: (g * factor,))


def sigmoid(x):
    s = special.expit(x.data)
    return apply_op(s, (x,), lambda g: (g * s * (1 - s),))


def relu(x):
    out = np.maximum(x.data, 0)
    for w in _relu_watchers:
        w.append(x.data > 0)
    return apply_op(out, (x,), lambda g: (g * (out > 0),))


def mul_broadcast_channel(x, s):
    """Scale each (n, t, c) feature map of a [N,T,C,H,W] tensor by ``s[n,t,c]``."""
    if x.ndim != 5 or s.shape != x.shape[:3]:
        raise ShapeError(f"mul_broadcast_channel: {x.shape} vs gate {s.shape}")
    gate = s.data[..., None, None]

    def back(g):
        return g * gate, (g * x.data).sum(axis=(3, 4))

    return apply_op(x.data * gate, (x, s), back)


# ---------------------------------------------------------------- reductions / shape

def gap_spatial(x):
    """Global average pool over H, W: [N,T,C,H,W] -> [N,T,C]."""
    if x.ndim != 5:
        raise ShapeError(f"gap_spatial expects rank 5, got shape {x.shape}")
    hw = x.shape[3] * x.shape[4]
    shape = x.shape

    def back(g):
        return (np.broadcast_to(g[..., None, None] / hw, shape).copy(),)

    return apply_op(x.data.mean(axis=(3, 4), dtype=x.dtype), (x,), back)


def mean(x, axis):
    axis = tuple(axis) if isinstance(axis, (tuple, list)) else (axis,)
    axis = tuple(a % x.ndim for a in axis)
    count = int(np.prod([x.shape[a] for a in axis]))
    shape = x.shape

    def back(g):
        return (np.broadcast_to(np.expand_dims(g, axis) / count, shape).copy(),)

    return apply_op(x.data.mean(axis=axis, dtype=x.dtype), (x,), back)


def sum_all(x):
    shape = x.shape
    return apply_op(np.asarray(x.data.sum(dtype=x.dtype)), (x,),
                    lambda g: (np.full(shape, g, dtype=x.dtype),))


def reshape(x, shape):
    old = x.shape
    return apply_op(x.data.reshape(shape), (x,), lambda g: (g.reshape(old),))


def slice_axis(x, axis, start, stop):
    axis %= x.ndim
    idx = (slice(None),) * axis + (slice(start, stop),)
    shape = x.shape

    def back(g):
        full = np.zeros(shape, dtype=g.dtype)
        full[idx] = g
        return (full,)

    return apply_op(x.data[idx].copy(), (x,), back)


def concat(xs, axis):
    axis %= xs[0].ndim
    bounds = np.cumsum([0] + [t.shape[axis] for t in xs])

    def back(g):
        return tuple(
            g[(slice(None),) * axis + (slice(bounds[i], bounds[i + 1]),)]
            for i in range(len(xs))
        )

    return apply_op(np.concatenate([t.data for t in xs], axis=axis), tuple(xs), back)


# ---------------------------------------------------------------- linear maps

def channel_project(x, w, b=None):
    """Apply a 1x1 projection over the last axis: out[..., j] = sum_i w[j, i] x[..., i] + b[j]."""
    if w.ndim != 2 or x.shape[-1] != w.shape[1]:
        raise ShapeError(f"channel_project: input {x.shape} incompatible with weight {w.shape}")
    if b is not None and b.shape != (w.shape[0],):
        raise ShapeError(f"channel_project: bias {b.shape} does not match {w.shape[0]} outputs")
    out = x.data @ w.data.T
    if b is not None:
        out = out + b.data
    c_in, c_out = w.shape[1], w.shape[0]

    def back(g):
        g2 = g.reshape(-1, c_out)
        gx = g @ w.data
        gw = g2.T @ x.data.reshape(-1, c_in)
        if b is None:
            return gx, gw
        return gx, gw, g2.sum(axis=0)

    inputs = (x, w) if b is None else (x, w, b)
    return apply_op(out, inputs, back)


def conv2d(x, k, stride=1, pad=0):
    """Cross-correlation of [M,C_in,H,W] with [C_out,C_in,kh,kw] via patch unfolding."""
    if x.ndim != 4 or k.ndim != 4:
        raise ShapeError(f"conv2d expects rank-4 input and kernel, got {x.shape}, {k.shape}")
    m, c_in, h, w = x.shape
    c_out, kc, kh, kw = k.shape
    if kc != c_in:
        raise ShapeError(f"conv2d: input has {c_in} channels, kernel expects {kc}")
    if kh % 2 == 0 or kw % 2 == 0:
        raise ShapeError(f"conv2d: kernel extents must be odd, got {kh}x{kw}")
    if pad < 0 or stride < 1:
        raise ShapeError(f"conv2d: invalid stride {stride} / pad {pad}")
    ho = (h + 2 * pad - kh) // stride + 1
    wo = (w + 2 * pad - kw) // stride + 1
    if ho < 1 or wo < 1:
        raise ShapeError(f"conv2d: empty output for input {h}x{w}, kernel {kh}x{kw}")

    if pad:
        xp = np.zeros((m, c_in, h + 2 * pad, w + 2 * pad), dtype=x.dtype)
        xp[:, :, pad:pad + h, pad:pad + w] = x.data
    else:
        xp = x.data
    cols = np.empty((c_in, kh, kw, m, ho, wo), dtype=x.dtype)
    for i in range(kh):
        for j in range(kw):
            cols[:, i, j] = xp[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride].transpose(1, 0, 2, 3)
    cols = cols.reshape(c_in * kh * kw, -1)
    kmat = k.data.reshape(c_out, -1)
    out = (kmat @ cols).reshape(c_out, m, ho, wo).transpose(1, 0, 2, 3)

    def back(g):
        gmat = g.transpose(1, 0, 2, 3).reshape(c_out, -1)
        gk = (gmat @ cols.T).reshape(k.shape)
        if not x.requires_grad:
            return None, gk
        gcols = (kmat.T @ gmat).reshape(c_in, kh, kw, m, ho, wo)
        gxp = np.zeros(xp.shape, dtype=g.dtype)
        for i in range(kh):
            for j in range(kw):
                gxp[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += gcols[:, i, j].transpose(1, 0, 2, 3)
        gx = gxp[:, :, pad:pad + h, pad:pad + w] if pad else gxp
        return gx, gk

    return apply_op(np.ascontiguousarray(out), (x, k), back)


def batch_norm_2d(x, gamma, beta, running_mean, running_var, training,
                  momentum=0.1, eps=1e-5):
    """Per-channel normalization over (M, H, W).

    In training mode batch statistics are used and ``running_mean`` /
    ``running_var`` (plain arrays) are updated in place; the running variance
    tracks the unbiased estimate. Eval mode uses the running statistics.
    """
    if x.ndim != 4:
        raise ShapeError(f"batch_norm_2d expects rank 4, got {x.shape}")
    c = x.shape[1]
    for name, arr in (("gamma", gamma.data), ("beta", beta.data),
                      ("running_mean", running_mean), ("running_var", running_var)):
        if arr.shape != (c,):
            raise ShapeError(f"batch_norm_2d: {name} has shape {arr.shape}, expected ({c},)")
    axes = (0, 2, 3)
    bshape = (1, c, 1, 1)
    count = x.size // c
    if training:
        mu = x.data.mean(axis=axes, dtype=x.dtype)
        var = x.data.var(axis=axes, dtype=x.dtype)
        unbiased = var * (count / (count - 1)) if count > 1 else var
        running_mean *= 1 - momentum
        running_mean += momentum * mu
        running_var *= 1 - momentum
        running_var += momentum * unbiased
    else:
        mu, var = running_mean, running_var
    inv = (1.0 / np.sqrt(var + eps)).astype(x.dtype)
    xhat = (x.data - mu.reshape(bshape)) * inv.reshape(bshape)
    out = xhat * gamma.data.reshape(bshape) + beta.data.reshape(bshape)

    def back(g):
        gbeta = g.sum(axis=axes)
        ggamma = (g * xhat).sum(axis=axes)
        gxhat = g * gamma.data.reshape(bshape)
        if training:
            gx = (inv.reshape(bshape) / count) * (
                count * gxhat
                - gxhat.sum(axis=axes).reshape(bshape)
                - xhat * (gxhat * xhat).sum(axis=axes).reshape(bshape)
            )
        else:
            gx = gxhat * inv.reshape(bshape)
        return gx, ggamma, gbeta

    return apply_op(out.astype(x.dtype, copy=False), (x, gamma, beta), back)


def cross_entropy(logits, labels):
    """Mean negative log-likelihood of integer ``labels`` under softmax(``logits``)."""
    if logits.ndim != 2:
        raise ShapeError(f"cross_entropy expects [N, K] logits, got {logits.shape}")
    n, k = logits.shape
    labels = np.asarray(labels)
    if labels.shape != (n,):
        raise ShapeError(f"cross_entropy: {n} logits rows but labels shape {labels.shape}")
    if labels.size and (labels.min() < 0 or labels.max() >= k):
        raise ContractError(f"labels must lie in [0, {k}), got range [{labels.min()}, {labels.max()}]")
    logp = special.log_softmax(logits.data, axis=1)
    loss = -logp[np.arange(n), labels].mean(dtype=logits.dtype)

    def back(g):
        grad = np.exp(logp)
        grad[np.arange(n), labels] -= 1
        return (grad * (g / n),)

    return apply_op(np.asarray(loss, dtype=logits.dtype), (logits,), back)
