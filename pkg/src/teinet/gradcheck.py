"""Finite-difference gradient checks for every differentiable operator.

Each case builds float64 inputs from a seed and a scalar loss
``sum(op(inputs) * R)`` with a fixed random projection ``R``, so every output
element contributes with a distinct weight. The analytic gradient from the
tape is compared with central differences

    (f(x + h e_i) - f(x - h e_i)) / (2 h),   h = 1e-4 * max(1, |x_i|)

and the error of a leaf is ``max_i |a_i - n_i| / max_i max(|a_i|, |n_i|)``,
i.e. relative to that leaf's gradient scale. Large leaves are checked on a
random subset of coordinates.
"""
from dataclasses import dataclass

import numpy as np

from .tensor import (
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
    sigmoid,
    sub,
    sum_all,
    watch_relu,
)
from .temporal import (
    MemModule,
    SeModule,
    ShiftSpec,
    TimModule,
    mem_forward,
    se_forward,
    tei_forward,
    tim_forward,
    tsm_forward,
)

TOLERANCE = 1e-4
F64 = np.float64


@dataclass
class CheckResult:
    op: str
    seed: int
    max_rel_error: float
    coords: int
    skipped: int = 0

    @property
    def ok(self):
        return self.max_rel_error < TOLERANCE


def _leaf(rng, shape, lo=None):
    x = rng.standard_normal(shape)
    if lo is not None:
        # keep values away from kinks so +-h never crosses them
        x = np.where(np.abs(x) < lo, np.sign(x + 1e-300) * lo, x) + 0.0
    return Tensor(x, requires_grad=True, dtype=F64)


def _param_leaves(store):
    for p in store:
        p.requires_grad = True
    return list(store)


# Each builder returns (loss_fn, leaves); loss_fn() recomputes the loss from the
# current leaf values and must be deterministic.

def _case_gap_spatial(rng):
    x = _leaf(rng, (2, 3, 2, 3, 4))
    r = rng.standard_normal((2, 3, 2))
    return (lambda: sum_all(mul(gap_spatial(x), Tensor(r, dtype=F64)))), [x]


def _case_channel_project(rng):
    x, w, b = _leaf(rng, (2, 3, 5)), _leaf(rng, (4, 5)), _leaf(rng, (4,))
    r = rng.standard_normal((2, 3, 4))
    return (lambda: sum_all(mul(channel_project(x, w, b), Tensor(r, dtype=F64)))), [x, w, b]


def _pointwise(fn, n_inputs, lo=None):
    def build(rng):
        xs = [_leaf(rng, (3, 4, 2), lo) for _ in range(n_inputs)]
        r = rng.standard_normal((3, 4, 2))
        return (lambda: sum_all(mul(fn(*xs), Tensor(r, dtype=F64)))), xs
    return build


def _case_mul_broadcast(rng):
    x, s = _leaf(rng, (2, 3, 4, 2, 2)), _leaf(rng, (2, 3, 4))
    r = rng.standard_normal(x.shape)
    return (lambda: sum_all(mul(mul_broadcast_channel(x, s), Tensor(r, dtype=F64)))), [x, s]


def _case_conv2d(rng):
    stride = 1 + int(rng.integers(2))
    k = int(rng.choice([1, 3]))
    x, w = _leaf(rng, (2, 3, 5, 6)), _leaf(rng, (4, 3, k, k))
    pad = k // 2
    ho, wo = (5 + 2 * pad - k) // stride + 1, (6 + 2 * pad - k) // stride + 1
    r = rng.standard_normal((2, 4, ho, wo))
    return (lambda: sum_all(mul(conv2d(x, w, stride, pad), Tensor(r, dtype=F64)))), [x, w]


def _case_batch_norm(rng):
    x = _leaf(rng, (4, 3, 3, 2))
    gamma, beta = _leaf(rng, (3,)), _leaf(rng, (3,))
    r = rng.standard_normal(x.shape)

    def loss():
        rm, rv = np.zeros(3), np.ones(3)
        return sum_all(mul(batch_norm_2d(x, gamma, beta, rm, rv, True), Tensor(r, dtype=F64)))

    return loss, [x, gamma, beta]


def _case_batch_norm_eval(rng):
    x = _leaf(rng, (4, 3, 3, 2))
    gamma, beta = _leaf(rng, (3,)), _leaf(rng, (3,))
    rm, rv = rng.standard_normal(3), rng.uniform(0.5, 2.0, 3)
    r = rng.standard_normal(x.shape)
    return (lambda: sum_all(mul(batch_norm_2d(x, gamma, beta, rm, rv, False),
                                Tensor(r, dtype=F64)))), [x, gamma, beta]


def _video_case(make_module, forward, t=4, c=8):
    def build(rng):
        store = ParamStore(F64)
        module = make_module(store, rng, c)
        x = _leaf(rng, (2, t, c, 3, 3))
        r = rng.standard_normal(x.shape)
        leaves = [x] + _param_leaves(store)
        return (lambda: sum_all(mul(forward(module, x), Tensor(r, dtype=F64)))), leaves
    return build


def _random_tim(store, rng, c, prefix="tim"):
    tim = TimModule.create(c, 3, store=store, prefix=prefix)
    tim.v.data[...] = rng.standard_normal(tim.v.shape)
    return tim


def _random_mem(store, rng, c, prefix="mem"):
    mem = MemModule.create(c, 4, rng=rng, store=store, prefix=prefix)
    for p in (mem.b_theta, mem.b_phi, mem.b_psi):
        p.data[...] = 0.1 * rng.standard_normal(p.shape)
    return mem


def _random_se(store, rng, c):
    se = SeModule.create(c, 4, rng=rng, store=store)
    # keep SE bottleneck pre-activations away from the ReLU kink
    se.b_theta.data[...] = np.sign(rng.standard_normal(se.b_theta.shape)) * 0.5
    return se


def _case_tei(rng):
    store = ParamStore(F64)
    mem = _random_mem(store, rng, 8)
    tim = _random_tim(store, rng, 8)
    x = _leaf(rng, (2, 4, 8, 3, 3))
    r = rng.standard_normal(x.shape)
    return (lambda: sum_all(mul(tei_forward(mem, tim, x), Tensor(r, dtype=F64)))), \
        [x] + _param_leaves(store)


def _case_tsm(rng):
    x = _leaf(rng, (2, 5, 8, 2, 2))
    spec = ShiftSpec(0.25, 0.25)
    r = rng.standard_normal(x.shape)
    return (lambda: sum_all(mul(tsm_forward(spec, x), Tensor(r, dtype=F64)))), [x]


def _case_cross_entropy(rng):
    logits = _leaf(rng, (5, 4))
    labels = rng.integers(0, 4, size=5)
    return (lambda: cross_entropy(logits, labels)), [logits]


_NET_VARIANTS = ("mem+tim", "tim", "mem", "se+tim", "tsm", "none")


def _case_network(rng, seed=0):
    from .backbone import NetworkSpec, build_network

    spec = NetworkSpec(stages=((1, 4), (1, 8)), input_spatial=6, frames=3, num_classes=3,
                       insertion=(0, 1), variant=_NET_VARIANTS[seed % len(_NET_VARIANTS)],
                       reduction=2, shift_backward="1/4", shift_forward="1/4")
    model = build_network(spec, seed=seed, dtype=F64).train()
    for p in model.store:
        if p.name.endswith(".v") or "mem." in p.name or ".se." in p.name:
            p.data[...] = 0.5 * rng.standard_normal(p.shape) + p.data
    clips = rng.random((2, 3, 3, 6, 6))
    labels = rng.integers(0, 3, size=2)
    x = Tensor(clips, requires_grad=True, dtype=F64)
    from .backbone import forward_logits
    return (lambda: cross_entropy(forward_logits(model, x), labels)), [x] + _param_leaves(model.store)


CASES = {
    "gap_spatial": _case_gap_spatial,
    "channel_project": _case_channel_project,
    "sigmoid": _pointwise(sigmoid, 1),
    "sub": _pointwise(sub, 2),
    "add": _pointwise(add, 2),
    "mul": _pointwise(mul, 2),
    "mul_broadcast_channel": _case_mul_broadcast,
    "relu": _pointwise(relu, 1, lo=1e-2),
    "conv2d": _case_conv2d,
    "batch_norm": _case_batch_norm,
    "batch_norm_eval": _case_batch_norm_eval,
    "mem": _video_case(_random_mem, mem_forward),
    "tim": _video_case(_random_tim, tim_forward),
    "se": _video_case(_random_se, se_forward),
    "tsm": _case_tsm,
    "tei": _case_tei,
    "cross_entropy": _case_cross_entropy,
    "network": _case_network,
}


def _eval(loss_fn):
    with watch_relu() as masks:
        value = float(loss_fn().item())
    return value, masks


def _same_masks(a, b):
    return len(a) == len(b) and all(np.array_equal(x, y) for x, y in zip(a, b))


def check_case(name, seed, max_coords=12):
    """Run one case; returns a CheckResult.

    Coordinates whose +-h stencil flips any relu activation are not
    differentiable across the stencil; they are skipped and counted.
    """
    rng = np.random.default_rng([seed, sum(map(ord, name))])
    builder = CASES[name]
    loss_fn, leaves = builder(rng, seed) if name == "network" else builder(rng)
    for t in leaves:
        t.grad = None
    with Tape() as tape, watch_relu() as base_masks:
        loss = loss_fn()
    backward(loss, tape)
    worst, coords, skipped = 0.0, 0, 0
    pick = np.random.default_rng([seed, 7])
    for t in leaves:
        analytic = np.zeros(t.shape) if t.grad is None else t.grad.astype(F64)
        flat = t.data.reshape(-1)
        idx = np.arange(flat.size)
        if flat.size > max_coords:
            idx = pick.choice(flat.size, max_coords, replace=False)
        a, n = [], []
        for i in idx:
            orig = flat[i]
            h = 1e-4 * max(1.0, abs(orig))
            flat[i] = orig + h
            up, up_masks = _eval(loss_fn)
            flat[i] = orig - h
            down, down_masks = _eval(loss_fn)
            flat[i] = orig
            if not (_same_masks(base_masks, up_masks) and _same_masks(base_masks, down_masks)):
                skipped += 1
                continue
            a.append(analytic.reshape(-1)[i])
            n.append((up - down) / (2 * h))
        if a:
            a, n = np.array(a), np.array(n)
            scale = max(np.abs(a).max(), np.abs(n).max())
            if scale > 0:
                worst = max(worst, float(np.abs(a - n).max() / scale))
        coords += len(a)
    return CheckResult(name, seed, worst, coords, skipped)


def run_checks(ops=None, seeds=range(20), max_coords=12):
    """Check every requested op under every seed; returns a list of CheckResult."""
    ops = list(CASES) if ops is None else list(ops)
    unknown = [o for o in ops if o not in CASES]
    if unknown:
        raise KeyError(f"unknown gradcheck op(s) {unknown}; valid: {', '.join(CASES)}")
    return [check_case(op, s, max_coords) for op in ops for s in seeds]
