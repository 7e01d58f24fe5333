"""Miniature residual video network with optional temporal blocks.

Frames of all clips are folded into one batch axis for the 2D layers. A
temporal block (TEI or a baseline) is applied to the input of the residual
branch of selected blocks::

    x ─┬─ [temporal] ─ conv3x3 ─ BN ─ ReLU ─ conv3x3 ─ BN ─┐
       └──────────────── (1x1 conv ─ BN) ──────────────────(+)─ ReLU

The head averages features over time and space and applies one linear layer.
"""
import json
import math
import zlib
from dataclasses import asdict, dataclass
from fractions import Fraction

import numpy as np

from . import binio
from .errors import ContractError, NumericalDivergence, ShapeError
from .tensor import (
    DEFAULT_DTYPE,
    ParamStore,
    Tape,
    Tensor,
    add,
    apply_op,
    backward,
    batch_norm_2d,
    channel_project,
    conv2d,
    cross_entropy,
    mean,
    relu,
    reshape,
    sgd_step,
)
from .temporal import (
    MemModule,
    SeModule,
    ShiftSpec,
    TimModule,
    mem_forward,
    se_forward,
    tim_forward,
    tsm_forward,
)
from .data import sample_indices

VARIANTS = ("none", "tsm", "se+tim", "mem", "tim", "mem+tim")
_ALIASES = {"tsn": "none", "mem-only": "mem", "tim-only": "tim", "tei": "mem+tim"}


def canonical_variant(name):
    name = _ALIASES.get(name, name)
    if name not in VARIANTS:
        raise ContractError(f"unknown variant {name!r}; valid: tsn, {', '.join(VARIANTS[1:])}")
    return name


@dataclass
class NetworkSpec:
    stages: tuple = ((2, 16), (2, 32), (2, 64), (2, 128))
    input_spatial: int = 32
    frames: int = 8
    num_classes: int = 4
    insertion: tuple = (0, 1, 2, 3)
    variant: str = "none"
    reduction: int = 8
    tim_kernel: int = 3
    tim_init: str = "identity"
    shift_backward: str = "1/8"
    shift_forward: str = "1/8"
    stem_stride: int = 1
    mem_init: str = "independent"

    def __post_init__(self):
        self.stages = tuple(tuple(int(v) for v in s) for s in self.stages)
        self.insertion = tuple(sorted(set(int(i) for i in self.insertion)))
        self.variant = canonical_variant(self.variant)
        self.shift_backward = str(Fraction(self.shift_backward))
        self.shift_forward = str(Fraction(self.shift_forward))

    def validate(self):
        if not self.stages:
            raise ContractError("network needs at least one stage")
        widths = [w for _, w in self.stages]
        if any(b < 1 for b, _ in self.stages) or widths[0] < 1:
            raise ContractError("block counts and widths must be positive")
        if any(b <= a for a, b in zip(widths, widths[1:])):
            raise ContractError(f"stage widths must strictly increase, got {widths}")
        bad = [i for i in self.insertion if not 0 <= i < len(self.stages)]
        if bad:
            raise ContractError(f"insertion stages {bad} outside [0, {len(self.stages)})")
        if self.frames < 1 or self.num_classes < 1 or self.input_spatial < 1:
            raise ContractError("frames, num_classes and input_spatial must be positive")
        if self.variant in ("mem", "mem+tim") and self.frames < 2:
            raise ContractError("MEM variants need at least two frames")
        if self.tim_init not in ("identity", "shift"):
            raise ContractError(f"tim_init must be 'identity' or 'shift', got {self.tim_init!r}")
        if self.mem_init not in ("independent", "tied"):
            raise ContractError(f"mem_init must be 'independent' or 'tied', got {self.mem_init!r}")
        if self.reduction < 1 or self.tim_kernel < 1 or self.tim_kernel % 2 == 0:
            raise ContractError("reduction must be positive and tim_kernel odd")
        self.shift_spec()
        return self

    def shift_spec(self):
        return ShiftSpec(Fraction(self.shift_backward), Fraction(self.shift_forward))

    def block_plan(self):
        """Yield (stage, block, c_in, c_out, stride, temporal) for every residual block."""
        c_in = self.stages[0][1]
        for s, (blocks, width) in enumerate(self.stages):
            for b in range(blocks):
                stride = 2 if (s > 0 and b == 0) else 1
                temporal = self.variant != "none" and s in self.insertion
                yield s, b, c_in, width, stride, temporal
                c_in = width

    def to_dict(self):
        d = asdict(self)
        d["stages"] = [list(s) for s in self.stages]
        d["insertion"] = list(self.insertion)
        return d

    @classmethod
    def from_dict(cls, d):
        unknown = set(d) - {f for f in cls.__dataclass_fields__}
        if unknown:
            raise ContractError(f"unknown network keys: {sorted(unknown)}")
        return cls(**d)


def _init_rng(seed, name):
    # per-parameter streams keep the backbone init identical across variants
    return np.random.default_rng([seed, zlib.crc32(name.encode())])


class _BatchNorm:
    def __init__(self, store, name, channels):
        self.gamma = store.add(f"{name}.gamma", np.ones(channels))
        self.beta = store.add(f"{name}.beta", np.zeros(channels))
        self.running_mean = store.add_buffer(f"{name}.running_mean", np.zeros(channels))
        self.running_var = store.add_buffer(f"{name}.running_var", np.ones(channels))

    def __call__(self, x, training):
        return batch_norm_2d(x, self.gamma, self.beta, self.running_mean, self.running_var, training)


class _Block:
    def __init__(self, spec, store, seed, s, b, c_in, c_out, stride, temporal):
        name = f"s{s}.b{b}"
        self.stride = stride
        self.variant = spec.variant if temporal else "none"
        self.mem = self.se = self.tim = None
        if self.variant in ("mem", "mem+tim"):
            self.mem = MemModule.create(c_in, spec.reduction, _init_rng(seed, f"{name}.mem"),
                                        store, f"{name}.mem", tied=spec.mem_init == "tied")
        if self.variant == "se+tim":
            self.se = SeModule.create(c_in, spec.reduction, _init_rng(seed, f"{name}.se"),
                                      store, f"{name}.se")
        if self.variant in ("tim", "mem+tim", "se+tim"):
            self.tim = TimModule.create(c_in, spec.tim_kernel, spec.tim_init, spec.shift_spec(),
                                        store, f"{name}.tim")
        self.shift = spec.shift_spec() if self.variant == "tsm" else None
        self.conv1 = store.add(f"{name}.conv1.w", _he(seed, f"{name}.conv1.w", (c_out, c_in, 3, 3)))
        self.bn1 = _BatchNorm(store, f"{name}.bn1", c_out)
        self.conv2 = store.add(f"{name}.conv2.w", _he(seed, f"{name}.conv2.w", (c_out, c_out, 3, 3)))
        self.bn2 = _BatchNorm(store, f"{name}.bn2", c_out)
        self.proj = self.proj_bn = None
        if stride != 1 or c_in != c_out:
            self.proj = store.add(f"{name}.proj.w", _he(seed, f"{name}.proj.w", (c_out, c_in, 1, 1)))
            self.proj_bn = _BatchNorm(store, f"{name}.proj_bn", c_out)

    def temporal(self, x, n, t):
        if self.variant == "none":
            return x
        m, c, h, w = x.shape
        v = reshape(x, (n, t, c, h, w))
        if self.mem is not None:
            v = mem_forward(self.mem, v)
        if self.se is not None:
            v = se_forward(self.se, v)
        if self.tim is not None:
            v = tim_forward(self.tim, v)
        if self.shift is not None:
            v = tsm_forward(self.shift, v)
        return reshape(v, (m, c, h, w))

    def __call__(self, x, n, t, training):
        r = self.temporal(x, n, t)
        r = relu(self.bn1(conv2d(r, self.conv1, self.stride, 1), training))
        r = self.bn2(conv2d(r, self.conv2, 1, 1), training)
        skip = x
        if self.proj is not None:
            skip = self.proj_bn(conv2d(x, self.proj, self.stride, 0), training)
        return relu(add(r, skip))


def _he(seed, name, shape):
    fan_in = int(np.prod(shape[1:]))
    return _init_rng(seed, name).normal(0.0, math.sqrt(2.0 / fan_in), size=shape)


class Model:
    """Executable network: a ParamStore plus the layer sequence built from a NetworkSpec."""

    def __init__(self, spec, seed=0, dtype=DEFAULT_DTYPE):
        spec.validate()
        self.spec = spec
        self.seed = seed
        self.training = True
        self.store = store = ParamStore(dtype)
        self.input_mean = store.add_buffer("input.mean", np.zeros(3))
        self.input_std = store.add_buffer("input.std", np.ones(3))
        stem_w = spec.stages[0][1]
        self.stem = store.add("stem.conv.w", _he(seed, "stem.conv.w", (stem_w, 3, 3, 3)))
        self.stem_bn = _BatchNorm(store, "stem.bn", stem_w)
        self.blocks = [_Block(spec, store, seed, *plan) for plan in spec.block_plan()]
        width = spec.stages[-1][1]
        bound = 1.0 / math.sqrt(width)
        rng = _init_rng(seed, "head")
        self.head_w = store.add("head.w", rng.uniform(-bound, bound, (spec.num_classes, width)))
        self.head_b = store.add("head.b", rng.uniform(-bound, bound, spec.num_classes))

    def train(self):
        self.training = True
        return self

    def eval(self):
        self.training = False
        return self

    def set_normalization(self, mean_rgb, std_rgb):
        self.input_mean[...] = mean_rgb
        self.input_std[...] = std_rgb

    def temporal_modules(self):
        return [b for b in self.blocks if b.variant != "none"]

    def __call__(self, clips):
        return forward_logits(self, clips)


def build_network(spec, seed=0, dtype=DEFAULT_DTYPE):
    return Model(spec, seed, dtype)


def forward_logits(model, clips):
    """[N, T, 3, H, W] raw clips -> [N, num_classes] logits."""
    spec = model.spec
    if not isinstance(clips, Tensor):
        clips = Tensor(clips, dtype=model.store.dtype)
    expect = (spec.frames, 3, spec.input_spatial, spec.input_spatial)
    if clips.ndim != 5 or clips.shape[1:] != expect:
        raise ShapeError(f"expected clips of shape [N, {', '.join(map(str, expect))}], got {clips.shape}")
    n, t = clips.shape[:2]
    x = reshape(_normalize_input(model, clips), (n * t,) + clips.shape[2:])
    training = model.training
    x = relu(model.stem_bn(conv2d(x, model.stem, model.spec.stem_stride, 1), training))
    for block in model.blocks:
        x = block(x, n, t, training)
    m, c, h, w = x.shape
    feat = mean(reshape(x, (n, t, c, h, w)), (1, 3, 4))
    return channel_project(feat, model.head_w, model.head_b)


def _normalize_input(model, clips):
    scale = (1.0 / model.input_std).reshape(1, 1, 3, 1, 1)
    shift = model.input_mean.reshape(1, 1, 3, 1, 1)
    out = ((clips.data - shift) * scale).astype(model.store.dtype, copy=False)
    return apply_op(out, (clips,), lambda g: (g * scale,))


# ---------------------------------------------------------------- training

@dataclass
class LRSchedule:
    """Step decay: multiply by ``factor`` at each milestone (a fraction of total epochs)."""

    init: float = 0.01
    milestones: tuple = (0.6, 0.85)
    factor: float = 0.1

    def lr_at(self, epoch, total_epochs):
        drops = sum(1 for m in self.milestones if epoch >= int(m * total_epochs))
        return self.init * self.factor ** drops


def channel_stats(ds):
    """Per colour channel mean and std over every pixel of every training frame."""
    v = ds.videos
    mean_rgb = v.mean(axis=(0, 1, 3, 4), dtype=np.float64)
    std_rgb = v.std(axis=(0, 1, 3, 4), dtype=np.float64)
    return mean_rgb, np.maximum(std_rgb, 1e-6)


def _batch(ds, idx, frames, mode, rng):
    clips = np.stack([ds.videos[i][sample_indices(ds.videos.shape[1], frames, mode, rng)] for i in idx])
    return clips, ds.labels[idx]


def train(model, dataset, epochs, lr_schedule=None, batch_size=16, seed=0, eval_dataset=None,
          momentum=0.9, weight_decay=1e-4, normalize=True, on_epoch=None):
    """Train in place and return one log row per epoch.

    Each row holds ``epoch, lr, train_loss, train_acc, eval_acc``. All
    randomness (shuffling and train-mode frame sampling) comes from ``seed``.
    """
    if len(dataset) == 0:
        raise ContractError("training dataset is empty")
    if epochs < 1 or batch_size < 1:
        raise ContractError("epochs and batch_size must be positive")
    schedule = lr_schedule or LRSchedule()
    eval_dataset = eval_dataset if eval_dataset is not None else dataset
    if normalize:
        model.set_normalization(*channel_stats(dataset))
    rng = np.random.default_rng(seed)
    frames = model.spec.frames
    log = []
    for epoch in range(epochs):
        lr = schedule.lr_at(epoch, epochs)
        model.train()
        order = rng.permutation(len(dataset))
        loss_sum, correct = 0.0, 0
        for start in range(0, len(order), batch_size):
            idx = order[start:start + batch_size]
            clips, labels = _batch(dataset, idx, frames, "train", rng)
            with Tape() as tape:
                logits = forward_logits(model, clips)
                loss = cross_entropy(logits, labels)
            value = float(loss.item())
            if not math.isfinite(value):
                raise NumericalDivergence(f"non-finite loss {value} at epoch {epoch}")
            backward(loss, tape)
            sgd_step(model.store, lr, momentum, weight_decay)
            model.store.zero_grad()
            loss_sum += value * len(idx)
            correct += int((logits.data.argmax(axis=1) == labels).sum())
        eval_acc, _ = evaluate(model, eval_dataset)
        row = {"epoch": epoch + 1, "lr": lr, "train_loss": loss_sum / len(dataset),
               "train_acc": correct / len(dataset), "eval_acc": eval_acc}
        log.append(row)
        if on_epoch is not None:
            on_epoch(row)
    return log


def predict(model, dataset, batch_size=32):
    if len(dataset) == 0:
        raise ContractError("dataset is empty")
    model.eval()
    frames = model.spec.frames
    preds = []
    for start in range(0, len(dataset), batch_size):
        idx = np.arange(start, min(start + batch_size, len(dataset)))
        clips, _ = _batch(dataset, idx, frames, "eval", None)
        preds.append(forward_logits(model, clips).data.argmax(axis=1))
    return np.concatenate(preds)


def evaluate(model, dataset, batch_size=32):
    """Top-1 accuracy and per-class accuracy (NaN for classes with no samples)."""
    preds = predict(model, dataset, batch_size)
    hit = preds == dataset.labels
    counts = np.bincount(dataset.labels, minlength=dataset.num_classes)
    hits = np.bincount(dataset.labels, weights=hit, minlength=dataset.num_classes)
    with np.errstate(invalid="ignore", divide="ignore"):
        per_class = hits / counts
    return float(hit.mean()), per_class


# ---------------------------------------------------------------- checkpoints

def save_checkpoint(model, path):
    """Write parameters and buffers as ``TEIC`` plus the network spec as ``<path>.json``."""
    binio.write_checkpoint(path, model.store.state())
    with open(f"{path}.json", "w") as fh:
        json.dump({"spec": model.spec.to_dict(), "seed": model.seed}, fh, indent=2, sort_keys=True)


def load_checkpoint(path):
    with open(f"{path}.json") as fh:
        meta = json.load(fh)
    model = build_network(NetworkSpec.from_dict(meta["spec"]), seed=meta.get("seed", 0))
    model.store.load_state(binio.read_checkpoint(path))
    return model.eval()
