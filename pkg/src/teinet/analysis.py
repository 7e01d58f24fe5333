"""Symbolic parameter and multiply-accumulate accounting.

A :class:`GraphSpec` is an ordered list of :class:`LayerSpec`. Each layer reads
the output of the previous layer unless ``input`` names another layer, which
is how residual branches are expressed. Shapes are tracked as (T, C, H, W) for
one clip.

"FLOPs" in reports are multiply-accumulates (MACs): one per weight
application. Bias and batch-norm arithmetic is not counted, but their
parameters are. Under this convention ResNet-50 at 224x224 is about 4.1 G per
frame.

Parameter formulas (C = channels, Cr = max(1, C // r)):

================  ====================================
conv2d            C_out * C_in * d * d
conv3d            C_out * C_in * t * d * d
temporal1d_full   C_out * C_in * t
tim               C * t   (one temporal kernel per channel)
mem               3 * C * Cr + 2 * Cr + C
se                2 * C * Cr + Cr + C
bn                2 * C
linear            C_out * C_in (+ C_out)
================  ====================================
"""
import csv
import io
from dataclasses import dataclass, field

from .errors import ContractError

KINDS = ("conv2d", "conv3d", "temporal1d_full", "tim", "mem", "se", "shift",
         "bn", "linear", "pool", "add")


@dataclass(frozen=True)
class LayerSpec:
    kind: str
    name: str
    c_in: int = 0
    c_out: int = 0
    t: int = 1
    d: int = 1
    stride: int = 1
    pad: int = 0
    reduction: int = 8
    bias: bool = False
    input: str = None
    other: str = None
    pool: str = "spatial"


@dataclass
class GraphSpec:
    layers: list = field(default_factory=list)
    input_shape: tuple = None

    def add(self, kind, name, **kw):
        if kind not in KINDS:
            raise ContractError(f"unknown layer kind {kind!r}")
        self.layers.append(LayerSpec(kind, name, **kw))
        return name

    def __iter__(self):
        return iter(self.layers)

    def __len__(self):
        return len(self.layers)

    def __add__(self, other):
        return GraphSpec(self.layers + other.layers, self.input_shape)


@dataclass
class CostReport:
    params: int
    macs: int
    rows: list

    def to_csv(self):
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["layer", "kind", "params", "macs", "out_shape"])
        for r in self.rows:
            w.writerow([r["layer"], r["kind"], r["params"], r["macs"], "x".join(map(str, r["out_shape"]))])
        w.writerow(["total", "", self.params, self.macs, ""])
        return buf.getvalue()

    def format_table(self, title=""):
        lines = []
        if title:
            lines.append(title)
        lines.append("FLOPs below are multiply-accumulates (1 MAC = 1 FLOP, as in the "
                     "usual video-model tables); bias/BN arithmetic excluded.")
        lines.append(f"{'layer':<28}{'kind':<16}{'params':>12}{'MACs':>16}")
        for r in self.rows:
            lines.append(f"{r['layer']:<28}{r['kind']:<16}{r['params']:>12,}{r['macs']:>16,}")
        lines.append(f"{'total':<28}{'':<16}{self.params:>12,}{self.macs:>16,}")
        lines.append(f"params = {self.params / 1e6:.2f} M, FLOPs (MACs) = {self.macs / 1e9:.2f} G")
        return "\n".join(lines)


def _reduced(c, r):
    return max(1, c // r)


def layer_params(layer):
    k, ci, co = layer.kind, layer.c_in, layer.c_out
    if k == "conv2d":
        n = co * ci * layer.d * layer.d
    elif k == "conv3d":
        n = co * ci * layer.t * layer.d * layer.d
    elif k == "temporal1d_full":
        n = co * ci * layer.t
    elif k == "tim":
        return ci * layer.t
    elif k == "mem":
        cr = _reduced(ci, layer.reduction)
        return 3 * ci * cr + 2 * cr + ci
    elif k == "se":
        cr = _reduced(ci, layer.reduction)
        return 2 * ci * cr + cr + ci
    elif k == "bn":
        return 2 * ci
    elif k == "linear":
        n = co * ci
    elif k in ("shift", "pool", "add"):
        return 0
    else:
        raise ContractError(f"unknown layer kind {k!r}")
    return n + (co if layer.bias else 0)


def _out_extent(n, k, stride, pad):
    out = (n + 2 * pad - k) // stride + 1
    if out < 1:
        raise ContractError(f"layer produces empty output from extent {n}")
    return out


def _propagate(layer, shape, shapes):
    """Output shape and MACs of ``layer`` applied to input ``shape`` = (T, C, H, W)."""
    t, c, h, w = shape
    k = layer.kind
    if k in ("conv2d", "conv3d", "temporal1d_full", "tim", "mem", "se", "shift", "bn", "linear") \
            and layer.c_in != c:
        raise ContractError(f"{layer.name}: expects {layer.c_in} input channels, got {c}")
    if k == "conv2d":
        ho, wo = _out_extent(h, layer.d, layer.stride, layer.pad), _out_extent(w, layer.d, layer.stride, layer.pad)
        return (t, layer.c_out, ho, wo), layer.c_out * c * layer.d * layer.d * ho * wo * t
    if k == "conv3d":
        ho, wo = _out_extent(h, layer.d, layer.stride, layer.pad), _out_extent(w, layer.d, layer.stride, layer.pad)
        return (t, layer.c_out, ho, wo), layer.c_out * c * layer.t * layer.d * layer.d * ho * wo * t
    if k == "temporal1d_full":
        return (t, layer.c_out, h, w), layer.c_out * c * layer.t * h * w * t
    if k == "tim":
        return shape, t * c * h * w * layer.t
    if k == "mem":
        return shape, t * (h * w * c + 3 * c * _reduced(c, layer.reduction))
    if k == "se":
        return shape, t * (h * w * c + 2 * c * _reduced(c, layer.reduction))
    if k in ("shift", "bn"):
        return shape, 0
    if k == "linear":
        if h != 1 or w != 1:
            raise ContractError(f"{layer.name}: linear layer needs pooled input, got {h}x{w}")
        return (t, layer.c_out, 1, 1), t * layer.c_out * c
    if k == "pool":
        if layer.pool == "spatial":
            return (t, c, 1, 1), 0
        if layer.pool == "spatiotemporal":
            return (1, c, 1, 1), 0
        if layer.pool == "window":
            return (t, c, _out_extent(h, layer.d, layer.stride, layer.pad),
                    _out_extent(w, layer.d, layer.stride, layer.pad)), 0
        raise ContractError(f"{layer.name}: unknown pool mode {layer.pool!r}")
    if k == "add":
        other = shapes.get(layer.other)
        if other is None:
            raise ContractError(f"{layer.name}: unknown add operand {layer.other!r}")
        if other != shape:
            raise ContractError(f"{layer.name}: cannot add shapes {shape} and {other}")
        return shape, 0
    raise ContractError(f"unknown layer kind {k!r}")


def cost_report(g, input_shape=None):
    input_shape = tuple(input_shape or g.input_shape or ())
    if len(input_shape) != 4:
        raise ContractError(f"input shape must be (T, C, H, W), got {input_shape}")
    shapes = {None: input_shape}
    prev = input_shape
    rows = []
    for layer in g:
        if layer.input is not None and layer.input not in shapes:
            raise ContractError(f"{layer.name}: unknown input binding {layer.input!r}")
        src = shapes[layer.input] if layer.input is not None else prev
        out, macs = _propagate(layer, src, shapes)
        shapes[layer.name] = out
        prev = out
        rows.append({"layer": layer.name, "kind": layer.kind, "params": layer_params(layer),
                     "macs": macs, "out_shape": out})
    return CostReport(sum(r["params"] for r in rows), sum(r["macs"] for r in rows), rows)


def count_params(g):
    return sum(layer_params(layer) for layer in g)


def count_macs(g, input_shape=None):
    return cost_report(g, input_shape).macs


# ---------------------------------------------------------------- graph builders

def _temporal_layers(g, variant, prefix, c, reduction, kernel=3):
    """Append the temporal layers for ``variant`` acting on ``c`` channels."""
    if variant in ("mem", "mem+tim"):
        g.add("mem", f"{prefix}.mem", c_in=c, c_out=c, reduction=reduction)
    if variant == "se+tim":
        g.add("se", f"{prefix}.se", c_in=c, c_out=c, reduction=reduction)
    if variant in ("tim", "mem+tim", "se+tim"):
        g.add("tim", f"{prefix}.tim", c_in=c, c_out=c, t=kernel)
    if variant == "tsm":
        g.add("shift", f"{prefix}.shift", c_in=c, c_out=c)


def mini_graph(spec):
    """GraphSpec mirroring the runnable mini network described by a NetworkSpec."""
    spec.validate()
    g = GraphSpec(input_shape=(spec.frames, 3, spec.input_spatial, spec.input_spatial))
    w0 = spec.stages[0][1]
    g.add("conv2d", "stem.conv", c_in=3, c_out=w0, d=3, stride=spec.stem_stride, pad=1)
    x = g.add("bn", "stem.bn", c_in=w0, c_out=w0)
    for s, b, c_in, c_out, stride, temporal in spec.block_plan():
        name = f"s{s}.b{b}"
        block_in = x
        if temporal:
            _temporal_layers(g, spec.variant, name, c_in, spec.reduction, spec.tim_kernel)
        g.add("conv2d", f"{name}.conv1", c_in=c_in, c_out=c_out, d=3, stride=stride, pad=1,
              input=None if temporal else block_in)
        g.add("bn", f"{name}.bn1", c_in=c_out, c_out=c_out)
        g.add("conv2d", f"{name}.conv2", c_in=c_out, c_out=c_out, d=3, stride=1, pad=1)
        branch = g.add("bn", f"{name}.bn2", c_in=c_out, c_out=c_out)
        skip = block_in
        if stride != 1 or c_in != c_out:
            g.add("conv2d", f"{name}.proj", c_in=c_in, c_out=c_out, d=1, stride=stride, input=block_in)
            skip = g.add("bn", f"{name}.proj_bn", c_in=c_out, c_out=c_out)
        x = g.add("add", f"{name}.add", input=branch, other=skip)
    width = spec.stages[-1][1]
    g.add("pool", "head.pool", pool="spatiotemporal")
    g.add("linear", "head.fc", c_in=width, c_out=spec.num_classes, bias=True)
    return g


RESNET50_STAGES = ((3, 64), (4, 128), (6, 256), (3, 512))


def resnet50_teinet_spec(frames=8, spatial=224, num_classes=174, insertion_stages=(0, 1, 2, 3),
                         variant="mem+tim", reduction=8):
    """Symbolic ResNet-50 (torchvision layout, stride on the 3x3 conv) with temporal blocks.

    Stage indices 0..3 are res2..res5. Temporal layers act on the block input,
    i.e. on the residual branch before the first 1x1 conv. The classifier is
    applied per frame and scores are averaged, as in TSN.
    """
    from .backbone import canonical_variant

    variant = canonical_variant(variant)
    stages = tuple(sorted(set(insertion_stages)))
    if any(s not in range(4) for s in stages):
        raise ContractError(f"insertion stages must lie in 0..3 (res2..res5), got {list(stages)}")
    g = GraphSpec(input_shape=(frames, 3, spatial, spatial))
    g.add("conv2d", "conv1", c_in=3, c_out=64, d=7, stride=2, pad=3)
    g.add("bn", "bn1", c_in=64, c_out=64)
    x = g.add("pool", "maxpool", d=3, stride=2, pad=1, pool="window")
    c_in = 64
    for s, (blocks, mid) in enumerate(RESNET50_STAGES):
        out = 4 * mid
        for b in range(blocks):
            name = f"res{s + 2}.{b}"
            stride = 2 if (s > 0 and b == 0) else 1
            block_in = x
            temporal = variant != "none" and s in stages
            if temporal:
                _temporal_layers(g, variant, name, c_in, reduction)
            g.add("conv2d", f"{name}.conv1", c_in=c_in, c_out=mid, d=1,
                  input=None if temporal else block_in)
            g.add("bn", f"{name}.bn1", c_in=mid, c_out=mid)
            g.add("conv2d", f"{name}.conv2", c_in=mid, c_out=mid, d=3, stride=stride, pad=1)
            g.add("bn", f"{name}.bn2", c_in=mid, c_out=mid)
            g.add("conv2d", f"{name}.conv3", c_in=mid, c_out=out, d=1)
            branch = g.add("bn", f"{name}.bn3", c_in=out, c_out=out)
            skip = block_in
            if b == 0:
                g.add("conv2d", f"{name}.downsample", c_in=c_in, c_out=out, d=1, stride=stride,
                      input=block_in)
                skip = g.add("bn", f"{name}.downsample_bn", c_in=out, c_out=out)
            x = g.add("add", f"{name}.add", input=branch, other=skip)
            c_in = out
    g.add("pool", "avgpool", pool="spatial")
    g.add("linear", "fc", c_in=2048, c_out=num_classes, bias=True)
    return g


def resnet50_block_inputs(insertion_stages=(0, 1, 2, 3)):
    """Input channel width of every bottleneck block in the given stages."""
    widths = []
    c_in = 64
    for s, (blocks, mid) in enumerate(RESNET50_STAGES):
        for b in range(blocks):
            if s in insertion_stages:
                widths.append(c_in)
            c_in = 4 * mid
    return widths
