"""Analytical parameter / MAC counting and normalised efficiency indicators.

Counting walks the same layer descriptions the executor uses
(:func:`lsnet.model.model_layers`, :func:`lsnet.model.fpn_graph`) and
propagates spatial sizes with the convolution output formula; nothing is
executed. :func:`count_flops_oracle` is the independent check: it runs the
model through an instrumented convolution kernel that ticks once per
multiply-accumulate.

GFLOPs convention: Table-style "GFLOPs" figures for this model family are
multiply-accumulates / 1e9 (``convention="mac"``); ``"2mac"`` doubles that.
Reports always carry raw MAC counts so both can be printed.
"""
import csv
import io
from dataclasses import dataclass, field

import numpy as np

from . import kernels, model
from .config import ModelSpec
from .model import LayerSpec
from .ops import ConvSpec
from .tensor import Tensor

CONVENTIONS = ("mac", "2mac")


@dataclass
class CostEntry:
    name: str
    module: str
    params: int = 0
    buffers: int = 0
    macs: int = 0
    elementwise: int = 0


@dataclass
class CostReport:
    entries: list = field(default_factory=list)
    input_shape: tuple = None
    streams: int = 1

    def add(self, entry):
        self.entries.append(entry)

    @property
    def params(self):
        return sum(e.params for e in self.entries)

    @property
    def buffers(self):
        return sum(e.buffers for e in self.entries)

    @property
    def macs(self):
        return sum(e.macs for e in self.entries)

    @property
    def elementwise(self):
        return sum(e.elementwise for e in self.entries)

    def gflops(self, convention="mac"):
        if convention not in CONVENTIONS:
            raise ValueError(f"convention must be one of {CONVENTIONS}")
        return (2 if convention == "2mac" else 1) * self.macs / 1e9

    def module(self, prefix):
        """Sub-report of entries whose module (or name) starts with ``prefix``."""
        sub = [e for e in self.entries if e.module.startswith(prefix) or e.name.startswith(prefix)]
        return CostReport(sub, self.input_shape, self.streams)

    def modules(self, depth=1):
        """Totals grouped by the first ``depth`` dotted components of the module path."""
        out = {}
        for e in self.entries:
            key = ".".join(e.module.split(".")[:depth])
            agg = out.setdefault(key, CostEntry(key, key))
            agg.params += e.params
            agg.buffers += e.buffers
            agg.macs += e.macs
            agg.elementwise += e.elementwise
        return out

    def macs_by_layer(self):
        return {e.name: e.macs for e in self.entries if e.macs}

    def to_dict(self):
        return {
            "input_shape": list(self.input_shape) if self.input_shape else None,
            "streams": self.streams,
            "totals": {"params": self.params, "buffers": self.buffers, "macs": self.macs,
                       "elementwise": self.elementwise, "gflops_mac": self.gflops("mac"),
                       "gflops_2mac": self.gflops("2mac")},
            "modules": {k: {"params": v.params, "buffers": v.buffers, "macs": v.macs,
                            "elementwise": v.elementwise} for k, v in self.modules(2).items()},
            "entries": [vars(e).copy() for e in self.entries],
        }


def _module_of(name):
    return name.rsplit(".", 1)[0]


def _layer_params(layer):
    if layer.kind == "conv":
        return layer.conv.n_params, 0
    if layer.kind == "bn":
        return 2 * layer.channels, 2 * layer.channels
    if layer.kind == "prelu":
        return layer.channels, 0
    raise ValueError(f"malformed layer spec: unknown kind {layer.kind!r}")


def count_params(spec):
    """Parameter report for a ModelSpec, a single LayerSpec/ConvSpec, or a list of LayerSpecs.

    Shared Siamese weights are counted once. BN contributes 2·C learnable
    parameters plus 2·C running statistics, reported as ``buffers``.
    """
    if isinstance(spec, ModelSpec):
        layers = model.model_layers(spec)
    elif isinstance(spec, LayerSpec):
        layers = [spec]
    elif isinstance(spec, ConvSpec):
        layers = [model.conv_layer("conv", spec)]
    elif isinstance(spec, (list, tuple)) and all(isinstance(s, LayerSpec) for s in spec):
        layers = list(spec)
    else:
        raise TypeError(f"count_params: malformed spec of type {type(spec).__name__}")
    report = CostReport()
    for layer in layers:
        p, b = _layer_params(layer)
        report.add(CostEntry(layer.name, _module_of(layer.name), params=p, buffers=b))
    return report


class _Walker:
    """Accumulates per-layer cost while propagating (h, w) by hand."""

    def __init__(self, report, batch):
        self.report = report
        self.batch = batch

    def layer(self, layer, h, w, copies=1):
        """Cost ``layer`` applied to an (h, w) input; returns the output (h, w)."""
        p, b = _layer_params(layer)
        k = self.batch * copies
        if layer.kind == "conv":
            oh, ow = layer.conv.output_hw(h, w)
            if oh < 1 or ow < 1:
                raise ValueError(f"{layer.name}: input ({h}, {w}) too small")
            entry = CostEntry(layer.name, _module_of(layer.name), p, b, macs=k * layer.conv.macs(h, w))
            self.report.add(entry)
            return oh, ow
        self.report.add(CostEntry(layer.name, _module_of(layer.name), p, b,
                                  elementwise=k * h * w * layer.channels))
        return h, w

    def ops(self, name, count, copies=1):
        self.report.add(CostEntry(name, _module_of(name), elementwise=self.batch * copies * count))


def _walk_cgb(walker, block, prefix, h, w, copies):
    layers = block.layers(prefix)
    walker.layer(layers["reduce"], h, w, copies)
    oh, ow = walker.layer(layers["loc"], h, w, copies)
    walker.layer(layers["sur"], h, w, copies)
    walker.layer(layers["bn"], oh, ow, copies)
    walker.layer(layers["act"], oh, ow, copies)
    c = block.channels
    walker.ops(f"{prefix}.pool", oh * ow * c, copies)
    walker.layer(layers["fc1"], 1, 1, copies)
    walker.ops(f"{prefix}.fc_relu", c // block.reduction, copies)
    walker.layer(layers["fc2"], 1, 1, copies)
    walker.ops(f"{prefix}.gate", c + oh * ow * c, copies)  # sigmoid + broadcast multiply
    if block.residual:
        walker.ops(f"{prefix}.residual", oh * ow * c, copies)
    return oh, ow


def _walk_backbone(walker, bspec, h, w, streams):
    stem = model.stem_layers(bspec)
    h, w = walker.layer(stem[0], h, w, streams)
    walker.layer(stem[1], h, w, streams)
    walker.layer(stem[2], h, w, streams)
    sizes = {}
    for s, prefix, block in model.backbone_blocks(bspec):
        h, w = _walk_cgb(walker, block, prefix, h, w, streams)
        sizes[s] = (h, w)
    return sizes


def count_flops(spec, input_shape, streams=2):
    """MAC / elementwise-op report for one forward pass at ``input_shape`` (n, 3, H, W).

    Conv MACs = H'·W'·Cy·Hk·Wk·Cx/groups per batch item. The backbone is
    charged once per temporal stream (``streams``, 2 for the Siamese pair);
    FPN and head run once on the fused pair.
    """
    n, c, h, w = input_shape
    if c != 3:
        raise ValueError(f"input must have 3 channels, got {c}")
    if h % 16 or w % 16:
        raise ValueError(f"input size ({h}, {w}) must be divisible by 16")
    report = CostReport(input_shape=tuple(input_shape), streams=streams)
    walker = _Walker(report, n)
    sizes = _walk_backbone(walker, spec.backbone, h, w, streams)
    chans = spec.backbone.stage_channels
    res = {f"T{t}_{i}": (*sizes[i], chans[i]) for t in (1, 2) for i in range(4)}
    for node in model.fpn_graph(spec):
        res[node.name] = _walk_fpn_node(walker, node, res)
    dh, dw, _ = res["d00"]
    for k in ("d10", "d20"):
        kh, kw, kc = res[k]
        if (kh, kw) != (dh, dw):
            walker.ops(f"head.resize_{k}", dh * dw * kc)
    (head,) = model.head_layers(spec)
    oh, ow = walker.layer(head, dh, dw)
    walker.ops("head.sigmoid", oh * ow * head.channels)
    if (oh, ow) != (h, w):
        walker.ops("head.resize", h * w * head.channels)
    return report


def _walk_fpn_node(walker, node, res):
    conv, bn, act = node.layers()
    ins = [res[i] for i in node.inputs]
    h = max(s[0] for s in ins)
    w = max(s[1] for s in ins)
    if node.kind == "diff":
        walker.ops(f"fpn.{node.name}.absdiff", h * w * ins[0][2])
    else:
        for i, (ih, iw, ic) in zip(node.inputs, ins):
            if (ih, iw) != (h, w):
                walker.ops(f"fpn.{node.name}.resize_{i}", h * w * ic)
    oh, ow = walker.layer(conv, h, w)
    walker.layer(bn, oh, ow)
    walker.layer(act, oh, ow)
    return oh, ow, node.out_channels


def count_flops_oracle(spec, input_shape, seed=0, streams=2):
    """Measured conv MACs from executing the model with the counting kernel.

    Intended for small inputs (<= 32x32): the counting kernel is plain Python.
    Returns a CostReport with one entry per executed conv layer.
    """
    report = CostReport(input_shape=tuple(input_shape), streams=streams)
    if spec is None:
        return report
    n, c, h, w = input_shape
    net = model.LSNet(spec, seed=seed)
    rng = np.random.default_rng(seed)
    t1 = Tensor(rng.random((n, c, h, w)))
    t2 = Tensor(rng.random((n, c, h, w)))
    with kernels.counting_macs() as counter:
        net.forward(t1, t2)
    for name, macs in counter.by_layer.items():
        report.add(CostEntry(name, _module_of(name), macs=macs))
    return report


def count_conv_macs_oracle(conv_spec, input_shape, seed=0):
    """Instrumented MAC count for a single convolution."""
    from . import ops
    rng = np.random.default_rng(seed)
    x = Tensor(rng.standard_normal(input_shape))
    wt = Tensor(rng.standard_normal(conv_spec.weight_shape))
    b = Tensor(np.zeros(conv_spec.out_channels)) if conv_spec.has_bias else None
    with kernels.counting_macs() as counter:
        ops.conv2d(x, wt, b, conv_spec, name="conv")
    return counter.total


# ---------------------------------------------------------------- ResNet-50 reference

def resnet50_layers():
    """ResNet-50 feature extractor (no classifier) as (LayerSpec, stride-from-input) pairs."""
    out = []

    def conv(name, cin, cout, k, stride=1):
        out.append(model.conv_layer(name, ConvSpec(cin, cout, k, k, stride, k // 2)))
        out.append(LayerSpec(name.replace("conv", "bn").replace("downsample.0", "downsample.1"), "bn", cout))

    conv("resnet50.conv1", 3, 64, 7, 2)
    cin = 64
    for s, (blocks, width) in enumerate(zip((3, 4, 6, 3), (64, 128, 256, 512))):
        for b in range(blocks):
            p = f"resnet50.layer{s + 1}.{b}"
            stride = 2 if (b == 0 and s > 0) else 1
            conv(f"{p}.conv1", cin, width, 1)
            conv(f"{p}.conv2", width, width, 3, stride)
            conv(f"{p}.conv3", width, width * 4, 1)
            if b == 0:
                conv(f"{p}.downsample.0", cin, width * 4, 1, stride)
            cin = width * 4
    return out


def resnet50_cost(input_shape=(1, 3, 256, 256), streams=2):
    """Params and conv MACs of the ResNet-50 reference backbone (max-pool after conv1)."""
    n, _, h, w = input_shape
    report = CostReport(input_shape=tuple(input_shape), streams=streams)
    walker = _Walker(report, n)
    size = block_in = (h, w)
    for layer in resnet50_layers():
        if layer.kind != "conv":
            walker.layer(layer, *size, copies=streams)
            continue
        name = layer.name
        first_in_block = name.endswith(".conv1") and name != "resnet50.conv1"
        if first_in_block:
            block_in = size
        src = block_in if (first_in_block or "downsample" in name) else size
        size = walker.layer(layer, *src, copies=streams)
        if name == "resnet50.conv1":
            size = ((size[0] - 1) // 2 + 1, (size[1] - 1) // 2 + 1)  # 3x3/2 max-pool, pad 1
            walker.ops("resnet50.maxpool", size[0] * size[1] * 64 * 9, streams)
    return report


# ---------------------------------------------------------------- efficiency indicators

@dataclass(frozen=True)
class EfficiencyEntry:
    name: str
    f1: float
    params: float
    gflops: float


@dataclass(frozen=True)
class EfficiencyRow:
    name: str
    f1: float
    params: float
    gflops: float
    f1_p: float
    f1_g: float
    f1_eff: float
    rank: int


@dataclass
class EfficiencyReport:
    rows: list
    max_params: float
    max_gflops: float

    def best(self, metric="f1_eff"):
        return max(self.rows, key=lambda r: getattr(r, metric))

    def row(self, name):
        for r in self.rows:
            if r.name == name:
                return r
        raise KeyError(name)

    def to_dict(self):
        return {"max_params": self.max_params, "max_gflops": self.max_gflops,
                "rows": [vars(r).copy() for r in self.rows]}


def efficiency_metrics(entries):
    """F1-P = F1 / (params / max params), F1-G likewise for GFLOPs, F1-Eff = their mean.

    Maxima are taken over ``entries``; rows are returned ranked by F1-Eff.
    """
    entries = list(entries)
    if not entries:
        raise ValueError("efficiency_metrics needs at least one entry")
    for e in entries:
        if not (e.params > 0 and e.gflops > 0):
            raise ValueError(f"{e.name}: params and gflops must be positive (got {e.params}, {e.gflops})")
    max_p = max(e.params for e in entries)
    max_g = max(e.gflops for e in entries)
    scored = []
    for e in entries:
        f1_p = e.f1 / (e.params / max_p)
        f1_g = e.f1 / (e.gflops / max_g)
        scored.append((e, f1_p, f1_g, (f1_p + f1_g) / 2))
    order = sorted(range(len(scored)), key=lambda i: -scored[i][3])
    rank = {i: r + 1 for r, i in enumerate(order)}
    rows = [EfficiencyRow(e.name, e.f1, e.params, e.gflops, p, g, eff, rank[i])
            for i, (e, p, g, eff) in enumerate(scored)]
    rows.sort(key=lambda r: r.rank)
    return EfficiencyReport(rows, max_p, max_g)


class EntriesFormatError(ValueError):
    def __init__(self, line, message):
        super().__init__(f"line {line}: {message}")
        self.line = line


ENTRY_FIELDS = ("name", "f1", "params_m", "gflops")


def parse_efficiency_entries(text):
    """Entries as CSV rows ``name,f1,params_m,gflops``.

    Blank lines and ``#`` comments are skipped; a header row naming the
    fields is allowed. Errors carry the 1-based line number.
    """
    entries = []
    seen = set()
    for lineno, row in enumerate(csv.reader(io.StringIO(text)), start=1):
        if not row or not "".join(row).strip() or row[0].lstrip().startswith("#"):
            continue
        row = [c.strip() for c in row]
        if tuple(c.lower() for c in row) == ENTRY_FIELDS:
            continue
        if len(row) != len(ENTRY_FIELDS):
            raise EntriesFormatError(lineno, f"expected {len(ENTRY_FIELDS)} fields "
                                             f"({','.join(ENTRY_FIELDS)}), got {len(row)}")
        name = row[0]
        try:
            f1, params, gflops = (float(c) for c in row[1:])
        except ValueError:
            raise EntriesFormatError(lineno, f"non-numeric value in {row[1:]}") from None
        if not all(np.isfinite([f1, params, gflops])) or params <= 0 or gflops <= 0:
            raise EntriesFormatError(lineno, "params and gflops must be positive, all values finite")
        if name in seen:
            raise EntriesFormatError(lineno, f"duplicate entry {name!r}")
        seen.add(name)
        entries.append(EfficiencyEntry(name, f1, params, gflops))
    if not entries:
        raise EntriesFormatError(0, "no entries")
    return entries
