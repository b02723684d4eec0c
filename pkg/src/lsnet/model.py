"""LSNet: context-guided blocks, the weight-shared backbone, dense/diff FPN and the head.

The architecture is described once, as lists of :class:`LayerSpec` and
:class:`FpnNode`, and both the executor below and :mod:`lsnet.profiler`
walk those descriptions.
"""
from dataclasses import dataclass, field

import numpy as np

from . import ops
from .config import ModelSpec
from .ops import ConvSpec
from .tensor import ShapeError, Tensor, as_nchw, record

PRELU_INIT = 0.25
# The squeeze layer sees near-identical pooled inputs for every sample, so a
# unit that starts negative stays dead behind the ReLU; start them positive.
SQUEEZE_BIAS_INIT = 1.0


@dataclass(frozen=True)
class LayerSpec:
    name: str
    kind: str  # "conv" | "bn" | "prelu"
    channels: int
    conv: ConvSpec = None

    def param_shapes(self):
        if self.kind == "conv":
            shapes = {f"{self.name}.weight": self.conv.weight_shape}
            if self.conv.has_bias:
                shapes[f"{self.name}.bias"] = (self.conv.out_channels,)
            return shapes
        if self.kind == "bn":
            return {f"{self.name}.gamma": (self.channels,), f"{self.name}.beta": (self.channels,)}
        if self.kind == "prelu":
            return {f"{self.name}.slope": (self.channels,)}
        raise ValueError(f"unknown layer kind {self.kind!r}")


def conv_layer(name, spec):
    return LayerSpec(name, "conv", spec.out_channels, spec)


# ---------------------------------------------------------------- CGB

@dataclass(frozen=True)
class CgbSpec:
    in_channels: int
    channels: int
    dilation: int = 2
    reduction: int = 16
    downsample: bool = False

    def __post_init__(self):
        if self.channels % 2:
            raise ValueError(f"CGB width must be even, got {self.channels}")
        if self.dilation < 2:
            raise ValueError(f"surrounding-branch dilation must be >= 2, got {self.dilation}")
        if self.channels % self.reduction:
            raise ValueError(f"reduction {self.reduction} must divide width {self.channels}")

    @property
    def residual(self):
        return not self.downsample and self.in_channels == self.channels

    def layers(self, prefix):
        half = self.channels // 2
        stride = 2 if self.downsample else 1
        squeeze = self.channels // self.reduction
        return {
            "reduce": conv_layer(f"{prefix}.reduce", ConvSpec(self.in_channels, half, 1, 1)),
            "loc": conv_layer(f"{prefix}.loc", ConvSpec.depthwise(half, 3, stride, 1)),
            "sur": conv_layer(f"{prefix}.sur", ConvSpec.depthwise(half, 3, stride, self.dilation)),
            "bn": LayerSpec(f"{prefix}.bn", "bn", self.channels),
            "act": LayerSpec(f"{prefix}.act", "prelu", self.channels),
            "fc1": conv_layer(f"{prefix}.fc1", ConvSpec(self.channels, squeeze, 1, 1, has_bias=True)),
            "fc2": conv_layer(f"{prefix}.fc2", ConvSpec(squeeze, self.channels, 1, 1, has_bias=True)),
        }


# ---------------------------------------------------------------- weights

class Weights:
    """Named parameter tensors plus BN running statistics.

    ``training`` selects batch statistics in BN and enables running-stat
    updates; it is the only mutable state consulted during a forward pass.
    """

    def __init__(self, params, buffers, training=False):
        self.params = params
        self.buffers = buffers
        self.training = training

    def __getitem__(self, name):
        return self.params[name]

    def conv(self, x, layer):
        bias = self.params.get(f"{layer.name}.bias")
        return ops.conv2d(x, self.params[f"{layer.name}.weight"], bias, layer.conv, name=layer.name)

    def bn(self, x, layer):
        n = layer.name
        return ops.batch_norm(x, self.params[f"{n}.gamma"], self.params[f"{n}.beta"],
                              self.buffers[f"{n}.running_mean"], self.buffers[f"{n}.running_var"],
                              self.training)

    def prelu(self, x, layer):
        return ops.prelu(x, self.params[f"{layer.name}.slope"])

    def replace(self, params):
        return Weights(params, self.buffers, self.training)


def init_weights(layers, seed=0, dtype=np.float32):
    """Kaiming-uniform convs, BN gamma=1/beta=0, PReLU slope 0.25.

    Conv biases start at zero except the attention squeeze (``*.fc1``),
    which starts at SQUEEZE_BIAS_INIT.
    """
    rng = np.random.default_rng(seed)
    params, buffers = {}, {}
    for layer in layers:
        if layer.kind == "conv":
            c = layer.conv
            fan_in = (c.in_channels // c.groups) * c.kernel_h * c.kernel_w
            bound = np.sqrt(6.0 / fan_in)
            params[f"{layer.name}.weight"] = Tensor(rng.uniform(-bound, bound, c.weight_shape), dtype=dtype,
                                                    name=f"{layer.name}.weight")
            if c.has_bias:
                b0 = SQUEEZE_BIAS_INIT if layer.name.endswith(".fc1") else 0.0
                params[f"{layer.name}.bias"] = Tensor(np.full(c.out_channels, b0), dtype=dtype,
                                                      name=f"{layer.name}.bias")
        elif layer.kind == "bn":
            params[f"{layer.name}.gamma"] = Tensor(np.ones(layer.channels), dtype=dtype, name=f"{layer.name}.gamma")
            params[f"{layer.name}.beta"] = Tensor(np.zeros(layer.channels), dtype=dtype, name=f"{layer.name}.beta")
            buffers[f"{layer.name}.running_mean"] = np.zeros(layer.channels, dtype=dtype)
            buffers[f"{layer.name}.running_var"] = np.ones(layer.channels, dtype=dtype)
        elif layer.kind == "prelu":
            params[f"{layer.name}.slope"] = Tensor(np.full(layer.channels, PRELU_INIT), dtype=dtype,
                                                   name=f"{layer.name}.slope")
    return Weights(params, buffers)


def global_context_gate(y, weights, layers, identity=False):
    """z = sigmoid(f(mean over space of y)), one gate per (sample, channel).

    ``identity=True`` skips the bottleneck f; it exists for tests.
    """
    pooled = ops.global_avg_pool(y)
    if not identity:
        h = weights.conv(pooled, layers["fc1"])
        h = ops.relu(h)
        pooled = weights.conv(h, layers["fc2"])
    return ops.sigmoid(pooled)


def cgb_forward(x, weights, spec, prefix):
    _, c, _, _ = as_nchw(x)
    if c != spec.in_channels:
        raise ShapeError(f"CGB {prefix}: input has {c} channels, block expects {spec.in_channels}",
                         dim="channels", expected=spec.in_channels, got=c)
    layers = spec.layers(prefix)
    r = weights.conv(x, layers["reduce"])
    joint = ops.concat_channels([weights.conv(r, layers["loc"]), weights.conv(r, layers["sur"])])
    y = weights.prelu(weights.bn(joint, layers["bn"]), layers["act"])
    y = ops.mul(y, global_context_gate(y, weights, layers))
    if spec.residual:
        y = ops.add(y, x)
    return y


# ---------------------------------------------------------------- backbone

def stem_layers(bspec, in_channels=3):
    k = bspec.stem_kernel
    c0 = bspec.stage_channels[0]
    conv = ConvSpec(in_channels, c0, k, k, stride=2, padding=k // 2)
    return [conv_layer("backbone.stem.conv", conv), LayerSpec("backbone.stem.bn", "bn", c0),
            LayerSpec("backbone.stem.act", "prelu", c0)]


def backbone_blocks(bspec):
    """[(stage, prefix, CgbSpec)] in execution order."""
    out = []
    cin = bspec.stage_channels[0]
    for s, (n, c, r) in enumerate(zip(bspec.stage_blocks, bspec.stage_channels, bspec.stage_dilations)):
        for b in range(n):
            down = s > 0 and b == 0
            out.append((s, f"backbone.s{s}.b{b}",
                        CgbSpec(cin, c, r, bspec.attention_reduction, downsample=down)))
            cin = c
    return out


def backbone_layers(bspec):
    layers = stem_layers(bspec)
    for _, prefix, block in backbone_blocks(bspec):
        layers.extend(block.layers(prefix).values())
    return layers


def concat_batch(a, b):
    y = Tensor.wrap(np.concatenate([a.data, b.data], axis=0))
    n = a.shape[0]
    return record(y, (a, b), lambda g: (g[:n], g[n:]))


def slice_batch(x, start, stop):
    y = Tensor.wrap(np.ascontiguousarray(x.data[start:stop]))

    def grad_fn(g):
        gx = np.zeros_like(x.data)
        gx[start:stop] = g
        return (gx,)

    return record(y, (x,), grad_fn)


def backbone_forward(t1, t2, weights, bspec):
    """Run both temporal streams through one parameter set.

    The streams are stacked along the batch axis, so every weight is read
    by both; BN in training mode sees the statistics of both streams.
    """
    if t1.shape != t2.shape:
        raise ShapeError(f"t1 shape {t1.shape} != t2 shape {t2.shape}", dim="shape",
                         expected=t1.shape, got=t2.shape)
    n, c, h, w = as_nchw(t1, "t1")
    if c != 3:
        raise ShapeError(f"backbone expects 3-channel images, got {c}", dim="channels", expected=3, got=c)
    if h % 16 or w % 16:
        raise ShapeError(f"image size ({h}, {w}) must be divisible by 16", dim="spatial", got=(h, w))
    stem = stem_layers(bspec)
    x = concat_batch(t1, t2)
    x = weights.prelu(weights.bn(weights.conv(x, stem[0]), stem[1]), stem[2])
    levels = [None] * 4
    for s, prefix, block in backbone_blocks(bspec):
        x = cgb_forward(x, weights, block, prefix)
        levels[s] = x
    p1 = [slice_batch(t, 0, n) for t in levels]
    p2 = [slice_batch(t, n, 2 * n) for t in levels]
    return p1, p2


# ---------------------------------------------------------------- FPN

@dataclass(frozen=True)
class FpnNode:
    name: str
    kind: str  # "fuse": concat -> conv3x3/BN/PReLU ; "diff": concat(a, b, |a-b|) -> conv3x3/BN/PReLU
    inputs: tuple
    in_channels: int
    out_channels: int
    stride: int

    @property
    def arity(self):
        return len(self.inputs)

    def layers(self):
        p = f"fpn.{self.name}"
        conv = ConvSpec(self.in_channels, self.out_channels, 3, 3, padding=1)
        return [conv_layer(f"{p}.conv", conv), LayerSpec(f"{p}.bn", "bn", self.out_channels),
                LayerSpec(f"{p}.act", "prelu", self.out_channels)]


OUTPUTS = ("d00", "d10", "d20")


def _sources(bspec):
    info = {}
    for t in (1, 2):
        for i, (c, s) in enumerate(zip(bspec.stage_channels, bspec.strides)):
            info[f"T{t}_{i}"] = (c, s)
    return info


def fpn_graph(spec):
    """Node list for ``spec.fpn.variant``, in execution order.

    Sources are named ``T{t}_{i}`` (stream t, backbone level i at stride
    2^(i+1)). Output nodes are ``d00``, ``d10``, ``d20``.
    """
    bspec, fspec = spec.backbone, spec.fpn
    info = _sources(bspec)
    width = dict(zip(bspec.strides, fspec.fusion_channels))
    nodes = []

    def node(name, kind, inputs):
        stride = min(info[i][1] for i in inputs)
        cin = sum(info[i][0] for i in inputs)
        if kind == "diff":
            cin = 3 * info[inputs[0]][0]
        n = FpnNode(name, kind, tuple(inputs), cin, width[stride], stride)
        info[name] = (n.out_channels, stride)
        nodes.append(n)

    if fspec.variant == "dense":
        node("d01", "fuse", ["T1_1", "T2_1", "T1_2", "T2_2"])
        node("d11", "fuse", ["T1_2", "T2_2", "T1_3", "T2_3"])
        node("d00", "fuse", ["T1_0", "T2_0", "T1_1", "T2_1"])
        node("d10", "fuse", ["T1_0", "T2_0", "d00", "d01"])
        node("d20", "fuse", ["T1_0", "T2_0", "d00", "d10", "d11"])
    else:
        for i in (1, 2, 3):
            node(f"x{i}", "diff", [f"T1_{i}", f"T2_{i}"])
        node("d11", "fuse", ["x2", "x3"])
        node("d01", "fuse", ["x1", "d11"])
        node("g01", "fuse", ["d01"])
        node("d00", "fuse", ["T1_0", "T2_0", "g01"])
        node("d10", "fuse", ["d00", "d01"])
        node("d20", "fuse", ["d10", "d11"])
    return nodes


def out_degree(nodes):
    deg = {}
    for n in nodes:
        for i in n.inputs:
            deg[i] = deg.get(i, 0) + 1
    return deg


def fpn_layers(spec):
    return [layer for n in fpn_graph(spec) for layer in n.layers()]


def _run_fpn(p1, p2, weights, spec, trace):
    values = {f"T1_{i}": t for i, t in enumerate(p1)}
    values.update({f"T2_{i}": t for i, t in enumerate(p2)})
    for node in fpn_graph(spec):
        ins = [values[i] for i in node.inputs]
        if node.kind == "diff":
            a, b = ins
            d = ops.abs_diff(a, b)
            if trace is not None:
                trace[f"absdiff_{node.name}"] = d
            cat = ops.concat_channels([a, b, d])
        else:
            h = max(t.shape[2] for t in ins)
            w = max(t.shape[3] for t in ins)
            ins = [ops.resize_to(t, h, w) for t in ins]
            cat = ins[0] if len(ins) == 1 else ops.concat_channels(ins)
        conv, bn, act = node.layers()
        values[node.name] = weights.prelu(weights.bn(weights.conv(cat, conv), bn), act)
        if trace is not None:
            trace[node.name] = values[node.name]
    return tuple(values[k] for k in OUTPUTS)


def dense_fpn(p1, p2, weights, spec, trace=None):
    return _run_fpn(p1, p2, weights, spec.with_fpn("dense"), trace)


def diff_fpn(p1, p2, weights, spec, trace=None):
    return _run_fpn(p1, p2, weights, spec.with_fpn("diff"), trace)


# ---------------------------------------------------------------- head

def head_layers(spec):
    nodes = {n.name: n for n in fpn_graph(spec)}
    cin = sum(nodes[k].out_channels for k in OUTPUTS)
    return [conv_layer("head.classifier", ConvSpec(cin, spec.head.out_channels, 1, 1, has_bias=True))]


def predict_head(d00, d10, d20, weights, spec, input_hw):
    """Fuse the three outputs at d00's resolution, classify, and return (n, 1, H, W) scores in (0, 1)."""
    h, w = d00.shape[2:]
    fused = ops.concat_channels([d00, ops.resize_to(d10, h, w), ops.resize_to(d20, h, w)])
    logits = weights.conv(fused, head_layers(spec)[0])
    scores = ops.sigmoid(logits)
    return ops.resize_to(scores, *input_hw)


# ---------------------------------------------------------------- full model

def model_layers(spec):
    return backbone_layers(spec.backbone) + fpn_layers(spec) + head_layers(spec)


@dataclass
class LSNet:
    spec: ModelSpec
    weights: Weights = field(default=None)
    seed: int = 0

    def __post_init__(self):
        if self.weights is None:
            self.weights = init_weights(model_layers(self.spec), self.seed)

    @property
    def params(self):
        return self.weights.params

    def train(self, mode=True):
        self.weights.training = mode
        return self

    def pyramids(self, t1, t2):
        return backbone_forward(t1, t2, self.weights, self.spec.backbone)

    def fuse(self, p1, p2, trace=None):
        fn = diff_fpn if self.spec.fpn.variant == "diff" else dense_fpn
        return fn(p1, p2, self.weights, self.spec, trace)

    def forward(self, t1, t2, trace=None):
        p1, p2 = self.pyramids(t1, t2)
        if trace is not None:
            trace["pyramid1"], trace["pyramid2"] = p1, p2
        d00, d10, d20 = self.fuse(p1, p2, trace)
        return predict_head(d00, d10, d20, self.weights, self.spec, t1.shape[2:])

    __call__ = forward
