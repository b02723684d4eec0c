"""Forward kernels with their reverse-mode rules.

All ops take and return :class:`~lsnet.tensor.Tensor` in NCHW layout.
Convolution is cross-correlation (no kernel flip) with zero padding.
"""
from dataclasses import dataclass

import numpy as np

from . import kernels
from .tensor import ShapeError, Tensor, as_nchw, record

BN_EPS = 1e-5
BN_MOMENTUM = 0.1


@dataclass(frozen=True)
class ConvSpec:
    in_channels: int
    out_channels: int
    kernel_h: int = 3
    kernel_w: int = 3
    stride: int = 1
    padding: int = 0
    dilation: int = 1
    groups: int = 1
    has_bias: bool = False

    def __post_init__(self):
        for field in ("in_channels", "out_channels", "kernel_h", "kernel_w", "stride", "dilation", "groups"):
            if getattr(self, field) < 1:
                raise ValueError(f"ConvSpec.{field} must be >= 1, got {getattr(self, field)}")
        if self.padding < 0:
            raise ValueError(f"ConvSpec.padding must be >= 0, got {self.padding}")
        if self.in_channels % self.groups or self.out_channels % self.groups:
            raise ValueError(f"channels ({self.in_channels}, {self.out_channels}) not divisible by groups={self.groups}")

    @classmethod
    def depthwise(cls, channels, kernel=3, stride=1, dilation=1, padding=None, has_bias=False):
        if padding is None:
            padding = dilation * (kernel - 1) // 2
        return cls(channels, channels, kernel, kernel, stride, padding, dilation, channels, has_bias)

    @property
    def is_depthwise(self):
        return self.groups == self.in_channels == self.out_channels

    @property
    def weight_shape(self):
        return (self.out_channels, self.in_channels // self.groups, self.kernel_h, self.kernel_w)

    def output_hw(self, h, w):
        oh = (h + 2 * self.padding - self.dilation * (self.kernel_h - 1) - 1) // self.stride + 1
        ow = (w + 2 * self.padding - self.dilation * (self.kernel_w - 1) - 1) // self.stride + 1
        return oh, ow

    @property
    def n_params(self):
        n = self.out_channels * (self.in_channels // self.groups) * self.kernel_h * self.kernel_w
        return n + (self.out_channels if self.has_bias else 0)

    def macs(self, h, w):
        """Multiply-accumulates for one batch item at input size (h, w)."""
        oh, ow = self.output_hw(h, w)
        return oh * ow * self.out_channels * self.kernel_h * self.kernel_w * (self.in_channels // self.groups)


def _check_same(a, b, what):
    if a.shape != b.shape:
        raise ShapeError(f"{what}: shapes {a.shape} and {b.shape} differ", dim="shape",
                         expected=a.shape, got=b.shape)


def conv2d(x, weight, bias, spec, name=None):
    n, c, h, w = as_nchw(x)
    if c != spec.in_channels:
        raise ShapeError(f"conv2d{_tag(name)}: input has {c} channels, spec expects {spec.in_channels}",
                         dim="channels", expected=spec.in_channels, got=c)
    if weight.shape != spec.weight_shape:
        raise ShapeError(f"conv2d{_tag(name)}: weight shape {weight.shape} != {spec.weight_shape}",
                         dim="weight", expected=spec.weight_shape, got=weight.shape)
    if spec.has_bias:
        if bias is None or bias.shape != (spec.out_channels,):
            raise ShapeError(f"conv2d{_tag(name)}: bias must have shape ({spec.out_channels},)",
                             dim="bias", expected=(spec.out_channels,), got=None if bias is None else bias.shape)
    elif bias is not None:
        raise ShapeError(f"conv2d{_tag(name)}: spec has no bias but one was given", dim="bias")
    oh, ow = spec.output_hw(h, w)
    if oh < 1 or ow < 1:
        raise ShapeError(f"conv2d{_tag(name)}: non-positive output size ({oh}, {ow}) for input ({h}, {w})",
                         dim="output", got=(oh, ow))
    dtype = x.dtype
    xd = x.data
    wd = weight.data.astype(dtype, copy=False)
    out = np.zeros((n, spec.out_channels, oh, ow), dtype=dtype)
    if bias is not None:
        out += bias.data.astype(dtype, copy=False)[None, :, None, None]
    impl = kernels.active()
    if isinstance(impl, kernels.MacCounter):
        impl.layer = name
    impl.conv2d_forward(xd, wd, spec.stride, spec.padding, spec.dilation, spec.groups, out)
    y = Tensor.wrap(out)

    def grad_fn(g):
        g = np.ascontiguousarray(g)
        k = kernels.active()
        gx = np.zeros_like(xd)
        k.conv2d_backward_input(g, wd, spec.stride, spec.padding, spec.dilation, spec.groups, gx)
        gw = np.zeros(spec.weight_shape, dtype=dtype)
        k.conv2d_backward_weight(g, xd, spec.stride, spec.padding, spec.dilation, spec.groups, gw)
        gb = g.sum(axis=(0, 2, 3)) if bias is not None else None
        return gx, gw.astype(weight.dtype, copy=False), gb

    return record(y, (x, weight, bias), grad_fn)


def depthwise_conv2d(x, weight, bias, spec, name=None):
    if not spec.is_depthwise:
        raise ShapeError(f"depthwise_conv2d{_tag(name)}: spec must have groups == in == out channels",
                         dim="groups", expected=spec.in_channels, got=spec.groups)
    return conv2d(x, weight, bias, spec, name=name)


def _tag(name):
    return f" [{name}]" if name else ""


def batch_norm(x, gamma, beta, running_mean, running_var, training, eps=BN_EPS, momentum=BN_MOMENTUM):
    """Per-channel normalisation.

    ``running_mean``/``running_var`` are plain float arrays owned by the
    model; in training mode they are updated in place with
    ``(1 - momentum) * old + momentum * batch_stat`` (unbiased variance).
    """
    n, c, h, w = as_nchw(x)
    for label, p in (("gamma", gamma.data), ("beta", beta.data), ("running_mean", running_mean),
                     ("running_var", running_var)):
        if np.shape(p) != (c,):
            raise ShapeError(f"batch_norm: {label} has shape {np.shape(p)}, expected ({c},)",
                             dim="channels", expected=c, got=np.shape(p))
    xd = x.data
    dtype = xd.dtype
    gd = gamma.data.astype(dtype, copy=False)
    bd = beta.data.astype(dtype, copy=False)
    if training:
        m = n * h * w
        mean = xd.mean(axis=(0, 2, 3))
        xc = xd - mean[None, :, None, None]
        var = (xc * xc).mean(axis=(0, 2, 3))
        running_mean *= 1 - momentum
        running_mean += momentum * mean
        running_var *= 1 - momentum
        running_var += momentum * var * (m / max(m - 1, 1))
    else:
        mean = np.asarray(running_mean, dtype=dtype)
        var = np.asarray(running_var, dtype=dtype)
        xc = xd - mean[None, :, None, None]
    inv = (1.0 / np.sqrt(var + eps)).astype(dtype)
    xhat = xc * inv[None, :, None, None]
    y = Tensor.wrap(xhat * gd[None, :, None, None] + bd[None, :, None, None])

    def grad_fn(g):
        dgamma = (g * xhat).sum(axis=(0, 2, 3))
        dbeta = g.sum(axis=(0, 2, 3))
        gx_hat = g * gd[None, :, None, None]
        if training:
            gx = (gx_hat - gx_hat.mean(axis=(0, 2, 3))[None, :, None, None]
                  - xhat * (gx_hat * xhat).mean(axis=(0, 2, 3))[None, :, None, None])
            gx = gx * inv[None, :, None, None]
        else:
            gx = gx_hat * inv[None, :, None, None]
        return gx, dgamma.astype(gamma.dtype), dbeta.astype(beta.dtype)

    return record(y, (x, gamma, beta), grad_fn)


def relu(x):
    xd = x.data
    mask = xd > 0
    y = Tensor.wrap(np.where(mask, xd, 0).astype(xd.dtype))
    return record(y, (x,), lambda g: (g * mask,))


def prelu(x, slope):
    """Parametric ReLU; ``slope`` is a scalar or a per-channel Tensor."""
    xd = x.data
    if isinstance(slope, Tensor):
        if slope.shape != (x.shape[1],):
            raise ShapeError(f"prelu: slope shape {slope.shape} != ({x.shape[1]},)", dim="channels")
        a = slope.data.astype(xd.dtype, copy=False)[None, :, None, None]
    else:
        a = np.asarray(slope, dtype=xd.dtype)
    neg = xd < 0
    y = Tensor.wrap(np.where(neg, a * xd, xd).astype(xd.dtype))

    def grad_fn(g):
        gx = np.where(neg, a * g, g)
        if isinstance(slope, Tensor):
            return gx, (g * np.where(neg, xd, 0)).sum(axis=(0, 2, 3)).astype(slope.dtype)
        return (gx,)

    inputs = (x, slope) if isinstance(slope, Tensor) else (x,)
    return record(y, inputs, grad_fn)


def sigmoid(x):
    xd = x.data
    # split by sign so exp never overflows
    e = np.exp(-np.abs(xd))
    s = np.where(xd >= 0, 1 / (1 + e), e / (1 + e)).astype(xd.dtype)
    # saturate inside the open interval: the nearest representable values to 0 and 1
    info = np.finfo(xd.dtype)
    s = np.clip(s, info.tiny, np.nextafter(xd.dtype.type(1), xd.dtype.type(0)))
    y = Tensor.wrap(s)
    return record(y, (x,), lambda g: (g * s * (1 - s),))


def activation(x, kind, slope=0.25):
    if kind == "relu":
        return relu(x)
    if kind == "prelu":
        return prelu(x, slope)
    if kind == "sigmoid":
        return sigmoid(x)
    raise ValueError(f"unknown activation {kind!r}")


def global_avg_pool(x):
    n, c, h, w = as_nchw(x)
    if h * w == 0:
        raise ShapeError("global_avg_pool: empty spatial extent", dim="spatial", got=(h, w))
    y = Tensor.wrap(x.data.mean(axis=(2, 3), keepdims=True))
    scale = x.dtype.type(1.0 / (h * w))
    return record(y, (x,), lambda g: (np.broadcast_to(g * scale, x.shape).copy(),))


def _interp_matrix(size, scale, dtype):
    """Rows map output positions to input positions (align_corners=False)."""
    out = size * scale
    m = np.zeros((out, size), dtype=np.float64)
    for o in range(out):
        src = max((o + 0.5) / scale - 0.5, 0.0)
        i0 = min(int(np.floor(src)), size - 1)
        i1 = min(i0 + 1, size - 1)
        frac = src - i0
        m[o, i0] += 1 - frac
        m[o, i1] += frac
    return m.astype(dtype)


def upsample_bilinear(x, scale):
    """Bilinear resize by an integer factor, half-pixel centres (align_corners=False)."""
    if scale < 2 or int(scale) != scale:
        raise ValueError(f"upsample scale must be an integer >= 2, got {scale}")
    n, c, h, w = as_nchw(x)
    mh = _interp_matrix(h, scale, x.dtype)
    mw = _interp_matrix(w, scale, x.dtype)
    y = Tensor.wrap(np.ascontiguousarray(mh @ x.data @ mw.T))
    return record(y, (x,), lambda g: (mh.T @ g @ mw,))


def resize_to(x, h, w):
    """Upsample ``x`` to spatial size (h, w); identity when already there."""
    xh, xw = x.shape[2:]
    if (xh, xw) == (h, w):
        return x
    if h % xh or w % xw or h // xh != w // xw:
        raise ShapeError(f"cannot resize {x.shape[2:]} to ({h}, {w}) by an integer factor", dim="spatial")
    return upsample_bilinear(x, h // xh)


def concat_channels(inputs):
    inputs = list(inputs)
    if not inputs:
        raise ValueError("concat_channels needs at least one tensor")
    ref = as_nchw(inputs[0])
    for t in inputs[1:]:
        s = as_nchw(t)
        if (s[0], s[2], s[3]) != (ref[0], ref[2], ref[3]):
            raise ShapeError(f"concat_channels: shape {s} incompatible with {ref}", dim="n/h/w",
                             expected=(ref[0], ref[2], ref[3]), got=(s[0], s[2], s[3]))
    y = Tensor.wrap(np.concatenate([t.data for t in inputs], axis=1))
    bounds = np.cumsum([0] + [t.shape[1] for t in inputs])

    def grad_fn(g):
        return tuple(g[:, bounds[i]:bounds[i + 1]] for i in range(len(inputs)))

    return record(y, tuple(inputs), grad_fn)


def slice_channels(x, start, stop):
    y = Tensor.wrap(x.data[:, start:stop].copy())

    def grad_fn(g):
        gx = np.zeros_like(x.data)
        gx[:, start:stop] = g
        return (gx,)

    return record(y, (x,), grad_fn)


def abs_diff(a, b):
    _check_same(a, b, "abs_diff")
    d = a.data - b.data
    sign = np.sign(d)
    y = Tensor.wrap(np.abs(d))
    return record(y, (a, b), lambda g: (g * sign, -g * sign))


def add(a, b):
    _check_same(a, b, "add")
    y = Tensor.wrap(a.data + b.data)
    return record(y, (a, b), lambda g: (g, g))


def _unbroadcast(g, shape):
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def mul(a, b):
    """Elementwise product with numpy broadcasting (used for channel gating)."""
    try:
        out = a.data * b.data
    except ValueError as exc:
        raise ShapeError(f"mul: shapes {a.shape} and {b.shape} do not broadcast", dim="shape") from exc
    y = Tensor.wrap(out)
    return record(y, (a, b), lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)))


def sum_all(x):
    y = Tensor.wrap(np.asarray(x.data.sum(), dtype=x.dtype).reshape(()))
    return record(y, (x,), lambda g: (np.broadcast_to(g, x.shape).copy(),))
