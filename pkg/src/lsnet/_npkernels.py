"""Pure-numpy convolution kernels, used when the compiled extension is absent.

Same signatures as :mod:`lsnet._ckernels`. Depthwise convolutions accumulate
tap by tap (kernel row, kernel column); everything else goes through a
strided im2col view and one matmul per group.
"""
import numpy as np
from numpy.lib.stride_tricks import as_strided


def _pad(x, pad):
    if pad == 0:
        return x
    return np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))


def _tap(xp, i, j, dil, stride, oh, ow):
    r0, c0 = i * dil, j * dil
    return xp[..., r0:r0 + stride * (oh - 1) + 1:stride, c0:c0 + stride * (ow - 1) + 1:stride]


def _windows(xp, kh, kw, stride, dil, oh, ow):
    # (n, c, kh, kw, oh, ow) read-only view into the padded input
    sn, sc, sh, sw = xp.strides
    shape = (xp.shape[0], xp.shape[1], kh, kw, oh, ow)
    return as_strided(xp, shape, (sn, sc, sh * dil, sw * dil, sh * stride, sw * stride), writeable=False)


def _columns(x, g, cig, kh, kw, stride, pad, dil, oh, ow):
    n = x.shape[0]
    xs = _pad(x[:, g * cig:(g + 1) * cig], pad)
    win = _windows(np.ascontiguousarray(xs), kh, kw, stride, dil, oh, ow)
    # -> (cig, kh, kw, n, oh, ow)
    return np.ascontiguousarray(win.transpose(1, 2, 3, 0, 4, 5)).reshape(cig * kh * kw, n * oh * ow)


def _to_nchw(flat, n, c, oh, ow):
    return flat.reshape(c, n, oh, ow).transpose(1, 0, 2, 3)


def _flat_grad(gy, g, cog):
    n, _, oh, ow = gy.shape
    return np.ascontiguousarray(gy[:, g * cog:(g + 1) * cog].transpose(1, 0, 2, 3)).reshape(cog, n * oh * ow)


def conv2d_forward(x, w, stride, pad, dil, groups, out):
    n = x.shape[0]
    co, cig, kh, kw = w.shape
    oh, ow = out.shape[2:]
    cog = co // groups
    if cig == 1:
        xp = _pad(x, pad).reshape(n, groups, 1, x.shape[2] + 2 * pad, x.shape[3] + 2 * pad)
        wg = w.reshape(groups, cog, kh, kw)
        acc = out.reshape(n, groups, cog, oh, ow)
        for i in range(kh):
            for j in range(kw):
                acc += wg[None, :, :, i, j, None, None] * _tap(xp, i, j, dil, stride, oh, ow)
        return
    for g in range(groups):
        cols = _columns(x, g, cig, kh, kw, stride, pad, dil, oh, ow)
        wg = w[g * cog:(g + 1) * cog].reshape(cog, cig * kh * kw)
        out[:, g * cog:(g + 1) * cog] += _to_nchw(wg @ cols, n, cog, oh, ow)


def conv2d_backward_input(gy, w, stride, pad, dil, groups, gx):
    n, ci, h, wd = gx.shape
    co, cig, kh, kw = w.shape
    oh, ow = gy.shape[2:]
    cog = co // groups
    gxp = np.zeros((n, ci, h + 2 * pad, wd + 2 * pad), dtype=gx.dtype)
    if cig == 1:
        view = gxp.reshape(n, groups, 1, h + 2 * pad, wd + 2 * pad)
        wg = w.reshape(groups, cog, kh, kw)
        gyg = gy.reshape(n, groups, cog, oh, ow)
        for i in range(kh):
            for j in range(kw):
                contrib = (wg[None, :, :, i, j, None, None] * gyg).sum(axis=2, keepdims=True)
                _tap(view, i, j, dil, stride, oh, ow)[...] += contrib
    else:
        for g in range(groups):
            wg = w[g * cog:(g + 1) * cog].reshape(cog, cig * kh * kw)
            dcols = (wg.T @ _flat_grad(gy, g, cog)).reshape(cig, kh, kw, n, oh, ow)
            sub = gxp[:, g * cig:(g + 1) * cig]
            for i in range(kh):
                for j in range(kw):
                    _tap(sub, i, j, dil, stride, oh, ow)[...] += dcols[:, i, j].transpose(1, 0, 2, 3)
    gx += gxp[..., pad:pad + h, pad:pad + wd]


def conv2d_backward_weight(gy, x, stride, pad, dil, groups, gw):
    n = x.shape[0]
    co, cig, kh, kw = gw.shape
    oh, ow = gy.shape[2:]
    cog = co // groups
    if cig == 1:
        xp = _pad(x, pad).reshape(n, groups, 1, x.shape[2] + 2 * pad, x.shape[3] + 2 * pad)
        gyg = gy.reshape(n, groups, cog, oh, ow)
        gwg = gw.reshape(groups, cog, kh, kw)
        for i in range(kh):
            for j in range(kw):
                gwg[:, :, i, j] = (gyg * _tap(xp, i, j, dil, stride, oh, ow)).sum(axis=(0, 3, 4))
        return
    for g in range(groups):
        cols = _columns(x, g, cig, kh, kw, stride, pad, dil, oh, ow)
        gw[g * cog:(g + 1) * cog] = (_flat_grad(gy, g, cog) @ cols.T).reshape(cog, cig, kh, kw)
