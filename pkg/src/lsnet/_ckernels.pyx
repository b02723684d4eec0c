# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled convolution kernels.

Grouped convolutions with one input channel per group (depthwise) run as
direct loops: every output element is owned by one thread and accumulated
in the order (kernel row, kernel column), starting from the bias.
Convolutions with several input channels per group are lowered to
im2col / col2im (compiled here) around one BLAS matmul per group.
"""
import numpy as np
from cython.parallel cimport prange

ctypedef fused real:
    float
    double


cdef inline Py_ssize_t _ceil_div(Py_ssize_t a, Py_ssize_t b) nogil:
    # b > 0
    if a >= 0:
        return (a + b - 1) // b
    return -((-a) // b)


cdef inline Py_ssize_t _floor_div(Py_ssize_t a, Py_ssize_t b) nogil:
    if a >= 0:
        return a // b
    return -((-a + b - 1) // b)


cdef inline void _span(Py_ssize_t size_in, Py_ssize_t size_out, Py_ssize_t off,
                       Py_ssize_t stride, Py_ssize_t *lo, Py_ssize_t *hi) nogil:
    # output positions o with 0 <= o*stride + off < size_in
    cdef Py_ssize_t a = _ceil_div(-off, stride)
    cdef Py_ssize_t b = _floor_div(size_in - 1 - off, stride) + 1
    if a < 0:
        a = 0
    if b > size_out:
        b = size_out
    if b < a:
        b = a
    lo[0] = a
    hi[0] = b


def _direct_forward(real[:, :, :, ::1] x, real[:, :, :, ::1] w,
                   int stride, int pad, int dil, int groups,
                   real[:, :, :, ::1] out):
    """Accumulate the convolution of x with w into out (pre-filled with bias)."""
    cdef Py_ssize_t N = x.shape[0], H = x.shape[2], W = x.shape[3]
    cdef Py_ssize_t CO = w.shape[0], CIG = w.shape[1], KH = w.shape[2], KW = w.shape[3]
    cdef Py_ssize_t OH = out.shape[2], OW = out.shape[3]
    cdef Py_ssize_t COG = CO // groups
    cdef Py_ssize_t idx, b, oc, g, icl, ic, kh, kw, oh, ow, ih, ow_lo, ow_hi, oh_lo, oh_hi, xoff
    cdef real wv
    cdef real *op
    cdef real *xp
    for idx in prange(N * CO, nogil=True, schedule='static'):
        b = idx // CO
        oc = idx % CO
        g = oc // COG
        for icl in range(CIG):
            ic = g * CIG + icl
            for kh in range(KH):
                _span(H, OH, kh * dil - pad, stride, &oh_lo, &oh_hi)
                for kw in range(KW):
                    wv = w[oc, icl, kh, kw]
                    xoff = kw * dil - pad
                    _span(W, OW, xoff, stride, &ow_lo, &ow_hi)
                    for oh in range(oh_lo, oh_hi):
                        ih = oh * stride - pad + kh * dil
                        op = &out[b, oc, oh, 0]
                        xp = &x[b, ic, ih, 0]
                        for ow in range(ow_lo, ow_hi):
                            op[ow] = op[ow] + wv * xp[ow * stride + xoff]


def _direct_backward_input(real[:, :, :, ::1] gy, real[:, :, :, ::1] w,
                          int stride, int pad, int dil, int groups,
                          real[:, :, :, ::1] gx):
    """Accumulate d(loss)/d(input) into gx (zero-initialised by the caller)."""
    cdef Py_ssize_t N = gx.shape[0], CI = gx.shape[1], H = gx.shape[2], W = gx.shape[3]
    cdef Py_ssize_t CO = w.shape[0], CIG = w.shape[1], KH = w.shape[2], KW = w.shape[3]
    cdef Py_ssize_t OH = gy.shape[2], OW = gy.shape[3]
    cdef Py_ssize_t COG = CO // groups
    cdef Py_ssize_t idx, b, ic, g, icl, ocl, oc, kh, kw, oh, ow, ih, ow_lo, ow_hi, oh_lo, oh_hi, xoff
    cdef real wv
    cdef real *gp
    cdef real *xp
    for idx in prange(N * CI, nogil=True, schedule='static'):
        b = idx // CI
        ic = idx % CI
        g = ic // CIG
        icl = ic % CIG
        for ocl in range(COG):
            oc = g * COG + ocl
            for kh in range(KH):
                _span(H, OH, kh * dil - pad, stride, &oh_lo, &oh_hi)
                for kw in range(KW):
                    wv = w[oc, icl, kh, kw]
                    xoff = kw * dil - pad
                    _span(W, OW, xoff, stride, &ow_lo, &ow_hi)
                    for oh in range(oh_lo, oh_hi):
                        ih = oh * stride - pad + kh * dil
                        gp = &gy[b, oc, oh, 0]
                        xp = &gx[b, ic, ih, 0]
                        for ow in range(ow_lo, ow_hi):
                            xp[ow * stride + xoff] = xp[ow * stride + xoff] + wv * gp[ow]


def _direct_backward_weight(real[:, :, :, ::1] gy, real[:, :, :, ::1] x,
                           int stride, int pad, int dil, int groups,
                           real[:, :, :, ::1] gw):
    """Write d(loss)/d(weight) into gw."""
    cdef Py_ssize_t N = x.shape[0], H = x.shape[2], W = x.shape[3]
    cdef Py_ssize_t CO = gw.shape[0], CIG = gw.shape[1], KH = gw.shape[2], KW = gw.shape[3]
    cdef Py_ssize_t OH = gy.shape[2], OW = gy.shape[3]
    cdef Py_ssize_t COG = CO // groups
    cdef Py_ssize_t idx, b, oc, g, icl, ic, kh, kw, oh, ow, ih, ow_lo, ow_hi, oh_lo, oh_hi, xoff
    cdef real acc
    cdef real *gp
    cdef real *xp
    for idx in prange(CO * CIG, nogil=True, schedule='static'):
        oc = idx // CIG
        icl = idx % CIG
        g = oc // COG
        ic = g * CIG + icl
        for kh in range(KH):
            _span(H, OH, kh * dil - pad, stride, &oh_lo, &oh_hi)
            for kw in range(KW):
                xoff = kw * dil - pad
                _span(W, OW, xoff, stride, &ow_lo, &ow_hi)
                acc = 0
                for b in range(N):
                    for oh in range(oh_lo, oh_hi):
                        ih = oh * stride - pad + kh * dil
                        gp = &gy[b, oc, oh, 0]
                        xp = &x[b, ic, ih, 0]
                        for ow in range(ow_lo, ow_hi):
                            acc = acc + gp[ow] * xp[ow * stride + xoff]
                gw[oc, icl, kh, kw] = acc


def _im2col(real[:, :, :, ::1] x, Py_ssize_t c0, int KH, int KW, int stride, int pad, int dil,
            Py_ssize_t OH, Py_ssize_t OW, real[:, ::1] cols):
    """cols[(icl, kh, kw), (b, oh, ow)] = x[b, c0 + icl, ih, iw]; cols arrive zeroed."""
    cdef Py_ssize_t N = x.shape[0], H = x.shape[2], W = x.shape[3]
    cdef Py_ssize_t R = cols.shape[0], P = OH * OW
    cdef Py_ssize_t r, icl, kh, kw, b, oh, ow, ih, xoff, ow_lo, ow_hi, oh_lo, oh_hi
    cdef real *cp
    cdef real *xp
    for r in prange(R, nogil=True, schedule='static'):
        icl = r // (KH * KW)
        kh = (r // KW) % KH
        kw = r % KW
        xoff = kw * dil - pad
        _span(H, OH, kh * dil - pad, stride, &oh_lo, &oh_hi)
        _span(W, OW, xoff, stride, &ow_lo, &ow_hi)
        for b in range(N):
            for oh in range(oh_lo, oh_hi):
                ih = oh * stride - pad + kh * dil
                cp = &cols[r, b * P + oh * OW]
                xp = &x[b, c0 + icl, ih, 0]
                for ow in range(ow_lo, ow_hi):
                    cp[ow] = xp[ow * stride + xoff]


def _col2im(real[:, ::1] cols, Py_ssize_t c0, Py_ssize_t CIG, int KH, int KW, int stride, int pad,
            int dil, Py_ssize_t OH, Py_ssize_t OW, real[:, :, :, ::1] gx):
    """Scatter-add cols back onto gx; each thread owns one input channel."""
    cdef Py_ssize_t N = gx.shape[0], H = gx.shape[2], W = gx.shape[3]
    cdef Py_ssize_t P = OH * OW
    cdef Py_ssize_t r, icl, kh, kw, b, oh, ow, ih, xoff, ow_lo, ow_hi, oh_lo, oh_hi
    cdef real *cp
    cdef real *xp
    for icl in prange(CIG, nogil=True, schedule='static'):
        for kh in range(KH):
            _span(H, OH, kh * dil - pad, stride, &oh_lo, &oh_hi)
            for kw in range(KW):
                r = (icl * KH + kh) * KW + kw
                xoff = kw * dil - pad
                _span(W, OW, xoff, stride, &ow_lo, &ow_hi)
                for b in range(N):
                    for oh in range(oh_lo, oh_hi):
                        ih = oh * stride - pad + kh * dil
                        cp = &cols[r, b * P + oh * OW]
                        xp = &gx[b, c0 + icl, ih, 0]
                        for ow in range(ow_lo, ow_hi):
                            xp[ow * stride + xoff] = xp[ow * stride + xoff] + cp[ow]


def _columns(x, g, cig, kh, kw, stride, pad, dil, oh, ow):
    n = x.shape[0]
    if kh == kw == 1 and stride == 1 and pad == 0:
        # 1x1: the columns are the input channels themselves
        xs = x[:, g * cig:(g + 1) * cig].reshape(n, cig, oh * ow)
        return np.ascontiguousarray(xs.transpose(1, 0, 2)).reshape(cig, n * oh * ow)
    cols = np.zeros((cig * kh * kw, n * oh * ow), dtype=x.dtype)
    _im2col(x, g * cig, kh, kw, stride, pad, dil, oh, ow, cols)
    return cols


def _to_nchw(flat, n, c, oh, ow):
    return flat.reshape(c, n, oh, ow).transpose(1, 0, 2, 3)


def conv2d_forward(x, w, int stride, int pad, int dil, int groups, out):
    """Accumulate the convolution of x with w into out (pre-filled with bias)."""
    co, cig, kh, kw = w.shape
    if cig == 1:
        _direct_forward(x, w, stride, pad, dil, groups, out)
        return
    n, _, oh, ow = out.shape
    cog = co // groups
    for g in range(groups):
        cols = _columns(x, g, cig, kh, kw, stride, pad, dil, oh, ow)
        wg = w[g * cog:(g + 1) * cog].reshape(cog, cig * kh * kw)
        out[:, g * cog:(g + 1) * cog] += _to_nchw(wg @ cols, n, cog, oh, ow)


def conv2d_backward_input(gy, w, int stride, int pad, int dil, int groups, gx):
    """Accumulate d(loss)/d(input) into gx (zero-initialised by the caller)."""
    co, cig, kh, kw = w.shape
    if cig == 1:
        _direct_backward_input(gy, w, stride, pad, dil, groups, gx)
        return
    n, _, oh, ow = gy.shape
    cog = co // groups
    for g in range(groups):
        gyg = np.ascontiguousarray(gy[:, g * cog:(g + 1) * cog].transpose(1, 0, 2, 3)).reshape(cog, n * oh * ow)
        wg = w[g * cog:(g + 1) * cog].reshape(cog, cig * kh * kw)
        dcols = np.ascontiguousarray(wg.T @ gyg)
        if kh == kw == 1 and stride == 1 and pad == 0:
            gx[:, g * cig:(g + 1) * cig] += _to_nchw(dcols, n, cig, oh, ow)
        else:
            _col2im(dcols, g * cig, cig, kh, kw, stride, pad, dil, oh, ow, gx)


def conv2d_backward_weight(gy, x, int stride, int pad, int dil, int groups, gw):
    """Write d(loss)/d(weight) into gw."""
    co, cig, kh, kw = gw.shape
    if cig == 1:
        _direct_backward_weight(gy, x, stride, pad, dil, groups, gw)
        return
    n, _, oh, ow = gy.shape
    cog = co // groups
    for g in range(groups):
        gyg = np.ascontiguousarray(gy[:, g * cog:(g + 1) * cog].transpose(1, 0, 2, 3)).reshape(cog, n * oh * ow)
        cols = _columns(x, g, cig, kh, kw, stride, pad, dil, oh, ow)
        gw[g * cog:(g + 1) * cog] = (gyg @ cols.T).reshape(cog, cig, kh, kw)
