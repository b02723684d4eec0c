"""Backend selection for the convolution hot loops.

The compiled extension (``lsnet._ckernels``) is preferred; the numpy
implementation is used when it is missing or when ``LSNET_BACKEND=numpy``.
A third, instrumented pure-Python kernel counts multiply-accumulates and is
only ever activated through :func:`counting_macs`.
"""
import contextlib
import os
import threading

import numpy as np

from . import _npkernels

try:
    from . import _ckernels
except ImportError:  # pragma: no cover - depends on the build
    _ckernels = None

BACKENDS = {"numpy": _npkernels}
if _ckernels is not None:
    BACKENDS["cython"] = _ckernels


def _default_backend():
    requested = os.environ.get("LSNET_BACKEND", "").strip().lower()
    if requested:
        if requested not in BACKENDS:
            raise ImportError(f"LSNET_BACKEND={requested!r} is not available; have {sorted(BACKENDS)}")
        return requested
    return "cython" if "cython" in BACKENDS else "numpy"


BACKEND = _default_backend()
_local = threading.local()


def active():
    """Return the kernel module in force for the calling thread."""
    counter = getattr(_local, "counter", None)
    if counter is not None:
        return counter
    name = getattr(_local, "backend", None) or BACKEND
    return BACKENDS[name]


@contextlib.contextmanager
def use_backend(name):
    if name not in BACKENDS:
        raise ValueError(f"unknown backend {name!r}; have {sorted(BACKENDS)}")
    prev = getattr(_local, "backend", None)
    _local.backend = name
    try:
        yield BACKENDS[name]
    finally:
        _local.backend = prev


class MacCounter:
    """Instrumented forward kernel: plain nested loops, one tick per multiply-accumulate.

    Padding taps are counted as real work (they multiply a zero), matching
    the H'·W'·Cy·Hk·Wk·Cx/groups cost model. Only the forward pass is
    provided; backward calls fall through to the regular backend.
    """

    def __init__(self):
        self.total = 0
        self.by_layer = {}
        self.layer = None

    def conv2d_forward(self, x, w, stride, pad, dil, groups, out):
        n, ci, h, wd = x.shape
        co, cig, kh, kw = w.shape
        _, _, oh, ow = out.shape
        cog = co // groups
        xp = np.zeros((n, ci, h + 2 * pad, wd + 2 * pad), dtype=np.float64)
        xp[:, :, pad:pad + h, pad:pad + wd] = x
        xp = xp.tolist()
        wl = w.tolist()
        res = out.astype(np.float64).tolist()
        macs = 0
        for b in range(n):
            xb, rb = xp[b], res[b]
            for oc in range(co):
                g = oc // cog
                wo, ro = wl[oc], rb[oc]
                for y in range(oh):
                    row = ro[y]
                    for xo in range(ow):
                        acc = row[xo]
                        for icl in range(cig):
                            plane, wk = xb[g * cig + icl], wo[icl]
                            for i in range(kh):
                                src, wr = plane[y * stride + i * dil], wk[i]
                                for j in range(kw):
                                    acc += wr[j] * src[xo * stride + j * dil]
                                    macs += 1
                        row[xo] = acc
        out[...] = np.asarray(res, dtype=out.dtype)
        self.total += macs
        key = self.layer or "<anonymous>"
        self.by_layer[key] = self.by_layer.get(key, 0) + macs

    def __getattr__(self, name):
        return getattr(BACKENDS[BACKEND], name)


@contextlib.contextmanager
def counting_macs():
    """Route convolutions on this thread through a fresh :class:`MacCounter`."""
    prev = getattr(_local, "counter", None)
    counter = MacCounter()
    _local.counter = counter
    try:
        yield counter
    finally:
        _local.counter = prev
