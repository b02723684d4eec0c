"""Tensor value type and the reverse-mode tape.

Tensors wrap a contiguous numpy array (float32 by default; float64 is
accepted so gradient checks can run without single-precision noise). They
are treated as immutable: ops always allocate fresh outputs.

Recording is opt-in. Ops executed inside ``with Tape() as tape:`` append a
node per output; ``tape.backward(y, seed)`` walks them in reverse once.
"""
import threading

import numpy as np


class ShapeError(ValueError):
    """A tensor dimension does not match what an op requires."""

    def __init__(self, message, dim=None, expected=None, got=None):
        super().__init__(message)
        self.dim = dim
        self.expected = expected
        self.got = got


class GraphConsumedError(RuntimeError):
    pass


_FLOATS = (np.float32, np.float64)


class Tensor:
    __slots__ = ("data", "name", "__weakref__")

    def __init__(self, data, name=None, dtype=None, check_finite=True):
        arr = np.asarray(data)
        if dtype is None:
            dtype = arr.dtype if arr.dtype in _FLOATS else np.float32
        arr = np.ascontiguousarray(arr, dtype=dtype)
        if check_finite and not np.all(np.isfinite(arr)):
            raise ValueError("tensor data contains NaN or Inf")
        self.data = arr
        self.name = name

    @classmethod
    def wrap(cls, arr, name=None):
        # internal results: skip the finiteness scan
        return cls(arr, name=name, check_finite=False)

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self):
        return self.data

    def __repr__(self):
        label = f" {self.name!r}" if self.name else ""
        return f"Tensor{label}(shape={self.shape}, dtype={self.dtype})"


def zeros(shape, dtype=np.float32):
    return Tensor.wrap(np.zeros(shape, dtype=dtype))


def ones(shape, dtype=np.float32):
    return Tensor.wrap(np.ones(shape, dtype=dtype))


def as_nchw(t, what="input"):
    if t.data.ndim != 4:
        raise ShapeError(f"{what} must be 4-D (n, c, h, w), got shape {t.shape}", dim="ndim",
                         expected=4, got=t.data.ndim)
    return t.shape


class _Node:
    __slots__ = ("out", "inputs", "backward")

    def __init__(self, out, inputs, backward):
        self.out = out
        self.inputs = inputs
        self.backward = backward


_state = threading.local()


def current_tape():
    stack = getattr(_state, "stack", None)
    return stack[-1] if stack else None


def record(out, inputs, backward):
    """Register ``out = op(*inputs)`` with the active tape, if any.

    ``backward(g)`` maps the output gradient to a tuple of input gradients
    (``None`` for inputs that need none).
    """
    tape = current_tape()
    if tape is not None:
        tape._nodes.append(_Node(out, inputs, backward))
    return out


class Grad:
    """Gradients keyed by tensor identity; each has its primal's shape."""

    def __init__(self, grads, tensors):
        self._grads = grads
        self._tensors = tensors

    def __getitem__(self, tensor):
        try:
            return self._grads[id(tensor)]
        except KeyError:
            return np.zeros_like(tensor.data)

    def __contains__(self, tensor):
        return id(tensor) in self._grads

    def get(self, tensor, default=None):
        return self._grads.get(id(tensor), default)

    def items(self):
        for key, g in self._grads.items():
            yield self._tensors[key], g


class Tape:
    """Records executed ops for a single reverse sweep."""

    def __init__(self):
        self._nodes = []
        self._consumed = False

    def __enter__(self):
        stack = getattr(_state, "stack", None)
        if stack is None:
            stack = _state.stack = []
        stack.append(self)
        return self

    def __exit__(self, *exc):
        _state.stack.pop()
        return False

    def __len__(self):
        return len(self._nodes)

    @property
    def nodes(self):
        return list(self._nodes)

    def backward(self, output, seed=None):
        if self._consumed:
            raise GraphConsumedError("this tape has already been consumed by backward()")
        if seed is None:
            seed = np.ones_like(output.data)
        seed = np.asarray(seed.data if isinstance(seed, Tensor) else seed)
        if seed.shape != output.shape:
            raise ShapeError(f"seed shape {seed.shape} does not match output shape {output.shape}",
                             dim="seed", expected=output.shape, got=seed.shape)
        self._consumed = True
        grads = {id(output): seed.astype(output.dtype, copy=True)}
        tensors = {id(output): output}
        for node in reversed(self._nodes):
            g = grads.get(id(node.out))
            if g is None:
                continue
            parts = node.backward(g)
            for inp, gi in zip(node.inputs, parts):
                if gi is None or inp is None:
                    continue
                key = id(inp)
                if key in grads:
                    grads[key] = grads[key] + gi
                else:
                    grads[key] = gi
                    tensors[key] = inp
        self._nodes = []
        return Grad(grads, tensors)


def backward(tape, output, seed=None):
    return tape.backward(output, seed)
