"""Minimal binary checkpoint format.

Layout (all integers little-endian)::

    magic      8 bytes   b"LSNETCK\\0"
    version    u32       1
    cfg_len    u32       length of the model config text
    cfg        bytes     UTF-8 TOML (see lsnet.config)
    count      u32       number of tensor entries
    entries    count x { name_len u16, name UTF-8, ndim u8, dims u32[ndim],
                         payload float32[prod(dims)] }
    crc32      u32       zlib.crc32 of every preceding byte

Entries keep insertion order; names are unique. Siamese weights appear once
(``backbone.*``), BN running statistics as ``*.running_mean/var``.
"""
import os
import struct
import tempfile
import zlib
from pathlib import Path

import numpy as np

MAGIC = b"LSNETCK\x00"
VERSION = 1


class CheckpointError(ValueError):
    pass


def encode(tensors, config_text=""):
    parts = [MAGIC, struct.pack("<I", VERSION)]
    cfg = config_text.encode("utf-8")
    parts += [struct.pack("<I", len(cfg)), cfg, struct.pack("<I", len(tensors))]
    for name, arr in tensors.items():
        arr = np.asarray(arr)
        if arr.dtype.kind != "f":
            raise CheckpointError(f"{name}: only float tensors can be stored")
        raw = name.encode("utf-8")
        parts.append(struct.pack("<H", len(raw)) + raw)
        parts.append(struct.pack("<B", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    body = b"".join(parts)
    return body + struct.pack("<I", zlib.crc32(body))


class _Reader:
    def __init__(self, buf):
        self.buf = buf
        self.pos = 0

    def take(self, n, what):
        if self.pos + n > len(self.buf):
            raise CheckpointError(f"truncated checkpoint while reading {what}")
        out = self.buf[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt, what):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt), what))


def decode(buf):
    """Return (config_text, {name: float32 array})."""
    r = _Reader(buf)
    if r.take(len(MAGIC), "magic") != MAGIC:
        raise CheckpointError("not an LSNet checkpoint (bad magic)")
    (version,) = r.unpack("<I", "version")
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version} (this build reads {VERSION})")
    (cfg_len,) = r.unpack("<I", "config length")
    config_text = r.take(cfg_len, "config").decode("utf-8")
    (count,) = r.unpack("<I", "entry count")
    tensors = {}
    for i in range(count):
        (name_len,) = r.unpack("<H", f"entry {i} name length")
        name = r.take(name_len, f"entry {i} name").decode("utf-8")
        (ndim,) = r.unpack("<B", f"{name} rank")
        dims = r.unpack(f"<{ndim}I", f"{name} shape")
        size = int(np.prod(dims, dtype=np.int64)) * 4
        payload = r.take(size, f"{name} payload")
        if name in tensors:
            raise CheckpointError(f"duplicate entry {name!r}")
        tensors[name] = np.frombuffer(payload, dtype="<f4").reshape(dims).astype(np.float32)
    body_end = r.pos
    (crc,) = r.unpack("<I", "checksum")
    if crc != zlib.crc32(buf[:body_end]):
        raise CheckpointError("checksum mismatch (corrupt checkpoint)")
    if r.pos != len(buf):
        raise CheckpointError(f"{len(buf) - r.pos} trailing bytes after checksum")
    return config_text, tensors


def save_checkpoint(tensors, path, config_text=""):
    """Write atomically: temp file in the target directory, then rename."""
    path = Path(path)
    data = encode(tensors, config_text)
    fd, tmp = tempfile.mkstemp(dir=path.parent or ".", prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        umask = os.umask(0)
        os.umask(umask)
        os.chmod(tmp, 0o666 & ~umask)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def load_checkpoint(path):
    try:
        buf = Path(path).read_bytes()
    except OSError as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc.strerror}") from exc
    return decode(buf)


def model_tensors(net):
    out = {name: t.data for name, t in net.weights.params.items()}
    out.update(net.weights.buffers)
    return out


def save_model(net, path):
    save_checkpoint(model_tensors(net), path, net.spec.to_toml())


def load_model(path):
    """Rebuild an :class:`~lsnet.model.LSNet` from a checkpoint; shapes must match its config."""
    from .config import ModelSpec
    from .model import LSNet
    from .tensor import Tensor

    config_text, tensors = load_checkpoint(path)
    spec = ModelSpec.from_toml(config_text)
    net = LSNet(spec)
    expected = model_tensors(net)
    missing = sorted(set(expected) - set(tensors))
    extra = sorted(set(tensors) - set(expected))
    if missing or extra:
        raise CheckpointError(f"checkpoint does not match its config: missing {missing[:5]}, unexpected {extra[:5]}")
    for name, arr in tensors.items():
        if arr.shape != expected[name].shape:
            raise CheckpointError(f"{name}: stored shape {arr.shape} != model shape {expected[name].shape}")
    for name in net.weights.params:
        net.weights.params[name] = Tensor(tensors[name], name=name)
    for name in net.weights.buffers:
        net.weights.buffers[name] = tensors[name].copy()
    return net
