"""Image-pair loading and CDD-style dataset indexing.

A dataset root (or ``root/<split>``) holds three sibling directories with
matching filenames: ``A/`` (time 1), ``B/`` (time 2), ``OUT/`` (change
mask, nonzero = changed).
"""
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image, UnidentifiedImageError

from .tensor import Tensor

log = logging.getLogger(__name__)

IMAGE_SUFFIXES = {".png", ".ppm", ".jpg", ".jpeg", ".bmp", ".tif", ".tiff"}


class ImageError(ValueError):
    pass


class DatasetError(ValueError):
    pass


def read_rgb(path):
    """(H, W, 3) uint8 array from an 8-bit RGB/greyscale PNG, PPM, ..."""
    path = Path(path)
    try:
        with Image.open(path) as im:
            if im.mode not in ("RGB", "L", "P", "RGBA"):
                raise ImageError(f"{path}: unsupported image mode {im.mode!r} (need 8 bits per channel)")
            return np.asarray(im.convert("RGB"), dtype=np.uint8)
    except (OSError, UnidentifiedImageError) as exc:
        if isinstance(exc, ImageError):
            raise
        raise ImageError(f"{path}: unreadable image ({exc})") from exc


def read_mask(path):
    """(H, W) float32 mask in {0, 1}."""
    path = Path(path)
    try:
        with Image.open(path) as im:
            arr = np.asarray(im.convert("L"))
    except (OSError, UnidentifiedImageError) as exc:
        raise ImageError(f"{path}: unreadable mask ({exc})") from exc
    return (arr > 127).astype(np.float32)


def to_tensor(rgb):
    return Tensor(rgb.astype(np.float32).transpose(2, 0, 1)[None] / 255.0)


def load_image_pair(path_a, path_b):
    a = read_rgb(path_a)
    b = read_rgb(path_b)
    if a.shape != b.shape:
        raise ImageError(f"size mismatch: {path_a} is {a.shape[1]}x{a.shape[0]}, "
                         f"{path_b} is {b.shape[1]}x{b.shape[0]}")
    return to_tensor(a), to_tensor(b)


def write_gray(path, values):
    """Write a [0, 1] array as an 8-bit greyscale image."""
    arr = np.clip(np.rint(np.asarray(values, dtype=np.float64) * 255), 0, 255).astype(np.uint8)
    Image.fromarray(arr).save(path)


def write_rgb(path, chw):
    arr = np.clip(np.rint(np.asarray(chw).transpose(1, 2, 0) * 255), 0, 255).astype(np.uint8)
    Image.fromarray(arr).save(path)


@dataclass(frozen=True)
class Record:
    name: str
    image_a: Path
    image_b: Path
    mask: Path


@dataclass
class DatasetIndex:
    root: Path
    split: str
    records: list
    warnings: list = field(default_factory=list)

    def __len__(self):
        return len(self.records)

    def __iter__(self):
        return iter(self.records)

    def load(self, i):
        rec = self.records[i]
        a, b = load_image_pair(rec.image_a, rec.image_b)
        mask = read_mask(rec.mask)
        if mask.shape != a.shape[2:]:
            raise ImageError(f"mask {rec.mask} is {mask.shape[::-1]}, images are {a.shape[2:][::-1]}")
        return a, b, mask[None, None]


def _listing(d):
    return {p.stem: p for p in sorted(d.iterdir()) if p.suffix.lower() in IMAGE_SUFFIXES}


def index_dataset(root, split=None):
    """Index ``root`` (or ``root/split`` when that exists).

    Records are sorted by filename stem. Names missing from any of A/B/OUT
    are reported in ``warnings`` (and logged), never silently dropped.
    """
    root = Path(root)
    base = root / split if split and (root / split).is_dir() else root
    dirs = {k: base / k for k in ("A", "B", "OUT")}
    missing = [k for k, d in dirs.items() if not d.is_dir()]
    if missing:
        raise DatasetError(f"{base}: missing subdirector{'y' if len(missing) == 1 else 'ies'} "
                           f"{', '.join(missing)} (expected A/, B/, OUT/)")
    lists = {k: _listing(d) for k, d in dirs.items()}
    names = set().union(*lists.values())
    complete = sorted(n for n in names if all(n in lst for lst in lists.values()))
    warnings = []
    for n in sorted(names - set(complete)):
        absent = [k for k in ("A", "B", "OUT") if n not in lists[k]]
        msg = f"{n}: no counterpart in {', '.join(absent)}"
        warnings.append(msg)
        log.warning("%s: %s", base, msg)
    if not complete:
        raise DatasetError(f"{base}: no complete A/B/OUT triples")
    records = [Record(n, lists["A"][n], lists["B"][n], lists["OUT"][n]) for n in complete]
    return DatasetIndex(base, split or "", records, warnings)
