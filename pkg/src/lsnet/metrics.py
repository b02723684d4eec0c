"""Pixel-level change-detection accuracy: confusion counts, P / R / F1 / OA."""
from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class ConfusionCounts:
    tp: int = 0
    fp: int = 0
    fn: int = 0
    tn: int = 0

    @property
    def total(self):
        return self.tp + self.fp + self.fn + self.tn

    def __add__(self, other):
        return ConfusionCounts(self.tp + other.tp, self.fp + other.fp, self.fn + other.fn, self.tn + other.tn)

    def swapped(self):
        """Counts under the opposite positive-class convention."""
        return ConfusionCounts(self.tn, self.fn, self.fp, self.tp)


@dataclass(frozen=True)
class MetricsReport:
    p: float
    r: float
    f1: float
    oa: float
    degenerate: tuple = ()

    def to_dict(self):
        return {"p": self.p, "r": self.r, "f1": self.f1, "oa": self.oa, "degenerate": list(self.degenerate)}


def _array(x):
    return np.asarray(getattr(x, "data", x))


def confusion(pred, gt, threshold=0.5):
    """Count pixels; a pixel is predicted positive iff its score >= threshold."""
    p = _array(pred)
    g = _array(gt)
    if p.shape != g.shape:
        raise ValueError(f"prediction shape {p.shape} != ground-truth shape {g.shape}")
    if not np.all((g == 0) | (g == 1)):
        raise ValueError("ground truth must be binary (0/1)")
    pos = p >= threshold
    truth = g == 1
    tp = int(np.count_nonzero(pos & truth))
    fp = int(np.count_nonzero(pos & ~truth))
    fn = int(np.count_nonzero(~pos & truth))
    return ConfusionCounts(tp, fp, fn, int(g.size) - tp - fp - fn)


def prf1_oa(c):
    """Percentages. A zero denominator yields 0 for that metric and is named in ``degenerate``."""
    if c.total == 0:
        raise ValueError("no pixels evaluated")
    flags = []
    if c.tp + c.fp:
        p = c.tp / (c.tp + c.fp)
    else:
        p = 0.0
        flags.append("no_predicted_positives")
    if c.tp + c.fn:
        r = c.tp / (c.tp + c.fn)
    else:
        r = 0.0
        flags.append("no_actual_positives")
    f1 = 2 * p * r / (p + r) if p + r > 0 else 0.0
    oa = (c.tp + c.tn) / c.total
    return MetricsReport(100 * p, 100 * r, 100 * f1, 100 * oa, tuple(flags))


def f1_from_pr(p, r):
    """Harmonic mean of precision and recall (same units as the inputs)."""
    return 2 * p * r / (p + r) if p + r > 0 else 0.0


def evaluate(pairs, threshold=0.5, per_image=False):
    """Metrics over an iterable of (scores, gt) arrays.

    Default is micro-averaging (pooled counts). ``per_image=True`` averages
    the per-image P/R/F1/OA instead.
    """
    if not per_image:
        total = ConfusionCounts()
        for pred, gt in pairs:
            total = total + confusion(pred, gt, threshold)
        return prf1_oa(total)
    reports = [prf1_oa(confusion(pred, gt, threshold)) for pred, gt in pairs]
    if not reports:
        raise ValueError("no images evaluated")
    mean = {k: float(np.mean([getattr(r, k) for r in reports])) for k in ("p", "r", "f1", "oa")}
    flags = tuple(sorted({f for r in reports for f in r.degenerate}))
    return MetricsReport(degenerate=flags, **mean)
