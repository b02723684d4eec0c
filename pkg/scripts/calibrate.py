"""Search stage / fusion widths whose analytical cost lands closest to the published targets.

Backbone target: 0.9326 M params, 3.4956 GMACs (two streams, 256x256).
FPN targets (same input): dense 0.1590 M / 2.3348 GMACs, diff 0.2299 M / 1.2464 GMACs.
Usage: python scripts/calibrate.py
"""
import itertools
import math

from lsnet.config import BackboneSpec, FpnSpec, ModelSpec
from lsnet.profiler import count_flops

SHAPE = (1, 3, 256, 256)
BB = (0.9326e6, 3.4956e9)
FPN = {"dense": (0.1590e6, 2.3348e9), "diff": (0.2299e6, 1.2464e9)}


def log_err(got, want):
    return abs(math.log(got / want))


def backbone_cost(channels):
    spec = ModelSpec(BackboneSpec(stage_channels=channels))
    rep = count_flops(spec, SHAPE).module("backbone")
    return rep.params, rep.macs


def search_backbone():
    widths = [16, 32, 48, 64, 80, 96, 112, 128, 160, 192, 224, 256]
    best = []
    for ch in itertools.product(widths, repeat=4):
        if any(a > b for a, b in zip(ch, ch[1:])):
            continue
        p, m = backbone_cost(ch)
        score = max(log_err(p, BB[0]), log_err(m, BB[1]))
        best.append((score, ch, p, m))
    best.sort()
    return best[:8]


def search_fpn(channels):
    widths = [8, 16, 24, 32, 48, 64, 96, 128]
    best = []
    for f in itertools.product(widths, repeat=4):
        if any(a > b for a, b in zip(f, f[1:])):
            continue
        score = 0.0
        got = {}
        for variant, (tp, tm) in FPN.items():
            spec = ModelSpec(BackboneSpec(stage_channels=channels), FpnSpec(variant, f))
            rep = count_flops(spec, SHAPE).module("fpn")
            got[variant] = (rep.params, rep.macs)
            score = max(score, log_err(rep.params, tp), log_err(rep.macs, tm))
        best.append((score, f, got))
    best.sort(key=lambda t: t[0])
    return best[:8]


if __name__ == "__main__":
    top = search_backbone()
    for score, ch, p, m in top:
        print(f"backbone {ch}: params {p / 1e6:.4f} M ({(p / BB[0] - 1) * 100:+.1f}%), "
              f"GMACs {m / 1e9:.4f} ({(m / BB[1] - 1) * 100:+.1f}%)  score {score:.3f}")
    channels = top[0][1]
    for score, f, got in search_fpn(channels):
        desc = ", ".join(f"{k} {p / 1e6:.4f} M / {m / 1e9:.4f} G" for k, (p, m) in got.items())
        print(f"fpn {f}: {desc}  score {score:.3f}")
