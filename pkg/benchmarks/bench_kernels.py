"""Time the convolution kernels on both backends, plus one full training step.

    python3 benchmarks/bench_kernels.py [--batch 16] [--repeat 5]

Each case runs forward, backward-input and backward-weight; the best of
``--repeat`` runs is reported in milliseconds.
"""
import argparse
import time

import numpy as np

from lsnet import kernels
from lsnet.config import builtin_spec
from lsnet.model import LSNet
from lsnet.ops import ConvSpec
from lsnet.synth import SynthConfig, synthetic_batch
from lsnet.tensor import Tape
from lsnet.train import bce_loss

CASES = [
    ("1x1 64->32", ConvSpec(64, 32, 1, 1), 32),
    ("dw3x3 32", ConvSpec.depthwise(32, padding=1), 32),
    ("dw3x3 d4 32", ConvSpec.depthwise(32, padding=4, dilation=4), 16),
    ("3x3 48->16", ConvSpec(48, 16, padding=1), 32),
    ("stem 3->16 s2", ConvSpec(3, 16, stride=2, padding=1), 64),
]


def best_of(fn, repeat):
    times = []
    for _ in range(repeat):
        t = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t)
    return 1e3 * min(times)


def conv_case(mod, spec, size, batch, rng):
    x = rng.standard_normal((batch, spec.in_channels, size, size)).astype(np.float32)
    w = rng.standard_normal(spec.weight_shape).astype(np.float32)
    oh, ow = spec.output_hw(size, size)
    gy = rng.standard_normal((batch, spec.out_channels, oh, ow)).astype(np.float32)
    args = (spec.stride, spec.padding, spec.dilation, spec.groups)

    def run():
        mod.conv2d_forward(x, w, *args, np.zeros_like(gy))
        mod.conv2d_backward_input(gy, w, *args, np.zeros_like(x))
        mod.conv2d_backward_weight(gy, x, *args, np.zeros_like(w))
    return run


def train_step(batch):
    net = LSNet(builtin_spec("desk")).train(True)
    t1, t2, mask = synthetic_batch(SynthConfig(), range(batch))

    def run():
        with Tape() as tape:
            s = net(t1, t2)
        _, g = bce_loss(s, mask)
        tape.backward(s, g.astype(np.float32))
    return run


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--batch", type=int, default=16)
    ap.add_argument("--repeat", type=int, default=5)
    args = ap.parse_args()
    names = sorted(kernels.BACKENDS)
    print(f"{'case':<16}" + "".join(f"{n:>10}" for n in names) + "   speedup")
    for label, spec, size in CASES:
        ms = {}
        for n in names:
            run = conv_case(kernels.BACKENDS[n], spec, size, args.batch, np.random.default_rng(0))
            ms[n] = best_of(run, args.repeat)
        speed = f"{ms['numpy'] / ms['cython']:9.2f}x" if "cython" in ms else ""
        print(f"{label:<16}" + "".join(f"{ms[n]:10.1f}" for n in names) + speed)
    ms = {}
    for n in names:
        with kernels.use_backend(n):
            ms[n] = best_of(train_step(8), max(1, args.repeat // 2))
    speed = f"{ms['numpy'] / ms['cython']:9.2f}x" if "cython" in ms else ""
    print(f"{'train step b=8':<16}" + "".join(f"{ms[n]:10.1f}" for n in names) + speed)


if __name__ == "__main__":
    main()
