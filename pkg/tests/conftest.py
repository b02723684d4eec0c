import numpy as np
import pytest

from lsnet.config import BackboneSpec, FpnSpec, ModelSpec
from lsnet.tensor import Tape, Tensor


def tiny_spec(variant="diff", blocks=(1, 1, 1, 1), channels=(8, 8, 16, 16), fusion=(4, 4, 4, 4), reduction=4):
    return ModelSpec(BackboneSpec(blocks, channels, (2, 2, 4, 4), reduction), FpnSpec(variant, fusion))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def t64(arr):
    return Tensor(np.asarray(arr, dtype=np.float64))


def analytic_grads(fn, inputs, seed):
    with Tape() as tape:
        out = fn(*inputs)
    g = tape.backward(out, seed)
    return [g[t] for t in inputs]


def numeric_grad(fn, inputs, k, seed, step=1e-3):
    """Central differences of sum(fn(*inputs) * seed) w.r.t. inputs[k]."""
    base = inputs[k].data
    grad = np.zeros_like(base)
    it = np.nditer(base, flags=["multi_index"])
    for _ in it:
        idx = it.multi_index
        vals = []
        for d in (step, -step):
            pert = base.copy()
            pert[idx] += d
            args = list(inputs)
            args[k] = Tensor(pert)
            vals.append(float(np.sum(fn(*args).data * seed)))
        grad[idx] = (vals[0] - vals[1]) / (2 * step)
    return grad


def rel_err(a, b):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    denom = max(np.linalg.norm(a), np.linalg.norm(b), 1e-12)
    return float(np.linalg.norm(a - b) / denom)


def gradcheck(fn, inputs, rng, step=1e-3):
    """Largest relative error over all inputs (norm-wise) for a random output projection."""
    with Tape():
        out = fn(*inputs)
    seed = rng.standard_normal(out.shape)
    analytic = analytic_grads(fn, inputs, seed)
    worst = 0.0
    for k in range(len(inputs)):
        worst = max(worst, rel_err(analytic[k], numeric_grad(fn, inputs, k, seed, step)))
    return worst


# (number, title, passed, detail) filled by test_acceptance.py
ACCEPTANCE = []


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for number, title, passed, detail in sorted(ACCEPTANCE):
        terminalreporter.write_line(f"criterion {number:2d} {'PASS' if passed else 'FAIL'}  {title}: {detail}")
