import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from lsnet import ops
from lsnet.ops import ConvSpec
from lsnet.tensor import GraphConsumedError, ShapeError, Tape, Tensor

from conftest import gradcheck, t64


def direct_conv(x, w, stride=1, pad=0, dil=1, groups=1):
    """Nested-loop cross-correlation oracle in float64."""
    n, ci, h, wd = x.shape
    co, cig, kh, kw = w.shape
    oh = (h + 2 * pad - dil * (kh - 1) - 1) // stride + 1
    ow = (wd + 2 * pad - dil * (kw - 1) - 1) // stride + 1
    xp = np.pad(x.astype(np.float64), ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    out = np.zeros((n, co, oh, ow))
    cog = co // groups
    for b in range(n):
        for o in range(co):
            g = o // cog
            for y in range(oh):
                for xx in range(ow):
                    acc = 0.0
                    for c in range(cig):
                        for i in range(kh):
                            for j in range(kw):
                                acc += w[o, c, i, j] * xp[b, g * cig + c, y * stride + i * dil, xx * stride + j * dil]
                    out[b, o, y, xx] = acc
    return out


def conv(x, w, spec, b=None):
    return ops.conv2d(Tensor(x), Tensor(w), None if b is None else Tensor(b), spec).data


# ---------------------------------------------------------------- tensor

def test_tensor_rejects_nan_and_inf():
    with pytest.raises(ValueError):
        Tensor(np.array([1.0, np.nan]))
    with pytest.raises(ValueError):
        Tensor(np.array([np.inf]))


def test_tensor_defaults_to_contiguous_float32():
    t = Tensor(np.arange(12).reshape(1, 1, 3, 4)[..., ::2])
    assert t.dtype == np.float32
    assert t.data.flags.c_contiguous
    assert t.data.size == 1 * 1 * 3 * 2


# ---------------------------------------------------------------- conv2d

def test_conv_1x1_unit_weight_is_identity(rng):
    x = rng.standard_normal((2, 1, 5, 6)).astype(np.float32)
    y = conv(x, np.ones((1, 1, 1, 1), np.float32), ConvSpec(1, 1, 1, 1))
    assert np.array_equal(y, x)


def test_conv_all_ones_counts_window_overlap():
    y = conv(np.ones((1, 1, 4, 4), np.float32), np.ones((1, 1, 3, 3), np.float32), ConvSpec(1, 1, padding=1))
    expected = np.array([[4, 6, 6, 4], [6, 9, 9, 6], [6, 9, 9, 6], [4, 6, 6, 4]], dtype=np.float32)
    assert np.array_equal(y[0, 0], expected)


def test_conv_output_shape_stride2():
    spec = ConvSpec(3, 32, stride=2, padding=1)
    x = Tensor(np.zeros((2, 3, 256, 256), np.float32))
    w = Tensor(np.zeros(spec.weight_shape, np.float32))
    assert ops.conv2d(x, w, None, spec).shape == (2, 32, 128, 128)


def test_conv_is_cross_correlation():
    x = np.zeros((1, 1, 3, 3), np.float32)
    x[0, 0, 0, 0] = 1
    w = np.arange(9, dtype=np.float32).reshape(1, 1, 3, 3)
    # a flip would put w[0,0] at the bottom-right output
    y = conv(x, w, ConvSpec(1, 1, padding=1))
    assert y[0, 0, 0, 0] == w[0, 0, 1, 1]
    assert y[0, 0, 1, 1] == w[0, 0, 0, 0]


@pytest.mark.parametrize("spec", [
    ConvSpec(3, 4, padding=1),
    ConvSpec(4, 6, 3, 2, stride=2, padding=1, groups=2),
    ConvSpec(2, 3, dilation=2, padding=2, has_bias=True),
    ConvSpec.depthwise(4, dilation=3),
    ConvSpec(4, 4, 1, 1, stride=2),
])
def test_conv_matches_direct_loops(spec, rng):
    x = rng.standard_normal((2, spec.in_channels, 7, 8)).astype(np.float32)
    w = rng.standard_normal(spec.weight_shape).astype(np.float32)
    b = rng.standard_normal(spec.out_channels).astype(np.float32) if spec.has_bias else None
    y = conv(x, w, spec, b)
    ref = direct_conv(x, w, spec.stride, spec.padding, spec.dilation, spec.groups)
    if b is not None:
        ref += b[None, :, None, None]
    np.testing.assert_allclose(y, ref, rtol=1e-5, atol=1e-5)


def test_conv_channel_mismatch_names_dimension():
    spec = ConvSpec(3, 4)
    with pytest.raises(ShapeError) as exc:
        ops.conv2d(Tensor(np.zeros((1, 2, 5, 5))), Tensor(np.zeros(spec.weight_shape)), None, spec)
    assert exc.value.dim == "channels" and exc.value.expected == 3 and exc.value.got == 2


def test_conv_bad_weight_and_bias_shapes():
    spec = ConvSpec(2, 2, has_bias=True)
    x = Tensor(np.zeros((1, 2, 5, 5)))
    with pytest.raises(ShapeError) as exc:
        ops.conv2d(x, Tensor(np.zeros((2, 2, 1, 1))), Tensor(np.zeros(2)), spec)
    assert exc.value.dim == "weight"
    with pytest.raises(ShapeError) as exc:
        ops.conv2d(x, Tensor(np.zeros(spec.weight_shape)), None, spec)
    assert exc.value.dim == "bias"


def test_conv_non_positive_output_is_structured_error():
    spec = ConvSpec(1, 1, 5, 5)
    with pytest.raises(ShapeError) as exc:
        ops.conv2d(Tensor(np.zeros((1, 1, 3, 3))), Tensor(np.zeros(spec.weight_shape)), None, spec)
    assert exc.value.dim == "output"


def test_convspec_validation():
    with pytest.raises(ValueError):
        ConvSpec(3, 4, groups=2)
    with pytest.raises(ValueError):
        ConvSpec(4, 4, dilation=0)
    with pytest.raises(ValueError):
        ConvSpec(4, 4, stride=0)
    assert ConvSpec.depthwise(8).is_depthwise


def test_conv2d_sum_gradient_counts_valid_positions():
    spec = ConvSpec(1, 1, padding=1)
    x = Tensor(np.ones((1, 1, 4, 5)))
    w = Tensor(np.zeros((1, 1, 3, 3)))
    with Tape() as tape:
        y = ops.sum_all(ops.conv2d(x, w, None, spec))
    gw = tape.backward(y)[w][0, 0]
    # tap (i, j) sees an in-bounds pixel for every output whose shifted index stays inside
    for i in range(3):
        for j in range(3):
            rows = sum(1 for r in range(4) if 0 <= r + i - 1 < 4)
            cols = sum(1 for c in range(5) if 0 <= c + j - 1 < 5)
            assert gw[i, j] == rows * cols


# ---------------------------------------------------------------- depthwise

def test_depthwise_scales_each_channel(rng):
    x = rng.standard_normal((1, 2, 4, 4)).astype(np.float32)
    spec = ConvSpec.depthwise(2, kernel=1)
    y = ops.depthwise_conv2d(Tensor(x), Tensor(np.array([1.0, 2.0], np.float32).reshape(2, 1, 1, 1)), None, spec).data
    assert np.array_equal(y[0, 0], x[0, 0])
    assert np.array_equal(y[0, 1], 2 * x[0, 1])


def test_depthwise_requires_groups_equal_channels():
    with pytest.raises(ShapeError):
        ops.depthwise_conv2d(Tensor(np.zeros((1, 4, 4, 4))), Tensor(np.zeros((4, 2, 3, 3))), None,
                             ConvSpec(4, 4, groups=2))


def test_depthwise_mac_ratio_example():
    dw = ConvSpec.depthwise(64)
    std = ConvSpec(64, 64, padding=1)
    assert dw.macs(32, 32) == 589_824
    assert std.macs(32, 32) == 37_748_736
    assert std.macs(32, 32) == 64 * dw.macs(32, 32)


@settings(max_examples=30, deadline=None)
@given(c=st.integers(1, 4), k=st.sampled_from([1, 3]), stride=st.integers(1, 2), dil=st.integers(1, 3),
       seed=st.integers(0, 2**16))
def test_depthwise_equals_block_diagonal_dense(c, k, stride, dil, seed):
    rng = np.random.default_rng(seed)
    pad = dil * (k - 1) // 2
    x = rng.standard_normal((2, c, 8, 8)).astype(np.float32)
    wdw = rng.standard_normal((c, 1, k, k)).astype(np.float32)
    dense = np.zeros((c, c, k, k), np.float32)
    for i in range(c):
        dense[i, i] = wdw[i, 0]
    a = conv(x, wdw, ConvSpec.depthwise(c, k, stride, dil, pad))
    b = conv(x, dense, ConvSpec(c, c, k, k, stride, pad, dil))
    np.testing.assert_allclose(a, b, rtol=1e-6, atol=1e-6)


def test_grouped_conv_with_groups_equal_channels_is_depthwise_bitwise(rng):
    x = rng.standard_normal((2, 3, 8, 8)).astype(np.float32)
    w = rng.standard_normal((3, 1, 3, 3)).astype(np.float32)
    spec = ConvSpec(3, 3, padding=2, dilation=2, groups=3)
    a = ops.conv2d(Tensor(x), Tensor(w), None, spec).data
    b = ops.depthwise_conv2d(Tensor(x), Tensor(w), None, ConvSpec.depthwise(3, dilation=2)).data
    assert np.array_equal(a, b)


def test_dilated_kernel_on_constant_interior(rng):
    w = rng.standard_normal((1, 1, 3, 3)).astype(np.float32)
    y = conv(np.full((1, 1, 9, 9), 5.0, np.float32), w, ConvSpec(1, 1, dilation=2, padding=2))
    # interior: all taps land inside the image
    np.testing.assert_allclose(y[0, 0, 2:-2, 2:-2], 5.0 * w.sum(), rtol=1e-5)


@settings(max_examples=25, deadline=None)
@given(d=st.integers(2, 3), k=st.sampled_from([2, 3]), cin=st.integers(1, 3), cout=st.integers(1, 3),
       stride=st.integers(1, 2), seed=st.integers(0, 2**16))
def test_dilation_equals_zero_expanded_kernel(d, k, cin, cout, stride, seed):
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((1, cin, 8, 8)).astype(np.float32)
    w = rng.standard_normal((cout, cin, k, k)).astype(np.float32)
    big = d * (k - 1) + 1
    wz = np.zeros((cout, cin, big, big), np.float32)
    wz[:, :, ::d, ::d] = w
    pad = (big - 1) // 2
    a = conv(x, w, ConvSpec(cin, cout, k, k, stride, pad, d))
    b = conv(x, wz, ConvSpec(cin, cout, big, big, stride, pad, 1))
    assert np.linalg.norm(a - b) <= 1e-5 * max(np.linalg.norm(b), 1e-12)


# ---------------------------------------------------------------- batch norm

def bn(x, gamma, beta, mean, var, training):
    return ops.batch_norm(Tensor(x), Tensor(gamma), Tensor(beta), mean, var, training).data


def test_bn_eval_with_unit_stats_is_near_identity(rng):
    x = rng.standard_normal((2, 3, 4, 4)).astype(np.float32)
    y = bn(x, np.ones(3), np.zeros(3), np.zeros(3), np.ones(3), False)
    np.testing.assert_allclose(y, x / np.sqrt(1 + ops.BN_EPS), rtol=1e-6)
    np.testing.assert_allclose(y, x, rtol=1e-5)


def test_bn_training_standardises_per_channel(rng):
    x = (rng.standard_normal((4, 3, 5, 5)) * 7 + 3).astype(np.float32)
    y = bn(x, np.ones(3), np.zeros(3), np.zeros(3), np.ones(3), True).astype(np.float64)
    np.testing.assert_allclose(y.mean(axis=(0, 2, 3)), 0, atol=1e-4)
    np.testing.assert_allclose(y.var(axis=(0, 2, 3)), 1, atol=1e-4)


def test_bn_affine_on_standardised_input(rng):
    x = rng.standard_normal((2, 2, 3, 3))
    xhat = (x - x.mean(axis=(0, 2, 3), keepdims=True)) / np.sqrt(x.var(axis=(0, 2, 3), keepdims=True) + ops.BN_EPS)
    y = bn(x, np.full(2, 2.0), np.full(2, 3.0), np.zeros(2), np.ones(2), True)
    np.testing.assert_allclose(y, 2 * xhat + 3, rtol=1e-10)


def test_bn_running_stats_update(rng):
    x = rng.standard_normal((2, 2, 3, 3))
    mean, var = np.zeros(2), np.ones(2)
    bn(x, np.ones(2), np.zeros(2), mean, var, True)
    m = 0.1
    np.testing.assert_allclose(mean, m * x.mean(axis=(0, 2, 3)))
    np.testing.assert_allclose(var, (1 - m) + m * x.var(axis=(0, 2, 3), ddof=1))


def test_bn_channel_mismatch():
    with pytest.raises(ShapeError):
        bn(np.zeros((1, 3, 2, 2)), np.ones(2), np.zeros(2), np.zeros(2), np.ones(2), False)


# ---------------------------------------------------------------- activations, pooling, resampling

def scalar(v):
    return Tensor(np.array(v, dtype=np.float32).reshape(1, 1, 1, -1))


def test_activation_examples():
    assert ops.activation(scalar([0.0]), "sigmoid").data.item() == 0.5
    np.testing.assert_array_equal(ops.activation(scalar([-3.2, 3.2]), "relu").data.ravel(), np.float32([0.0, 3.2]))
    assert ops.activation(scalar([-4.0]), "prelu", 0.25).data.item() == -1.0
    with pytest.raises(ValueError):
        ops.activation(scalar([0.0]), "tanh")


@given(st.lists(st.floats(-1e4, 1e4, allow_nan=False), min_size=1, max_size=20))
def test_sigmoid_strictly_inside_unit_interval(vals):
    s = ops.sigmoid(scalar(vals)).data
    assert np.all(s > 0) and np.all(s < 1)


def test_prelu_per_channel_slope():
    x = Tensor(np.array([-2.0, -2.0], np.float32).reshape(1, 2, 1, 1))
    y = ops.prelu(x, Tensor(np.array([0.5, 0.1], np.float32)))
    np.testing.assert_allclose(y.data.ravel(), [-1.0, -0.2], rtol=1e-6)


def test_global_avg_pool_examples(rng):
    assert np.all(ops.global_avg_pool(Tensor(np.full((1, 2, 3, 3), 4.5))).data == 4.5)
    x = Tensor(np.array([1.0, 2.0, 3.0, 4.0]).reshape(1, 1, 2, 2))
    assert ops.global_avg_pool(x).data.item() == 2.5
    assert ops.global_avg_pool(Tensor(rng.random((2, 64, 32, 32)))).shape == (2, 64, 1, 1)
    with pytest.raises(ShapeError):
        ops.global_avg_pool(Tensor(np.zeros((1, 1, 0, 3))))


@given(v=st.floats(-100, 100), c=st.integers(1, 3), h=st.integers(1, 5))
def test_global_avg_pool_of_constant(v, c, h):
    out = ops.global_avg_pool(Tensor(np.full((1, c, h, h + 1), v), dtype=np.float64)).data
    np.testing.assert_allclose(out, v, rtol=1e-12, atol=1e-12)


def test_upsample_examples():
    const = ops.upsample_bilinear(Tensor(np.full((1, 2, 3, 4), 7.0)), 3).data
    assert const.shape == (1, 2, 9, 12) and np.allclose(const, 7.0)
    assert np.all(ops.upsample_bilinear(Tensor(np.full((1, 1, 1, 1), 2.5)), 2).data == 2.5)
    row = ops.upsample_bilinear(Tensor(np.array([0.0, 1.0]).reshape(1, 1, 1, 2)), 2).data[0, 0, 0]
    np.testing.assert_allclose(row, [0.0, 0.25, 0.75, 1.0])


def test_upsample_rejects_bad_scale():
    for s in (1, 0, 2.5):
        with pytest.raises(ValueError):
            ops.upsample_bilinear(Tensor(np.zeros((1, 1, 2, 2))), s)


# ---------------------------------------------------------------- concat / abs_diff / add

def test_concat_and_abs_diff_examples(rng):
    a = Tensor(rng.random((1, 2, 4, 4)))
    b = Tensor(rng.random((1, 3, 4, 4)))
    assert ops.concat_channels([a, b]).shape == (1, 5, 4, 4)
    assert np.all(ops.abs_diff(a, a).data == 0)
    d = ops.abs_diff(scalar([1.0, -2.0]), scalar([-1.0, 2.0])).data.ravel()
    assert list(d) == [2.0, 4.0]


def test_shape_mismatch_errors():
    with pytest.raises(ShapeError):
        ops.concat_channels([Tensor(np.zeros((1, 1, 4, 4))), Tensor(np.zeros((1, 1, 4, 5)))])
    with pytest.raises(ShapeError):
        ops.abs_diff(Tensor(np.zeros((1, 1, 2, 2))), Tensor(np.zeros((1, 2, 2, 2))))
    with pytest.raises(ShapeError):
        ops.add(Tensor(np.zeros((1, 1, 2, 2))), Tensor(np.zeros((1, 1, 2, 3))))


@given(chans=st.lists(st.integers(1, 4), min_size=1, max_size=4), seed=st.integers(0, 1000))
def test_concat_then_slice_recovers_inputs(chans, seed):
    rng = np.random.default_rng(seed)
    parts = [Tensor(rng.standard_normal((2, c, 3, 3))) for c in chans]
    cat = ops.concat_channels(parts)
    start = 0
    for p in parts:
        back = ops.slice_channels(cat, start, start + p.shape[1])
        assert np.array_equal(back.data, p.data)
        start += p.shape[1]


# ---------------------------------------------------------------- backward

def test_sigmoid_gradient_at_zero():
    x = scalar([0.0])
    with Tape() as tape:
        y = ops.sigmoid(x)
    assert tape.backward(y, np.ones(y.shape))[x].item() == 0.25


def test_add_passes_seed_to_both_parents(rng):
    a, b = Tensor(rng.random((1, 2, 3, 3))), Tensor(rng.random((1, 2, 3, 3)))
    seed = rng.standard_normal((1, 2, 3, 3)).astype(np.float32)
    with Tape() as tape:
        y = ops.add(a, b)
    g = tape.backward(y, seed)
    assert np.array_equal(g[a], seed) and np.array_equal(g[b], seed)


def test_backward_twice_raises():
    x = scalar([1.0])
    with Tape() as tape:
        y = ops.relu(x)
    tape.backward(y)
    with pytest.raises(GraphConsumedError):
        tape.backward(y)


def test_seed_shape_mismatch():
    x = scalar([1.0, 2.0])
    with Tape() as tape:
        y = ops.relu(x)
    with pytest.raises(ShapeError):
        tape.backward(y, np.ones((1, 1, 1, 3)))


def test_gradient_shapes_match_primals(rng):
    spec = ConvSpec(2, 3, stride=2, padding=1, has_bias=True)
    x, w, b = Tensor(rng.random((2, 2, 6, 6))), Tensor(rng.random(spec.weight_shape)), Tensor(rng.random(3))
    with Tape() as tape:
        y = ops.conv2d(x, w, b, spec)
    g = tape.backward(y)
    for t in (x, w, b):
        assert g[t].shape == t.shape


def test_reused_input_accumulates(rng):
    x = Tensor(rng.random((1, 1, 2, 2)))
    with Tape() as tape:
        y = ops.add(x, x)
    assert np.allclose(tape.backward(y)[x], 2.0)


def away_from_zero(rng, shape, margin=0.05):
    v = rng.standard_normal(shape)
    return v + np.sign(v) * margin


GRAD_CASES = {
    "conv_standard": lambda r: (lambda x, w: ops.conv2d(x, w, None, ConvSpec(3, 2, padding=1)),
                                [r.standard_normal((2, 3, 5, 5)), r.standard_normal((2, 3, 3, 3))]),
    "conv_strided_bias": lambda r: (lambda x, w, b: ops.conv2d(x, w, b, ConvSpec(2, 4, 3, 2, stride=2, padding=1,
                                                                                     has_bias=True)),
                                    [r.standard_normal((1, 2, 7, 6)), r.standard_normal((4, 2, 3, 2)),
                                     r.standard_normal(4)]),
    "conv_dilated": lambda r: (lambda x, w: ops.conv2d(x, w, None, ConvSpec(2, 2, padding=2, dilation=2)),
                               [r.standard_normal((1, 2, 6, 6)), r.standard_normal((2, 2, 3, 3))]),
    "conv_grouped": lambda r: (lambda x, w: ops.conv2d(x, w, None, ConvSpec(4, 4, padding=1, groups=2)),
                               [r.standard_normal((1, 4, 5, 5)), r.standard_normal((4, 2, 3, 3))]),
    "conv_depthwise": lambda r: (lambda x, w: ops.depthwise_conv2d(x, w, None, ConvSpec.depthwise(3, stride=2,
                                                                                                   dilation=2)),
                                 [r.standard_normal((2, 3, 8, 8)), r.standard_normal((3, 1, 3, 3))]),
    "bn_train": lambda r: (lambda x, g, b: ops.batch_norm(x, g, b, np.zeros(3), np.ones(3), True),
                           [r.standard_normal((2, 3, 3, 3)), r.standard_normal(3), r.standard_normal(3)]),
    "bn_eval": lambda r: (lambda x, g, b: ops.batch_norm(x, g, b, np.full(3, 0.2), np.full(3, 1.5), False),
                          [r.standard_normal((2, 3, 3, 3)), r.standard_normal(3), r.standard_normal(3)]),
    "relu": lambda r: (ops.relu, [away_from_zero(r, (1, 2, 4, 4))]),
    "prelu_scalar": lambda r: (lambda x: ops.prelu(x, 0.25), [away_from_zero(r, (1, 2, 4, 4))]),
    "prelu_channel": lambda r: (ops.prelu, [away_from_zero(r, (2, 3, 3, 3)), r.random(3)]),
    "sigmoid": lambda r: (ops.sigmoid, [r.standard_normal((1, 2, 4, 4)) * 3]),
    "global_avg_pool": lambda r: (ops.global_avg_pool, [r.standard_normal((2, 3, 4, 5))]),
    "upsample": lambda r: (lambda x: ops.upsample_bilinear(x, 2), [r.standard_normal((1, 2, 3, 4))]),
    "concat": lambda r: (lambda a, b: ops.concat_channels([a, b]),
                         [r.standard_normal((1, 2, 3, 3)), r.standard_normal((1, 1, 3, 3))]),
    "slice": lambda r: (lambda x: ops.slice_channels(x, 1, 3), [r.standard_normal((1, 4, 3, 3))]),
    "abs_diff": lambda r: (ops.abs_diff, [away_from_zero(r, (1, 2, 3, 3)), np.zeros((1, 2, 3, 3))]),
    "add": lambda r: (ops.add, [r.standard_normal((1, 2, 3, 3)), r.standard_normal((1, 2, 3, 3))]),
    "mul_broadcast": lambda r: (ops.mul, [r.standard_normal((2, 3, 4, 4)), r.standard_normal((2, 3, 1, 1))]),
    "sum_all": lambda r: (ops.sum_all, [r.standard_normal((1, 2, 3, 3))]),
}


@pytest.mark.parametrize("case", sorted(GRAD_CASES))
def test_gradients_match_finite_differences(case):
    worst = 0.0
    for seed in range(20):
        rng = np.random.default_rng(seed)
        fn, arrays = GRAD_CASES[case](rng)
        worst = max(worst, gradcheck(fn, [t64(a) for a in arrays], rng))
    assert worst <= 1e-3, f"{case}: relative error {worst:.2e}"
