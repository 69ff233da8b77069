import numpy as np
import pytest

from cheapnet.layers import (BatchNorm, CheapConv, Conv, ConvSpec, Linear, ShiftSpec, avgpool2, batchnorm,
                             conv_depthwise, conv_group, conv_pointwise, conv_shift, conv_standard, fc, gap,
                             make_conv)
from cheapnet.tensor import Parameter, ShapeError, Tensor, tsum

from helpers import (check_grads, check_module_grads, naive_conv, naive_depthwise, naive_shift,
                     random_conv_case)


@pytest.mark.parametrize("seed", range(200))
def test_conv_matches_naive_loops(seed):
    rng, kind, k, stride, pad, groups, c_in, c_out, x = random_conv_case(seed)
    spec = ConvSpec(kind, k, c_in, c_out, groups=groups if kind != "depthwise" else c_in, stride=stride,
                    padding=pad)
    if kind == "standard":
        w = rng.standard_normal((c_out, c_in, k, k))
        got, want = conv_standard(Tensor(x), Tensor(w), spec).data, naive_conv(x, w, stride, pad)
    elif kind == "group":
        w = rng.standard_normal((c_out, c_in // groups, k, k))
        got, want = conv_group(Tensor(x), Tensor(w), spec).data, naive_conv(x, w, stride, pad, groups)
    elif kind == "depthwise":
        w = rng.standard_normal((c_in, k, k))
        got, want = conv_depthwise(Tensor(x), Tensor(w), spec).data, naive_depthwise(x, w, stride, pad)
    else:
        offsets = tuple((int(rng.integers(1, k + 1)), int(rng.integers(1, k + 1))) for _ in range(c_in))
        got = conv_shift(Tensor(x), spec, ShiftSpec(k, offsets)).data
        want = naive_shift(x, offsets, k, stride, pad)
    assert got.shape == want.shape
    np.testing.assert_allclose(got, want, atol=1e-5, rtol=0)


@pytest.mark.parametrize("seed", range(10))
def test_group_one_is_standard_exactly(seed):
    rng = np.random.default_rng(seed)
    x, w = rng.standard_normal((2, 4, 6, 6)), rng.standard_normal((5, 4, 3, 3))
    std = conv_standard(Tensor(x), Tensor(w), ConvSpec("standard", 3, 4, 5, padding=1)).data
    grp = conv_group(Tensor(x), Tensor(w), ConvSpec("group", 3, 4, 5, groups=1, padding=1)).data
    np.testing.assert_array_equal(std, grp)


def _depthwise_vs_group(x, w):
    c = x.shape[1]
    dw = conv_depthwise(Tensor(x), Tensor(w), ConvSpec("depthwise", 3, c, c, groups=c, padding=1)).data
    grp = conv_group(Tensor(x), Tensor(w[:, None]), ConvSpec("group", 3, c, c, groups=c, padding=1)).data
    return dw, grp


@pytest.mark.parametrize("seed", range(10))
def test_depthwise_is_group_with_one_channel_per_group(seed):
    # Integer-valued operands make every partial sum exact, so the two code paths
    # (direct loop vs. im2col + matmul) must agree bit for bit despite summing in
    # different orders.
    rng = np.random.default_rng(seed)
    x, w = rng.integers(-8, 9, (2, 4, 5, 5)).astype(float), rng.integers(-8, 9, (4, 3, 3)).astype(float)
    dw, grp = _depthwise_vs_group(x, w)
    np.testing.assert_array_equal(dw, grp)
    x, w = rng.standard_normal((2, 4, 5, 5)), rng.standard_normal((4, 3, 3))
    dw, grp = _depthwise_vs_group(x, w)
    np.testing.assert_allclose(dw, grp, rtol=0, atol=1e-12)


@pytest.mark.parametrize("seed", range(10))
@pytest.mark.parametrize("k", [3, 5])
def test_shift_is_depthwise_with_one_hot_kernels(seed, k):
    rng = np.random.default_rng(seed)
    c = 7
    x = rng.standard_normal((2, c, 6, 6))
    spec = ConvSpec("shift", k, c, c, padding=k // 2)
    shifts = ShiftSpec.round_robin(c, k)
    got = conv_shift(Tensor(x), spec, shifts).data
    dspec = ConvSpec("depthwise", k, c, c, groups=c, padding=k // 2)
    want = conv_depthwise(Tensor(x), Tensor(shifts.one_hot_kernels()), dspec).data
    np.testing.assert_array_equal(got, want)


def test_one_by_one_kernel_scales_input():
    x = np.array([[[[3.5]]]])
    out = conv_standard(Tensor(x), Tensor(np.array([[[[2.0]]]])), ConvSpec("standard", 1, 1, 1)).data
    np.testing.assert_array_equal(out, 2 * x)


def test_shift_center_offset_is_identity():
    x = np.random.default_rng(0).standard_normal((1, 2, 4, 4))
    out = conv_shift(Tensor(x), ConvSpec("shift", 3, 2, 2, padding=1), ShiftSpec(3, ((2, 2), (2, 2)))).data
    np.testing.assert_array_equal(out, x)


def test_round_robin_assigns_cells_cyclically():
    s = ShiftSpec.round_robin(11, 3)
    assert s.offsets[0] == (1, 1) and s.offsets[4] == (2, 2) and s.offsets[8] == (3, 3)
    assert s.offsets[9] == (1, 1) and s.offsets[10] == (1, 2)
    assert list(s.cells) == [c % 9 for c in range(11)]


@pytest.mark.parametrize("offset", [(0, 1), (1, 4), (4, 4)])
def test_shift_offsets_validated(offset):
    with pytest.raises(ValueError, match="outside"):
        ShiftSpec(3, (offset,))


@pytest.mark.parametrize("kwargs", [dict(kind="bogus", kernel_size=3, in_channels=4, out_channels=4),
                                    dict(kind="group", kernel_size=3, in_channels=6, out_channels=4, groups=4),
                                    dict(kind="standard", kernel_size=0, in_channels=4, out_channels=4),
                                    dict(kind="pointwise", kernel_size=3, in_channels=4, out_channels=4)])
def test_convspec_rejects_invalid(kwargs):
    with pytest.raises(ValueError):
        ConvSpec(**kwargs)


def test_kernel_larger_than_input_is_shape_error():
    with pytest.raises(ShapeError):
        ConvSpec("standard", 5, 1, 1).out_size(3, 3)


def test_channel_mismatch_is_shape_error():
    with pytest.raises(ShapeError, match="channels"):
        conv_standard(Tensor(np.ones((1, 3, 4, 4))), Tensor(np.ones((2, 4, 3, 3))), ConvSpec("standard", 3, 4, 2))


# -- gradient checks -------------------------------------------------------------
def _weighted_sum(out, rng):
    return tsum(out * Tensor(rng.standard_normal(out.shape)))


def _projected(fn, rng):
    """Scalar <fn(*args), R> with a fixed random projection R (built on first call)."""
    proj = []

    def f(*args):
        out = fn(*args)
        if not proj:
            proj.append(Tensor(rng.standard_normal(out.shape)))
        return tsum(out * proj[0])

    return f


@pytest.mark.parametrize("seed", range(10))
@pytest.mark.parametrize("kind", ["standard", "group", "depthwise", "shift", "pointwise"])
def test_conv_gradients(kind, seed):
    rng = np.random.default_rng(seed)
    stride = 1 + seed % 2
    c = 4
    x = rng.standard_normal((2, c, 5, 5))
    if kind == "pointwise":
        w = rng.standard_normal((6, c))
        assert check_grads(_projected(lambda a, b: conv_pointwise(a, b, stride), rng), [x, w]) < 1e-4
        return
    if kind == "shift":
        spec = ConvSpec("shift", 3, c, c, stride=stride, padding=1)
        shifts = ShiftSpec.round_robin(c, 3)
        assert check_grads(_projected(lambda a: conv_shift(a, spec, shifts), rng), [x]) < 1e-4
        return
    if kind == "standard":
        spec, w = ConvSpec("standard", 3, c, 6, stride=stride, padding=1), rng.standard_normal((6, c, 3, 3))
        fn = conv_standard
    elif kind == "group":
        spec, w = ConvSpec("group", 3, c, 6, groups=2, stride=stride, padding=1), rng.standard_normal((6, 2, 3, 3))
        fn = conv_group
    else:
        spec, w = ConvSpec("depthwise", 3, c, c, groups=c, stride=stride, padding=1), rng.standard_normal((c, 3, 3))
        fn = conv_depthwise
    assert check_grads(_projected(lambda a, b: fn(a, b, spec), rng), [x, w]) < 1e-4


@pytest.mark.parametrize("seed", range(10))
@pytest.mark.parametrize("training", [True, False])
def test_batchnorm_gradients(seed, training):
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((3, 2, 3, 3)) * 2 + 1
    gamma, beta = rng.standard_normal(2), rng.standard_normal(2)
    w = rng.standard_normal(x.shape)
    rm, rv = rng.standard_normal(2), rng.uniform(0.5, 2, 2)

    def f(a, g, b):
        return tsum(batchnorm(a, g, b, rm.copy(), rv.copy(), training) * Tensor(w))

    assert check_grads(f, [x, gamma, beta]) < 1e-4


@pytest.mark.parametrize("seed", range(10))
def test_pool_and_fc_gradients(seed):
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((2, 3, 5, 4))
    w = rng.standard_normal((2, 3, 2, 2))
    assert check_grads(lambda a: tsum(avgpool2(a) * Tensor(w)), [x]) < 1e-4
    wg = rng.standard_normal((2, 3))
    assert check_grads(lambda a: tsum(gap(a) * Tensor(wg)), [x]) < 1e-4
    f, W, b = rng.standard_normal((2, 3)), rng.standard_normal((4, 3)), rng.standard_normal(4)
    wf = rng.standard_normal((2, 4))
    assert check_grads(lambda a, p, q: tsum(fc(a, p, q) * Tensor(wf)), [f, W, b]) < 1e-4


@pytest.mark.parametrize("seed", range(10))
@pytest.mark.parametrize("kind", ["group", "depthwise", "shift"])
def test_cheap_pair_module_gradients(kind, seed):
    rng = np.random.default_rng(seed)
    m = CheapConv(kind, 4, 6, 3, 1 + seed % 2, groups=2, rng=rng, dtype=np.float64)
    x = Tensor(rng.standard_normal((2, 4, 4, 4)))
    loss = _projected(lambda: m(x), rng)
    assert check_module_grads(loss, m.parameters()) < 1e-4


# -- batch norm semantics ----------------------------------------------------------
def test_batchnorm_identity_on_normalized_input():
    # balanced +-1 entries: per-channel mean 0 and variance 1 exactly
    rng = np.random.default_rng(0)
    x = np.stack([rng.permutation(np.repeat([-1.0, 1.0], 64)).reshape(8, 4, 4) for _ in range(3)], axis=1)
    bn = BatchNorm(3, np.float64)
    out = bn(Tensor(x)).data
    assert np.max(np.abs(out - x)) < 1e-5


def test_batchnorm_running_stats_use_momentum_and_unbiased_variance():
    x = np.arange(16, dtype=np.float64).reshape(2, 2, 2, 2)
    bn = BatchNorm(2, np.float64)
    bn(Tensor(x))
    vals = x.transpose(1, 0, 2, 3).reshape(2, -1)
    np.testing.assert_allclose(bn.running_mean, 0.1 * vals.mean(axis=1))
    np.testing.assert_allclose(bn.running_var, 0.9 + 0.1 * vals.var(axis=1, ddof=1))


def test_batchnorm_eval_uses_running_stats():
    bn = BatchNorm(1, np.float64).eval()
    bn.running_mean[:] = 2.0
    bn.running_var[:] = 4.0
    out = bn(Tensor(np.full((1, 1, 1, 1), 6.0))).data
    assert out.item() == pytest.approx(4.0 / np.sqrt(4.0 + 1e-5))


# -- modules --------------------------------------------------------------------
def test_he_init_scale():
    rng = np.random.default_rng(0)
    conv = Conv(ConvSpec("standard", 3, 64, 128, padding=1), rng, np.float64)
    assert conv.weight.data.std() == pytest.approx(np.sqrt(2 / (64 * 9)), rel=0.05)
    lin = Linear(256, 100, rng, np.float64)
    assert lin.weight.data.std() == pytest.approx(np.sqrt(1 / 256), rel=0.05)


@pytest.mark.parametrize("kind,params", [("standard", 6 * 4 * 9), ("group", 4 * 2 * 9 + 4 * 6),
                                         ("depthwise", 4 * 9 + 4 * 6), ("shift", 4 * 6)])
def test_make_conv_parameter_counts(kind, params):
    m = make_conv(kind, 4, 6, 3, 1, np.random.default_rng(0), groups=2)
    assert m.num_parameters() == params


def test_strided_cheap_pair_output_shape():
    m = make_conv("shift", 4, 8, 3, 2, np.random.default_rng(0))
    assert m(Tensor(np.ones((1, 4, 7, 7), np.float32))).shape == (1, 8, 4, 4)


def test_state_dict_round_trip_and_shape_check():
    rng = np.random.default_rng(0)
    a, b = BatchNorm(3), BatchNorm(3)
    a.gamma.data[:] = 5
    a.running_var[:] = 7
    b.load_state_dict(a.state_dict())
    assert b.gamma.data[0] == 5 and b.running_var[0] == 7
    with pytest.raises(ShapeError):
        BatchNorm(4).load_state_dict(a.state_dict())
    with pytest.raises(KeyError):
        b.load_state_dict({})
    assert isinstance(Linear(2, 2, rng).weight, Parameter)
