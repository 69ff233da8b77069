import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from cheapnet import tensor as T
from cheapnet.tensor import Parameter, ShapeError, Tape, Tensor, no_grad

from helpers import check_grads


def test_sum_gives_all_ones_gradient():
    w = Tensor(np.arange(6.0).reshape(2, 3), requires_grad=True)
    w.sum().backward()
    np.testing.assert_array_equal(w.grad, np.ones((2, 3)))


def test_half_sum_of_squares_gives_identity_gradient():
    w = Tensor(np.array([1.5, -2.0, 0.25]), requires_grad=True)
    (T.tsum(w * w) * 0.5).backward()
    np.testing.assert_allclose(w.grad, w.data)


def test_backward_needs_scalar_root():
    w = Tensor(np.ones(3), requires_grad=True)
    with pytest.raises(ValueError, match="scalar"):
        (w * 2).backward()


def test_shared_subexpression_accumulates():
    # y = x*x + x*x uses x four times; dy/dx = 4x
    x = Tensor(np.array([3.0]), requires_grad=True)
    a = x * x
    (a + a).sum().backward()
    np.testing.assert_allclose(x.grad, [12.0])


def test_tape_is_topologically_ordered():
    x = Tensor(np.ones(2), requires_grad=True)
    y = T.exp(x)
    z = (y * x + y).sum()
    tape = Tape.from_root(z)
    pos = {id(n): i for i, n in enumerate(tape.nodes)}
    for n in tape.nodes:
        for p in n._parents:
            assert pos[id(p)] < pos[id(n)]
    assert tape.nodes[-1] is z


def test_deep_chain_does_not_recurse():
    x = Tensor(np.ones(1), requires_grad=True)
    y = x
    for _ in range(5000):
        y = y * 1.0
    y.sum().backward()
    assert x.grad[0] == 1.0


def test_no_grad_records_nothing():
    x = Tensor(np.ones(2), requires_grad=True)
    with no_grad():
        y = x * 2
    assert not y.requires_grad and y._parents == ()


def test_parameter_grads_accumulate_until_zeroed():
    p = Parameter(np.array([1.0, 2.0]))
    (p * 3).sum().backward()
    (p * 3).sum().backward()
    np.testing.assert_allclose(p.grad, [6.0, 6.0])
    p.zero_grad()
    np.testing.assert_array_equal(p.grad, [0.0, 0.0])


@pytest.mark.parametrize("a,b,out", [((2, 3), (2, 3), (2, 3)), ((2, 3), (1, 3), (2, 3)),
                                     ((4, 1, 5), (4, 3, 1), (4, 3, 5)), ((2, 3), (), (2, 3))])
def test_broadcast_shape(a, b, out):
    assert T.broadcast_shape(a, b) == out


@pytest.mark.parametrize("a,b", [((2, 3), (3,)), ((2, 3), (2, 4)), ((2, 3, 1), (2, 3))])
def test_broadcast_rejects_rank_or_size_mismatch(a, b):
    with pytest.raises(ShapeError) as exc:
        T.broadcast_shape(a, b)
    assert str(a) in str(exc.value) and str(b) in str(exc.value)


def test_matmul_shape_error_names_shapes():
    with pytest.raises(ShapeError, match=r"\(2, 3\).*\(4, 2\)"):
        T.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((4, 2))))


def test_concat_rejects_spatial_mismatch():
    with pytest.raises(ShapeError):
        T.concat_channels([Tensor(np.ones((1, 2, 4, 4))), Tensor(np.ones((1, 2, 3, 4)))])


BINARY = {
    "add": T.add, "sub": T.sub, "mul": T.mul,
    "div": lambda a, b: T.div(a, b * b + 1.0),
}
UNARY = {
    "exp": T.exp, "neg": T.neg, "square": lambda a: T.power(a, 2),
    "log": lambda a: T.log(a * a + 0.5), "sqrt": lambda a: T.sqrt(a * a + 0.5),
    "relu": T.relu, "clamp_min": lambda a: T.clamp_min(a, 0.1),
    "log_softmax": T.log_softmax, "softmax": T.softmax, "row_norm": T.row_norm,
    "mean_axis0": lambda a: T.mean(a, axis=0), "reshape": lambda a: T.reshape(a, (a.size,)),
    "index": lambda a: T.index(a, (slice(None), [0, 2, 0])),
}


def _weighted(out, rng):
    w = rng.standard_normal(out.shape)
    return T.tsum(out * Tensor(w))


@pytest.mark.parametrize("seed", range(10))
@pytest.mark.parametrize("name", sorted(BINARY))
def test_binary_op_gradients(name, seed):
    rng = np.random.default_rng(seed)
    a, b = rng.standard_normal((3, 4)), rng.standard_normal((1, 4))
    w = rng.standard_normal((3, 4))
    assert check_grads(lambda x, y: T.tsum(BINARY[name](x, y) * Tensor(w)), [a, b]) < 1e-4


@pytest.mark.parametrize("seed", range(10))
@pytest.mark.parametrize("name", sorted(UNARY))
def test_unary_op_gradients(name, seed):
    rng = np.random.default_rng(seed)
    a = rng.standard_normal((3, 4))
    a[np.abs(a) < 0.05] = 0.3  # keep finite differences away from kinks
    a[np.abs(a - 0.1) < 0.05] = 0.3
    out_shape = UNARY[name](Tensor(a)).shape
    w = rng.standard_normal(out_shape)
    assert check_grads(lambda x: T.tsum(UNARY[name](x) * Tensor(w)), [a]) < 1e-4


@pytest.mark.parametrize("seed", range(10))
def test_matmul_and_channel_op_gradients(seed):
    rng = np.random.default_rng(seed)
    a, b = rng.standard_normal((3, 4)), rng.standard_normal((4, 2))
    w = rng.standard_normal((3, 2))
    assert check_grads(lambda x, y: T.tsum(T.matmul(x, y) * Tensor(w)), [a, b]) < 1e-4
    x, y = rng.standard_normal((2, 2, 4, 4)), rng.standard_normal((2, 3, 4, 4))
    wc = rng.standard_normal((2, 6, 2, 2))

    def chan(p, q):
        z = T.pad_channels(T.concat_channels([p, q]), 1, 1)
        return T.tsum(T.subsample(T.slice_channels(z, 1, 8), 2) * Tensor(wc))

    assert check_grads(chan, [x, y]) < 1e-4


def test_row_norm_zero_row_has_zero_subgradient():
    a = Tensor(np.zeros((2, 3)), requires_grad=True)
    T.row_norm(a).sum().backward()
    np.testing.assert_array_equal(a.grad, np.zeros((2, 3)))


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(-50, 50), min_size=2, max_size=8))
def test_softmax_is_a_distribution(values):
    p = T.softmax(Tensor(np.array([values]))).data
    assert np.all(p >= 0) and abs(p.sum() - 1) < 1e-9
