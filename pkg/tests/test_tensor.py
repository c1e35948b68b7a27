import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from moeffd import tensor as T
from moeffd.errors import DimensionError, NumericError
from moeffd.oracles import layer_norm_loops, matmul_loops, softmax_direct
from moeffd.tensor import Tensor


def rand(rng, *shape):
    return Tensor(rng.standard_normal(shape), requires_grad=True)


# -- matmul -----------------------------------------------------------------

def test_matmul_identity():
    a = np.array([[1.0, 2.0], [3.0, 4.0]])
    np.testing.assert_array_equal((Tensor(a) @ Tensor(np.eye(2))).data, a)


def test_matmul_annihilator():
    out = Tensor(np.ones((3, 4))) @ Tensor(np.zeros((4, 2)))
    assert out.shape == (3, 2) and not out.data.any()


def test_matmul_matches_triple_loop():
    rng = np.random.default_rng(0)
    a, b = rng.standard_normal((5, 7)), rng.standard_normal((7, 3))
    assert np.abs((Tensor(a) @ Tensor(b)).data - matmul_loops(a, b)).max() <= 1e-12


def test_matmul_shape_error_names_both_shapes():
    with pytest.raises(DimensionError, match=r"\(2, 3\).*\(4, 5\)"):
        Tensor(np.ones((2, 3))) @ Tensor(np.ones((4, 5)))


def test_matmul_associativity():
    rng = np.random.default_rng(1)
    for _ in range(20):
        a, b, c = (Tensor(rng.standard_normal(s)) for s in ((4, 5), (5, 6), (6, 3)))
        assert np.abs(((a @ b) @ c).data - (a @ (b @ c)).data).max() <= 1e-9


def test_dtype_mismatch_is_an_error():
    with pytest.raises(TypeError):
        Tensor(np.ones(2, dtype=np.float32)) + Tensor(np.ones(2, dtype=np.float64))


# -- softmax ----------------------------------------------------------------

def test_softmax_uniform():
    np.testing.assert_allclose(T.softmax(Tensor(np.zeros(3))).data, [1 / 3] * 3, atol=1e-15)


def test_softmax_stable_for_large_gap():
    out = T.softmax(Tensor(np.array([5.0, 1005.0]))).data
    assert np.isfinite(out).all()
    assert out[0] < 1e-300 and out[1] == pytest.approx(1.0)


def test_softmax_matches_direct_formula():
    x = [2.0, 1.0, 0.0]
    assert np.abs(T.softmax(Tensor(np.array(x))).data - softmax_direct(x)).max() <= 1e-12


@settings(max_examples=60, deadline=None)
@given(st.lists(st.floats(-1e3, 1e3), min_size=1, max_size=12), st.floats(-1e3, 1e3))
def test_softmax_sums_to_one_and_is_shift_invariant(values, shift):
    x = np.array(values)
    s = T.softmax(Tensor(x)).data
    assert abs(s.sum() - 1.0) <= 1e-6
    assert np.abs(T.softmax(Tensor(x + shift)).data - s).max() <= 1e-6


# -- layer norm ---------------------------------------------------------------

def test_layer_norm_constant_row_is_zero():
    out = T.layer_norm(Tensor(np.full((1, 4), 3.0)), Tensor(np.ones(4)), Tensor(np.zeros(4)))
    np.testing.assert_array_equal(out.data, np.zeros((1, 4)))


def test_layer_norm_zero_scale_gives_shift():
    shift = np.array([0.1, -2.0, 3.0])
    out = T.layer_norm(Tensor(np.random.default_rng(0).standard_normal((2, 3))), Tensor(np.zeros(3)),
                       Tensor(shift))
    np.testing.assert_array_equal(out.data, np.broadcast_to(shift, (2, 3)))


def test_layer_norm_matches_loop_oracle():
    rng = np.random.default_rng(2)
    x, g, b = rng.standard_normal((3, 6)), rng.standard_normal(6), rng.standard_normal(6)
    got = T.layer_norm(Tensor(x), Tensor(g), Tensor(b), 1e-6).data
    assert np.abs(got - layer_norm_loops(x, g, b, 1e-6)).max() <= 1e-12


def test_layer_norm_rejects_wrong_width():
    with pytest.raises(DimensionError):
        T.layer_norm(Tensor(np.ones((2, 3))), Tensor(np.ones(4)), Tensor(np.zeros(4)))


# -- gelu / pooling -------------------------------------------------------------

def test_gelu_values():
    assert T.gelu(Tensor(np.array([0.0]))).data[0] == 0.0
    assert abs(T.gelu(Tensor(np.array([10.0]))).data[0] - 10.0) <= 1e-6
    expected = 0.5 * (1 + math.tanh(math.sqrt(2 / math.pi) * (1 + 0.044715)))
    assert T.gelu(Tensor(np.array([1.0]))).data[0] == pytest.approx(expected, abs=1e-15)


def test_avg_pool_tokens():
    v = np.array([[1.0, -2.0, 3.0]])
    np.testing.assert_array_equal(T.avg_pool_tokens(Tensor(v)).data, v[0])
    np.testing.assert_array_equal(T.avg_pool_tokens(Tensor(np.vstack([v, -v]))).data, np.zeros(3))
    x = np.random.default_rng(3).standard_normal((5, 4))
    loop = [sum(x[i, j] for i in range(5)) / 5 for j in range(4)]
    np.testing.assert_allclose(T.avg_pool_tokens(Tensor(x)).data, loop, atol=1e-15)
    with pytest.raises(ValueError):
        T.avg_pool_tokens(Tensor(np.zeros((0, 4))))


# -- gradient checks ------------------------------------------------------------

def test_gradcheck_trivial_cases():
    # integer θ and a power-of-two step keep θ ± eps exact, so the sum is exact too
    theta = Tensor(np.array([3.0, -1.0, 0.0, 7.0, 2.0]), requires_grad=True)
    assert T.finite_difference_gradcheck(lambda: theta.sum(), [theta], eps=2.0 ** -20) == 0.0
    e1 = Tensor(np.array([1.0, 0.0, 0.0]), requires_grad=True)
    err = T.finite_difference_gradcheck(lambda: T.square(e1).sum() * 0.5, [e1])
    assert err <= 1e-9


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_gradcheck_reports_non_finite_with_name():
    p = Tensor(np.array([1.0, -1.0]), requires_grad=True, name="theta")
    with pytest.raises(NumericError, match="theta"):
        T.finite_difference_gradcheck(lambda: T.log(p).sum(), [p])


SHAPES = [(3,), (2, 4), (2, 3, 5)]

UNARY = {
    "exp": T.exp,
    "square": T.square,
    "softplus": T.softplus,
    "gelu": T.gelu,
    "softmax": lambda x: T.softmax(x, axis=-1),
    "log_softmax": lambda x: T.log_softmax(x, axis=-1),
    "reshape": lambda x: x.reshape(-1),
    "transpose": lambda x: x.transpose(),
    "mean": lambda x: T.mean(x, axis=-1),
    "index": lambda x: x[..., :1],
    "reciprocal": lambda x: T.reciprocal(T.exp(x)),
    "sqrt": lambda x: T.sqrt(T.exp(x)),
    "log": lambda x: T.log(T.exp(x) + 1.0),
}


@pytest.mark.parametrize("name", sorted(UNARY))
@pytest.mark.parametrize("shape", SHAPES)
def test_unary_op_gradients(name, shape):
    rng = np.random.default_rng(5)
    x = rand(rng, *shape)
    w = Tensor(rng.standard_normal(UNARY[name](x).shape))
    err = T.finite_difference_gradcheck(lambda: (UNARY[name](x) * w).sum(), [x])
    assert err <= 1e-5


@pytest.mark.parametrize("shape", SHAPES)
def test_binary_op_gradients(shape):
    rng = np.random.default_rng(6)
    a, b = rand(rng, *shape), rand(rng, *shape)
    bias = rand(rng, shape[-1])
    w = Tensor(rng.standard_normal(shape))
    fn = lambda: ((a * b + a - b / (T.exp(bias) + 1.0)) * w).sum()
    assert T.finite_difference_gradcheck(fn, [a, b, bias]) <= 1e-5


@pytest.mark.parametrize("m,k,n", [(1, 3, 2), (4, 5, 3), (6, 2, 7)])
def test_matmul_gradients(m, k, n):
    rng = np.random.default_rng(7)
    a, b = rand(rng, 2, m, k), rand(rng, k, n)
    w = Tensor(rng.standard_normal((2, m, n)))
    assert T.finite_difference_gradcheck(lambda: ((a @ b) * w).sum(), [a, b]) <= 1e-5


@pytest.mark.parametrize("shape", [(2, 4), (3, 5), (2, 3, 6)])
def test_layer_norm_gradients(shape):
    rng = np.random.default_rng(8)
    x, g, b = rand(rng, *shape), rand(rng, shape[-1]), rand(rng, shape[-1])
    w = Tensor(rng.standard_normal(shape))
    fn = lambda: (T.layer_norm(x, g, b) * w).sum()
    assert T.finite_difference_gradcheck(fn, [x, g, b]) <= 1e-5


@pytest.mark.parametrize("shape", [(1, 3, 3, 2), (2, 4, 5, 1), (1, 2, 6, 3)])
@pytest.mark.parametrize("k", [3, 5])
def test_conv2d_gradients(shape, k):
    rng = np.random.default_rng(9)
    x, w = rand(rng, *shape), rand(rng, 2, shape[-1], k, k)
    r = Tensor(rng.standard_normal(shape[:3] + (2,)))
    assert T.finite_difference_gradcheck(lambda: (T.conv2d_same(x, w) * r).sum(), [x, w]) <= 1e-5


@pytest.mark.parametrize("n", [2, 5, 9])
def test_cross_entropy_gradient(n):
    rng = np.random.default_rng(10)
    logits = rand(rng, n, 2)
    labels = rng.integers(0, 2, n)
    assert T.finite_difference_gradcheck(lambda: T.cross_entropy(logits, labels), [logits]) <= 1e-5


@pytest.mark.parametrize("shape", SHAPES)
def test_concat_take_put_gradients(shape):
    rng = np.random.default_rng(11)
    a, b = rand(rng, *shape), rand(rng, *shape)
    idx = np.argsort(rng.standard_normal(shape[:-1] + (shape[-1],)), axis=-1)[..., :1]
    w = Tensor(rng.standard_normal(shape[:-1] + (2 * shape[-1],)))

    def fn():
        c = T.concat([a, b], axis=-1) * w
        picked = T.take_along(a, idx, axis=-1)
        return c.sum() + T.put_along(picked, idx, a.shape, axis=-1).sum() * 0.7 + T.stack([a, b]).sum()

    assert T.finite_difference_gradcheck(fn, [a, b]) <= 1e-5


def test_no_grad_builds_no_graph():
    x = Tensor(np.ones(3), requires_grad=True)
    with T.no_grad():
        y = T.exp(x) * 2.0
    assert not y.requires_grad and y._backward is None


def test_gradient_accumulates_over_shared_use():
    x = Tensor(np.array([2.0]), requires_grad=True)
    (x * x + x).sum().backward()
    assert x.grad[0] == pytest.approx(5.0)
