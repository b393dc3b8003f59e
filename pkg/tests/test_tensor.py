import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays
from scipy import integrate

from vitnorm import tensor as T
from vitnorm.tensor import Tensor, backward, gradient_check

from oracle import patchify_loops

PATCH = "b (ht hp) (wt wp) c -> b (ht wt) (hp wp c)"
UNPATCH = "b (ht wt) (hp wp c) -> b (ht hp) (wt wp) c"


def f64(x):
    return Tensor(np.asarray(x, dtype=np.float64))


# --- matmul ---------------------------------------------------------------


def test_matmul_identity_and_dot():
    assert np.array_equal(T.matmul(f64([[1, 0], [0, 1]]), f64([[5, 6], [7, 8]])).data, [[5, 6], [7, 8]])
    assert T.matmul(f64([[1, 2]]), f64([[3], [4]])).data.tolist() == [[11.0]]


def test_matmul_matches_triple_loop(rng):
    a, b = rng.standard_normal((3, 4)), rng.standard_normal((4, 2))
    expected = np.zeros((3, 2))
    for i in range(3):
        for j in range(2):
            for k in range(4):
                expected[i, j] += a[i, k] * b[k, j]
    np.testing.assert_allclose(T.matmul(f64(a), f64(b)).data, expected, rtol=0, atol=1e-12)


def test_matmul_shape_mismatch():
    with pytest.raises(T.ShapeError):
        T.matmul(f64(np.ones((2, 3))), f64(np.ones((2, 3))))


def test_matmul_batched_gradients(rng):
    a, b = f64(rng.standard_normal((2, 3, 4))), f64(rng.standard_normal((4, 5)))
    rep = gradient_check(lambda x, y: (T.matmul(x, y) * T.matmul(x, y)).sum(), [a, b])
    assert rep.passed, rep.max_error


# --- elementwise ----------------------------------------------------------


def test_add_and_sigmoid():
    assert T.add(f64([1, 2]), f64([3, 4])).data.tolist() == [4, 6]
    assert T.sigmoid(f64(0.0)).item() == 0.5


def test_gelu_matches_quadrature_oracle():
    # tanh-variant GELU: 0.5 x (1 + tanh(z)) with tanh(z) = integral_0^z sech^2
    x = 1.0
    z = math.sqrt(2 / math.pi) * (x + 0.044715 * x**3)
    tanh_z, _ = integrate.quad(lambda t: 1 / math.cosh(t) ** 2, 0, z, epsabs=1e-14)
    assert abs(T.gelu(f64(x)).item() - 0.5 * x * (1 + tanh_z)) < 1e-6


def test_elementwise_errors():
    with pytest.raises(ZeroDivisionError):
        T.div(f64([1.0]), f64([0.0]))
    with pytest.raises(ValueError):
        T.log(f64([0.0, 1.0]))
    with pytest.raises(T.ShapeError):
        T.add(f64(np.ones(3)), f64(np.ones(2)))


def test_broadcast_along_leading_axes_gradient(rng):
    x, bias = f64(rng.standard_normal((2, 3, 4))), f64(rng.standard_normal(4))
    rep = gradient_check(lambda a, b: T.gelu(a + b).sum(), [x, bias])
    assert rep.passed
    assert rep.analytic[1].shape == (4,)


def _smooth_inputs(shape, lo=-2.0, hi=2.0):
    return arrays(np.float64, shape, elements=st.floats(lo, hi, allow_nan=False, width=64))


UNARY = {
    "exp": T.exp,
    "neg": T.neg,
    "gelu": T.gelu,
    "sigmoid": T.sigmoid,
    "softplus": T.softplus,
    "scale": lambda x: T.scale(x, -1.7),
    "log": lambda x: T.log(T.exp(x) + 0.5),
    "sqrt": lambda x: T.sqrt(x * x + 0.5),
}


@pytest.mark.parametrize("name", sorted(UNARY))
@settings(max_examples=15, deadline=None)
@given(x=_smooth_inputs((2, 3)))
def test_unary_gradients(name, x):
    w = np.linspace(-1, 1, 6).reshape(2, 3)
    rep = gradient_check(lambda a: (UNARY[name](a) * f64(w)).sum(), f64(x))
    assert rep.passed, rep.max_error


BINARY = {"add": T.add, "sub": T.sub, "mul": T.mul, "div": lambda a, b: T.div(a, b * b + 0.5)}


@pytest.mark.parametrize("name", sorted(BINARY))
@settings(max_examples=15, deadline=None)
@given(x=_smooth_inputs((2, 3)), y=_smooth_inputs((3,)))
def test_binary_gradients(name, x, y):
    w = np.linspace(-1, 1, 6).reshape(2, 3)
    rep = gradient_check(lambda a, b: (BINARY[name](a, b) * f64(w)).sum(), [f64(x), f64(y)])
    assert rep.passed, rep.max_error


# --- reductions -----------------------------------------------------------


def test_reductions():
    assert T.mean(f64([1, 2, 3])).item() == 2
    assert T.var(f64([1, 2, 3])).item() == pytest.approx(2 / 3, abs=1e-15)
    assert T.reduce_sum(f64([[1, 2], [3, 4]]), axis=0).data.tolist() == [4, 6]
    assert T.reduce_max(f64([[1, 5], [7, 2]]), axis=1).data.tolist() == [5, 7]
    with pytest.raises(T.ShapeError):
        T.mean(f64(np.zeros((2, 0))), axis=1)
    with pytest.raises(T.ShapeError):
        T.reduce_sum(f64([1.0]), axis=3)


@pytest.mark.parametrize("op", ["sum", "mean", "var"])
def test_reduction_gradients(op, rng):
    fn = {"sum": T.reduce_sum, "mean": T.mean, "var": T.var}[op]
    x = f64(rng.uniform(-2, 2, (3, 4)))
    w = f64(rng.standard_normal(3))
    rep = gradient_check(lambda a: (fn(a, axis=1) * w).sum(), x)
    assert rep.passed, rep.max_error


def test_max_gradient_away_from_ties():
    x = f64([[0.3, 1.5, -0.2], [2.0, 0.1, 0.5]])
    rep = gradient_check(lambda a: (T.reduce_max(a, axis=1) * f64([1.0, -2.0])).sum(), x)
    assert rep.passed
    np.testing.assert_array_equal(rep.analytic[0], [[0, 1, 0], [-2, 0, 0]])


# --- rearrange ------------------------------------------------------------


def test_rearrange_patch_example():
    img = f64(np.arange(16).reshape(1, 4, 4, 1))
    out = T.rearrange(img, PATCH, hp=2, wp=2).data[0]
    expected = [[0, 1, 4, 5], [2, 3, 6, 7], [8, 9, 12, 13], [10, 11, 14, 15]]
    assert out.tolist() == expected
    np.testing.assert_array_equal(out, patchify_loops(img.data, 2)[0])


@settings(max_examples=25, deadline=None)
@given(
    p=st.integers(1, 4), gh=st.integers(1, 3), gw=st.integers(1, 3), c=st.integers(1, 3), seed=st.integers(0, 2**31)
)
def test_rearrange_round_trip_bitwise(p, gh, gw, c, seed):
    x = np.random.default_rng(seed).standard_normal((2, gh * p, gw * p, c))
    fwd = T.rearrange(f64(x), PATCH, hp=p, wp=p)
    np.testing.assert_array_equal(fwd.data, patchify_loops(x, p))
    back = T.rearrange(fwd, UNPATCH, ht=gh, hp=p, wp=p, c=c)
    assert back.data.tobytes() == x.tobytes()


def test_rearrange_unit_patch_is_flatten(rng):
    x = rng.standard_normal((1, 3, 2, 2))
    out = T.rearrange(f64(x), PATCH, hp=1, wp=1)
    np.testing.assert_array_equal(out.data, x.reshape(1, 6, 2))


def test_rearrange_non_divisible():
    with pytest.raises(T.ShapeError):
        T.rearrange(f64(np.zeros((1, 5, 4, 1))), PATCH, hp=2, wp=2)


def test_rearrange_gradient(rng):
    x = f64(rng.standard_normal((1, 4, 4, 2)))
    w = f64(rng.standard_normal((4, 8)))
    rep = gradient_check(lambda a: (T.rearrange(a, PATCH, hp=2, wp=2) * w).sum(), x)
    assert rep.passed


# --- softmax --------------------------------------------------------------


def test_softmax_cases(rng):
    assert T.softmax(f64([0.0, 0.0])).data.tolist() == [0.5, 0.5]
    big = T.softmax(f64([1000.0, 0.0])).data
    assert big[0] == 1.0 and big[1] == 0.0
    v = rng.standard_normal(5)
    np.testing.assert_allclose(T.softmax(f64(v)).data, np.exp(v) / np.exp(v).sum(), rtol=0, atol=1e-12)


@settings(max_examples=30, deadline=None)
@given(x=_smooth_inputs((3, 6), -50, 50))
def test_softmax_rows_are_distributions(x):
    out = T.softmax(f64(x), axis=-1).data
    assert np.all(out >= 0)
    np.testing.assert_allclose(out.sum(-1), 1.0, atol=1e-6)


def test_softmax_gradient(rng):
    w = f64(rng.standard_normal((2, 4)))
    rep = gradient_check(lambda a: (T.softmax(a, axis=-1) * w).sum(), f64(rng.uniform(-2, 2, (2, 4))))
    assert rep.passed


# --- concat / slice -------------------------------------------------------


def test_concat_slice_round_trip(rng):
    assert T.concat([f64([[1.0]]), f64([[2.0]])], axis=0).data.tolist() == [[1.0], [2.0]]
    a, b = f64(rng.standard_normal((2, 3))), f64(rng.standard_normal((4, 3)))
    joined = T.concat([a, b], axis=0)
    np.testing.assert_array_equal(T.slice_axis(joined, 0, 0, 2).data, a.data)
    np.testing.assert_array_equal(T.slice_axis(joined, 0, 2, 6).data, b.data)
    with pytest.raises(T.ShapeError):
        T.concat([a, f64(np.zeros((1, 2)))], axis=0)


def test_concat_gradient_routes_to_inputs(rng):
    a, b = f64(rng.standard_normal((1, 3))), f64(rng.standard_normal((2, 3)))
    w = f64(rng.standard_normal((3, 3)))
    rep = gradient_check(lambda x, y: (T.concat([x, y], axis=0) * w).sum(), [a, b])
    assert rep.passed
    np.testing.assert_allclose(rep.analytic[0], w.data[:1])
    np.testing.assert_allclose(rep.analytic[1], w.data[1:])


def test_slice_gradient(rng):
    x = f64(rng.standard_normal((2, 5, 3)))
    rep = gradient_check(lambda a: T.slice_axis(a, 1, 1, 3).sum(), x)
    assert rep.passed
    assert rep.analytic[0][:, 0].sum() == 0 and rep.analytic[0][:, 1:3].sum() == 12


# --- backward / graph -----------------------------------------------------


def test_backward_simple_cases():
    x = Tensor(np.ones((2, 3)), requires_grad=True)
    (g,) = backward(T.reduce_sum(x), [x])
    np.testing.assert_array_equal(g, np.ones((2, 3)))
    x = Tensor([1.0, 2.0], requires_grad=True)
    (g,) = backward((x * x).sum(), [x])
    assert g.tolist() == [2.0, 4.0]


def test_untouched_leaf_gets_zero_and_nonscalar_rejected():
    x = Tensor([1.0, 2.0], requires_grad=True)
    y = Tensor([3.0], requires_grad=True)
    gx, gy = backward(x.sum(), [x, y])
    assert gy.tolist() == [0.0]
    with pytest.raises(T.ShapeError):
        backward(x * 2.0, [x])


def test_trace_is_topological_and_unique():
    x = Tensor([1.0, 2.0], requires_grad=True)
    y = x * x
    z = (y + y * x).sum()
    nodes = T.trace(z)
    assert len({n._id for n in nodes}) == len(nodes)
    pos = {n._id: i for i, n in enumerate(nodes)}
    for n in nodes:
        for p in n._parents:
            if p.requires_grad:
                assert pos[p._id] < pos[n._id]


def test_shared_subexpression_accumulates():
    x = Tensor([3.0], requires_grad=True)
    y = x * x
    (g,) = backward((y + y).sum(), [x])
    assert g.tolist() == [12.0]


def test_replay_is_bitwise_identical(rng):
    a = rng.standard_normal((8, 16))
    w = rng.standard_normal((16, 16))

    def run():
        x = Tensor(a)
        k = Tensor(w, requires_grad=True)
        loss = T.softmax(T.gelu(x @ k), axis=-1).sum() + T.var(x @ k, axis=-1).sum()
        return loss.data.tobytes(), backward(loss, [k])[0].tobytes()

    assert run() == run()


def test_non_finite_detection():
    with T.debug_checks(True):
        with pytest.raises(T.NonFiniteError):
            T.exp(f64([1000.0]))
    with T.debug_checks(False):
        assert np.isinf(T.exp(f64([1000.0])).data[0])


def test_no_grad_records_nothing():
    x = Tensor([1.0], requires_grad=True)
    with T.no_grad():
        y = x * 2.0
    assert not y.requires_grad and y.is_leaf


def test_tensors_are_read_only():
    t = f64([1.0, 2.0])
    with pytest.raises(ValueError):
        t.data[0] = 5.0


# --- gradient_check -------------------------------------------------------


def test_gradient_check_sum_is_exact(rng):
    rep = gradient_check(lambda a: a.sum(), f64(rng.standard_normal((3, 2))))
    assert rep.max_error < 1e-9 and rep.passed


def test_gradient_check_layer_norm(rng):
    from vitnorm.norms import NormParams, layer_norm

    w = f64(rng.standard_normal((2, 5)))
    p = NormParams(f64(rng.standard_normal(5)), f64(rng.standard_normal(5)))
    rep = gradient_check(lambda a: (layer_norm(a, p) * w).sum(), f64(rng.uniform(-2, 2, (2, 5))))
    assert rep.passed, rep.max_error


def test_gradient_check_catches_wrong_backward(rng):
    def bad_square(a):
        return T._make(a.data * a.data, (a,), lambda g: (g * a.data,), "bad_square")  # missing factor 2

    rep = gradient_check(lambda a: bad_square(a).sum(), f64(rng.uniform(0.5, 2, 4)), labels=["x"])
    assert not rep.passed
    assert rep.failures() == ["x"]
