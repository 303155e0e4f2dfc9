import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from mmgc import tensor as T
from mmgc.errors import DegenerateVector, GraphError, MaskError, NumericError, ShapeMismatch
from mmgc.nn import Parameter


def P(x):
    return Parameter(np.asarray(x, dtype=np.float64))


# --- matmul -----------------------------------------------------------------


def test_matmul_identity(f64):
    a = T.Tensor([[1.0, 2.0], [3.0, 4.0]])
    assert np.array_equal(T.matmul(T.Tensor(np.eye(2)), a).data, a.data)


def test_matmul_hand_product(f64):
    out = T.matmul(T.Tensor([[1.0, 2.0], [3.0, 4.0]]), T.Tensor([[5.0], [6.0]]))
    assert out.data.tolist() == [[17.0], [39.0]]


def test_matmul_shape_mismatch():
    with pytest.raises(ShapeMismatch):
        T.matmul(T.Tensor(np.ones((2, 3))), T.Tensor(np.ones((2, 3))))


def test_matmul_batched_matches_numpy(f64):
    rng = np.random.default_rng(0)
    a, b = rng.normal(size=(2, 3, 4)), rng.normal(size=(2, 4, 5))
    assert np.allclose(T.matmul(T.Tensor(a), T.Tensor(b)).data, a @ b)


# --- softmax ----------------------------------------------------------------


def test_softmax_examples(f64):
    assert np.allclose(T.softmax(T.Tensor([0.0, 0.0])).data, [0.5, 0.5])
    assert np.allclose(T.softmax(T.Tensor([math.log(2), 0.0])).data, [2 / 3, 1 / 3])
    big = T.softmax(T.Tensor([1000.0, 0.0])).data
    assert np.isfinite(big).all() and big[0] == pytest.approx(1.0) and big[1] == pytest.approx(0.0)


def test_softmax_rejects_nonfinite_input():
    t = T.Tensor([np.nan, 2.0])  # leaves are not checked; ops are
    with pytest.raises(NumericError):
        T.softmax(t)


@settings(max_examples=50, deadline=None)
@given(hnp.arrays(np.float64, (3, 5), elements=st.floats(-50, 50)))
def test_softmax_rows_sum_to_one(x):
    with T.precision("f64"):
        y = T.softmax(T.Tensor(x), axis=-1).data
    assert np.allclose(y.sum(-1), 1.0) and (y >= 0).all()


def test_log_softmax_consistent(f64):
    x = np.random.default_rng(1).normal(size=(4, 3))
    assert np.allclose(np.exp(T.log_softmax(T.Tensor(x)).data), T.softmax(T.Tensor(x)).data)


# --- layer norm -------------------------------------------------------------


def test_layer_norm_two_point(f64):
    out = T.layer_norm(T.Tensor([[1.0, 3.0]]), T.Tensor(np.ones(2)), T.Tensor(np.zeros(2)), eps=1e-12)
    assert np.allclose(out.data, [[-1.0, 1.0]], atol=1e-10)


@pytest.mark.parametrize("eps", [1e-12, 1e-5, 1.0])
def test_layer_norm_constant_is_zero(f64, eps):
    out = T.layer_norm(T.Tensor([[4.0, 4.0, 4.0]]), T.Tensor(np.ones(3)), T.Tensor(np.zeros(3)), eps=eps)
    assert np.allclose(out.data, 0.0)


def test_layer_norm_rejects_nonpositive_eps():
    with pytest.raises(ValueError):
        T.layer_norm(T.Tensor([[1.0, 2.0]]), T.Tensor(np.ones(2)), T.Tensor(np.zeros(2)), eps=0.0)


def test_layer_norm_matches_direct_oracle(f64):
    x = np.array([0.0, 2.0, 4.0])
    mu = sum(x) / 3
    var = sum((xi - mu) ** 2 for xi in x) / 3
    expected = [(xi - mu) / math.sqrt(var + 1e-5) + 1.0 for xi in x]
    out = T.layer_norm(T.Tensor(x), T.Tensor(np.ones(3)), T.Tensor(np.ones(3)))
    assert np.allclose(out.data, expected, atol=1e-12)
    assert out.data[0] == pytest.approx(1 - math.sqrt(3 / 2), abs=1e-5)


# --- gelu -------------------------------------------------------------------


def test_gelu_values(f64):
    out = T.gelu(T.Tensor([0.0, 10.0, 1.0])).data
    assert out[0] == 0.0
    assert out[1] == pytest.approx(10.0)
    assert out[2] == pytest.approx(0.841345, abs=1e-6)


# --- backward ---------------------------------------------------------------


def test_quadratic_gradient(f64):
    w = P([1.0, 2.0])
    (w * w).sum().backward()
    assert w.grad.tolist() == [2.0, 4.0]


def test_reused_tensor_sums_paths(f64):
    x = P([3.0])
    y = x * 2.0 + x * x  # dy/dx = 2 + 2x = 8
    y.sum().backward()
    assert x.grad.tolist() == [8.0]


def test_matmul_gradient_matches_fd(f64):
    rng = np.random.default_rng(3)
    a, b = P(rng.normal(size=(2, 2))), P(rng.normal(size=(2, 2)))
    for x in (a, b):
        assert T.finite_diff_check(lambda _: T.matmul(a, b).sum(), x) <= 1e-5


def test_backward_requires_scalar(f64):
    with pytest.raises(GraphError):
        T.backward(P([1.0, 2.0]) * 2.0)


def test_backward_requires_connected_loss(f64):
    with pytest.raises(GraphError):
        T.backward(T.Tensor(1.0))


def test_no_grad_records_nothing(f64):
    x = P([1.0])
    with T.no_grad():
        y = x * 3.0
    assert not y.requires_grad


def test_broadcast_add_gradient(f64):
    x, b = P(np.ones((3, 2))), P(np.zeros(2))
    (x + b).sum().backward()
    assert b.grad.tolist() == [3.0, 3.0]


def test_nonfinite_forward_raises():
    with np.errstate(over="ignore"), pytest.raises(NumericError):
        T.Tensor([1e38], dtype=np.float32) * T.Tensor([1e38], dtype=np.float32)


# --- embedding / l2 / attention / loss ----------------------------------------


def test_embedding_rows_and_grad(f64):
    table = P(np.arange(12.0).reshape(4, 3))
    out = T.embedding(table, np.array([0, 0]))
    assert np.array_equal(out.data[0], out.data[1])
    out.sum().backward()
    assert np.array_equal(table.grad[1:], np.zeros((3, 3)))
    assert table.grad[0].tolist() == [2.0, 2.0, 2.0]
    with pytest.raises(IndexError):
        T.embedding(table, np.array([4]))


def test_l2_normalize(f64):
    assert np.allclose(T.l2_normalize(T.Tensor([3.0, 4.0])).data, [0.6, 0.8])
    u = np.array([0.0, 1.0, 0.0])
    assert np.allclose(T.l2_normalize(T.Tensor(u)).data, u)
    with pytest.raises(DegenerateVector):
        T.l2_normalize(T.Tensor([0.0, 0.0]))


def test_attention_fully_masked_row():
    q = T.Tensor(np.ones((1, 2)))
    with pytest.raises(MaskError):
        T.scaled_dot_product_attention(q, q, q, mask=np.array([[False]]))


def test_cross_entropy_values(f64):
    assert T.cross_entropy(T.Tensor([[2.0, 0.0]]), [1]).item() == pytest.approx(2 + math.log1p(math.exp(-2)))
    assert T.cross_entropy(T.Tensor([[2.0, 0.0]]), [1]).item() == pytest.approx(2.1269, abs=1e-4)
    assert T.cross_entropy(T.Tensor([[0.0, 0.0]]), [0]).item() == pytest.approx(math.log(2), abs=1e-12)
    assert T.cross_entropy(T.Tensor([[60.0, -60.0]]), [0]).item() == pytest.approx(0.0, abs=1e-12)
    with pytest.raises(IndexError):
        T.cross_entropy(T.Tensor([[0.0, 0.0]]), [2])


# --- finite-difference checker ------------------------------------------------


def test_fd_exact_on_quadratic(f64):
    x = P([3.0])
    assert T.finite_diff_check(lambda t: (t * t).sum(), x) <= 1e-7


def test_fd_detects_negated_backward(f64):
    def negated_square(t):
        return T._result(t.data**2, (t,), lambda g: (-2 * t.data * g,), "bad_square")

    x = P([0.7, -1.3])
    assert T.finite_diff_check(lambda t: negated_square(t).sum(), x) == pytest.approx(2.0)


def test_fd_restores_input(f64):
    x = P(np.random.default_rng(0).normal(size=(3, 3)))
    before = x.data.copy()
    T.finite_diff_check(lambda t: (T.gelu(t) * t).sum(), x, order=4)
    assert np.array_equal(x.data, before)


@pytest.mark.parametrize("seed", range(5))
def test_fd_f32_path(seed):
    rng = np.random.default_rng(seed)
    x = Parameter(rng.normal(size=(3, 4)))
    w = T.Tensor(rng.normal(size=(3, 4)))
    assert x.dtype == np.float32
    assert T.finite_diff_check(lambda t: (T.gelu(t) * w).sum(), x) <= 1e-2


def test_precision_env_and_context():
    assert T.get_dtype() == np.float32
    with T.precision("f64"):
        assert T.Tensor([1.0]).dtype == np.float64
    assert T.Tensor([1.0]).dtype == np.float32



def _composite(seed: int):
    """Parameters plus a loss closure over linear, layer norm, gelu, softmax, l2 and cross-entropy."""
    rng = np.random.default_rng(seed)
    shapes = {"x": (3, 4), "W": (5, 4), "b": (5,), "g": (5,), "be": (5,)}
    p = {k: Parameter(rng.normal(size=s)) for k, s in shapes.items()}
    w = T.Tensor(rng.normal(size=(3, 5)))
    labels = rng.integers(0, 5, size=3)

    def loss():
        h = T.gelu(T.layer_norm(T.linear(p["x"], p["W"], p["b"]), p["g"], p["be"]))
        return (T.softmax(h) * w).sum() + T.cross_entropy(T.l2_normalize(h), labels)

    return p, loss


@pytest.mark.parametrize("seed", range(20))
def test_f32_backward_tracks_f64_backward(seed):
    p32, loss32 = _composite(seed)
    loss32().backward()
    with T.precision("f64"):
        p64, loss64 = _composite(seed)
        loss64().backward()
    for k in p32:
        g32, g64 = p32[k].grad.astype(np.float64), p64[k].grad
        assert np.abs(g32 - g64).max() <= 1e-3 * max(np.abs(g64).max(), 1e-8)


@pytest.mark.xfail(strict=True, reason="f32 rounding of the loss swamps central differences on small "
                                       "gradient entries once the relative-error floor is 1e-8")
def test_f32_finite_differences_within_1e3():
    worst = 0.0
    for seed in range(20):
        params, loss = _composite(seed)
        for p in params.values():
            worst = max(worst, T.finite_diff_check(lambda _: loss(), p))
    assert worst <= 1e-3


@pytest.mark.parametrize("seed", range(20))
def test_f64_composite_within_1e5(f64, seed):
    params, loss = _composite(seed)
    for p in params.values():
        assert T.finite_diff_check(lambda _: loss(), p, h=1e-3, order=4) <= 1e-5
