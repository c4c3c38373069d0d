import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from partswap import autodiff as ad
from partswap.autodiff import NonFiniteError, Tensor, gradcheck

from oracles import conv2d_loops


def leaf(a, name=None):
    return Tensor(np.asarray(a, dtype=float), requires_grad=True, name=name)


def test_matmul_identity():
    X = np.random.default_rng(0).normal(size=(5, 4))
    np.testing.assert_array_equal((Tensor(X) @ Tensor(np.eye(4))).data, X)


def test_conv_delta_kernel_is_identity():
    x = np.random.default_rng(1).normal(size=(2, 1, 5, 5))
    w = np.zeros((1, 1, 3, 3))
    w[0, 0, 1, 1] = 1.0
    np.testing.assert_array_equal(ad.conv2d(Tensor(x), Tensor(w), None, 1, 1).data, x)


@pytest.mark.parametrize("stride,padding", [(1, 0), (1, 1), (2, 1), (2, 0)])
def test_conv_matches_nested_loops(stride, padding):
    rng = np.random.default_rng(stride * 10 + padding)
    x = rng.normal(size=(2, 3, 6, 5))
    w = rng.normal(size=(4, 3, 3, 3))
    b = rng.normal(size=4)
    got = ad.conv2d(Tensor(x), Tensor(w), Tensor(b), stride, padding).data
    np.testing.assert_allclose(got, conv2d_loops(x, w, b, stride, padding), rtol=1e-12, atol=1e-12)


def test_conv_single_channel_4x4():
    rng = np.random.default_rng(7)
    x, w = rng.normal(size=(1, 1, 4, 4)), rng.normal(size=(1, 1, 3, 3))
    np.testing.assert_allclose(ad.conv2d(Tensor(x), Tensor(w)).data, conv2d_loops(x, w), atol=1e-13)


def test_sum_gradient_is_ones():
    X = leaf(np.random.default_rng(0).normal(size=(3, 4)))
    (g,) = ad.backward(X.sum(), [X])
    np.testing.assert_array_equal(g, np.ones((3, 4)))


def test_half_squared_norm_gradient_is_identity():
    x = np.random.default_rng(0).normal(size=(3, 4))
    X = leaf(x)
    (g,) = ad.backward((X * X).sum() * 0.5, [X])
    np.testing.assert_allclose(g, x, rtol=0, atol=1e-15)


def test_non_scalar_loss_rejected():
    X = leaf(np.ones((2, 2)))
    with pytest.raises(ValueError, match="scalar"):
        ad.backward(X * 2.0, [X])


def test_disconnected_leaf_reported_and_zero():
    a, b = leaf([1.0, 2.0]), leaf([3.0])
    with pytest.warns(UserWarning, match="disconnected"):
        ga, gb = ad.backward((a * a).sum(), [a, b])
    np.testing.assert_array_equal(gb, [0.0])


def test_frozen_leaf_untouched():
    w = Tensor(np.array([1.0, -2.0]), requires_grad=False)
    x = leaf([0.5, 0.25])
    before = w.data.copy()
    gx, gw = ad.backward((x * w).sum(), [x, w])
    assert gw is None and w.grad is None
    np.testing.assert_array_equal(w.data, before)


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_nonfinite_names_the_op():
    with pytest.raises(NonFiniteError, match="log"):
        ad.log(Tensor(np.array([0.0, 1.0])))


def test_no_grad_builds_no_graph():
    x = leaf([1.0, 2.0])
    with ad.no_grad():
        y = x * 3.0
    assert not y.requires_grad and y._parents == ()


def test_quadratic_gradcheck_tight():
    rng = np.random.default_rng(0)
    A = rng.normal(size=(4, 4))
    x = leaf(rng.normal(size=4))
    for eps in (1e-6, 1e-5, 1e-4):
        err = gradcheck(lambda: ((Tensor(A) @ x.reshape(4, 1)) ** 2).sum(), {"x": x}, eps)
        assert err["x"] <= 1e-6


def test_softmax_cross_entropy_gradcheck():
    rng = np.random.default_rng(3)
    logits = leaf(rng.normal(size=(6, 10)))
    y = rng.integers(0, 10, size=6)
    assert gradcheck(lambda: ad.cross_entropy(logits, y), {"z": logits})["z"] <= 1e-5


def test_cross_entropy_value():
    z = np.array([[1.0, 2.0, 0.5]])
    ref = -np.log(np.exp(2.0) / np.exp(z).sum())
    assert abs(ad.cross_entropy(Tensor(z), np.array([1])).item() - ref) < 1e-14


# every primitive, 20 random trials each, central differences at 1e-4 relative
_PRIMS = {
    "add": lambda a, b: (a + b).sum(),
    "mul": lambda a, b: (a * b).sum(),
    "div": lambda a, b: (a / (b * b + 1.0)).sum(),
    "matmul": lambda a, b: (a @ b.T).sum(),
    "relu": lambda a, b: (ad.relu(a) * b).sum(),
    "gelu": lambda a, b: (ad.gelu(a) * b).sum(),
    "tanh": lambda a, b: (ad.tanh(a) * b).sum(),
    "exp": lambda a, b: (ad.exp(a * 0.3) * b).sum(),
    "softmax0": lambda a, b: (ad.softmax(a, axis=0) * b).sum(),
    "softmax1": lambda a, b: (ad.softmax(a, axis=1) * b).sum(),
    "log_softmax": lambda a, b: (ad.log_softmax(a, axis=1) * b).sum(),
    "mean_var": lambda a, b: a.mean(axis=0).sum() + (a.var(axis=1) * b[:, 0]).sum(),
    "batchnorm": lambda a, b: (((a - a.mean(axis=0, keepdims=True)) / ad.sqrt(a.var(axis=0, keepdims=True) + 1e-5)) * b).sum(),
    "l2rows": lambda a, b: (ad.l2_normalize_rows(a) * b).sum(),
    "pow": lambda a, b: ((a * a + 1.0) ** 1.5 * b).sum(),
    "getitem": lambda a, b: (a[1:, ::2] * b[1:, ::2]).sum(),
    "concat": lambda a, b: (ad.concat([a, b], axis=1) ** 2).sum(),
}


@pytest.mark.parametrize("name", sorted(_PRIMS))
def test_primitive_gradients(name):
    fn = _PRIMS[name]
    rng = np.random.default_rng(abs(hash(name)) % 2**32)
    worst = 0.0
    for _ in range(20):
        a = leaf(rng.normal(size=(4, 3)), "a")
        b = leaf(rng.normal(size=(4, 3)), "b")
        if name == "relu":  # keep away from the kink
            a.data = np.where(np.abs(a.data) < 1e-3, 0.5, a.data)
        worst = max(worst, *gradcheck(lambda: fn(a, b), {"a": a, "b": b}, 1e-6).values())
    assert worst <= 1e-4


def test_conv_gradients():
    rng = np.random.default_rng(11)
    for _ in range(20):
        x = leaf(rng.normal(size=(2, 2, 5, 5)))
        w = leaf(rng.normal(size=(3, 2, 3, 3)))
        b = leaf(rng.normal(size=3))
        r = rng.normal(size=(2, 3, 3, 3))
        err = gradcheck(lambda: (ad.conv2d(x, w, b, 2, 1) * r).sum(), {"x": x, "w": w, "b": b})
        assert max(err.values()) <= 1e-4


def test_evaluation_bitwise_deterministic():
    rng = np.random.default_rng(5)
    x, w = rng.normal(size=(3, 2, 6, 6)), rng.normal(size=(4, 2, 3, 3))
    f = lambda: ad.gelu(ad.conv2d(Tensor(x), Tensor(w), None, 1, 1)).sum().item()
    assert f() == f()


@settings(max_examples=40, deadline=None)
@given(arrays(np.float64, (3, 4), elements=st.floats(-5, 5)),
       arrays(np.float64, (3, 4), elements=st.floats(-5, 5)))
def test_broadcast_add_grad_shapes(a, b):
    A, B = leaf(a), leaf(b[:1])  # (1, 4) broadcasts over rows
    ga, gb = ad.backward((A + B).sum(), [A, B])
    assert ga.shape == a.shape and gb.shape == (1, 4)
    np.testing.assert_array_equal(gb, np.full((1, 4), 3.0))


@settings(max_examples=30, deadline=None)
@given(arrays(np.float64, (5, 3), elements=st.floats(-100, 100)))
def test_l2_normalized_rows_unit_or_zero(x):
    out = ad.l2_normalize_rows(Tensor(x)).data
    norms = np.linalg.norm(out, axis=1)
    for n, o, row in zip(norms, out, x):
        if np.linalg.norm(row) > 1e-12:
            assert abs(n - 1.0) < 1e-12
        else:  # divided by the 1e-12 floor, so exact zeros stay zero
            np.testing.assert_allclose(o, row / 1e-12, rtol=1e-12)


def test_zero_row_stays_zero():
    x = np.array([[0.0, 0.0], [3.0, 4.0]])
    out = ad.l2_normalize_rows(Tensor(x)).data
    np.testing.assert_array_equal(out[0], [0.0, 0.0])
    np.testing.assert_allclose(out[1], [0.6, 0.8], rtol=1e-15)
