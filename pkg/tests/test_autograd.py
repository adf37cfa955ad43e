import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from oodforge.autograd import (
    AutogradError,
    ShapeError,
    Tape,
    UnboundLeafError,
    as_tensor,
    finite_difference,
)


def grad_close(analytic, numeric, rel=1e-4, abs_small=1e-7):
    analytic, numeric = np.asarray(analytic), np.asarray(numeric)
    diff = np.abs(analytic - numeric)
    scale = np.maximum(np.abs(analytic), np.abs(numeric))
    ok = np.where(scale < 1e-3, diff <= abs_small, diff <= rel * scale)
    return bool(np.all(ok))


def test_identity_chain():
    t = Tape()
    x = t.leaf("x")
    y = t.identity(t.identity(x))
    t.forward({"x": np.array([1.0, 2.0, 3.0])})
    np.testing.assert_array_equal(t.value(y), [1.0, 2.0, 3.0])


def test_log_softmax_equal_logits():
    t = Tape()
    out = t.log_softmax(t.leaf("v"))
    t.forward({"v": np.full((1, 4), 3.7)})
    np.testing.assert_allclose(t.value(out), -np.log(4.0), atol=1e-15)
    assert t.value(out)[0, 0] == pytest.approx(-1.386294, abs=1e-6)


def test_relu_values():
    t = Tape()
    out = t.relu(t.leaf("x"))
    t.forward({"x": np.array([-1.0, 0.0, 2.0])})
    np.testing.assert_array_equal(t.value(out), [0.0, 0.0, 2.0])


def test_sum_gradient_is_ones():
    t = Tape()
    x = t.leaf("x")
    root = t.sum(x)
    t.forward({"x": np.arange(6.0).reshape(2, 3)})
    np.testing.assert_array_equal(t.backward(root, ["x"])["x"], np.ones((2, 3)))


def test_sigmoid_derivative_at_zero():
    t = Tape()
    root = t.sum(t.sigmoid(t.leaf("t")))
    t.forward({"t": np.array([0.0])})
    assert t.backward(root, ["t"])["t"][0] == 0.25


def test_errors():
    t = Tape()
    root = t.sum(t.matmul(t.leaf("a"), t.leaf("b")))
    with pytest.raises(AutogradError, match="before forward"):
        t.backward(root, ["a"])
    with pytest.raises(UnboundLeafError, match="'b'"):
        t.forward({"a": np.ones((2, 3))})
    with pytest.raises(ShapeError, match=r"node #2 \(matmul\)"):
        t.forward({"a": np.ones((2, 3)), "b": np.ones((2, 3))})
    t2 = Tape()
    v = t2.relu(t2.leaf("x"))
    t2.forward({"x": np.ones(3)})
    with pytest.raises(AutogradError, match="scalar"):
        t2.backward(v, ["x"])


def test_as_tensor_rejects_nonfinite():
    with pytest.raises(ValueError):
        as_tensor([1.0, np.nan])
    assert as_tensor([1, 2, 3, 4], shape=(2, 2)).shape == (2, 2)
    with pytest.raises(ShapeError):
        as_tensor([1, 2, 3], shape=(2, 2))


def test_finite_difference_examples():
    assert finite_difference(lambda p: float(p[0] ** 2), [3.0])[0] == pytest.approx(6.0, abs=1e-9)
    np.testing.assert_array_equal(finite_difference(lambda p: 4.2, np.ones(3)), np.zeros(3))
    np.testing.assert_allclose(finite_difference(lambda p: float(p.sum()), np.arange(4.0)),
                               np.ones(4), atol=1e-9)
    with pytest.raises(ValueError):
        finite_difference(lambda p: float("nan"), [1.0])
    with pytest.raises(ValueError):
        finite_difference(lambda p: 0.0, [1.0], h=0.0)


def _every_primitive(t: Tape):
    """A scalar graph touching every primitive kind."""
    x, w, b = t.leaf("x"), t.leaf("w"), t.leaf("b")
    h = t.add(t.matmul(x, w), b)
    h1 = t.relu(h)
    h2 = t.leaky_relu(h, 0.2)
    h3 = t.sigmoid(h)
    lp = t.log_softmax(t.add(t.mul(h1, h3), h2))
    e = t.exp(t.scale(h, 0.1))
    lg = t.log(t.shift(t.square(h), 1.0))
    d = t.div(e, t.shift(t.square(h3), 0.5))
    tr = t.matmul(t.transpose(h), t.neg(d))
    cl = t.clip(h3, 1e-12, 1 - 1e-12)
    rows = t.add(t.add(t.mean(lp, axis=1), t.sum(lg, axis=1)), t.sum(t.log(cl), axis=1))
    return t.add(t.sum(rows), t.mean(tr))


@pytest.mark.parametrize("seed", range(5))
def test_backward_matches_finite_differences(seed):
    rng = np.random.default_rng(seed)
    vals = {"x": rng.uniform(-5, 5, (4, 3)), "w": rng.uniform(-1, 1, (3, 5)),
            "b": rng.uniform(-1, 1, 5)}
    t = Tape()
    root = _every_primitive(t)
    t.forward(vals)
    grads = t.backward(root, ["x", "w", "b"])
    for name in vals:
        def f(p, name=name):
            t.forward({**vals, name: p})
            return float(t.value(root))
        num = finite_difference(f, vals[name], 1e-5)
        assert grad_close(grads[name], num), name


def test_guided_relu_rule():
    rng = np.random.default_rng(3)
    t = Tape()
    x = t.leaf("x")
    pre = t.matmul(x, t.leaf("w"))
    h = t.relu(pre)
    root = t.sum(t.matmul(h, t.leaf("v")))
    vals = {"x": rng.normal(size=(6, 4)), "w": rng.normal(size=(4, 8)), "v": rng.normal(size=(8, 1))}
    t.forward(vals)
    std = t.backward(root, ["x"])["x"]
    guided = t.backward(root, ["x"], guided=True)["x"]
    # incoming gradient at the relu is v^T per row; guided keeps only positive entries
    g_in = np.broadcast_to(vals["v"].T, (6, 8))
    act = t.value(pre) > 0
    expected_guided = (np.where(act & (g_in > 0), g_in, 0.0)) @ vals["w"].T
    expected_std = (np.where(act, g_in, 0.0)) @ vals["w"].T
    np.testing.assert_allclose(guided, expected_guided, atol=1e-12)
    np.testing.assert_allclose(std, expected_std, atol=1e-12)
    # cached forward values survive both passes
    assert np.array_equal(t.value(pre), vals["x"] @ vals["w"])


def test_shared_leaf_accumulates():
    t = Tape()
    a = t.leaf("a")
    assert t.leaf("a") is a
    root = t.sum(t.add(t.square(a), t.scale(a, 3.0)))
    t.forward({"a": np.array([1.0, -2.0])})
    np.testing.assert_allclose(t.backward(root, ["a"])["a"], [5.0, -1.0])


def test_unreachable_leaf_gets_zeros():
    t = Tape()
    t.leaf("unused")
    root = t.sum(t.leaf("x"))
    t.forward({"x": np.ones(2), "unused": np.ones((3, 3))})
    np.testing.assert_array_equal(t.backward(root, ["unused"])["unused"], np.zeros((3, 3)))


logits = arrays(np.float64, st.tuples(st.integers(1, 5), st.integers(1, 8)),
                elements=st.floats(-50, 50))


@settings(max_examples=60, deadline=None)
@given(logits, st.floats(-30, 30))
def test_log_softmax_normalised_and_shift_invariant(v, c):
    t = Tape()
    out = t.log_softmax(t.leaf("v"))
    t.forward({"v": v})
    base = t.value(out).copy()
    np.testing.assert_allclose(np.exp(base).sum(axis=1), 1.0, atol=1e-12)
    t.forward({"v": v + c})
    np.testing.assert_allclose(t.value(out), base, atol=1e-12)
