import numpy as np
import pytest
from hypothesis import given, strategies as st
from hypothesis.extra.numpy import arrays

from tpckit import autograd as ag
from tpckit.autograd import Tensor, gradcheck, no_grad


def _t(rng, *shape, positive=False):
    x = rng.normal(size=shape)
    if positive:
        x = np.abs(x) + 0.5
    return Tensor(x, requires_grad=True)


@pytest.mark.parametrize("name,fn,positive", [
    ("add", lambda a, b: (a + b) ** 2, False),
    ("sub", lambda a, b: (a - b) ** 2, False),
    ("mul", lambda a, b: a * b * a, False),
    ("div", lambda a, b: a / b, True),
    ("pow", lambda a, b: (a ** 3.0) * b, False),
    ("exp", lambda a, b: (a * 0.3).exp() * b, False),
    ("log", lambda a, b: a.log() * b, True),
    ("tanh", lambda a, b: a.tanh() * b, False),
    ("sigmoid", lambda a, b: a.sigmoid() * b, False),
    ("matmul", lambda a, b: a @ b.transpose(1, 0), False),
    ("reshape", lambda a, b: a.reshape(12) * b.reshape(12), False),
    ("mean", lambda a, b: (a * b).mean(axis=0) ** 2, False),
    ("getitem", lambda a, b: a[1:, ::2] * b[:2, 1:3], False),
    ("concat", lambda a, b: ag.concat([a, b * 2.0], axis=1) ** 2, False),
])
def test_elementwise_and_shape_ops_gradcheck(name, fn, positive):
    rng = np.random.default_rng(7)
    a = _t(rng, 3, 4, positive=positive)
    b = _t(rng, 3, 4, positive=positive)
    for target in (a, b):
        rep = gradcheck(lambda _: fn(a, b).sum(), target)
        assert rep.passed, f"{name}: {rep.message}"


def test_broadcast_gradients_are_unbroadcast():
    rng = np.random.default_rng(0)
    a = _t(rng, 2, 3, 4)
    b = _t(rng, 3, 1)
    rep = gradcheck(lambda _: ((a * b) ** 2).sum(), b)
    assert rep.passed, rep.message
    assert b.grad.shape == (3, 1)


def test_relu_and_clip_away_from_kinks():
    x = Tensor(np.array([-2.0, -0.5, 0.7, 3.0, 9.0]), requires_grad=True)
    (ag.relu(x) * 2.0 + ag.clip(x, -1.0, 5.0)).sum().backward()
    np.testing.assert_array_equal(x.grad, [0.0, 1.0, 3.0, 3.0, 2.0])


def test_einsum_gradcheck():
    rng = np.random.default_rng(2)
    a, b = _t(rng, 2, 3, 4), _t(rng, 2, 5, 4)
    for target in (a, b):
        rep = gradcheck(lambda _: (ag.einsum("bqd,bkd->bqk", a, b) ** 2).sum(), target)
        assert rep.passed, rep.message


def test_shared_subexpression_accumulates():
    x = Tensor(np.array([1.5]), requires_grad=True)
    y = x * x
    (y + y * x).sum().backward()
    # d/dx (x^2 + x^3) = 2x + 3x^2
    assert x.grad[0] == pytest.approx(2 * 1.5 + 3 * 1.5 ** 2, abs=1e-12)


def test_no_grad_records_nothing():
    x = Tensor(np.ones(3), requires_grad=True)
    with no_grad():
        y = (x * 2.0).sum()
    assert not y.requires_grad
    assert ag.grad_enabled()


def test_backward_needs_scalar_or_grad():
    x = Tensor(np.ones(3), requires_grad=True)
    with pytest.raises(Exception):
        (x * 2.0).backward()


def test_gradcheck_catches_wrong_gradient():
    x = Tensor(np.array([0.3, -1.2, 2.0]), requires_grad=True)

    def bad_square(a):
        return ag.make_node(a.data ** 2, (a,), lambda g: (g * a.data,))  # missing factor 2

    rep = gradcheck(lambda t: bad_square(t).sum(), x)
    assert not rep.passed
    assert rep.max_rel_error > 0.4


def test_gradcheck_rejects_non_scalar():
    x = Tensor(np.ones(3), requires_grad=True)
    with pytest.raises(ValueError):
        gradcheck(lambda t: t * 2.0, x)


@given(arrays(np.float64, st.integers(1, 6), elements=st.floats(-30, 30)))
def test_sigmoid_matches_logistic(x):
    ref = 1.0 / (1.0 + np.exp(-x))
    np.testing.assert_allclose(ag.sigmoid(Tensor(x)).data, ref, rtol=1e-12, atol=1e-15)


@given(arrays(np.float64, (2, 3), elements=st.floats(-5, 5)),
       arrays(np.float64, (3,), elements=st.floats(-5, 5)))
def test_unbroadcast_sums_to_shape(g, _):
    out = ag.unbroadcast(np.broadcast_to(g, (4, 2, 3)), (1, 3))
    np.testing.assert_allclose(out, 4 * g.sum(axis=0, keepdims=True), rtol=1e-12, atol=1e-12)
