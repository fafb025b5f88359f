import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from cosam import tensor as T
from cosam.gradcheck import grad_check
from cosam.tensor import Tensor, backward

finite = st.floats(-20, 20, allow_nan=False, width=64)


def leaf(x):
    return Tensor(np.asarray(x, dtype=np.float64), requires_grad=True)


def test_sum_gradient_is_ones(rng):
    x = leaf(rng.normal(size=(3, 4)))
    backward(x.sum())
    assert np.array_equal(x.grad, np.ones((3, 4)))


def test_square_sum_gradient_is_2x(rng):
    x = leaf(rng.normal(size=(5,)))
    backward((x * x).sum())
    assert np.allclose(x.grad, 2 * x.data, rtol=0, atol=1e-15)


def test_backward_rejects_non_scalar():
    with pytest.raises(ValueError):
        backward(leaf([1.0, 2.0]) * 2)


def test_gradients_accumulate_until_reset():
    x = leaf([1.0, 2.0])
    backward(x.sum())
    backward(x.sum())
    assert np.array_equal(x.grad, [2.0, 2.0])
    x.zero_grad()
    assert x.grad is None


def test_shared_subexpression_accumulates():
    x = leaf([3.0])
    y = x * x
    backward((y + y).sum())
    assert np.allclose(x.grad, [12.0])


def test_deep_chain_does_not_recurse():
    x = leaf([1.0])
    y = x
    for _ in range(5000):
        y = y * 1.0
    backward(y.sum())
    assert x.grad[0] == 1.0


def test_no_grad_builds_no_graph():
    x = leaf([1.0, 2.0])
    with T.no_grad():
        y = T.exp(x) * 2
    assert not y.requires_grad and y._parents == ()


def test_broadcast_gradient_is_reduced(rng):
    a, b = leaf(rng.normal(size=(3, 4))), leaf(rng.normal(size=(1, 4)))
    backward((a * b).sum())
    assert b.grad.shape == (1, 4)
    assert np.allclose(b.grad, a.data.sum(0, keepdims=True))


def test_sigmoid_at_zero():
    x = leaf([0.0])
    y = T.sigmoid(x)
    backward(y.sum())
    assert y.data[0] == 0.5 and x.grad[0] == 0.25


def test_sigmoid_is_stable_for_large_inputs():
    y = T.sigmoid(Tensor(np.array([-1000.0, 1000.0])))
    assert np.all(np.isfinite(y.data)) and y.data[0] == 0.0 and y.data[1] == 1.0


def test_softmax_of_zeros():
    assert np.array_equal(T.softmax(Tensor(np.zeros(2))).data, [0.5, 0.5])


def test_masked_softmax_zeroes_disallowed_entries(rng):
    x = Tensor(rng.normal(size=(3, 4)))
    mask = np.array([[1, 0, 1, 1], [1, 1, 1, 1], [0, 0, 1, 0]], dtype=bool)
    p = T.softmax(x, axis=1, mask=mask).data
    assert np.all(p[~mask] == 0.0)
    assert np.allclose(p.sum(1), 1.0)
    assert p[2, 2] == 1.0


def test_masked_softmax_rejects_empty_rows():
    with pytest.raises(ValueError):
        T.softmax(Tensor(np.zeros((1, 3))), axis=1, mask=np.zeros((1, 3), bool))


@settings(max_examples=50, deadline=None)
@given(arrays(np.float64, (3, 5), elements=st.floats(-50, 50, allow_nan=False)))
def test_softmax_is_a_distribution(x):
    p = T.softmax(Tensor(x), axis=1).data
    assert np.all(p >= 0)
    assert np.allclose(p.sum(axis=1), 1.0, atol=1e-6)


@settings(max_examples=30, deadline=None)
@given(arrays(np.float64, (2, 4), elements=finite))
def test_log_softmax_matches_log_of_softmax(x):
    a = T.log_softmax(Tensor(x), axis=1).data
    b = np.log(T.softmax(Tensor(x), axis=1).data)
    assert np.allclose(a, b, atol=1e-9)


def test_relu_gradient_away_from_kink(rng):
    x = rng.uniform(0.1, 2.0, size=(4, 5)) * rng.choice([-1, 1], size=(4, 5))
    t = leaf(x)
    r = rng.normal(size=x.shape)
    assert grad_check(lambda: (T.relu(t) * r).sum(), t) < 1e-4


@pytest.mark.parametrize("seed", [0, 1, 2])
def test_primitive_gradients(seed):
    rng = np.random.default_rng(seed)
    a = leaf(rng.normal(size=(2, 3)))
    b = leaf(rng.uniform(0.5, 2.0, size=(2, 3)))
    m = leaf(rng.normal(size=(3, 4)))
    idx = np.array([1, 0, 1])

    def f():
        y = T.take(a, idx, axis=0) @ m
        z = T.concat([a, b], axis=0) * 0.5 + T.stack([a, b], axis=0).sum(0).mean()
        w = T.where(a.data > 0, a, b) / b - T.sqrt(b) + T.log(b) + T.exp(-a) + a ** 3
        v = T.max_(a, axis=1).sum() + T.min_(b, axis=0).sum() + T.broadcast_to(b[0:1], (4, 3)).sum()
        s = T.standardize(a, axis=1, eps=1e-4)
        return y.sum() + (z * z).sum() + w.sum() + v + (s * b).sum() + a.transpose(1, 0)[2].sum()

    assert grad_check(f, [a, b, m]) < 1e-4


def test_getitem_backward_scatters_with_repeats():
    x = leaf([1.0, 2.0, 3.0])
    backward(x[np.array([0, 0, 2])].sum())
    assert np.array_equal(x.grad, [2.0, 0.0, 1.0])


def test_batched_matmul_shapes(rng):
    a, b = leaf(rng.normal(size=(2, 3, 4))), leaf(rng.normal(size=(4, 5)))
    y = a @ b
    assert y.shape == (2, 3, 5)
    assert grad_check(lambda: ((a @ b) ** 2).sum(), [a, b]) < 1e-4


def test_standardize_constant_row_is_zero():
    x = leaf(np.full((2, 5), 3.0))
    y = T.standardize(x, axis=1, eps=1e-4)
    assert np.array_equal(y.data, np.zeros((2, 5)))
    backward(y.sum())
    assert np.all(np.isfinite(x.grad))


def test_operations_are_deterministic(rng):
    x = rng.normal(size=(4, 6))
    outs = [T.softmax(Tensor(x) @ Tensor(x.T), axis=0).data for _ in range(2)]
    assert np.array_equal(outs[0], outs[1])


@settings(max_examples=100, deadline=None)
@given(st.floats(-1e6, 1e6, allow_nan=False), st.integers(2, 64))
def test_standardize_constant_slice_is_exactly_zero(value, n):
    out = T.standardize(np.full((3, n), value), axis=1, eps=1e-4).data
    assert np.array_equal(out, np.zeros((3, n)))
