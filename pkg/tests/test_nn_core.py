import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from ssvtcn.nn_core import (
    Adam,
    AdamState,
    GraphCycleError,
    NonFiniteError,
    Rng,
    Tensor,
    adam_step,
    backward,
    clamp_min,
    finite_diff_grad,
    log,
    make_node,
    matmul,
    no_grad,
    relative_error,
    relu,
    softmax,
    take,
    tsum,
)

finite = st.floats(-5, 5, allow_nan=False, allow_infinity=False)


def grad_of(fn, x):
    t = Tensor(x, requires_grad=True)
    backward(fn(t))
    return t.grad


def test_relu_values():
    assert relu(Tensor([-1.0, 0.0, 2.0])).data.tolist() == [0.0, 0.0, 2.0]
    assert np.all(relu(Tensor(-np.arange(1.0, 6.0))).data == 0)


def test_relu_gradient_matches_finite_differences():
    x = np.array([-1.0, 2.0])
    g = grad_of(lambda t: relu(t).sum(), x)
    fd = finite_diff_grad(lambda v: np.maximum(v, 0).sum(), x, 1e-5)
    assert g.tolist() == [0.0, 1.0]
    np.testing.assert_allclose(g, fd, atol=1e-9)


def test_softmax_examples():
    np.testing.assert_allclose(softmax(Tensor(np.zeros(4))).data, [0.25] * 4)
    np.testing.assert_allclose(softmax(Tensor([0.0, math.log(3)])).data, [0.25, 0.75], atol=1e-15)


@given(arrays(np.float64, st.integers(2, 7), elements=finite), finite)
def test_softmax_shift_invariant(x, c):
    np.testing.assert_allclose(softmax(Tensor(x + c)).data, softmax(Tensor(x)).data, atol=1e-12)


@given(arrays(np.float64, (3, 5), elements=st.floats(-300, 300)))
def test_softmax_rows_sum_to_one(x):
    p = softmax(Tensor(x)).data
    assert np.all(p >= 0)
    np.testing.assert_allclose(p.sum(axis=-1), 1.0, atol=1e-12)


def test_softmax_rejects_bad_input():
    with pytest.raises(ValueError):
        softmax(Tensor([1.0]))
    with pytest.raises(NonFiniteError):
        softmax(Tensor([0.0, np.nan]))


def test_adam_zero_gradient_leaves_params():
    p = np.array([1.0, -2.0])
    new, state = adam_step(p, np.zeros(2), AdamState.zeros(2))
    assert np.array_equal(new, p)
    assert state.step_count == 1


def test_adam_first_step_bias_correction():
    lr = 0.005
    new, state = adam_step(np.zeros(1), np.ones(1), AdamState.zeros(1), lr=lr)
    m_hat = state.first_moment / (1 - 0.9)
    v_hat = state.second_moment / (1 - 0.999)
    np.testing.assert_allclose([m_hat[0], v_hat[0]], [1.0, 1.0], rtol=1e-12)
    np.testing.assert_allclose(new, [-lr / (1 + 1e-8)], rtol=1e-12)


def test_adam_steps_do_not_grow_under_constant_gradient():
    p0 = np.zeros(3)
    g = np.array([0.3, -2.0, 5.0])
    p1, s = adam_step(p0, g, AdamState.zeros(3))
    p2, _ = adam_step(p1, g, s)
    assert np.all(np.abs(p2 - p1) <= np.abs(p1 - p0) * (1 + 1e-6))


def test_adam_class_matches_functional_form():
    t = Tensor([1.0, 2.0], requires_grad=True)
    opt = Adam([t], lr=0.1)
    t.grad = np.array([0.5, -0.5])
    opt.step()
    ref, _ = adam_step(np.array([1.0, 2.0]), np.array([0.5, -0.5]), AdamState.zeros(2), lr=0.1)
    np.testing.assert_array_equal(t.data, ref)


def test_backward_of_sum_is_ones():
    x = np.random.default_rng(0).normal(size=(2, 3, 4))
    assert np.array_equal(grad_of(lambda t: t.sum(), x), np.ones_like(x))


def test_backward_of_sum_of_squares():
    assert grad_of(lambda t: (t * t).sum(), [1.0, 2.0]).tolist() == [2.0, 4.0]


def test_gradients_accumulate_across_calls():
    t = Tensor([1.0, 2.0], requires_grad=True)
    backward(t.sum())
    backward((t * 3.0).sum())
    assert t.grad.tolist() == [4.0, 4.0]


def test_backward_rejects_non_scalar():
    with pytest.raises(ValueError):
        backward(Tensor([1.0, 2.0], requires_grad=True) * 2.0)


def test_cycle_is_detected():
    a = Tensor([1.0], requires_grad=True)
    b = a * 2.0
    c = b * 3.0
    b._parents = (c,)  # forge a loop
    with pytest.raises(GraphCycleError):
        backward(c.sum())


def test_no_grad_builds_no_graph():
    a = Tensor([1.0], requires_grad=True)
    with no_grad():
        b = a * 2.0
    assert not b.requires_grad


def composite_loss(x, w, labels):
    """softmax cross-entropy through a relu layer, with gather and clamped log."""
    p = softmax(matmul(relu(x), w))
    picked = take(p, (np.arange(len(labels)), labels))
    return -tsum(log(clamp_min(picked, 1e-12))) * (1.0 / len(labels))


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 10_000))
def test_composed_graph_matches_finite_differences(seed):
    rng = np.random.default_rng(seed)
    x = rng.normal(size=(5, 3))
    w = rng.normal(size=(3, 4))
    labels = rng.integers(0, 4, size=5)
    wt = Tensor(w, requires_grad=True)
    xt = Tensor(x, requires_grad=True)
    backward(composite_loss(xt, wt, labels))
    fd_w = finite_diff_grad(lambda v: composite_loss(Tensor(x), Tensor(v), labels).item(), w)
    fd_x = finite_diff_grad(lambda v: composite_loss(Tensor(v), Tensor(w), labels).item(), x)
    assert relative_error(wt.grad, fd_w) < 1e-4
    assert relative_error(xt.grad, fd_x) < 1e-4


def test_finite_diff_examples():
    x = np.random.default_rng(1).normal(size=(4,))
    np.testing.assert_allclose(finite_diff_grad(np.sum, x), np.ones(4), atol=1e-8)
    np.testing.assert_allclose(finite_diff_grad(lambda v: float((v**2).sum()), [3.0], 1e-5), [6.0], atol=1e-6)
    with pytest.raises(ValueError):
        finite_diff_grad(np.sum, x, h=0)


def test_make_node_custom_op():
    a = Tensor([2.0, 3.0], requires_grad=True)
    cube = make_node(a.data**3, (a,), lambda g: (3 * a.data**2 * g,))
    backward(cube.sum())
    assert a.grad.tolist() == [12.0, 27.0]


def test_rng_children_are_stable_and_independent():
    a1 = Rng(5).child("tcn").normal(size=3)
    Rng(5).child("vae").normal(size=3)
    a2 = Rng(5).child("tcn").normal(size=3)
    assert np.array_equal(a1, a2)
    assert not np.array_equal(a1, Rng(5).child("vae").normal(size=3))
    assert not np.array_equal(a1, Rng(6).child("tcn").normal(size=3))
