import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from lilad import tensor as T
from lilad.errors import ContractError, DimensionError, TrainingError
from lilad.optim import OptimizerState, clip_global_norm, finite_diff_check, optimizer_step
from lilad.tensor import Tape, Tensor

finite = st.floats(-5, 5, allow_nan=False, allow_infinity=False)


def param(rng, *shape):
    return Tensor(rng.normal(size=shape), requires_grad=True)


# -- matmul -------------------------------------------------------------------

def test_matmul_identity():
    out = T.matmul(T.identity(2), Tensor([[3.0, 4.0], [5.0, 6.0]]))
    np.testing.assert_array_equal(out.data, [[3, 4], [5, 6]])


def test_matmul_hand_value():
    assert T.matmul(Tensor([[1.0, 2.0]]), Tensor([[3.0], [4.0]])).data.tolist() == [[11.0]]


def test_matmul_zero_annihilates():
    out = T.zeros(2, 3) @ Tensor(np.random.default_rng(0).normal(size=(3, 5)))
    np.testing.assert_array_equal(out.data, np.zeros((2, 5)))


def test_matmul_shape_mismatch():
    with pytest.raises(DimensionError):
        T.matmul(T.zeros(2, 3), T.zeros(2, 3))


def test_batched_matmul_gradient():
    rng = np.random.default_rng(1)
    a, b = param(rng, 2, 3, 4), param(rng, 4, 5)
    assert finite_diff_check(lambda: ((a @ b) ** 2).sum(), [a, b], num_coords=None) < 1e-7


# -- elementwise ----------------------------------------------------------------

def test_elementwise_examples():
    assert T.elementwise("tanh", Tensor(0.0)).data == 0.0
    np.testing.assert_array_equal(T.elementwise("add", Tensor([1.0, 2.0]), Tensor([3.0, 4.0])).data, [4, 6])
    x = Tensor([1.5, -2.0, 3.0])
    np.testing.assert_array_equal(T.elementwise("mul", x, T.ones_like(x)).data, x.data)


def test_elementwise_bad_broadcast():
    with pytest.raises(DimensionError):
        T.add(T.zeros(2, 3), T.zeros(4))
    with pytest.raises(ContractError):
        T.elementwise("nope", Tensor(1.0))


@pytest.mark.parametrize("op", ["tanh", "gelu", "exp", "square"])
def test_unary_gradients(op):
    rng = np.random.default_rng(2)
    a = param(rng, 3, 4)
    assert finite_diff_check(lambda: (T.elementwise(op, a) * Tensor(rng.normal(size=(3, 4)) * 0 + 1.3)).sum(),
                             [a], num_coords=None) < 1e-7


def test_broadcast_gradients():
    rng = np.random.default_rng(3)
    a, b, c = param(rng, 3, 1, 4), param(rng, 5, 1), param(rng, 4)
    assert finite_diff_check(lambda: ((a * b + c) / (b * b + 1.0)).sum(), [a, b, c], num_coords=None) < 1e-7


def test_smoothed_relu_gradient_away_from_knees():
    x = Tensor(np.array([-0.7, 0.03, 0.06, 0.4, 2.0]), requires_grad=True)
    assert finite_diff_check(lambda: (T.smoothed_relu(x, 0.1) * 3.0).sum(), [x], h=1e-6, num_coords=None) < 1e-7


def test_gelu_values():
    # tanh approximation, checked against its closed form
    x = np.array([-2.0, 0.0, 0.5, 3.0])
    ref = 0.5 * x * (1 + np.tanh(math.sqrt(2 / math.pi) * (x + 0.044715 * x ** 3)))
    np.testing.assert_allclose(T.gelu(Tensor(x)).data, ref, rtol=0, atol=1e-15)


# -- softmax / layer norm -------------------------------------------------------

def test_softmax_examples():
    np.testing.assert_allclose(T.softmax_lastdim(Tensor([0.0, 0.0])).data, [0.5, 0.5])
    np.testing.assert_allclose(T.softmax_lastdim(Tensor([1e9, 1e9])).data, [0.5, 0.5])
    np.testing.assert_allclose(T.softmax_lastdim(Tensor([math.log(1), math.log(3)])).data, [0.25, 0.75],
                               atol=1e-15)


@settings(max_examples=50, deadline=None)
@given(arrays(np.float64, (3, 6), elements=st.floats(-50, 50)))
def test_softmax_rows_sum_to_one(x):
    s = T.softmax_lastdim(Tensor(x)).data
    assert np.all(np.abs(s.sum(axis=-1) - 1.0) <= 1e-12)
    assert np.all(s >= 0)


def test_softmax_gradient():
    rng = np.random.default_rng(4)
    x = param(rng, 2, 5)
    w = Tensor(rng.normal(size=(2, 5)))
    assert finite_diff_check(lambda: (T.softmax_lastdim(x) * w).sum(), [x], num_coords=None) < 1e-6


def test_layer_norm_examples():
    out = T.layer_norm(Tensor([[2.0, 2.0, 2.0]]), Tensor(np.ones(3)), Tensor([0.1, 0.2, 0.3]))
    np.testing.assert_allclose(out.data, [[0.1, 0.2, 0.3]])
    out = T.layer_norm(Tensor([1.0, -1.0]), Tensor(np.ones(2)), Tensor(np.zeros(2)), eps_ln=1e-300)
    np.testing.assert_allclose(out.data, [1.0, -1.0], rtol=1e-15)


@settings(max_examples=50, deadline=None)
@given(arrays(np.float64, (4, 7), elements=st.floats(-100, 100)))
def test_layer_norm_slices_normalized(x):
    if np.any(x.std(axis=-1) < 1e-3):
        return
    out = T.layer_norm(Tensor(x), Tensor(np.ones(7)), Tensor(np.zeros(7))).data
    assert np.all(np.abs(out.mean(axis=-1)) <= 1e-10)


def test_layer_norm_gradient():
    rng = np.random.default_rng(5)
    x, g, b = param(rng, 3, 6), param(rng, 6), param(rng, 6)
    w = Tensor(rng.normal(size=(3, 6)))
    assert finite_diff_check(lambda: (T.layer_norm(x, g, b) * w).sum(), [x, g, b], num_coords=None) < 1e-6


def test_layer_norm_affine_mismatch():
    with pytest.raises(DimensionError):
        T.layer_norm(T.zeros(2, 3), T.zeros(4), T.zeros(4))


# -- shape ops -------------------------------------------------------------------

def test_shape_op_gradients():
    rng = np.random.default_rng(6)
    a, b = param(rng, 2, 3, 4), param(rng, 2, 3, 2)
    idx = np.array([0, 2, 2, 1])

    def f():
        c = T.concat([a, b], axis=-1)                               # (2, 3, 6)
        d = c.transpose(2, 0, 1).reshape(6, 6)
        e = d[idx] * 2.0 + d[1:3].sum(axis=0, keepdims=True)
        w = T.where(np.arange(6) % 2 == 0, e, e * e)
        return T.norm_lastdim(w).mean() + T.swap_last(a).sum()

    assert finite_diff_check(f, [a, b], num_coords=None) < 1e-6


def test_norm_gradient_at_zero_is_finite():
    z = Tensor(np.zeros((2, 3)), requires_grad=True)
    with Tape() as tape:
        loss = T.norm_lastdim(z).sum()
    g = tape.backward(loss)[z]
    assert np.all(np.isfinite(g))


# -- backward / tape ----------------------------------------------------------------

def test_backward_examples():
    w = Tensor(np.array([1.0, 2.0]), requires_grad=True)
    with Tape() as tape:
        loss = w.sum()
    np.testing.assert_array_equal(tape.backward(loss)[w], [1.0, 1.0])
    with Tape() as tape:
        loss = (w * w).sum() / 2.0
    np.testing.assert_array_equal(tape.backward(loss)[w], [1.0, 2.0])


def test_detached_operand_gets_no_gradient():
    w = Tensor(np.array([1.0, 2.0]), requires_grad=True)
    with Tape() as tape:
        loss = (w * w.detach()).sum()
    np.testing.assert_array_equal(tape.backward(loss)[w], [1.0, 2.0])     # not 2w


def test_backward_contracts():
    w = Tensor(np.ones(3), requires_grad=True)
    with Tape() as tape:
        y = w * 2.0
        loss = y.sum()
    with pytest.raises(ContractError):
        tape.backward(y)
    tape.backward(loss)
    with pytest.raises(ContractError):
        tape.backward(loss)


def test_paused_tape_records_nothing():
    w = Tensor(np.ones(3), requires_grad=True)
    with Tape() as tape:
        with Tape.paused():
            y = w * 2.0
        assert not tape.nodes
        assert not y.requires_grad


def test_no_recording_outside_tape():
    w = Tensor(np.ones(3), requires_grad=True)
    assert not (w * 2.0).requires_grad


def test_topological_order():
    rng = np.random.default_rng(7)
    a = param(rng, 3)
    with Tape() as tape:
        b = T.tanh(a) * a
        loss = (b + T.exp(b)).sum()
    seen = {id(a)}
    for node in tape.nodes:
        assert all(id(p) in seen or not p.requires_grad for p in node.parents)
        seen.add(id(node.out))


def test_forward_determinism():
    rng = np.random.default_rng(8)
    a = rng.normal(size=(4, 5))
    r1 = T.gelu(T.softmax_lastdim(Tensor(a)) @ Tensor(a.T)).data
    r2 = T.gelu(T.softmax_lastdim(Tensor(a)) @ Tensor(a.T)).data
    assert r1.tobytes() == r2.tobytes()


# -- optimizer ---------------------------------------------------------------------

def test_sgd_example():
    w = {"w": Tensor(np.array([1.0]))}
    optimizer_step(w, {"w": np.array([2.0])}, OptimizerState(0.1))
    assert w["w"].data[0] == pytest.approx(0.8, abs=1e-15)


def test_sgd_zero_gradient_and_linearity():
    w = {"w": Tensor(np.array([1.0, -3.0]))}
    optimizer_step(w, {"w": np.zeros(2)}, OptimizerState(0.1))
    np.testing.assert_array_equal(w["w"].data, [1.0, -3.0])
    g1, g2 = np.array([0.5, 1.0]), np.array([-2.0, 0.25])
    a = {"w": Tensor(np.array([1.0, -3.0]))}
    b = {"w": Tensor(np.array([1.0, -3.0]))}
    st_ = OptimizerState(0.1)
    optimizer_step(a, {"w": g1}, st_)
    optimizer_step(a, {"w": g2}, st_)
    optimizer_step(b, {"w": g1 + g2}, OptimizerState(0.1))
    np.testing.assert_allclose(a["w"].data, b["w"].data, rtol=0, atol=1e-15)


def test_nan_gradient_names_parameter():
    w = {"layer.W": Tensor(np.ones(2))}
    with pytest.raises(TrainingError, match="layer.W"):
        optimizer_step(w, {"layer.W": np.array([np.nan, 0.0])}, OptimizerState(0.1))


def test_adam_moments_match_shapes_and_first_step():
    w = {"w": Tensor(np.zeros((2, 3)))}
    s = OptimizerState(0.01, "adam")
    g = np.arange(6.0).reshape(2, 3) - 2.5
    optimizer_step(w, {"w": g}, s)
    assert s.m["w"].shape == s.v["w"].shape == (2, 3)
    # first bias-corrected Adam step moves every coordinate by ~lr against the gradient sign
    np.testing.assert_allclose(w["w"].data, -0.01 * np.sign(g), rtol=1e-6)


def test_clip_global_norm():
    grads = {"a": np.array([3.0]), "b": np.array([4.0])}
    assert clip_global_norm(grads, 1.0) == pytest.approx(5.0)
    np.testing.assert_allclose([grads["a"][0], grads["b"][0]], [0.6, 0.8])


# -- finite differences ---------------------------------------------------------------

def test_finite_diff_quadratic_and_constant():
    rng = np.random.default_rng(9)
    w = param(rng, 5)
    A = rng.normal(size=(5, 5))
    assert finite_diff_check(lambda: ((Tensor(A) @ w.reshape(5, 1)) ** 2).sum(), [w], h=1e-3,
                             num_coords=None) <= 1e-8
    assert finite_diff_check(lambda: Tensor(3.0) + (w * 0.0).sum(), [w], num_coords=None) == 0.0


@settings(max_examples=20, deadline=None)
@given(arrays(np.float64, (3,), elements=finite), arrays(np.float64, (3,), elements=finite))
def test_addition_gradient_is_ones(x, y):
    a, b = Tensor(x, requires_grad=True), Tensor(y, requires_grad=True)
    with Tape() as tape:
        loss = (a + b).sum()
    g = tape.backward(loss)
    np.testing.assert_array_equal(g[a], np.ones(3))
    np.testing.assert_array_equal(g[b], np.ones(3))
