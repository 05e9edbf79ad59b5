import numpy as np
import pytest

from satem_denoise.numerics import (
    NonDeterministicError,
    NonFiniteError,
    ShapeError,
    Tensor,
    apply,
    backward,
    concat,
    exp,
    finite_diff_check,
    log,
    matmul,
    mean,
    no_grad,
    parameter,
    relu,
    reshape,
    shift,
    sigmoid,
    slice_,
    square,
    sum_,
    variance,
)


def test_matmul_identity():
    a = np.arange(6.0).reshape(3, 2)
    assert np.array_equal(matmul(np.eye(3), a).data, a)


def test_exp_of_zero():
    assert np.array_equal(exp(np.zeros(4)).data, np.ones(4))


def test_mean():
    assert mean(np.array([1.0, 2.0, 3.0])).item() == 2.0


def test_variance_is_population():
    assert variance(np.array([1.0, 3.0])).item() == 1.0


def test_invalid_op_raises():
    with pytest.raises(ValueError) as excinfo:
        apply("convolve", np.ones(3))
    assert "Invalid op kind: convolve" in str(excinfo.value)


def test_shape_mismatch_raises():
    with pytest.raises(ShapeError):
        parameter(np.ones((2, 3))) @ parameter(np.ones((2, 3)))


def test_non_finite_output_raises():
    with pytest.raises(NonFiniteError):
        log(np.array([0.0, 1.0]))


def test_non_finite_tensor_rejected():
    with pytest.raises(NonFiniteError):
        Tensor([1.0, np.nan])


def test_square_gradient():
    x = parameter(3.0)
    backward(square(x))
    assert x.grad == pytest.approx(6.0)


def test_constant_loss_leaves_no_gradient():
    c = Tensor(np.ones(3))
    backward(sum_(c))
    assert c.grad is None


def test_backward_needs_scalar():
    x = parameter(np.ones(3))
    with pytest.raises(ShapeError):
        backward(x * 2.0)


def test_gradients_accumulate():
    x = parameter(np.array([1.0, -2.0]))
    backward(sum_(square(x)))
    backward(sum_(square(x)))
    assert np.allclose(x.grad, 4 * x.data)


def test_backward_is_linear():
    rng = np.random.default_rng(0)
    w = parameter(rng.normal(size=(3, 2)))
    x = rng.normal(size=(4, 3))

    def first():
        return sum_(sigmoid(x @ w))

    def second():
        return mean(square(x @ w))

    backward(first())
    backward(second())
    separate = w.grad.copy()
    w.zero_grad()
    backward(first() + second())
    assert np.allclose(w.grad, separate, rtol=1e-12, atol=1e-14)


def test_shared_input_gradient():
    x = parameter(2.0)
    backward(x * x + x)
    assert x.grad == pytest.approx(5.0)


def test_no_grad_records_nothing():
    x = parameter(np.ones(2))
    with no_grad():
        y = x * 3.0
    assert not y.requires_grad
    assert y._node is None


def test_shift_delays_one_step():
    x = np.arange(6.0).reshape(3, 2)
    out = shift(x).data
    assert np.array_equal(out[0], [0.0, 0.0])
    assert np.array_equal(out[1:], x[:-1])


def test_tensor_division():
    a = parameter(np.array([2.0, 6.0]))
    b = parameter(np.array([4.0, 3.0]))
    out = a / b
    assert np.allclose(out.data, [0.5, 2.0])
    backward(sum_(out))
    assert np.allclose(a.grad, 1 / b.data)
    assert np.allclose(b.grad, -a.data / b.data ** 2)


def test_two_layer_map_matches_finite_differences():
    rng = np.random.default_rng(1)
    w1 = parameter(rng.uniform(-2, 2, size=(3, 5)))
    b1 = parameter(rng.uniform(-2, 2, size=5))
    w2 = parameter(rng.uniform(-2, 2, size=(5, 2)))
    x = rng.uniform(-2, 2, size=(4, 3))
    weights = rng.normal(size=(4, 2))

    def loss():
        return sum_(sigmoid(x @ w1 + b1) @ w2 * weights)

    assert finite_diff_check(loss, [w1, b1, w2]) < 1e-5


def test_linear_map_error_is_tiny():
    rng = np.random.default_rng(2)
    w = parameter(rng.normal(size=(3, 3)))
    x = rng.normal(size=(2, 3))
    assert finite_diff_check(lambda: sum_(x @ w), [w]) < 1e-6


def test_array_on_the_left_of_matmul():
    x = np.arange(6.0).reshape(2, 3)
    w = parameter(np.ones((3, 2)))
    out = x @ w
    assert isinstance(out, Tensor)
    assert np.array_equal(out.data, x @ np.ones((3, 2)))
    backward(sum_(out))
    assert np.array_equal(w.grad, x.T @ np.ones((2, 2)))


def test_sigmoid_chain():
    x = parameter(np.random.default_rng(3).uniform(-2, 2, size=5))

    def loss():
        y = x
        for _ in range(4):
            y = sigmoid(y * 2.0)
        return sum_(y)

    assert finite_diff_check(loss, {"x": x}) < 1e-5


@pytest.mark.parametrize(
    "fn",
    [
        lambda x: exp(x),
        lambda x: log(square(x) + 1.0),
        lambda x: relu(x) * x,
        lambda x: variance(x, axis=-1, keepdims=True) * x,
        lambda x: mean(x, axis=0) * 3.0,
        lambda x: concat([x, square(x)]),
        lambda x: slice_(x, 1, 3, axis=0),
        lambda x: reshape(x, (-1,)),
        lambda x: shift(x),
    ],
)
def test_op_gradients(fn):
    rng = np.random.default_rng(4)
    x = parameter(rng.uniform(-2, 2, size=(4, 3)))
    weights = rng.normal(size=fn(x).shape)
    x.zero_grad()
    assert finite_diff_check(lambda: sum_(fn(x) * weights), [x]) < 1e-5


def test_finite_diff_check_detects_nondeterminism():
    x = parameter(np.ones(2))
    rng = np.random.default_rng(0)

    def noisy_loss():
        return sum_(x * rng.normal())

    with pytest.raises(NonDeterministicError):
        finite_diff_check(noisy_loss, [x])


def test_finite_diff_check_rejects_bad_step():
    x = parameter(np.ones(2))
    with pytest.raises(ValueError):
        finite_diff_check(lambda: sum_(x), [x], h=0.0)


def test_finite_diff_check_restores_values():
    x = parameter(np.array([0.5, -1.5]))
    before = x.data.copy()
    finite_diff_check(lambda: sum_(square(x)), [x])
    assert np.array_equal(x.data, before)
    assert x.grad is None
