import numpy as np
import pytest
from hypothesis import given, settings
import hypothesis.strategies as st
from hypothesis.extra.numpy import arrays

from heurvidqa.errors import ArgumentError, DomainError, NumericError, ShapeError
from heurvidqa.substrate import (GradientTape, Tensor, add, broadcast_to, concat, grad_check, l2_normalize, layer_norm,
                                 log_softmax, mul, soft_cross_entropy, softmax, stack)

finite = st.floats(min_value=-5, max_value=5, allow_nan=False, allow_infinity=False)


def test_matmul_identity():
    result = Tensor([[1, 0], [0, 1]]) @ Tensor([[3], [4]])
    np.testing.assert_array_equal(result.data, [[3], [4]])


def test_matmul_hand_arithmetic():
    assert (Tensor([[1, 2]]) @ Tensor([[3], [4]])).data.tolist() == [[11.0]]


def test_matmul_matches_triple_loop():
    rng = np.random.default_rng(0)
    a, b = rng.normal(size=(3, 4)), rng.normal(size=(4, 2))
    expected = np.zeros((3, 2))
    for i in range(3):
        for j in range(2):
            for k in range(4):
                expected[i, j] += a[i, k] * b[k, j]
    np.testing.assert_allclose((Tensor(a) @ Tensor(b)).data, expected, atol=1e-12)


def test_matmul_shape_error_names_both_shapes():
    with pytest.raises(ShapeError, match=r'\[2, 3\].*\[2, 3\]'):
        Tensor(np.ones((2, 3))) @ Tensor(np.ones((2, 3)))


def test_matmul_backward():
    rng = np.random.default_rng(1)
    a = Tensor(rng.normal(size=(3, 4)), requires_grad=True)
    b = Tensor(rng.normal(size=(4, 2)), requires_grad=True)
    upstream = rng.normal(size=(3, 2))
    tape = ((a @ b) * upstream).sum().backward()
    np.testing.assert_allclose(tape.grad(a), upstream @ b.data.T, atol=1e-12)
    np.testing.assert_allclose(tape.grad(b), a.data.T @ upstream, atol=1e-12)


def test_softmax_values():
    np.testing.assert_allclose(softmax(Tensor([2.0, 1.0, 0.0])).data, [0.66524, 0.24473, 0.09003], atol=1e-5)
    np.testing.assert_allclose(softmax(Tensor([2.0, 1.0, 0.0]), 0.5).data, [0.86681, 0.11731, 0.01587], atol=1e-5)


@pytest.mark.parametrize('temperature', [0.07, 1.0, 3.0])
def test_softmax_constant_logits_is_uniform(temperature):
    np.testing.assert_allclose(softmax(Tensor([4.2, 4.2, 4.2]), temperature).data, [1 / 3] * 3, atol=1e-12)


@pytest.mark.parametrize('temperature', [0.0, -1.0])
def test_softmax_rejects_non_positive_temperature(temperature):
    with pytest.raises(DomainError):
        softmax(Tensor([1.0, 2.0]), temperature)


def test_softmax_handles_large_logits():
    out = softmax(Tensor([1000.0, 1000.0, -1000.0])).data
    assert np.all(np.isfinite(out))
    np.testing.assert_allclose(out, [0.5, 0.5, 0.0], atol=1e-12)


@given(arrays(np.float64, st.integers(2, 8), elements=finite), st.floats(min_value=0.05, max_value=5.0))
def test_softmax_sums_to_one_and_keeps_argmax(logits, temperature):
    out = softmax(Tensor(logits), temperature).data
    assert abs(out.sum() - 1.0) < 1e-9
    assert out[np.argmax(logits)] == out.max()


def test_log_softmax_matches_log_of_softmax():
    x = Tensor([0.3, -1.2, 2.5, 0.0])
    np.testing.assert_allclose(log_softmax(x).data, np.log(softmax(x).data), atol=1e-12)


def test_soft_cross_entropy_examples():
    assert soft_cross_entropy([1.0, 0.0], Tensor([0.5, 0.5])).item() == pytest.approx(0.693147, abs=1e-6)
    assert soft_cross_entropy([0.7, 0.3], Tensor([0.7, 0.3])).item() == pytest.approx(0.610864, abs=1e-6)
    assert soft_cross_entropy([1.0, 0.0], Tensor([1.0, 0.0])).item() == pytest.approx(0.0, abs=1e-9)


def test_soft_cross_entropy_length_mismatch():
    with pytest.raises(ShapeError):
        soft_cross_entropy([0.5, 0.5], Tensor([0.2, 0.3, 0.5]))


def test_soft_cross_entropy_rejects_non_distribution():
    with pytest.raises(DomainError):
        soft_cross_entropy([0.5, 0.6], Tensor([0.5, 0.5]))


distributions = arrays(np.float64, 5, elements=st.floats(min_value=0.01, max_value=1.0)).map(lambda a: a / a.sum())


@given(distributions, distributions)
def test_soft_cross_entropy_gibbs_inequality(p, q):
    entropy = -(p * np.log(p)).sum()
    assert soft_cross_entropy(p, Tensor(p)).item() == pytest.approx(entropy, abs=1e-9)
    assert soft_cross_entropy(p, Tensor(q)).item() >= entropy - 1e-12


def test_grad_check_square():
    x = Tensor([3.0], requires_grad=True)
    assert grad_check(lambda t: (t * t).sum(), [x]) < 1e-9


def test_grad_check_softmax_cross_entropy():
    rng = np.random.default_rng(0)
    logits = Tensor(rng.normal(size=5), requires_grad=True)
    target = softmax(Tensor(rng.normal(size=5))).data
    assert grad_check(lambda x: soft_cross_entropy(target, softmax(x)), [logits]) < 1e-6


def test_grad_check_epsilon_range():
    with pytest.raises(ArgumentError):
        grad_check(lambda t: t.sum(), [Tensor([1.0], requires_grad=True)], epsilon=1e-2)


def test_grad_check_non_finite_value():
    with pytest.raises(NumericError):
        grad_check(lambda t: t.log().sum(), [Tensor([-1.0], requires_grad=True)])


WEIGHTS = np.random.default_rng(7).uniform(0.0, 0.5, size=(4, 4))

PRIMITIVES = {
    'exp': lambda x: x.exp().sum(),
    'tanh': lambda x: x.tanh().sum(),
    'sigmoid': lambda x: x.sigmoid().sum(),
    'gelu': lambda x: x.gelu().sum(),
    'power': lambda x: ((x + 3.0) ** 1.5).sum(),
    'div': lambda x: (1.0 / (x + 3.0)).sum(),
    'softmax': lambda x: (softmax(x, 0.5) * np.arange(4.0)).sum(),
    'log_softmax': lambda x: (log_softmax(x) * np.arange(4.0)).sum(),
    'reshape-transpose': lambda x: (x.reshape(2, 2).transpose() @ Tensor([[1.0], [2.0]])).sum(),
    'getitem': lambda x: (x[1:3] * x[0]).sum(),
    'concat': lambda x: (concat([x, x * 2.0]) * np.arange(8.0)).sum(),
    'stack': lambda x: (stack([x, x.exp()]) * np.ones((2, 4))).sum(),
    'l2_normalize': lambda x: (l2_normalize(x + np.array([3.0, 0.0, 0.0, 0.0])) * np.arange(4.0)).sum(),
    'layer_norm': lambda x: (layer_norm(x + np.arange(4.0) * 5.0, Tensor(np.ones(4)), Tensor(np.zeros(4)))
                             * np.arange(4.0)).sum(),
    'log': lambda x: ((x * x + 1.0).log() * np.arange(1.0, 5.0)).sum(),
    'clamp_min': lambda x: (x.clamp_min(-5.0) * np.arange(1.0, 5.0)).sum() + (x - 20.0).clamp_min(-5.0).sum(),
    'add-broadcast': lambda x: add(x, x.reshape(4, 1)).tanh().sum(),
    'mul-broadcast': lambda x: (mul(x.reshape(4, 1), x.reshape(1, 4)) * WEIGHTS).sum(),
    'broadcast_to': lambda x: (broadcast_to(x.reshape(1, 4), (3, 4)) * np.arange(12.0).reshape(3, 4)).tanh().sum(),
    'sum-axis': lambda x: (x.reshape(2, 2).exp().sum(axis=0) * np.array([1.0, 2.0])).sum()
                          + x.reshape(2, 2).tanh().sum(axis=1, keepdims=True).exp().sum(),
    'mean-axis': lambda x: (x.reshape(2, 2).tanh().mean(axis=1) * np.array([3.0, -1.0])).sum()
                           + x.reshape(2, 2).exp().mean(axis=0, keepdims=True).sigmoid().sum(),
    'matmul-right': lambda x: (Tensor(WEIGHTS[:3]) @ x.reshape(4, 1)).tanh().sum(),
    'soft_cross_entropy': lambda x: soft_cross_entropy(np.array([0.1, 0.2, 0.3, 0.4]), softmax(x))
                                    + soft_cross_entropy(np.array([[0.25, 0.75], [1.0, 0.0]]),
                                                         softmax(x.reshape(2, 2), axis=-1)).sum(),
}


@pytest.mark.parametrize('name', sorted(PRIMITIVES))
@settings(max_examples=100, deadline=None)
@given(values=arrays(np.float64, 4, elements=st.floats(min_value=-2, max_value=2)))
def test_primitive_gradients(name, values):
    x = Tensor(values + np.arange(4) * 0.37, requires_grad=True)
    # offset keeps every partial away from zero
    assert grad_check(lambda t: PRIMITIVES[name](t) + (t * 10.0).sum(), [x]) < 1e-6


def test_gradient_of_unused_tensor_is_zero():
    x = Tensor([1.0, 2.0], requires_grad=True)
    unused = Tensor([5.0], requires_grad=True)
    tape = (x * x).sum().backward()
    np.testing.assert_array_equal(tape.grad(unused), [0.0])


def test_backward_is_linear_in_losses():
    rng = np.random.default_rng(3)
    w = Tensor(rng.normal(size=(3, 3)), requires_grad=True)
    x = Tensor(rng.normal(size=(2, 3)))
    first = lambda: softmax(x @ w).sum(axis=0)[0]
    second = lambda: (x @ w).tanh().sum()
    combined = GradientTape(first() + second()).backward().grad(w)
    separate = first().backward().grad(w) + second().backward().grad(w)
    np.testing.assert_allclose(combined, separate, atol=1e-12)


def test_shared_node_is_visited_once():
    x = Tensor([2.0], requires_grad=True)
    y = x * x
    tape = (y + y).sum().backward()
    assert sum(node is y for node in tape.operations) == 1
    np.testing.assert_allclose(tape.grad(x), [8.0])


def test_l2_normalize_zero_vector():
    with pytest.raises(NumericError):
        l2_normalize(Tensor([0.0, 0.0]))


def test_backward_needs_scalar():
    with pytest.raises(ShapeError):
        (Tensor([1.0, 2.0], requires_grad=True) * 2.0).backward()
