import math
import zlib

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from urbanembed import tensor as T
from urbanembed.errors import ContractError, ShapeError
from urbanembed.tensor import Adam, Tensor


def rand(rng, *shape):
    return Tensor(rng.uniform(-2, 2, size=shape), requires_grad=True)


def test_matmul_identity_and_hand_case():
    a = Tensor(np.arange(6.0).reshape(2, 3))
    assert np.array_equal(T.matmul(a, Tensor(np.eye(3))).data, a.data)
    out = T.matmul(Tensor([[1.0, 2.0], [3.0, 4.0]]), Tensor([[1.0], [1.0]]))
    assert out.data.tolist() == [[3.0], [7.0]]


def test_matmul_shape_error_names_both_shapes():
    with pytest.raises(ShapeError, match=r"\(2, 3\).*\(2, 3\)"):
        T.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))


def test_matmul_gradient_vs_finite_differences():
    rng = np.random.default_rng(0)
    a, b = rand(rng, 3, 4), rand(rng, 4, 2)
    assert T.gradcheck(lambda: (a @ b).sum(), [a, b]) < 1e-6


def test_softmax_examples():
    assert np.allclose(T.softmax(Tensor([0.0, 0.0, 0.0])).data, 1 / 3)
    big = T.softmax(Tensor([1000.0, 1000.0])).data
    assert np.all(np.isfinite(big)) and np.allclose(big, 0.5)
    out = T.softmax(Tensor(np.log([1.0, 2.0, 3.0]))).data
    assert np.allclose(out, [1 / 6, 2 / 6, 3 / 6], atol=1e-15)


def test_masked_softmax_zeroes_excluded_entries():
    x = Tensor(np.array([[1.0, 2.0, 3.0], [0.5, -1.0, 4.0]]), requires_grad=True)
    mask = np.array([[True, False, True], [False, True, False]])
    out = T.softmax(x, axis=1, mask=mask)
    assert out.data[0, 1] == 0.0 and out.data[1, 0] == 0.0 and out.data[1, 1] == 1.0
    assert np.allclose(out.data.sum(axis=1), 1.0, atol=1e-12)
    with pytest.raises(ContractError):
        T.softmax(x, axis=1, mask=np.zeros((2, 3), dtype=bool))


def test_layer_norm_examples():
    gain, bias = Tensor(np.ones(2)), Tensor(np.zeros(2))
    out = T.layer_norm(Tensor([[1.0, 3.0]]), gain, bias, eps=1e-12).data
    assert np.allclose(out, [[-1.0, 1.0]], atol=1e-9)
    const = T.layer_norm(Tensor([[5.0, 5.0, 5.0, 5.0]]), Tensor(np.ones(4)), Tensor(np.zeros(4))).data
    assert np.array_equal(const, np.zeros((1, 4)))


def test_layer_norm_row_stats():
    rng = np.random.default_rng(1)
    x = Tensor(rng.normal(scale=20.0, size=(7, 16)))
    out = T.layer_norm(x, Tensor(np.ones(16)), Tensor(np.zeros(16))).data
    assert np.abs(out.mean(axis=1)).max() < 1e-9
    assert np.abs(out.var(axis=1) - 1.0).max() < 1e-6


def test_layer_norm_gradcheck():
    rng = np.random.default_rng(2)
    x, g, b = rand(rng, 4, 5), rand(rng, 5), rand(rng, 5)
    w = Tensor(rng.normal(size=(4, 5)))
    assert T.gradcheck(lambda: (T.layer_norm(x, g, b) * w).sum(), [x, g, b]) < 1e-5


def test_backward_simple_cases():
    x = Tensor([1.0, -2.0, 3.0], requires_grad=True)
    x.sum().backward()
    assert x.grad.tolist() == [1.0, 1.0, 1.0]
    x.zero_grad()
    (x * x).sum().backward()
    assert np.array_equal(x.grad, 2 * x.data)


def test_backward_accumulates_until_reset():
    x = Tensor([1.0, 2.0], requires_grad=True)
    loss = (x * x).sum()
    loss.backward()
    loss.backward()
    assert np.array_equal(x.grad, 4 * x.data)


def test_backward_rejects_non_scalar():
    x = Tensor([1.0, 2.0], requires_grad=True)
    with pytest.raises(ContractError):
        (x * 2.0).backward()


def test_tape_visits_each_node_once_on_shared_subexpressions():
    x = Tensor([0.3, -0.7], requires_grad=True)
    y = T.exp(x)
    z = y * y + y  # y is used three times
    loss = z.sum()
    tape = T.build_tape(loss)
    assert len(tape) == len({id(n) for n in tape})
    positions = {id(n): i for i, n in enumerate(tape)}
    for node in tape:
        for parent in node._parents:
            if parent.requires_grad:
                assert positions[id(parent)] < positions[id(node)]
    loss.backward()
    ex = np.exp(x.data)
    assert np.allclose(x.grad, 2 * ex * ex + ex)


UNARY = {
    "sigmoid": T.sigmoid,
    "tanh": T.tanh,
    "exp": T.exp,
    "relu": T.relu,
    "leaky_relu": T.leaky_relu,
    "elu": T.elu,
    "softmax_rows": lambda x: T.softmax(x, axis=1),
    "softmax_cols": lambda x: T.softmax(x, axis=0),
    "log_softmax": lambda x: T.log_softmax(x, axis=1),
    "transpose": T.transpose,
    "slice": lambda x: x[1:, :2],
    "gather": lambda x: x[np.array([0, 2, 2, 1])],
    "sum_axis": lambda x: x.sum(axis=0),
    "mean": lambda x: x.mean(axis=1, keepdims=True),
}


@pytest.mark.parametrize("name", sorted(UNARY))
def test_unary_gradcheck(name):
    rng = np.random.default_rng(zlib.crc32(name.encode()))
    x = rand(rng, 3, 4)
    fn = UNARY[name]
    probe = Tensor(rng.normal(size=fn(x).shape))
    assert T.gradcheck(lambda: (fn(x) * probe).sum(), [x]) < 1e-4


def test_log_gradcheck_on_positive_inputs():
    rng = np.random.default_rng(3)
    x = Tensor(rng.uniform(0.5, 2.0, size=(3, 3)), requires_grad=True)
    assert T.gradcheck(lambda: T.log(x).sum(), [x]) < 1e-4


@pytest.mark.parametrize("op", [T.add, T.sub, T.mul, T.div])
def test_binary_broadcast_gradcheck(op):
    rng = np.random.default_rng(4)
    a = rand(rng, 3, 4)
    b = Tensor(rng.uniform(0.5, 2.0, size=(1, 4)), requires_grad=True)
    probe = Tensor(rng.normal(size=(3, 4)))
    assert T.gradcheck(lambda: (op(a, b) * probe).sum(), [a, b]) < 1e-4


def test_concat_and_squared_error_gradcheck():
    rng = np.random.default_rng(5)
    a, b, t = rand(rng, 3, 2), rand(rng, 3, 3), rand(rng, 3, 5)
    assert T.gradcheck(lambda: T.squared_error(T.concat([a, b], axis=1), t), [a, b, t]) < 1e-4
    assert T.gradcheck(lambda: T.squared_error(a, t[:, :2], reduction="mean"), [a, t]) < 1e-4


def test_adam_first_step_and_zero_gradient():
    w = Tensor([0.0], requires_grad=True)
    opt = Adam([w], lr=0.01)
    w.grad = np.array([1.0])
    opt.step()
    assert w.data[0] == pytest.approx(-0.01, abs=1e-9)
    u = Tensor([2.5], requires_grad=True)
    opt = Adam([u], lr=0.1)
    u.grad = np.array([0.0])
    opt.step()
    assert u.data[0] == 2.5


def test_adam_requires_gradients():
    w = Tensor([0.0], requires_grad=True)
    with pytest.raises(ContractError):
        Adam([w]).step()


def _adam_scalar_oracle(w, lr, steps, b1=0.9, b2=0.999, eps=1e-8):
    m = v = 0.0
    for t in range(1, steps + 1):
        g = 2 * (w - 3.0)
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        w -= lr * (m / (1 - b1**t)) / (math.sqrt(v / (1 - b2**t)) + eps)
    return w


def test_adam_quadratic_matches_scalar_recurrence():
    expected = _adam_scalar_oracle(0.0, 0.1, 50)
    assert abs(expected - 3.0) < 0.5
    w = Tensor([0.0], requires_grad=True)
    opt = Adam([w], lr=0.1)
    for _ in range(50):
        opt.zero_grad()
        ((w - 3.0) * (w - 3.0)).sum().backward()
        opt.step()
    assert w.data[0] == pytest.approx(expected, abs=1e-12)


@settings(max_examples=40, deadline=None)
@given(arrays(np.float64, (4, 5), elements=st.floats(-50, 50)))
def test_softmax_sigmoid_ranges(x):
    s = T.softmax(Tensor(x), axis=1).data
    assert np.all(s >= 0) and np.abs(s.sum(axis=1) - 1).max() < 1e-12
    sg = T.sigmoid(Tensor(x / 2)).data
    assert np.all((sg > 0) & (sg < 1))


def test_forward_is_deterministic():
    rng = np.random.default_rng(6)
    a, b = rng.normal(size=(8, 8)), rng.normal(size=(8, 8))
    run = lambda: T.softmax(T.layer_norm(Tensor(a) @ Tensor(b), Tensor(np.ones(8)), Tensor(np.zeros(8))), axis=1).data
    assert run().tobytes() == run().tobytes()


def test_module_state_roundtrip():
    class Toy(T.Module):
        def __init__(self):
            self.w = Tensor(np.ones((2, 2)), requires_grad=True)
            self.layers = [T.Module()]
            self.const = Tensor(np.ones(3))

    m = Toy()
    assert [n for n, _ in m.named_parameters()] == ["w"]
    state = m.state_dict()
    m.w.data[:] = 0
    m.load_state_dict(state)
    assert np.array_equal(m.w.data, np.ones((2, 2)))
