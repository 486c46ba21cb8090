import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from drive_cbm import tensor as tc
from drive_cbm.tensor import Tensor


def naive_matmul(a, b):
    m, k = a.shape
    _, n = b.shape
    out = np.zeros((m, n))
    for i in range(m):
        for j in range(n):
            s = 0.0
            for p in range(k):
                s += a[i, p] * b[p, j]
            out[i, j] = s
    return out


def test_matmul_identity_and_selector():
    x = Tensor([[1.0, 2.0], [3.0, 4.0]])
    assert np.array_equal(tc.matmul(Tensor(np.eye(2)), x).data, x.data)
    assert np.array_equal(tc.matmul(Tensor([[1.0, 0.0]]), Tensor([[2.0], [5.0]])).data, [[2.0]])


def test_matmul_matches_triple_loop():
    rng = np.random.default_rng(0)
    a, b = rng.normal(size=(3, 4)), rng.normal(size=(4, 2))
    np.testing.assert_allclose(tc.matmul(Tensor(a), Tensor(b)).data, naive_matmul(a, b), rtol=1e-13, atol=1e-14)


def test_matmul_shape_mismatch():
    with pytest.raises(tc.DimensionError):
        tc.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))


def test_gelu_values():
    assert tc.gelu(Tensor([0.0])).data[0] == 0.0
    big = tc.gelu(Tensor([20.0, -20.0])).data
    assert big[0] == pytest.approx(20.0)
    assert abs(big[1]) < 1e-12
    # high-precision oracle: 0.5 * (1 + erf(1/sqrt 2)) evaluated with math.erf
    oracle = 0.5 * 1.0 * (1.0 + math.erf(1.0 / math.sqrt(2.0)))
    assert tc.gelu(Tensor([1.0])).data[0] == pytest.approx(oracle, abs=1e-15)
    assert round(oracle, 6) == 0.841345


def test_cosine_rows_cases():
    B = Tensor([[1.0, 0.0], [0.0, 3.0], [2.0, 2.0]])
    out = tc.cosine_rows(Tensor([1.0, 1.0]), B).data
    assert out[0] == pytest.approx(1 / math.sqrt(2), abs=1e-15)
    assert out[1] == pytest.approx(1 / math.sqrt(2), abs=1e-15)
    assert out[2] == pytest.approx(1.0, abs=1e-15)
    assert tc.cosine_rows(Tensor([1.0, 0.0]), Tensor([[0.0, 5.0], [4.0, 0.0]])).data.tolist() == [0.0, 1.0]


def test_cosine_rows_zero_norm():
    with pytest.raises(tc.DegenerateInputError):
        tc.cosine_rows(Tensor([0.0, 0.0]), Tensor([[1.0, 0.0]]))
    with pytest.raises(tc.DegenerateInputError):
        tc.cosine_rows(Tensor([1.0, 0.0]), Tensor([[1.0, 0.0], [0.0, 0.0]]))


def test_backward_requires_scalar():
    x = Tensor(np.ones(3), requires_grad=True)
    with pytest.raises(tc.ContractError):
        tc.backward(tc.scalar_mul(x, 2.0))


def test_shared_subexpression_accumulates():
    x = Tensor([3.0], requires_grad=True)
    y = tc.elementwise_mul(x, x)  # x used twice
    z = tc.sum(tc.add(y, x))
    tc.backward(z)
    assert x.grad.tolist() == [7.0]


def test_nonfinite_detected():
    with pytest.raises(tc.NonFiniteError):
        Tensor([1.0, np.nan])
    prev = tc.set_finite_checks(False)
    try:
        Tensor([np.inf])
    finally:
        tc.set_finite_checks(prev)


def test_grad_check_sum_of_squares():
    rng = np.random.default_rng(1)
    err = tc.grad_check(lambda x: tc.sum(tc.elementwise_mul(x, x)), rng.normal(size=(4, 3)), 1e-5)
    assert err < 1e-6


# every op on random smooth points; abs/relu points are kept away from their kinks
SMOOTH_OPS = {
    "add_row": lambda x: tc.sum(tc.gelu(tc.add(x, Tensor(np.linspace(-1, 1, 3))))),
    "sub_row": lambda x: tc.sum(tc.gelu(tc.sub(Tensor(np.ones((4, 3))), x))),
    "scalar_mul": lambda x: tc.sum(tc.gelu(tc.scalar_mul(x, -1.7))),
    "elementwise_mul": lambda x: tc.sum(tc.elementwise_mul(x, tc.gelu(x))),
    "mean_axis": lambda x: tc.sum(tc.gelu(tc.mean(x, axis=0))),
    "sum_axis": lambda x: tc.sum(tc.gelu(tc.sum(x, axis=1))),
    "abs": lambda x: tc.sum(tc.gelu(tc.abs(x))),
    "sqrt": lambda x: tc.sum(tc.sqrt(tc.add(tc.elementwise_mul(x, x), Tensor(np.ones((4, 3)))))),
    "l2_norm": lambda x: tc.l2_norm(x),
    "relu": lambda x: tc.sum(tc.elementwise_mul(tc.relu(x), x)),
    "gelu": lambda x: tc.sum(tc.gelu(x)),
    "matmul": lambda x: tc.sum(tc.gelu(tc.matmul(x, Tensor(np.arange(6.0).reshape(3, 2) / 5 - 0.4)))),
    "matmul_right": lambda x: tc.sum(tc.gelu(tc.matmul(Tensor(np.arange(8.0).reshape(2, 4) / 7 - 0.5), x))),
    "cosine_a": lambda x: tc.sum(tc.elementwise_mul(tc.cosine_rows(x, Tensor([[1.0, 0.5, -0.2], [0.1, -1.0, 0.3]])),
                                                    Tensor(np.arange(8.0).reshape(4, 2)))),
    "cosine_b": lambda x: tc.sum(tc.gelu(tc.cosine_rows(Tensor([[0.3, -0.4, 1.0], [1.0, 1.0, 0.0]]), x))),
    "concat": lambda x: tc.sum(tc.gelu(tc.concat([x, tc.scalar_mul(x, 2.0)], axis=0))),
    "slice_rows": lambda x: tc.sum(tc.gelu(tc.slice_by_indices(x, [3, 0, 0, 2]))),
    "slice_2d": lambda x: tc.sum(tc.gelu(tc.slice_by_indices(x, [[0, 2], [1, 1], [2, 0], [0, 1]]))),
    "window_mean_pool": lambda x: tc.sum(tc.gelu(tc.window_mean_pool(x, 2))),
    "reshape": lambda x: tc.sum(tc.gelu(tc.matmul(tc.reshape(x, (3, 4)), Tensor(np.ones((4, 1)))))),
}


def _kink_free_point(rng):
    x = rng.normal(size=(4, 3))
    return np.where(np.abs(x) < 0.05, 0.3, x)


_TILT = Tensor(np.linspace(0.5, 1.5, 12).reshape(4, 3))


@pytest.mark.parametrize("name", sorted(SMOOTH_OPS))
def test_gradient_correctness_per_op(name):
    rng = np.random.default_rng(sorted(SMOOTH_OPS).index(name))
    op = SMOOTH_OPS[name]

    # linear tilt keeps analytic gradients away from 0, where relative error is meaningless
    def fn(x):
        return tc.add(op(x), tc.sum(tc.elementwise_mul(x, _TILT)))
    worst = max(tc.grad_check(fn, _kink_free_point(rng), 1e-6) for _ in range(20))
    assert worst < 1e-4


def test_linearity_of_backward():
    rng = np.random.default_rng(5)
    x0 = rng.normal(size=(4, 3))
    f, g = SMOOTH_OPS["gelu"], SMOOTH_OPS["matmul"]
    alpha, beta = 0.7, -2.3

    def grad_of(fn):
        x = Tensor(x0, requires_grad=True)
        tc.backward(fn(x))
        return x.grad

    combo = grad_of(lambda x: tc.add(tc.scalar_mul(f(x), alpha), tc.scalar_mul(g(x), beta)))
    np.testing.assert_allclose(combo, alpha * grad_of(f) + beta * grad_of(g), atol=1e-10, rtol=0)


def test_determinism_bitwise():
    def run():
        rng = np.random.default_rng(11)
        x = Tensor(rng.normal(size=(4, 3)), requires_grad=True)
        out = SMOOTH_OPS["cosine_a"](x)
        tc.backward(out)
        return out.data.tobytes(), x.grad.tobytes()

    assert run() == run()


@settings(max_examples=50, deadline=None)
@given(
    src=arrays(np.float64, st.integers(2, 8), elements=st.floats(-10, 10)),
    data=st.data(),
)
def test_gather_scatter_duality(src, data):
    n = src.size
    idx = data.draw(st.lists(st.integers(0, n - 1), min_size=1, max_size=10))
    upstream = data.draw(arrays(np.float64, len(idx), elements=st.floats(-5, 5)))
    x = Tensor(src, requires_grad=True)
    out = tc.slice_by_indices(x, idx)
    tc.backward(tc.sum(tc.elementwise_mul(out, Tensor(upstream))))
    expected = np.zeros(n)
    for pos, i in enumerate(idx):
        expected[i] += upstream[pos]
    np.testing.assert_array_equal(x.grad, expected)
    untouched = sorted(set(range(n)) - set(idx))
    assert np.all(x.grad[untouched] == 0.0)


def test_window_mean_pool_definition():
    x = Tensor([[1.0, 2.0], [3.0, 6.0], [5.0, 0.0], [7.0, 2.0]])
    assert tc.window_mean_pool(x, 2).data.tolist() == [[2.0, 4.0], [6.0, 1.0]]
    with pytest.raises(tc.DimensionError):
        tc.window_mean_pool(x, 3)


def test_row_broadcast_only():
    m = Tensor(np.ones((3, 2)))
    assert tc.add(m, Tensor([1.0, 2.0])).data.tolist() == [[2.0, 3.0]] * 3
    with pytest.raises(tc.DimensionError):
        tc.add(m, Tensor(np.ones((3, 1))))
