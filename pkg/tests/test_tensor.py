import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from spgat.errors import NumericalError, ShapeError
from spgat.tensor import (Tape, Tensor, add, backward, concat, detect_anomaly, div,
                          elementwise, finite_diff_check, log, matmul, mul, no_grad, permute,
                          reshape, reshape_permute_concat, sigmoid, softmax, sum_, zeros)


def loop_matmul(a, b):
    m, k = a.shape
    n = b.shape[1]
    out = np.zeros((m, n))
    for i in range(m):
        for j in range(n):
            for t in range(k):
                out[i, j] += a[i, t] * b[t, j]
    return out


def test_matmul_identity():
    a = np.array([[1.0, 2.0], [3.0, 4.0]])
    np.testing.assert_array_equal(matmul(Tensor(a), Tensor(np.eye(2))).data, a)


def test_matmul_hand_case_matches_loop_oracle():
    a = np.array([[1.0, 2.0], [3.0, 4.0]])
    b = np.array([[5.0], [6.0]])
    out = matmul(Tensor(a), Tensor(b)).data
    np.testing.assert_array_equal(out, loop_matmul(a, b))
    np.testing.assert_array_equal(out, [[17.0], [39.0]])


def test_matmul_zero(rng):
    out = matmul(zeros((2, 3)), Tensor(rng.standard_normal((3, 4)))).data
    assert out.shape == (2, 4) and not out.any()


def test_matmul_batched_random_matches_loop(rng):
    a = rng.standard_normal((2, 3, 5))
    b = rng.standard_normal((5, 4))
    out = matmul(Tensor(a), Tensor(b)).data
    for i in range(2):
        np.testing.assert_allclose(out[i], loop_matmul(a[i], b), rtol=1e-5, atol=1e-5)


def test_matmul_shape_error():
    with pytest.raises(ShapeError):
        matmul(zeros((2, 3)), zeros((2, 3)))


def test_elementwise_examples():
    f = Tensor([[1.5, -2.0]])
    assert not mul(f, zeros((1, 2))).data.any()
    assert sigmoid(Tensor([0.0])).data[0] == 0.5
    np.testing.assert_array_equal(add(Tensor([1.0, 2.0]), Tensor([3.0, 4.0])).data, [4.0, 6.0])
    np.testing.assert_array_equal(elementwise("add", Tensor([1.0, 2.0]), Tensor([3.0, 4.0])).data,
                                  [4.0, 6.0])


def test_elementwise_domain_errors():
    with pytest.raises(NumericalError):
        log(Tensor([0.0, 1.0]))
    with pytest.raises(ZeroDivisionError):
        div(Tensor([1.0]), Tensor([0.0]))
    with pytest.raises(ValueError):
        elementwise("pow", Tensor([1.0]), Tensor([1.0]))


def test_sigmoid_stable_at_extremes():
    out = sigmoid(Tensor([-1000.0, 1000.0])).data
    assert np.all(np.isfinite(out))
    np.testing.assert_array_equal(out, [0.0, 1.0])


def test_softmax_examples():
    np.testing.assert_array_equal(softmax(Tensor([0.0, 0.0])).data, [0.5, 0.5])
    out = softmax(Tensor(np.array([np.log(2.0), 0.0]), dtype=np.float64)).data
    np.testing.assert_allclose(out, [2 / 3, 1 / 3], rtol=0, atol=1e-12)


@settings(max_examples=50, deadline=None)
@given(hnp.arrays(np.float32, (3, 7), elements=st.floats(-50, 50, width=32)))
def test_softmax_rows_sum_to_one(x):
    out = softmax(Tensor(x), axis=-1).data
    assert np.all(out >= 0)
    np.testing.assert_allclose(out.sum(-1), 1.0, atol=1e-6)


def test_reshape_round_trip_and_permute_oracle():
    a = Tensor(np.arange(6.0).reshape(2, 3))
    back = reshape(reshape(a, (3, 2)), (2, 3))
    np.testing.assert_array_equal(back.data, a.data)
    m = np.array([[1.0, 2.0], [3.0, 4.0]])
    p = permute(Tensor(m), (1, 0)).data
    for i in range(2):
        for j in range(2):
            assert p[j, i] == m[i, j]
    np.testing.assert_array_equal(p, [[1, 3], [2, 4]])


def test_concat_shape_and_spec_dispatch():
    a, b = Tensor(np.ones((2, 1))), Tensor(np.zeros((2, 1)))
    assert concat([a, b], axis=1).shape == (2, 2)
    assert reshape_permute_concat(a, {"concat": [b], "axis": 1}).shape == (2, 2)
    assert reshape_permute_concat(a, {"reshape": (1, 2)}).shape == (1, 2)
    assert reshape_permute_concat(a, {"permute": (1, 0)}).shape == (1, 2)
    with pytest.raises(ValueError):
        reshape_permute_concat(a, {})


@settings(max_examples=30, deadline=None)
@given(st.integers(1, 4), st.integers(1, 4), st.integers(1, 4), st.permutations([0, 1, 2]))
def test_permute_inverse_is_bitwise(a, b, c, perm):
    x = np.random.default_rng(a * 100 + b * 10 + c).standard_normal((a, b, c)).astype(np.float32)
    inv = np.argsort(perm)
    out = permute(permute(Tensor(x), tuple(perm)), tuple(inv)).data
    assert out.tobytes() == x.tobytes()


def test_backward_sum_and_square():
    x = Tensor([1.0, 2.0, 3.0], requires_grad=True)
    with Tape():
        loss = sum_(x)
    backward(loss)
    np.testing.assert_array_equal(x.grad, [1.0, 1.0, 1.0])

    x = Tensor(np.array([1.0, 2.0]), requires_grad=True, dtype=np.float64)
    with Tape() as tape:
        loss = sum_(mul(x, x))
    tape.backward(loss)
    h = 1e-4
    fd = [((1 + h) ** 2 - (1 - h) ** 2) / (2 * h), ((2 + h) ** 2 - (2 - h) ** 2) / (2 * h)]
    np.testing.assert_allclose(x.grad, fd, rtol=1e-8)
    np.testing.assert_allclose(x.grad, [2.0, 4.0])


def test_unused_input_gets_zero_grad():
    x = Tensor([1.0, 2.0], requires_grad=True)
    y = Tensor([5.0, 6.0], requires_grad=True)
    with Tape() as tape:
        loss = sum_(x)
    y.zero_grad()
    tape.backward(loss)
    np.testing.assert_array_equal(y.grad, [0.0, 0.0])


def test_backward_needs_scalar():
    x = Tensor([1.0, 2.0], requires_grad=True)
    with Tape() as tape:
        y = mul(x, 2.0)
    with pytest.raises(ShapeError):
        tape.backward(y)


def test_no_grad_records_nothing():
    x = Tensor([1.0], requires_grad=True)
    with Tape() as tape:
        with no_grad():
            mul(x, x)
    assert len(tape) == 0


def test_detect_anomaly_names_op():
    x = Tensor([1e30], requires_grad=True, dtype=np.float32)
    with pytest.raises(NumericalError, match="mul"), np.errstate(over="ignore"):
        with Tape(), detect_anomaly():
            mul(x, x)


def test_finite_diff_examples(rng):
    x = rng.standard_normal((4, 3)).astype(np.float32)
    assert finite_diff_check(lambda t: sum_(sigmoid(t)), x, h=1e-4).max_rel_err < 1e-3
    rep64 = finite_diff_check(lambda t: sum_(sigmoid(t)), x.astype(np.float64), h=1e-4)
    assert rep64.max_rel_err < 1e-6
    w = rng.standard_normal((3, 2))
    rep = finite_diff_check(lambda t: sum_(matmul(t, Tensor(w.astype(t.dtype)))), x)
    assert rep.passed and rep.max_rel_err < 1e-3


def test_finite_diff_linear_is_exact():
    # dyadic values keep x +- h and the sums exact in float64
    x = np.array([0.5, -1.25, 2.0, 3.75])
    rep = finite_diff_check(lambda t: sum_(t), x, h=2.0 ** -10)
    assert rep.max_rel_err == 0.0


def test_determinism_same_inputs_same_bits(rng):
    x = rng.standard_normal((3, 5)).astype(np.float32)
    a = softmax(matmul(Tensor(x), Tensor(x.T))).data
    b = softmax(matmul(Tensor(x), Tensor(x.T))).data
    assert a.tobytes() == b.tobytes()


def test_tensor_casts_integer_input():
    t = Tensor([1, 2, 3])
    assert t.dtype == np.float32 and t.size == 3
