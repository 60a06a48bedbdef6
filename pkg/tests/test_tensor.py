import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from hesrn import tensor as T
from hesrn.checks import _op_cases, _weighted_sum
from hesrn.errors import DeterminismError, NumericError, ParameterError, RankError, ShapeError
from hesrn.tensor import Tape, Tensor, backward, grad_check, grad_check_report

finite = st.floats(-50, 50, allow_nan=False)


def naive_matmul(a, b):
    out = np.zeros((a.shape[0], b.shape[1]))
    for i in range(a.shape[0]):
        for j in range(b.shape[1]):
            for k in range(a.shape[1]):
                out[i, j] += a[i, k] * b[k, j]
    return out


@pytest.mark.parametrize("name", sorted(_op_cases(np.random.default_rng(0))))
def test_backward_rule_matches_central_difference(name):
    fn, arrays_ = _op_cases(np.random.default_rng(0))[name]
    params = [Tensor(a.copy()) for a in arrays_]
    assert grad_check(lambda: _weighted_sum(fn(*params), 1), params, eps=1e-5) < 1e-6


def test_matmul_matches_triple_loop_8x8x8():
    rng = np.random.default_rng(0)
    for _ in range(5):
        a, b = rng.normal(size=(8, 8)), rng.normal(size=(8, 8))
        assert np.abs(T.matmul(Tensor(a), Tensor(b)).data - naive_matmul(a, b)).max() < 1e-12


@given(st.integers(1, 5), st.integers(1, 5), st.integers(1, 5), st.integers(0, 10_000))
def test_matmul_any_shape(n, k, m, seed):
    rng = np.random.default_rng(seed)
    a, b = rng.normal(size=(n, k)), rng.normal(size=(k, m))
    assert np.allclose(T.matmul(Tensor(a), Tensor(b)).data, naive_matmul(a, b), atol=1e-12)


def test_matmul_shape_error_names_both_shapes():
    with pytest.raises(ShapeError, match=r"\(2, 3\).*\(4, 5\)"):
        T.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((4, 5))))


@given(arrays(np.float64, st.tuples(st.integers(1, 4), st.integers(1, 6)), elements=st.floats(-700, 700)))
def test_softmax_rows_on_simplex(x):
    s = T.softmax(Tensor(x)).data
    assert s.min() >= 0
    assert np.abs(s.sum(axis=1) - 1).max() <= 1e-12


def test_softmax_extreme_rows():
    x = np.array([[700.0, -700.0, 0.0], [700.0, 700.0, 700.0]])
    s = T.softmax(Tensor(x)).data
    assert np.allclose(s, [[1, 0, 0], [1 / 3, 1 / 3, 1 / 3]], atol=1e-15)


@given(
    arrays(np.float64, (3, 8), elements=finite),
    arrays(np.float64, (3, 1), elements=st.floats(-100, 100)),
)
def test_norms_ignore_per_row_shift(x, c):
    assert np.abs(T.layer_norm(Tensor(x + c)).data - T.layer_norm(Tensor(x)).data).max() < 1e-8
    assert np.abs(T.group_norm(Tensor(x + c), 2).data - T.group_norm(Tensor(x), 2).data).max() < 1e-8


def test_group_norm_normalises_each_group():
    x = np.random.default_rng(1).normal(size=(4, 6)) * 3 + 2
    y = T.group_norm(Tensor(x), 3).data.reshape(4, 3, 2)
    assert np.allclose(y.mean(-1), 0, atol=1e-12)
    expected_var = x.reshape(4, 3, 2).var(-1) / (x.reshape(4, 3, 2).var(-1) + 1e-5)
    assert np.allclose(y.var(-1), expected_var)


def test_norm_shape_errors():
    with pytest.raises(ShapeError):
        T.layer_norm(Tensor(np.ones((2, 0))))
    with pytest.raises(ShapeError):
        T.group_norm(Tensor(np.ones((2, 6))), 4)


def test_gelu_is_the_tanh_form():
    x = np.linspace(-4, 4, 17)
    ref = 0.5 * x * (1 + np.tanh(np.sqrt(2 / np.pi) * (x + 0.044715 * x**3)))
    assert np.allclose(T.gelu(Tensor(x)).data, ref, atol=1e-15)


def test_activation_table_and_nonfinite():
    x = Tensor(np.array([[0.5, -1.0]]))
    assert np.allclose(T.activation("swish", x).data, x.data / (1 + np.exp(-x.data)))
    with pytest.raises(NumericError):
        T.activation("gelu", Tensor(np.array([np.nan])))
    with pytest.raises(ParameterError):
        T.activation("relu6", x)


def test_no_tape_records_nothing():
    a = Tensor(np.ones(3), requires_grad=True)
    out = a * 2.0
    assert not out.requires_grad
    with Tape() as tape:
        (a * 2.0) + 1.0
    assert len(tape) == 2


def test_backward_requires_scalar_on_tape():
    a = Tensor(np.ones(3), requires_grad=True)
    with Tape() as tape:
        y = a * 2.0
    with pytest.raises(RankError):
        backward(tape, y)
    with pytest.raises(RankError):
        backward(Tape(), T.tensor_sum(y))


def test_broadcast_gradients_are_summed():
    a = Tensor(np.ones((3, 4)), requires_grad=True)
    b = Tensor(np.arange(4.0), requires_grad=True)
    with Tape() as tape:
        loss = T.tensor_sum(a * b)
    backward(tape, loss)
    assert np.array_equal(b.grad, np.full(4, 3.0))
    assert np.array_equal(a.grad, np.tile(np.arange(4.0), (3, 1)))


def test_reused_tensor_accumulates():
    a = Tensor(np.array(3.0), requires_grad=True)
    with Tape() as tape:
        loss = a * a + a
    backward(tape, loss)
    assert a.grad == 7.0


def test_rank_cap():
    with pytest.raises(RankError):
        Tensor(np.zeros((1, 1, 1, 1)))


def test_grad_check_guards():
    a = Tensor(np.ones(2))
    with pytest.raises(ParameterError):
        grad_check(lambda: T.tensor_sum(a), [a], eps=1e-9)
    calls = iter(range(100))
    with pytest.raises(DeterminismError):
        grad_check(lambda: T.tensor_sum(a) * float(next(calls)), [a])


def test_grad_check_reports_per_tensor():
    a, b = Tensor(np.ones(2)), Tensor(np.ones(3))
    report = grad_check_report(lambda: T.tensor_sum(a * a) + T.tensor_sum(T.exp(b)), [a, b])
    assert len(report) == 2 and max(report) < 1e-8


def test_take_repeated_rows_accumulate():
    a = Tensor(np.arange(6.0).reshape(3, 2), requires_grad=True)
    with Tape() as tape:
        loss = T.tensor_sum(T.take(a, np.array([0, 0, 2])))
    backward(tape, loss)
    assert np.array_equal(a.grad, [[2, 2], [0, 0], [1, 1]])


def test_masked_softmax_zeroes_masked_entries():
    x = Tensor(np.zeros((2, 3)))
    mask = np.array([[True, False, True], [True, True, True]])
    s = T.masked_softmax(x, mask).data
    assert np.array_equal(s, [[0.5, 0, 0.5], [1 / 3, 1 / 3, 1 / 3]])
