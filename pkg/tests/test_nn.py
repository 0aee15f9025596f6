import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from appsel_pfl.nn import (
    AdamWState, ContractError, DimensionError, ModelParams, SgdState, Tape, adamw_step,
    elementwise, matmul, mse_loss, sgd_step, softmax_rows,
)
from appsel_pfl.nn import tape as T
from oracles import fd_check


def test_matmul_examples():
    assert np.array_equal(matmul(np.eye(2), [[1, 2], [3, 4]]).data, [[1, 2], [3, 4]])
    assert np.array_equal(matmul([[1, 0]], [[5], [7]]).data, [[5]])
    assert np.array_equal(matmul([[1, 2], [3, 4]], [[0], [1]]).data, [[2], [4]])


def test_matmul_shape_error_names_both_shapes():
    with pytest.raises(DimensionError, match=r"\(2, 3\).*\(2, 3\)"):
        matmul(np.ones((2, 3)), np.ones((2, 3)))


def test_softmax_examples():
    assert np.allclose(softmax_rows([[0.0, 0.0]]).data, [[0.5, 0.5]], atol=1e-15)
    assert np.allclose(softmax_rows([[np.log(2), 0.0]]).data, [[2 / 3, 1 / 3]], atol=1e-15)
    out = softmax_rows([[1000.0, 0.0]]).data
    assert np.all(np.isfinite(out))
    assert out[0, 0] == pytest.approx(1.0) and out[0, 1] == pytest.approx(0.0, abs=1e-300)
    with pytest.raises(DimensionError):
        softmax_rows(np.zeros((1, 0)))


finite_rows = arrays(np.float64, st.tuples(st.integers(1, 5), st.integers(1, 8)),
                     elements=st.floats(-50, 50))


@given(finite_rows, st.floats(-100, 100))
def test_softmax_rows_sum_to_one_and_shift_invariant(x, c):
    p = softmax_rows(x).data
    assert np.all(np.abs(p.sum(axis=1) - 1.0) <= 1e-12)
    assert np.allclose(softmax_rows(x + c).data, p, atol=1e-12, rtol=0)


def test_elementwise_examples():
    assert np.array_equal(elementwise("relu", [-1.0, 0.0, 2.0]).data, [0, 0, 2])
    assert elementwise("sigmoid", [0.0]).data[0] == 0.5
    assert np.array_equal(elementwise("add", [1.0, 2.0], [3.0, 4.0]).data, [4, 6])
    assert np.array_equal(elementwise("scale", [1.0, 2.0], 3.0).data, [3, 6])
    with pytest.raises(DimensionError):
        elementwise("mul", [1.0, 2.0], [1.0])


def test_mse_examples():
    assert float(mse_loss([1.0, 0.0], [0.0, 0.0]).data) == 0.5
    assert float(mse_loss([0.3, 0.7], [0.3, 0.7]).data) == 0.0
    assert float(mse_loss([1.0, 1.0], [0.0, 2.0]).data) == 1.0
    with pytest.raises(DimensionError):
        mse_loss([1.0], [1.0, 2.0])


def test_backward_closed_forms():
    tape = Tape()
    th = tape.watch([[3.0]], "theta")
    g = tape.backward(T.matmul(th, th))
    assert g["theta"][0, 0] == 6.0

    tape = Tape()
    th = tape.watch([[0.0]], "theta")
    g = tape.backward(mse_loss(T.matmul(th, [[1.0]]), [[1.0]]))
    assert g["theta"][0, 0] == -2.0


def test_backward_rejects_non_scalar_and_zero_fills_unreachable():
    tape = Tape()
    a = tape.watch(np.ones((2, 2)), "a")
    tape.watch(np.ones(3), "unused")
    with pytest.raises(ContractError):
        tape.backward(T.relu(a))
    g = tape.backward(mse_loss(a, np.zeros((2, 2))))
    assert np.array_equal(g["unused"], np.zeros(3))


def test_relu_gradient_at_zero_is_zero():
    tape = Tape()
    x = tape.watch([0.0, 1.0, -1.0], "x")
    g = tape.backward(mse_loss(T.relu(x), [-1.0, -1.0, -1.0]))
    assert g["x"][0] == 0.0 and g["x"][2] == 0.0 and g["x"][1] != 0.0


@pytest.mark.parametrize("seed", range(5))
def test_gradients_match_central_differences(seed):
    assert fd_check(seed) < 1e-4


def _params(frozen=()):
    return ModelParams({"a": np.array([0.0, 1.0]), "b": np.array([[2.0]])}, frozen)


def test_sgd_examples():
    p = ModelParams({"t": np.array([0.0])})
    assert sgd_step(p, {"t": np.array([-2.0])}, SgdState(0.01))["t"][0] == pytest.approx(0.02)
    assert np.array_equal(sgd_step(p, {"t": np.array([0.0])}, SgdState(0.01)).flat, p.flat)
    q = _params(frozen=["b"])
    out = sgd_step(q, {"a": np.ones(2), "b": np.ones((1, 1))}, SgdState(0.5))
    assert out["b"].tobytes() == q["b"].tobytes()


def test_adamw_first_step_closed_form():
    p = ModelParams({"t": np.array([0.0])})
    st_ = AdamWState(0.001, weight_decay=0.0, epsilon_stability=1e-8)
    out = adamw_step(p, {"t": np.array([1.0])}, st_)
    assert out["t"][0] == pytest.approx(-0.001 / (1 + 1e-8), rel=1e-12)
    assert st_.step_count == 1


def test_adamw_zero_gradient_identity_and_decay():
    p = ModelParams({"t": np.array([0.7])})
    st_ = AdamWState(0.01, weight_decay=0.0)
    for _ in range(5):
        p = adamw_step(p, {"t": np.array([0.0])}, st_)
    assert p["t"][0] == 0.7
    p = ModelParams({"t": np.array([1.0])})
    out = adamw_step(p, {"t": np.array([0.0])}, AdamWState(0.1, weight_decay=0.01))
    assert out["t"][0] == pytest.approx(0.999, rel=1e-12)


def test_adamw_rejects_non_finite():
    with pytest.raises(FloatingPointError):
        adamw_step(ModelParams({"t": np.zeros(1)}), {"t": np.array([np.nan])}, AdamWState(0.1))


@settings(max_examples=30)
@given(arrays(np.float64, 3, elements=st.floats(-1e3, 1e3)),
       arrays(np.float64, 3, elements=st.floats(-1e3, 1e3)))
def test_optimizers_never_touch_frozen_tensors(ga, gb):
    p = _params(frozen=["a"])
    before = p["a"].tobytes()
    grads = {"a": ga[:2], "b": gb[:1].reshape(1, 1)}
    assert sgd_step(p, grads, SgdState(0.1))["a"].tobytes() == before
    st_ = AdamWState(0.1)
    q = p
    for _ in range(3):
        q = adamw_step(q, grads, st_)
    assert q["a"].tobytes() == before


def test_optimizer_determinism():
    g = {"a": np.array([0.3, -0.2]), "b": np.array([[1.5]])}
    runs = []
    for _ in range(2):
        st_ = AdamWState(0.01)
        p = _params()
        for _ in range(4):
            p = adamw_step(p, g, st_)
        runs.append(p.flat.tobytes())
    assert runs[0] == runs[1]
