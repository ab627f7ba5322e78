import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from safectrl import numerics as nx
from safectrl.numerics import Tensor


def t64(a, grad=True):
    return Tensor(a, requires_grad=grad, dtype=np.float64)


def test_matmul_identity_and_dot():
    b = Tensor([[1.0, 2.0], [3.0, 4.0]])
    np.testing.assert_array_equal(nx.matmul(Tensor(np.eye(2)), b).data, [[1, 2], [3, 4]])
    np.testing.assert_array_equal(nx.matmul(Tensor([[1.0, 2.0]]), Tensor([[3.0], [4.0]])).data, [[11]])


def test_matmul_shape_mismatch():
    with pytest.raises(ValueError):
        nx.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))


def test_matmul_gradient_matches_finite_differences():
    rng = np.random.default_rng(0)
    a, b = t64(rng.normal(size=(3, 4))), t64(rng.normal(size=(4, 2)))
    w = rng.normal(size=(3, 2))
    assert nx.gradcheck(lambda: (nx.matmul(a, b) * w).sum(), [a, b], h=1e-3) < 1e-4


def test_softmax_rows_examples():
    out = nx.softmax_rows(Tensor([[0.0, 0.0, 0.0]])).data
    np.testing.assert_allclose(out, [[1 / 3] * 3], atol=1e-7)
    big = nx.softmax_rows(Tensor([[1000.0, 0.0]]), 1.0).data
    assert np.isfinite(big).all() and big[0, 0] == pytest.approx(1.0) and big[0, 1] == pytest.approx(0.0)
    np.testing.assert_allclose(nx.softmax_rows(Tensor([[math.log(2.0), 0.0]])).data, [[2 / 3, 1 / 3]], atol=1e-7)


def test_softmax_rows_rejects_bad_input():
    with pytest.raises(ValueError):
        nx.softmax_rows(Tensor([[1.0, 2.0]]), 0.0)
    with pytest.raises(nx.NumericError):
        nx.softmax_rows(Tensor([[np.nan, 0.0]]))


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 10_000), st.floats(-50, 50), st.floats(0.1, 10))
def test_softmax_rows_properties(seed, shift, divisor):
    x = np.random.default_rng(seed).normal(size=(4, 7)) * 3
    p = nx.softmax_rows(t64(x, False), divisor).data
    assert (p >= 0).all()
    np.testing.assert_allclose(p.sum(axis=1), 1.0, atol=1e-6)
    q = nx.softmax_rows(t64(x + shift, False), divisor).data
    np.testing.assert_allclose(p, q, atol=1e-6)


def test_mse_values_and_gradient():
    assert float(nx.mse(Tensor([1.0, 2.0]), Tensor([1.0, 2.0])).data) == 0.0
    assert float(nx.mse(Tensor([1.0, 1.0]), Tensor([0.0, 0.0])).data) == 1.0
    rng = np.random.default_rng(1)
    p, target = t64(rng.normal(size=5)), rng.normal(size=5)
    nx.backward(nx.mse(p, target))
    np.testing.assert_allclose(p.grad, 2 * (p.data - target) / 5, rtol=1e-12)
    assert nx.gradcheck(lambda: nx.mse(p, target), [p]) < 1e-4
    with pytest.raises(ValueError):
        nx.mse(Tensor([1.0]), Tensor([1.0, 2.0]))


def test_backward_examples():
    w = Tensor([1.0, 2.0, 3.0], requires_grad=True)
    nx.backward(w.sum())
    np.testing.assert_array_equal(w.grad, [1, 1, 1])
    w = Tensor([2.0], requires_grad=True)
    nx.backward(nx.mse(w, Tensor([0.0])))
    np.testing.assert_array_equal(w.grad, [4.0])


def test_backward_requires_scalar():
    w = Tensor([1.0, 2.0], requires_grad=True)
    with pytest.raises(nx.ContractError):
        nx.backward(w * 2.0)


def test_backward_shared_subexpression():
    # x used twice: d/dx (x*x + x) = 2x + 1
    x = Tensor([3.0], requires_grad=True)
    nx.backward((x * x + x).sum())
    np.testing.assert_array_equal(x.grad, [7.0])


def test_nonfinite_is_an_error():
    with pytest.raises(nx.NumericError):
        Tensor([1.0]) / Tensor([0.0])


def _attention_block_loss(rng):
    # a miniature cross-attention block: softmax(Q Kᵀ/√d) V then a squared readout
    f = t64(rng.normal(size=(6, 4)), False)
    c = t64(rng.normal(size=(3, 5)), False)
    wq, wk, wv = t64(rng.normal(size=(4, 4))), t64(rng.normal(size=(5, 4))), t64(rng.normal(size=(5, 4)))
    target = rng.normal(size=(6, 4))

    def loss():
        a = nx.softmax_rows(nx.matmul(nx.matmul(f, wq), nx.matmul(c, wk).transpose()), 2.0)
        return nx.mse(nx.matmul(a, nx.matmul(c, wv)), target)

    return loss, [wq, wk, wv]


def test_composite_attention_gradient():
    loss, params = _attention_block_loss(np.random.default_rng(3))
    assert nx.gradcheck(loss, params) < 1e-4


def test_backward_deterministic():
    grads = []
    for _ in range(2):
        loss, params = _attention_block_loss(np.random.default_rng(11))
        nx.backward(loss())
        grads.append([p.grad.copy() for p in params])
    for a, b in zip(*grads):
        assert a.tobytes() == b.tobytes()


def test_adam_zero_gradient_keeps_params():
    w = Tensor([1.5, -2.0], requires_grad=True)
    opt = nx.Adam([w], lr=0.1)
    w.grad = np.zeros(2, np.float32)
    opt.step()
    np.testing.assert_array_equal(w.data, [1.5, -2.0])


def test_adam_first_step_moves_by_lr():
    w = Tensor([0.0], requires_grad=True, dtype=np.float64)
    opt = nx.Adam([w], lr=0.01, eps=1e-8)
    w.grad = np.array([1.0])
    opt.step()
    # m̂ = 1, v̂ = 1 → Δ = −lr · 1/(1 + ε)
    assert w.data[0] == pytest.approx(-0.01 / (1 + 1e-8), rel=1e-12)


def test_adam_converges_on_quadratic():
    w = Tensor(np.array([0.0]), requires_grad=True)
    opt = nx.Adam([w], lr=0.1)
    for _ in range(100):
        opt.zero_grad()
        nx.backward(((w - 3.0) ** 2).sum())
        opt.step()
    assert abs(w.data[0] - 3.0) < 0.1


def test_adam_missing_grad_is_contract_error():
    w = Tensor([1.0], requires_grad=True)
    with pytest.raises(nx.ContractError):
        nx.Adam([w]).step()


def test_no_grad_records_nothing():
    w = Tensor([1.0], requires_grad=True)
    with nx.no_grad():
        y = w * 2.0
    assert not y.requires_grad


def test_float32_default():
    assert Tensor([1, 2, 3]).dtype == np.float32
    assert (Tensor(np.ones((2, 2))) @ Tensor(np.ones((2, 2)))).dtype == np.float32
