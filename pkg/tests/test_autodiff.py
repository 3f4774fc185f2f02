import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from ssrcap import autodiff as ad

F64 = np.float64


def leaf(x):
    return ad.Tensor(np.asarray(x, dtype=F64), requires_grad=True)


def test_elementwise_hand_values():
    assert ad.hinge_pos(ad.Tensor([-0.3])).data[0] == 0.0
    assert ad.sigmoid(ad.Tensor([0.0])).data[0] == 0.5
    np.testing.assert_array_equal(ad.add(ad.Tensor([1.0, 2.0]), ad.Tensor([3.0, 4.0])).data, [4.0, 6.0])


def test_matmul_hand(frozen):
    a = ad.Tensor([[1.0, 2.0], [3.0, 4.0]])
    b = ad.Tensor([[5.0, 6.0], [7.0, 8.0]])
    np.testing.assert_array_equal(ad.matmul(a, b).data, frozen["matmul"])
    np.testing.assert_array_equal(ad.matmul(ad.Tensor(np.eye(2)), a).data, a.data)
    np.testing.assert_array_equal(ad.matmul(ad.Tensor(np.zeros((2, 2))), a).data, np.zeros((2, 2)))


def test_log_softmax_cases(frozen):
    np.testing.assert_allclose(ad.log_softmax(ad.Tensor(np.zeros(4))).data, [math.log(0.25)] * 4, atol=1e-12)
    big = ad.log_softmax(ad.Tensor([1000.0, 0.0])).data
    assert np.all(np.isfinite(big))
    np.testing.assert_allclose(big, [0.0, -1000.0], atol=1e-9)
    np.testing.assert_allclose(ad.log_softmax(ad.Tensor([1.0, 2.0, 3.0])).data, frozen["log_softmax_123"], atol=1e-12)


def test_gather_rows_forward_and_accumulation():
    table = leaf(np.arange(9.0).reshape(3, 3))
    np.testing.assert_array_equal(ad.gather_rows(table, [1]).data, [[3.0, 4.0, 5.0]])
    with ad.Tape():
        out = ad.sum(ad.gather_rows(table, [0, 0]))
    ad.backward(out)
    np.testing.assert_array_equal(table.grad, [[2, 2, 2], [0, 0, 0], [0, 0, 0]])
    rng = np.random.default_rng(0)
    t = rng.normal(size=(4, 3))
    np.testing.assert_array_equal(ad.gather_rows(ad.Tensor(t), [2, 0, 2]).data, np.stack([t[2], t[0], t[2]]))


def test_gather_rows_rejects_bad_ids():
    with pytest.raises(IndexError):
        ad.gather_rows(ad.Tensor(np.zeros((3, 2))), [3])


def test_backward_hand_cases():
    x = leaf([1.0, 2.0])
    with ad.Tape():
        loss = ad.sum(x)
    ad.backward(loss)
    np.testing.assert_array_equal(x.grad, [1.0, 1.0])
    x = leaf([1.0, 2.0])
    with ad.Tape():
        loss = ad.sum(ad.mul(x, x))
    ad.backward(loss)
    np.testing.assert_array_equal(x.grad, [2.0, 4.0])


def test_detached_tensor_gets_no_grad():
    x = leaf([1.0, 2.0])
    c = ad.Tensor([3.0, 4.0])
    with ad.Tape():
        loss = ad.sum(ad.mul(x, c))
    ad.backward(loss)
    assert c.grad is None
    np.testing.assert_array_equal(x.grad, [3.0, 4.0])


def test_nothing_recorded_without_tape():
    x = leaf([1.0])
    y = ad.mul(x, x)
    assert not y.requires_grad
    ad.backward(ad.sum(y))
    assert x.grad is None


def test_tapes_are_isolated():
    x = leaf([2.0])
    with ad.Tape() as t1:
        a = ad.mul(x, x)
    with ad.Tape() as t2:
        b = ad.sum(ad.scale(x, 3.0))
    assert len(t1) == 1 and len(t2) == 2
    ad.backward(b)
    np.testing.assert_array_equal(x.grad, [3.0])
    assert a.requires_grad


def test_backward_rejects_non_scalar():
    x = leaf([1.0, 2.0])
    with ad.Tape():
        y = ad.mul(x, x)
    with pytest.raises(ad.ShapeError):
        ad.backward(y)


def test_shape_and_domain_errors():
    with pytest.raises(ad.ShapeError):
        ad.add(ad.Tensor([1.0]), ad.Tensor([1.0, 2.0]))
    with pytest.raises(ad.ShapeError):
        ad.matmul(ad.Tensor(np.zeros((2, 3))), ad.Tensor(np.zeros((2, 3))))
    with pytest.raises(ad.DomainError):
        ad.log(ad.Tensor([1.0, 0.0]))


def test_l2_normalize_zero_vector_is_finite():
    y = ad.l2_normalize(ad.Tensor(np.zeros((2, 3)))).data
    assert np.all(np.isfinite(y))
    u = ad.l2_normalize(ad.Tensor(np.random.default_rng(1).normal(size=(4, 5)))).data
    np.testing.assert_allclose(np.linalg.norm(u, axis=1), 1.0, atol=1e-12)


def test_lstm_cell_hand_cases(frozen):
    zero = ad.lstm_cell(ad.Tensor(np.zeros((1, 4))), ad.Tensor(np.zeros((1, 1))))
    assert zero[0].data[0, 0] == 0.0 and zero[1].data[0, 0] == 0.0
    case = frozen["lstm_zero_weights"]
    h, c = ad.lstm_cell(ad.Tensor(np.zeros((1, 4))), ad.Tensor([[case["c_prev"]]]))
    assert abs(c.data[0, 0] - case["c"]) < 1e-12
    assert abs(h.data[0, 0] - case["h"]) < 1e-12


def test_finite_diff_check_examples():
    x = leaf(np.random.default_rng(0).normal(size=(3, 4)))
    assert ad.finite_diff_check(lambda x: ad.sum(x), x) < 1e-10
    logits = leaf(np.random.default_rng(1).normal(size=(2, 5)))
    assert ad.finite_diff_check(lambda z: ad.sum(ad.pick(ad.log_softmax(z), [1, 3])), logits) < 1e-6


def test_finite_diff_check_detects_a_wrong_gradient():
    def bad(x):
        y = x.data * 2.0
        return ad._one(np.sum(y), (x,), lambda g: (np.full_like(x.data, 3.0) * g,))

    assert ad.finite_diff_check(bad, leaf([1.0, 2.0])) > 0.1


def test_adam_hand_cases(frozen):
    p = ad.Tensor(np.array([0.0]), requires_grad=True)
    opt = ad.Adam([p], lr=0.1)
    p.grad = np.array([1.0])
    opt.step()
    assert abs(p.data[0] - frozen["adam_one_step"]) < 1e-12
    assert abs(frozen["adam_one_step"] + 0.1 / (1 + 1e-8)) < 1e-12
    p.grad = np.array([1.0])
    opt.step()
    assert opt.t == 2
    assert abs(p.data[0] - frozen["adam_two_steps"][1]) < 1e-12
    m, v = opt.state_arrays()
    assert abs(m[0][0] - (0.1 * 0.9 + 0.1)) < 1e-12
    assert abs(v[0][0] - (0.001 * 0.999 + 0.001)) < 1e-12


def test_adam_varied_gradients(frozen):
    p = ad.Tensor(np.array([0.0]), requires_grad=True)
    opt = ad.Adam([p], lr=0.1)
    for g, want in zip([0.5, -2.0, 1.5], frozen["adam_varied"]):
        p.grad = np.array([g])
        opt.step()
        assert abs(p.data[0] - want) < 1e-12


def test_adam_zero_gradient_and_missing_gradient():
    p = ad.Tensor(np.array([1.5, -2.0]), requires_grad=True)
    opt = ad.Adam([p], lr=0.1)
    opt.zero_grad()
    opt.step()
    np.testing.assert_array_equal(p.data, [1.5, -2.0])
    with pytest.raises(RuntimeError):
        opt.step()


def test_clip_grad_norm():
    a = ad.Tensor(np.zeros(2), requires_grad=True)
    b = ad.Tensor(np.zeros(1), requires_grad=True)
    a.grad, b.grad = np.array([3.0, 0.0]), np.array([4.0])
    assert ad.clip_grad_norm([a, b], 1.0) == pytest.approx(5.0)
    np.testing.assert_allclose(np.concatenate([a.grad, b.grad]), [0.6, 0.0, 0.8])


def test_contrastive_op_hand_value(frozen):
    case = frozen["contrastive_hand"]
    out = ad.contrastive_hardneg(ad.Tensor(case["sim"]), case["margin"])
    assert abs(out.item() - case["loss"]) < 1e-9


def test_dropout_modes():
    rng = np.random.default_rng(0)
    x = ad.Tensor(np.ones((200, 50)))
    np.testing.assert_array_equal(ad.dropout(x, 0.3, rng, training=False).data, x.data)
    y = ad.dropout(x, 0.3, rng, training=True).data
    kept = y != 0
    np.testing.assert_allclose(y[kept], 1 / 0.7)
    assert abs(kept.mean() - 0.7) < 0.02


# ---------------------------------------------------------------------------
# properties


finite = st.floats(-3, 3, allow_nan=False, width=64)


@settings(max_examples=40, deadline=None)
@given(arrays(F64, (3, 4), elements=finite))
def test_log_softmax_rows_normalize(x):
    y = ad.log_softmax(ad.Tensor(x)).data
    np.testing.assert_allclose(np.exp(y).sum(axis=1), 1.0, atol=1e-12)


@settings(max_examples=25, deadline=None)
@given(arrays(F64, (2, 3), elements=finite), arrays(F64, (3, 2), elements=finite))
def test_matmul_gradient_matches_formula(a, b):
    ta, tb = leaf(a), leaf(b)
    with ad.Tape():
        loss = ad.sum(ad.matmul(ta, tb))
    ad.backward(loss)
    np.testing.assert_allclose(ta.grad, np.ones((2, 2)) @ b.T, atol=1e-12)
    np.testing.assert_allclose(tb.grad, a.T @ np.ones((2, 2)), atol=1e-12)


@settings(max_examples=25, deadline=None)
@given(arrays(F64, (2, 5), elements=finite))
def test_tanh_sigmoid_gradcheck(x):
    w = np.linspace(0.5, 1.5, 10).reshape(2, 5)
    for fn in (ad.tanh, ad.sigmoid):
        assert ad.finite_diff_check(lambda t: ad.sum(ad.mul_const(fn(t), w)), leaf(x)) < 1e-4


@settings(max_examples=25, deadline=None)
@given(arrays(F64, (4,), elements=st.floats(-2, 2, width=64)).filter(lambda v: np.linalg.norm(v) > 1e-3))
def test_l2_normalize_gradient_orthogonal_to_output(x):
    t = leaf(x)
    w = np.arange(1.0, 5.0)
    with ad.Tape():
        loss = ad.sum(ad.mul_const(ad.l2_normalize(t), w))
    ad.backward(loss)
    y = x / np.linalg.norm(x)
    assert abs(float(t.grad @ y)) < 1e-10
