import math

import numpy as np
import pytest

import gnnxbench.autodiff as ad
from gnnxbench.autodiff import Adam, Tensor
from gnnxbench.errors import ContractError, ShapeError

from helpers import gradcheck, gradcheck_every_primitive


def rng_for(case: int) -> np.random.Generator:
    return np.random.default_rng(1000 + case)


def test_relu_forward():
    assert np.array_equal(ad.relu(np.array([-1.0, 2.0])), [0.0, 2.0])


def test_log_softmax_symmetry():
    out = ad.log_softmax(np.array([[0.0, 0.0]]))
    assert np.allclose(out, [[-math.log(2.0), -math.log(2.0)]])


def test_log_softmax_rows_normalize():
    rng = rng_for(0)
    x = rng.normal(size=(7, 5)) * 10
    out = ad.log_softmax(x)
    assert np.abs(np.exp(out).sum(axis=1) - 1.0).max() < 1e-9


def test_softmax_temperature_value():
    # e^{x_i/T} / sum_j e^{x_j/T} at x=[2,0], T=5
    out = ad.softmax_t(np.array([[2.0, 0.0]]), temperature=5.0)
    e = math.exp(0.4)
    expected = np.array([[e / (e + 1.0), 1.0 / (e + 1.0)]])
    assert np.allclose(out, expected, atol=1e-10)
    assert np.allclose(out, [[0.5987, 0.4013]], atol=5e-5)


def test_backward_requires_scalar():
    t = Tensor(np.ones((2, 2)), requires_grad=True)
    with pytest.raises(ContractError):
        (t * 2.0).backward()


def test_square_gradient():
    w = Tensor(np.array([3.0]), requires_grad=True)
    loss = ad.tensor_sum(w * w)
    loss.backward()
    assert np.allclose(w.grad, [6.0])


def test_disconnected_gradient_is_zero():
    w = Tensor(np.array([1.0, -2.0]), requires_grad=True)
    v = Tensor(np.array([4.0]), requires_grad=True)
    w.zero_grad()
    loss = ad.tensor_sum(v * v)
    loss.backward()
    assert np.array_equal(w.grad, [0.0, 0.0])


def test_backward_deterministic():
    def run():
        rng = rng_for(7)
        a = Tensor(rng.normal(size=(4, 3)), requires_grad=True)
        b = Tensor(rng.normal(size=(3, 2)), requires_grad=True)
        loss = ad.tensor_sum(ad.relu(a @ b))
        loss.backward()
        return a.grad.copy(), b.grad.copy()

    ga1, gb1 = run()
    ga2, gb2 = run()
    assert np.array_equal(ga1, ga2) and np.array_equal(gb1, gb2)


def test_matmul_chain_matches_finite_differences():
    rng = rng_for(1)
    gradcheck(
        lambda t: ad.tensor_sum(ad.relu(t["a"] @ t["b"]) @ t["c"]),
        {
            "a": rng.normal(size=(4, 3)) + 0.3,
            "b": rng.normal(size=(3, 5)) + 0.2,
            "c": rng.normal(size=(5, 2)),
        },
    )


def test_shape_errors_name_shapes():
    with pytest.raises(ShapeError, match=r"matmul.*\(2, 3\).*\(2, 3\)"):
        ad.matmul(np.ones((2, 3)), np.ones((2, 3)))


def test_plain_ndarray_fast_path():
    out = ad.matmul(np.ones((2, 3)), np.ones((3, 2)))
    assert isinstance(out, np.ndarray)
    t = ad.matmul(Tensor(np.ones((2, 3))), np.ones((3, 2)))
    assert isinstance(t, Tensor) and not t.requires_grad


def test_broadcast_add_bias():
    x = Tensor(np.zeros((3, 2)), requires_grad=True)
    b = Tensor(np.array([1.0, 2.0]), requires_grad=True)
    loss = ad.tensor_sum(x + b)
    loss.backward()
    assert np.array_equal(b.grad, [3.0, 3.0])
    assert np.array_equal(x.grad, np.ones((3, 2)))


def test_gather_rows_accumulates_repeats():
    x = Tensor(np.arange(6.0).reshape(3, 2), requires_grad=True)
    out = ad.gather_rows(x, [0, 0, 2])
    ad.tensor_sum(out).backward()
    assert np.array_equal(x.grad, [[2.0, 2.0], [0.0, 0.0], [1.0, 1.0]])


def test_nll_loss_value_and_masking():
    lp = np.log(np.array([[0.25, 0.75], [0.9, 0.1], [0.5, 0.5]]))
    labels = np.array([1, 0, 0])
    loss = ad.nll_loss(lp, labels, rows=np.array([0, 1]))
    expected = -(math.log(0.75) + math.log(0.9)) / 2.0
    assert np.allclose(loss, expected)


# --- finite-difference sweep over every primitive -------------------------

CASES = 20


@pytest.mark.parametrize("case", range(CASES))
def test_gradcheck_all_primitives(case):
    gradcheck_every_primitive(case)


# --- Adam ------------------------------------------------------------------


def test_adam_zero_grad_is_fixed_point():
    p = Tensor(np.array([1.0, -2.0]), requires_grad=True)
    opt = Adam([p])
    opt.zero_grad()
    opt.step()
    assert np.array_equal(p.data, [1.0, -2.0])


def test_adam_first_step_magnitude():
    # bias-corrected first step with g=1 moves the parameter by ~lr
    p = Tensor(np.array([0.5]), requires_grad=True)
    opt = Adam([p], lr=0.001)
    p.grad = np.array([1.0])
    opt.step()
    assert np.isclose(0.5 - p.data[0], 0.001, rtol=1e-6)


def test_adam_identical_params_identical_updates():
    p1 = Tensor(np.array([0.3]), requires_grad=True)
    p2 = Tensor(np.array([0.3]), requires_grad=True)
    opt = Adam([p1, p2], lr=0.01)
    for _ in range(5):
        p1.grad = np.array([0.7])
        p2.grad = np.array([0.7])
        opt.step()
    assert np.array_equal(p1.data, p2.data)


def test_adam_grad_shape_mismatch():
    p = Tensor(np.zeros((2, 2)), requires_grad=True)
    opt = Adam([p])
    p.grad = np.zeros(3)
    with pytest.raises(ShapeError):
        opt.step()
