"""Tensor engine: forward primitives against naive oracles, every backward
rule against central finite differences."""

import numpy as np
import pytest

from streamvc import autodiff as ad
from streamvc.autodiff import Tensor


def rnd(*shape, seed=0, lo=-2.0, hi=2.0):
    return np.random.default_rng(seed).uniform(lo, hi, shape)


def test_sigmoid_at_zero():
    assert ad.sigmoid(Tensor([0.0])).data[0] == 0.5


def test_matmul_identity():
    v = rnd(3, 1, seed=1)
    out = ad.matmul(Tensor(np.eye(3)), Tensor(v))
    assert np.allclose(out.data, v, atol=1e-15)


def test_softmax_uniform():
    out = ad.softmax(Tensor([[0.0], [0.0], [0.0]]), axis=0)
    assert np.allclose(out.data, 1.0 / 3.0)


def test_elementwise_ops_match_numpy():
    a, b = rnd(4, 5, seed=2), rnd(4, 5, seed=3)
    assert np.array_equal(ad.add(Tensor(a), Tensor(b)).data, a + b)
    assert np.array_equal(ad.sub(Tensor(a), Tensor(b)).data, a - b)
    assert np.array_equal(ad.mul(Tensor(a), Tensor(b)).data, a * b)
    assert np.array_equal(ad.sqdiff(Tensor(a), Tensor(b)).data, (a - b) ** 2)
    assert np.array_equal(ad.absolute(Tensor(a)).data, np.abs(a))


def test_shape_mismatch_raises():
    with pytest.raises(ad.ShapeError):
        ad.add(Tensor(np.zeros((2, 2))), Tensor(np.zeros((2, 3))))
    with pytest.raises(ad.ShapeError):
        ad.matmul(Tensor(np.zeros((2, 3))), Tensor(np.zeros((2, 3))))


def test_non_finite_input_rejected():
    with pytest.raises(ad.NonFiniteError):
        Tensor([np.nan])
    x = Tensor([[700.0]])
    with pytest.raises(ad.NonFiniteError):
        ad.exp(ad.mul(x, 2.0))  # exp(1400) overflows


def test_backward_simple_quadratic():
    x = Tensor([1.0, 2.0], requires_grad=True)
    loss = ad.reduce_sum(ad.mul(x, x))
    ad.backward(loss)
    assert np.allclose(x.grad, [2.0, 4.0])


def test_backward_constant_leaves_zero_grad():
    x = Tensor([3.0], requires_grad=True)
    c = Tensor([5.0], requires_grad=True)
    loss = ad.reduce_sum(ad.mul(c, c))
    ad.backward(loss)
    assert np.all(x.grad == 0.0)


def test_backward_requires_scalar():
    x = Tensor(np.ones((2, 2)), requires_grad=True)
    with pytest.raises(ad.ShapeError):
        ad.backward(ad.mul(x, 2.0))


def test_backward_accumulates_until_reset():
    x = Tensor([1.0, 2.0], requires_grad=True)
    for _ in range(2):
        loss = ad.reduce_sum(ad.mul(x, x))
        ad.backward(loss)
    assert np.allclose(x.grad, [4.0, 8.0])
    x.zero_grad()
    assert np.all(x.grad == 0.0)


def test_backward_linearity():
    rng = np.random.default_rng(11)
    for trial in range(5):
        a, b = rng.uniform(0.5, 2.0, 2)
        x = Tensor(rng.uniform(-2, 2, (3, 4)), requires_grad=True)

        def f():
            return ad.reduce_sum(ad.mul(ad.sigmoid(x), x))

        def g():
            return ad.reduce_sum(ad.exp(ad.mul(x, 0.3)))

        ad.backward(f())
        gf = x.grad.copy()
        x.zero_grad()
        ad.backward(g())
        gg = x.grad.copy()
        x.zero_grad()
        ad.backward(ad.add(ad.mul(f(), a), ad.mul(g(), b)))
        assert np.allclose(x.grad, a * gf + b * gg, rtol=1e-10)
        x.zero_grad()


def _fd_check(make_loss, *params, tol=1e-3):
    err = ad.grad_check(make_loss, params, step=1e-4)
    assert err <= tol, f"max relative error {err}"


@pytest.mark.parametrize("op_name", [
    "add", "sub", "mul", "div", "sqdiff", "matmul",
])
def test_binary_backward_matches_fd(op_name):
    rng = np.random.default_rng(hash(op_name) % 2**31)
    a = Tensor(rng.uniform(0.2, 2.0, (3, 4)), requires_grad=True)
    shape_b = (4, 3) if op_name == "matmul" else (3, 4)
    b = Tensor(rng.uniform(0.2, 2.0, shape_b), requires_grad=True)
    op = getattr(ad, op_name)
    _fd_check(lambda: ad.reduce_sum(ad.mul(op(a, b), op(a, b))), a, b)


@pytest.mark.parametrize("op_name", ["sigmoid", "exp", "absolute", "sqrt"])
def test_unary_backward_matches_fd(op_name):
    rng = np.random.default_rng(hash(op_name) % 2**31)
    x = Tensor(rng.uniform(0.3, 2.0, (3, 4)), requires_grad=True)
    w = Tensor(rng.uniform(-1, 1, (3, 4)))
    op = getattr(ad, op_name)
    _fd_check(lambda: ad.reduce_sum(ad.mul(op(x), w)), x)


def test_clamp_backward_interior_and_flat():
    x = Tensor([[0.5, 3.0, -2.0]], requires_grad=True)
    ad.backward(ad.reduce_sum(ad.clamp(x, 0.0, 1.0)))
    assert np.allclose(x.grad, [[1.0, 0.0, 0.0]])


def test_softmax_backward_matches_fd():
    x = Tensor(rnd(4, 3, seed=5), requires_grad=True)
    w = Tensor(rnd(4, 3, seed=6))
    _fd_check(lambda: ad.reduce_sum(ad.mul(ad.softmax(x, axis=0), w)), x)


def test_reductions_and_shape_ops_backward():
    rng = np.random.default_rng(8)
    x = Tensor(rng.uniform(-1, 1, (3, 5)), requires_grad=True)
    w1 = Tensor(rng.uniform(-1, 1, (3, 5)))
    _fd_check(lambda: ad.reduce_sum(ad.mul(ad.cumsum(x, axis=1), w1)), x)
    _fd_check(lambda: ad.reduce_mean(ad.sqdiff(x, w1)), x)
    _fd_check(lambda: ad.reduce_sum(ad.mul(ad.narrow(x, 1, 1, 3), Tensor(rng.uniform(-1, 1, (3, 3))))), x)
    _fd_check(lambda: ad.reduce_sum(ad.mul(ad.transpose(x), Tensor(rng.uniform(-1, 1, (5, 3))))), x)
    _fd_check(lambda: ad.reduce_sum(ad.mul(ad.reshape(x, (5, 3)), Tensor(rng.uniform(-1, 1, (5, 3))))), x)
    y = Tensor(rng.uniform(-1, 1, (2, 5)), requires_grad=True)
    w2 = Tensor(rng.uniform(-1, 1, (5, 5)))
    _fd_check(lambda: ad.reduce_sum(ad.mul(ad.concat([x, y], axis=0), w2)), x, y)
    col = Tensor(rng.uniform(-1, 1, (3, 1)), requires_grad=True)
    _fd_check(lambda: ad.reduce_sum(ad.mul(ad.tile(col, 1, 4), Tensor(rng.uniform(-1, 1, (3, 4))))), col)


def test_conv_and_affine_backward():
    rng = np.random.default_rng(9)
    x = Tensor(rng.uniform(-1, 1, (2, 6)), requires_grad=True)
    k = Tensor(rng.uniform(-1, 1, (4, 2, 3)), requires_grad=True)
    b = Tensor(rng.uniform(-1, 1, 4), requires_grad=True)
    w_out = Tensor(rng.uniform(-1, 1, (2, 6)))
    _fd_check(lambda: ad.reduce_sum(ad.mul(ad.conv1d_glu(x, k, b, 2), w_out)), x, k, b)
    w_res = Tensor(rng.uniform(-1, 1, (2, 2, 3)), requires_grad=True)
    b_res = Tensor(rng.uniform(-1, 1, 4), requires_grad=True)
    _fd_check(lambda: ad.reduce_sum(ad.mul(ad.conv1d_glu(x, w_res, b_res, 1, residual=True), w_out)),
              x, w_res, b_res)
    w = Tensor(rng.uniform(-1, 1, (3, 2)), requires_grad=True)
    bias = Tensor(rng.uniform(-1, 1, (3, 1)), requires_grad=True)
    _fd_check(lambda: ad.reduce_sum(ad.mul(ad.affine(x, w, bias), Tensor(rng.uniform(-1, 1, (3, 6))))),
              x, w, bias)
    tbl = Tensor(rng.uniform(-1, 1, (3, 2)), requires_grad=True)
    _fd_check(lambda: ad.reduce_sum(ad.mul(ad.concat_tiled_row(x, tbl, 1),
                                           Tensor(rng.uniform(-1, 1, (4, 6))))), x, tbl)


def test_dilated_conv_matches_naive_loop():
    rng = np.random.default_rng(10)
    x, k, b = rng.uniform(-1, 1, (3, 7)), rng.uniform(-1, 1, (2, 3, 3)), rng.uniform(-1, 1, 2)
    dil = 2
    out = ad.dilated_conv1d(Tensor(x), Tensor(k), Tensor(b), dil).data
    naive = np.zeros((2, 7))
    for o in range(2):
        for t in range(7):
            acc = b[o]
            for j in range(3):
                src = t - j * dil
                if src >= 0:
                    acc += k[o, :, j] @ x[:, src]
            naive[o, t] = acc
    assert np.allclose(out, naive, atol=1e-12)
    tx, tk, tb = Tensor(x, True), Tensor(k, True), Tensor(b, True)
    w = Tensor(rng.uniform(-1, 1, (2, 7)))
    _fd_check(lambda: ad.reduce_sum(ad.mul(ad.dilated_conv1d(tx, tk, tb, dil), w)),
              tx, tk, tb)


def test_normalize_columns_and_masked_fill_backward():
    rng = np.random.default_rng(12)
    x = Tensor(rng.uniform(0.1, 2.0, (4, 3)), requires_grad=True)
    w = Tensor(rng.uniform(-1, 1, (4, 3)))
    _fd_check(lambda: ad.reduce_sum(ad.mul(ad.normalize_columns(x), w)), x)
    keep = rng.uniform(size=(4, 3)) > 0.3
    keep[0, :] = True
    _fd_check(lambda: ad.reduce_sum(ad.mul(ad.masked_fill(x, keep, -5.0), w)), x)


def test_normalize_columns_degenerate_goes_uniform():
    x = Tensor(np.zeros((4, 2)))
    out = ad.normalize_columns(x)
    assert np.allclose(out.data, 0.25)


def test_grad_check_analytic_square():
    x = Tensor([3.0], requires_grad=True)
    err = ad.grad_check(lambda: ad.reduce_sum(ad.mul(x, x)), [x], step=1e-4)
    assert err < 1e-6
    ad.backward(ad.reduce_sum(ad.mul(x, x)))
    assert np.allclose(x.grad, [6.0])


def test_grad_check_dead_branch_zero():
    x = Tensor([1.0], requires_grad=True)
    dead = Tensor([2.0], requires_grad=True)
    loss_fn = lambda: ad.reduce_sum(ad.mul(x, x))
    ad.grad_check(loss_fn, [x, dead])
    ad.backward(loss_fn())
    assert np.all(dead.grad == 0.0)


def test_forward_determinism():
    x = rnd(3, 3, seed=13)
    a = ad.softmax(ad.sigmoid(Tensor(x)), axis=0).data
    b = ad.softmax(ad.sigmoid(Tensor(x)), axis=0).data
    assert np.array_equal(a, b)


def test_no_grad_blocks_recording():
    x = Tensor([1.0], requires_grad=True)
    with ad.no_grad():
        y = ad.mul(x, 2.0)
    assert not y.requires_grad
    assert y._backward is None


def test_fused_ops_match_composed_forms():
    rng = np.random.default_rng(14)
    x = rng.uniform(-1, 1, (3, 5))
    w = rng.uniform(-1, 1, (4, 3))
    b = rng.uniform(-1, 1, (4, 1))
    fused = ad.affine(Tensor(x), Tensor(w), Tensor(b)).data
    composed = ad.add(ad.matmul(Tensor(w), Tensor(x)), ad.tile(Tensor(b), 1, 5)).data
    assert np.allclose(fused, composed, atol=1e-12)
    k = rng.uniform(-1, 1, (6, 3, 2))
    bc = rng.uniform(-1, 1, 6)
    fused = ad.conv1d_glu(Tensor(x), Tensor(k), Tensor(bc), 1).data
    u = ad.dilated_conv1d(Tensor(x), Tensor(k), Tensor(bc), 1)
    composed = ad.mul(ad.narrow(u, 0, 0, 3), ad.sigmoid(ad.narrow(u, 0, 3, 3))).data
    assert np.allclose(fused, composed, atol=1e-12)
