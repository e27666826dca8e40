"""Tensor ops, backward, and optimizer against hand values and the
finite-difference oracle."""
import math

import numpy as np
import pytest

from condrep import autodiff as ad
from condrep.autodiff import Tensor, backward
from condrep.exceptions import ContractError, DimensionError, StateError
from condrep.gradcheck import fd_gradient_oracle, max_relative_error
from condrep.optim import AdamW

FD_TOL = 1e-4


def naive_matmul(a, b):
    m, k = a.shape
    k2, n = b.shape
    out = np.zeros((m, n))
    for i in range(m):
        for j in range(n):
            for t in range(k):
                out[i, j] += a[i, t] * b[t, j]
    return out


class TestMatmul:
    def test_identity(self):
        b = np.array([[5.0, 6.0], [7.0, 8.0]])
        out = ad.matmul(Tensor(np.eye(2)), Tensor(b))
        np.testing.assert_array_equal(out.data, b)

    def test_hand_case_matches_triple_loop(self):
        a = np.array([[1.0, 2.0], [3.0, 4.0]])
        b = np.array([[5.0, 6.0], [7.0, 8.0]])
        out = ad.matmul(Tensor(a), Tensor(b))
        np.testing.assert_array_equal(out.data, [[19.0, 22.0], [43.0, 50.0]])
        np.testing.assert_allclose(out.data, naive_matmul(a, b), rtol=0, atol=0)

    def test_zero_case(self):
        out = ad.matmul(Tensor(np.zeros((2, 2))), Tensor(np.full((2, 2), 7.0)))
        np.testing.assert_array_equal(out.data, np.zeros((2, 2)))

    def test_shape_error_names_both_shapes(self):
        with pytest.raises(DimensionError, match=r"\(2, 3\).*\(2, 4\)"):
            ad.matmul(Tensor(np.zeros((2, 3))), Tensor(np.zeros((2, 4))))


class TestSoftmax:
    def test_uniform(self):
        out = ad.softmax_lastdim(Tensor([0.0, 0.0, 0.0]))
        np.testing.assert_allclose(out.data, [1 / 3] * 3, atol=1e-15)

    def test_overflow_safe(self):
        out = ad.softmax_lastdim(Tensor([1000.0, 0.0]))
        assert np.all(np.isfinite(out.data))
        np.testing.assert_allclose(out.data, [1.0, 0.0], atol=1e-12)

    def test_exact_exponentials(self):
        out = ad.softmax_lastdim(Tensor([math.log(2.0), 0.0]))
        np.testing.assert_allclose(out.data, [2 / 3, 1 / 3], atol=1e-15)

    def test_slices_sum_to_one_and_nonnegative(self):
        rng = np.random.default_rng(0)
        for _ in range(20):
            x = rng.normal(size=(3, 5, 7)) * rng.uniform(0.1, 50)
            y = ad.softmax_lastdim(Tensor(x)).data
            assert np.all(y >= 0)
            np.testing.assert_allclose(y.sum(axis=-1), 1.0, atol=1e-9)

    def test_empty_last_dim(self):
        with pytest.raises(DimensionError):
            ad.softmax_lastdim(Tensor(np.zeros((2, 0))))


class TestLayerNorm:
    def test_constant_slice_goes_to_zero(self):
        out = ad.layer_norm(Tensor([4.0, 4.0, 4.0]), Tensor(np.ones(3)), Tensor(np.zeros(3)))
        np.testing.assert_array_equal(out.data, np.zeros(3))

    def test_closed_form(self):
        x = np.array([1.0, 2.0, 3.0])
        out = ad.layer_norm(Tensor(x), Tensor(np.ones(3)), Tensor(np.zeros(3)))
        expected = (x - x.mean()) / np.sqrt(x.var() + 1e-5)
        np.testing.assert_allclose(out.data, expected, atol=1e-15)
        assert abs(out.data.mean()) < 1e-12

    def test_unit_variance_when_spread_is_large(self):
        rng = np.random.default_rng(3)
        x = rng.normal(scale=50.0, size=(4, 64))
        out = ad.layer_norm(Tensor(x), Tensor(np.ones(64)), Tensor(np.zeros(64))).data
        np.testing.assert_allclose(out.var(axis=-1), 1.0, atol=1e-6)

    def test_zero_gamma_broadcasts_beta(self):
        beta = np.array([1.0, -2.0, 0.5])
        out = ad.layer_norm(Tensor(np.random.default_rng(1).normal(size=(5, 3))),
                            Tensor(np.zeros(3)), Tensor(beta))
        np.testing.assert_array_equal(out.data, np.broadcast_to(beta, (5, 3)))

    def test_zero_axis_rejected(self):
        with pytest.raises(DimensionError):
            ad.layer_norm(Tensor(np.zeros((2, 0))), Tensor(np.zeros(0)), Tensor(np.zeros(0)))


class TestRelu:
    def test_values(self):
        out = ad.relu(Tensor([-1.0, 0.0, 2.0]))
        np.testing.assert_array_equal(out.data, [0.0, 0.0, 2.0])

    def test_all_negative(self):
        out = ad.relu(Tensor([-5.0, -0.1]))
        np.testing.assert_array_equal(out.data, [0.0, 0.0])

    def test_gradient_gate(self):
        for value, expected in ((3.0, 1.0), (-3.0, 0.0), (0.0, 0.0)):
            x = Tensor([value], requires_grad=True)
            backward(ad.sum_along(ad.relu(x)))
            assert x.grad[0] == expected


class TestConv2d:
    def test_identity_kernel(self):
        x = np.random.default_rng(0).normal(size=(1, 5, 5))
        out = ad.conv2d(Tensor(x), Tensor(np.ones((1, 1, 1, 1))), stride=1, padding=0)
        np.testing.assert_array_equal(out.data, x)

    def test_hand_sum(self):
        x = Tensor(np.array([[[1.0, 2.0], [3.0, 4.0]]]))
        k = Tensor(np.ones((1, 1, 2, 2)))
        out = ad.conv2d(x, k, stride=1, padding=0)
        np.testing.assert_array_equal(out.data, [[[10.0]]])

    def test_zero_input(self):
        out = ad.conv2d(Tensor(np.zeros((2, 4, 4))), Tensor(np.ones((3, 2, 3, 3))),
                        stride=1, padding=1)
        np.testing.assert_array_equal(out.data, np.zeros((3, 4, 4)))

    def test_kernel_too_large(self):
        with pytest.raises(DimensionError):
            ad.conv2d(Tensor(np.zeros((1, 3, 3))), Tensor(np.ones((1, 1, 6, 6))),
                      stride=1, padding=1)


class TestShapeOps:
    def test_flatten_preserves_row_major_order(self):
        x = np.arange(12.0).reshape(2, 2, 3)
        out = ad.reshape(Tensor(x), (4, 3))
        np.testing.assert_array_equal(out.data, x.reshape(4, 3))

    def test_concat_rows(self):
        a, b = np.ones((4, 3)), np.zeros((4, 3))
        out = ad.concat([Tensor(a), Tensor(b)], axis=0)
        assert out.shape == (8, 3)
        np.testing.assert_array_equal(out.data[:4], a)

    def test_mean(self):
        assert ad.mean(Tensor([2.0, 4.0]), axis=0).item() == 3.0

    def test_incompatible_shapes_name_the_op(self):
        with pytest.raises(DimensionError, match="concat"):
            ad.concat([Tensor(np.zeros((2, 3))), Tensor(np.zeros((2, 4)))], axis=0)
        with pytest.raises(DimensionError, match="reshape"):
            ad.reshape(Tensor(np.zeros((2, 3))), (4, 4))


class TestBackward:
    def test_product_rule(self):
        x, y = Tensor([3.0], requires_grad=True), Tensor([5.0], requires_grad=True)
        backward(ad.sum_along(ad.mul(x, y)))
        assert x.grad[0] == 5.0 and y.grad[0] == 3.0

    def test_softmax_sum_has_zero_gradient(self):
        v = Tensor(np.random.default_rng(2).normal(size=5), requires_grad=True)
        backward(ad.sum_along(ad.softmax_lastdim(v)))
        np.testing.assert_allclose(v.grad, np.zeros(5), atol=1e-12)

    def test_composite_matches_finite_differences(self):
        rng = np.random.default_rng(7)
        w = rng.normal(size=(4, 4))

        def f(t):
            h = ad.relu(ad.matmul(t, Tensor(w)))
            return ad.sum_along(ad.mul(ad.softmax_lastdim(h), h))

        x = Tensor(rng.normal(size=(3, 4)), requires_grad=True)
        backward(f(x))
        fd = fd_gradient_oracle(f, x, step=1e-3)
        assert max_relative_error(x.grad, fd) < FD_TOL

    def test_non_scalar_loss_rejected(self):
        x = Tensor(np.ones(3), requires_grad=True)
        with pytest.raises(ContractError):
            backward(ad.mul(x, 2.0))

    def test_second_backward_rejected(self):
        x = Tensor([1.0], requires_grad=True)
        loss = ad.sum_along(ad.mul(x, x))
        backward(loss)
        with pytest.raises(StateError):
            backward(loss)

    def test_unreachable_tensor_keeps_no_grad(self):
        x = Tensor([1.0], requires_grad=True)
        other = Tensor([2.0], requires_grad=True)
        backward(ad.sum_along(ad.mul(x, 3.0)))
        assert other.grad is None


class TestFdOracle:
    def test_quadratic_is_exact(self):
        fd = fd_gradient_oracle(lambda t: ad.sum_along(ad.mul(t, t)), Tensor([1.0, 2.0]))
        np.testing.assert_allclose(fd.data, [2.0, 4.0], atol=1e-9)

    def test_constant_function(self):
        fd = fd_gradient_oracle(lambda t: 7.0, Tensor(np.ones((2, 2))))
        np.testing.assert_array_equal(fd.data, np.zeros((2, 2)))


class TestAdamW:
    def test_decay_only_step(self):
        p = Tensor(np.array([2.0, -4.0]), requires_grad=True)
        p.grad = np.zeros(2)
        opt = AdamW({"p": p}, lr=0.1, weight_decay=0.5)
        opt.step()
        np.testing.assert_allclose(p.data, [2.0 * 0.95, -4.0 * 0.95], atol=1e-15)

    def test_first_step_closed_form(self):
        rng = np.random.default_rng(5)
        w0 = rng.normal(size=4)
        g = rng.normal(size=4)
        p = Tensor(w0.copy(), requires_grad=True)
        p.grad = g.copy()
        opt = AdamW({"p": p}, lr=0.01, weight_decay=0.0)
        opt.step()
        expected = w0 - 0.01 * g / (np.abs(g) + opt.eps)
        np.testing.assert_allclose(p.data, expected, atol=1e-12)

    def test_step_counter(self):
        p = Tensor([1.0], requires_grad=True)
        p.grad = np.zeros(1)
        opt = AdamW({"p": p}, lr=0.1)
        assert opt.step_count == 0
        opt.step()
        assert opt.step_count == 1

    def test_missing_grad_names_parameter(self):
        p = Tensor([1.0], requires_grad=True)
        opt = AdamW({"theta": p})
        with pytest.raises(ContractError, match="theta"):
            opt.step()


def _random_tensor(rng, shape):
    return Tensor(rng.normal(size=shape), requires_grad=True)


# every differentiable op, checked on >= 5 seeded random shapes
OP_CASES = {
    "add": lambda t, rng: ad.add(t, Tensor(rng.normal(size=t.shape))),
    "add_broadcast": lambda t, rng: ad.add(t, Tensor(rng.normal(size=(t.shape[-1],)))),
    "sub": lambda t, rng: ad.sub(Tensor(rng.normal(size=t.shape)), t),
    "mul": lambda t, rng: ad.mul(t, Tensor(rng.normal(size=t.shape))),
    "mul_broadcast": lambda t, rng: ad.mul(t, Tensor(rng.normal(size=(t.shape[-1],)))),
    "relu": lambda t, rng: ad.relu(t),
    "softmax": lambda t, rng: ad.softmax_lastdim(t),
    "reshape": lambda t, rng: ad.reshape(t, (t.size,)),
    "permute": lambda t, rng: ad.permute(t, tuple(reversed(range(t.ndim)))),
    "concat": lambda t, rng: ad.concat([t, Tensor(rng.normal(size=t.shape))], axis=0),
    "mean": lambda t, rng: ad.mean(t, axis=0),
    "sqrt": lambda t, rng: ad.sqrt(ad.add(ad.mul(t, t), 0.5)),
    "log": lambda t, rng: ad.log(ad.add(ad.mul(t, t), 1.0)),
}


@pytest.mark.parametrize("name", sorted(OP_CASES))
@pytest.mark.parametrize("seed", range(5))
def test_op_gradients_match_oracle(name, seed):
    rng = np.random.default_rng(seed)
    shape = tuple(rng.integers(2, 5, size=rng.integers(2, 4)))
    op = OP_CASES[name]

    def f(t):
        out = op(t, np.random.default_rng(seed))
        return ad.sum_along(ad.mul(out, out))

    x = _random_tensor(rng, shape)
    backward(f(x))
    fd = fd_gradient_oracle(f, x, step=1e-3)
    assert max_relative_error(x.grad, fd) < FD_TOL, name


@pytest.mark.parametrize("seed", range(5))
def test_matmul_gradients_match_oracle(seed):
    rng = np.random.default_rng(100 + seed)
    m, k, n = rng.integers(2, 5, size=3)
    b = Tensor(rng.normal(size=(k, n)))

    def f(t):
        out = ad.matmul(t, b)
        return ad.sum_along(ad.mul(out, out))

    x = _random_tensor(rng, (m, k))
    backward(f(x))
    fd = fd_gradient_oracle(f, x)
    assert max_relative_error(x.grad, fd) < FD_TOL


@pytest.mark.parametrize("seed", range(5))
def test_batched_matmul_gradients_match_oracle(seed):
    rng = np.random.default_rng(200 + seed)
    b = Tensor(rng.normal(size=(4, 3)))

    def f(t):
        out = ad.matmul(t, b)
        return ad.sum_along(ad.mul(out, out))

    x = _random_tensor(rng, (3, 2, 4))
    backward(f(x))
    fd = fd_gradient_oracle(f, x)
    assert max_relative_error(x.grad, fd) < FD_TOL

    # gradient w.r.t. the shared right operand of a batched product
    a = rng.normal(size=(3, 2, 4))

    def g(t):
        out = ad.matmul(Tensor(a), t)
        return ad.sum_along(ad.mul(out, out))

    y = _random_tensor(rng, (4, 3))
    backward(g(y))
    fd = fd_gradient_oracle(g, y)
    assert max_relative_error(y.grad, fd) < FD_TOL


@pytest.mark.parametrize("seed", range(5))
def test_layer_norm_gradients_match_oracle(seed):
    rng = np.random.default_rng(300 + seed)
    gamma = Tensor(rng.normal(size=4), requires_grad=True)
    beta = Tensor(rng.normal(size=4), requires_grad=True)
    x = _random_tensor(rng, (3, 4))

    def f_x(t):
        out = ad.layer_norm(t, gamma, beta)
        return ad.sum_along(ad.mul(out, out))

    backward(f_x(x))
    assert max_relative_error(x.grad, fd_gradient_oracle(f_x, x)) < FD_TOL

    def f_gamma(t):
        out = ad.layer_norm(x, t, beta)
        return ad.sum_along(ad.mul(out, out))

    assert max_relative_error(gamma.grad, fd_gradient_oracle(f_gamma, gamma)) < FD_TOL

    def f_beta(t):
        out = ad.layer_norm(x, gamma, t)
        return ad.sum_along(ad.mul(out, out))

    assert max_relative_error(beta.grad, fd_gradient_oracle(f_beta, beta)) < FD_TOL


@pytest.mark.parametrize("seed", range(5))
@pytest.mark.parametrize("stride,padding", [(1, 0), (1, 1), (2, 1)])
def test_conv2d_gradients_match_oracle(seed, stride, padding):
    rng = np.random.default_rng(400 + seed)
    x = _random_tensor(rng, (2, 2, 5, 5))
    k = Tensor(rng.normal(size=(3, 2, 3, 3)), requires_grad=True)

    def f_x(t):
        out = ad.conv2d(t, k, stride=stride, padding=padding)
        return ad.sum_along(ad.mul(out, out))

    backward(f_x(x))
    assert max_relative_error(x.grad, fd_gradient_oracle(f_x, x)) < FD_TOL

    def f_k(t):
        out = ad.conv2d(x, t, stride=stride, padding=padding)
        return ad.sum_along(ad.mul(out, out))

    assert max_relative_error(k.grad, fd_gradient_oracle(f_k, k)) < FD_TOL


@pytest.mark.parametrize("seed", range(5))
def test_index_axis_gradients_match_oracle(seed):
    rng = np.random.default_rng(500 + seed)

    def f(t):
        out = ad.index_axis(t, 1, 1)
        return ad.sum_along(ad.mul(out, out))

    x = _random_tensor(rng, (3, 3, 2))
    backward(f(x))
    assert max_relative_error(x.grad, fd_gradient_oracle(f, x)) < FD_TOL


def test_forward_determinism_is_bit_exact():
    def run():
        rng = np.random.default_rng(11)
        x = Tensor(rng.normal(size=(4, 6)), requires_grad=True)
        w = Tensor(rng.normal(size=(6, 6)), requires_grad=True)
        out = ad.softmax_lastdim(ad.matmul(ad.relu(x), w))
        loss = ad.sum_along(ad.mul(out, out))
        backward(loss)
        return loss.data.copy(), x.grad.copy()

    l1, g1 = run()
    l2, g2 = run()
    assert np.array_equal(l1, l2) and np.array_equal(g1, g2)


def test_no_grad_suppresses_recording():
    x = Tensor([1.0, 2.0], requires_grad=True)
    with ad.no_grad():
        out = ad.mul(x, x)
    assert not out.requires_grad and out._edges == ()
