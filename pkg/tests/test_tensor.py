import numpy as np
import pytest

from diffmorph import tensor as T
from diffmorph.tensor import Tensor

SEEDS = [0, 1, 2, 3, 4]


def randn(rng, *shape, dtype=np.float32):
    return rng.standard_normal(shape).astype(dtype)


def test_add_values():
    out = Tensor([1.0, 2.0]) + Tensor([3.0, 4.0])
    assert np.array_equal(out.data, [4.0, 6.0])


def test_swish_zero():
    assert T.swish(Tensor([0.0])).data[0] == 0.0


def test_swish_grad_at_one():
    x = Tensor(np.array([1.0]))
    err = T.grad_check(lambda t: T.swish(t).sum(), x, h=1e-3)
    assert err < 1e-4


def test_matmul_identity():
    a = Tensor(np.eye(2, dtype=np.float32))
    b = Tensor(np.array([[1.0, 2.0], [3.0, 4.0]], dtype=np.float32))
    assert np.array_equal((a @ b).data, b.data)


def test_matmul_row_col():
    out = Tensor(np.array([[1.0, 0.0]])) @ Tensor(np.array([[2.0], [3.0]]))
    assert out.data.shape == (1, 1) and out.data[0, 0] == 2.0


def test_matmul_grads():
    rng = np.random.default_rng(0)
    a = Tensor(randn(rng, 4, 5))
    b = Tensor(randn(rng, 5, 3, dtype=np.float64))
    s = Tensor(randn(rng, 4, 3, dtype=np.float64))
    assert T.grad_check(lambda t: ((t @ b) * s).sum(), a) < 1e-4
    a64 = Tensor(a.data.astype(np.float64))
    assert T.grad_check(lambda t: ((a64 @ t) * s).sum(), b) < 1e-4


def test_conv2d_scalar_kernel_doubles():
    x = Tensor(np.arange(9, dtype=np.float32).reshape(1, 1, 3, 3))
    w = Tensor(np.full((1, 1, 1, 1), 2.0, dtype=np.float32))
    out = T.conv2d(x, w)
    assert np.array_equal(out.data, 2.0 * x.data)


def test_conv2d_ones_center():
    x = Tensor(np.ones((1, 1, 5, 5), dtype=np.float32))
    w = Tensor(np.ones((1, 1, 3, 3), dtype=np.float32))
    out = T.conv2d(x, w, stride=1, pad=1)
    assert out.shape == (1, 1, 5, 5)
    assert out.data[0, 0, 2, 2] == 9.0


def test_conv2d_stride2_shape_and_grads():
    rng = np.random.default_rng(3)
    x = Tensor(randn(rng, 1, 2, 8, 8))
    w = Tensor(randn(rng, 3, 2, 3, 3))
    b = Tensor(randn(rng, 3))
    out = T.conv2d(x, w, b, stride=2, pad=1)
    assert out.shape == (1, 3, 4, 4)
    w64 = Tensor(w.data.astype(np.float64))
    b64 = Tensor(b.data.astype(np.float64))
    x64 = Tensor(x.data.astype(np.float64))
    assert T.grad_check(
        lambda t: T.conv2d(t, w64, b64, stride=2, pad=1).sum(), x) < 1e-4
    assert T.grad_check(
        lambda t: (T.conv2d(x64, t, b64, stride=2, pad=1) ** 2.0).sum(), w) < 1e-4
    assert T.grad_check(
        lambda t: (T.conv2d(x64, w64, t, stride=2, pad=1) ** 2.0).sum(), b) < 1e-4


def test_conv2d_even_kernel_rejected():
    x = Tensor(np.ones((1, 1, 4, 4), dtype=np.float32))
    w = Tensor(np.ones((1, 1, 2, 2), dtype=np.float32))
    with pytest.raises(ValueError):
        T.conv2d(x, w)


def test_transposed_conv2d_identity():
    x = Tensor(np.arange(16, dtype=np.float32).reshape(1, 1, 4, 4))
    w = Tensor(np.ones((1, 1, 1, 1), dtype=np.float32))
    out = T.transposed_conv2d(x, w, stride=1)
    assert np.array_equal(out.data, x.data)


def test_transposed_conv2d_upsamples_2x():
    rng = np.random.default_rng(1)
    x = Tensor(randn(rng, 2, 3, 4, 4))
    w = Tensor(randn(rng, 3, 5, 4, 4))
    assert T.transposed_conv2d(x, w, stride=2).shape == (2, 5, 8, 8)


def test_transposed_conv2d_incompatible():
    x = Tensor(np.ones((1, 1, 4, 4), dtype=np.float32))
    w = Tensor(np.ones((1, 1, 3, 3), dtype=np.float32))
    with pytest.raises(ValueError):
        T.transposed_conv2d(x, w, stride=2)


@pytest.mark.parametrize("seed", SEEDS)
def test_conv_adjoint_identity(seed):
    rng = np.random.default_rng(seed)
    x = randn(rng, 2, 3, 8, 8)
    w = Tensor(randn(rng, 4, 3, 3, 3))
    y = randn(rng, 2, 4, 4, 4)
    cx = T.conv2d(Tensor(x), w, stride=2, pad=1)
    xt = Tensor(x, requires_grad=True)
    out = T.conv2d(xt, w, stride=2, pad=1)
    out.backward(y)
    lhs = float(np.vdot(cx.data.astype(np.float64), y.astype(np.float64)))
    rhs = float(np.vdot(x.astype(np.float64), xt.grad.astype(np.float64)))
    assert abs(lhs - rhs) <= 1e-5 * max(1.0, abs(lhs))


@pytest.mark.parametrize("seed", SEEDS)
def test_tconv_adjoint_identity(seed):
    rng = np.random.default_rng(seed)
    x = randn(rng, 2, 3, 4, 4)
    w = Tensor(randn(rng, 3, 2, 4, 4))
    y = randn(rng, 2, 2, 8, 8)
    xt = Tensor(x, requires_grad=True)
    out = T.transposed_conv2d(xt, w, stride=2)
    out.backward(y)
    lhs = float(np.vdot(out.data.astype(np.float64), y.astype(np.float64)))
    rhs = float(np.vdot(x.astype(np.float64), xt.grad.astype(np.float64)))
    assert abs(lhs - rhs) <= 1e-5 * max(1.0, abs(lhs))


def test_nearest_upsample2_values():
    x = Tensor(np.array([[1.0, 2.0], [3.0, 4.0]], dtype=np.float32
                        ).reshape(1, 1, 2, 2))
    out = T.nearest_upsample2(x)
    expect = np.array([[1, 1, 2, 2], [1, 1, 2, 2], [3, 3, 4, 4], [3, 3, 4, 4]],
                      dtype=np.float32)
    assert np.array_equal(out.data[0, 0], expect)


def test_nearest_upsample2_backward_counts():
    x = Tensor(np.zeros((1, 1, 2, 2), dtype=np.float32), requires_grad=True)
    T.nearest_upsample2(x).sum().backward()
    assert np.array_equal(x.grad, np.full((1, 1, 2, 2), 4.0, dtype=np.float32))


def test_nearest_upsample2_grad_check():
    rng = np.random.default_rng(2)
    x = Tensor(randn(rng, 1, 2, 3, 3))
    assert T.grad_check(lambda t: (T.nearest_upsample2(t) ** 2.0).sum(), x) < 1e-4


def test_group_norm_constant_input():
    x = Tensor(np.full((2, 4, 3, 3), 7.0, dtype=np.float32))
    gamma = Tensor(np.ones(4, dtype=np.float32))
    beta = Tensor(np.zeros(4, dtype=np.float32))
    out = T.group_norm(x, 2, gamma, beta)
    assert np.abs(out.data).max() == 0.0


def test_group_norm_moments():
    rng = np.random.default_rng(5)
    x = Tensor(randn(rng, 2, 6, 5, 5))
    gamma = Tensor(np.ones(6, dtype=np.float32))
    beta = Tensor(np.zeros(6, dtype=np.float32))
    out = T.group_norm(x, 3, gamma, beta).data.reshape(2, 3, -1)
    assert np.abs(out.mean(axis=2)).max() < 1e-6
    assert np.abs(out.var(axis=2) - 1.0).max() < 1e-3


def test_group_norm_grads():
    rng = np.random.default_rng(6)
    x = Tensor(randn(rng, 2, 4, 3, 3))
    gamma = Tensor(np.abs(randn(rng, 4, dtype=np.float64)) + 0.5)
    beta = Tensor(randn(rng, 4, dtype=np.float64))
    assert T.grad_check(
        lambda t: (T.group_norm(t, 2, gamma, beta) ** 2.0).sum(), x) < 1e-4
    x64 = Tensor(x.data.astype(np.float64))
    assert T.grad_check(
        lambda t: (T.group_norm(x64, 2, t, beta) ** 2.0).sum(), gamma) < 1e-4
    assert T.grad_check(
        lambda t: (T.group_norm(x64, 2, gamma, t) ** 2.0).sum(), beta) < 1e-4


def test_group_norm_indivisible():
    x = Tensor(np.ones((1, 5, 2, 2), dtype=np.float32))
    one = Tensor(np.ones(5, dtype=np.float32))
    with pytest.raises(ValueError):
        T.group_norm(x, 2, one, one)


def test_reduce_values():
    assert Tensor([1.0, 2.0, 3.0]).sum().item() == 6.0
    assert Tensor(np.full((4, 4), 2.5, dtype=np.float32)).mean().item() == 2.5


def test_sum_grad_is_ones():
    x = Tensor(np.zeros((2, 3), dtype=np.float32), requires_grad=True)
    x.sum().backward()
    assert np.array_equal(x.grad, np.ones((2, 3), dtype=np.float32))


def test_max_tie_break_lowest_index():
    x = Tensor(np.array([3.0, 1.0, 3.0]), requires_grad=True)
    x.max().backward()
    assert np.array_equal(x.grad, [1.0, 0.0, 0.0])

    x2 = Tensor(np.array([[2.0, 2.0], [2.0, 0.0]]), requires_grad=True)
    x2.max(axis=1).sum().backward()
    assert np.array_equal(x2.grad, [[1.0, 0.0], [1.0, 0.0]])


def test_axis_out_of_range():
    with pytest.raises(ValueError):
        Tensor(np.ones(3, dtype=np.float32)).sum(axis=2)


def test_backward_simple_values():
    x = Tensor(np.array([1.0, 2.0]), requires_grad=True)
    (x * x).sum().backward()
    assert np.array_equal(x.grad, [2.0, 4.0])


def test_backward_requires_scalar():
    x = Tensor(np.ones((2, 2), dtype=np.float32), requires_grad=True)
    with pytest.raises(ValueError):
        (x * 2.0).backward()


def test_backward_accumulates_across_calls():
    x = Tensor(np.array([1.0, 1.0]), requires_grad=True)
    loss = (x * 3.0).sum()
    loss.backward()
    loss.backward()
    assert np.array_equal(x.grad, [6.0, 6.0])


def test_two_consumer_accumulation():
    rng = np.random.default_rng(7)
    x = Tensor(randn(rng, 3, 3))

    def f(t):
        z = t.exp()
        return (z * z).sum() + z.mean()

    assert T.grad_check(f, x) < 1e-4


def test_grad_check_sum_is_exact():
    # zeros make every x_i +- h representable, so fd == analytic exactly
    x = Tensor(np.zeros(4, dtype=np.float32))
    assert T.grad_check(lambda t: t.sum(), x) == 0.0


def test_grad_check_exp():
    rng = np.random.default_rng(8)
    assert T.grad_check(lambda t: t.exp().sum(), Tensor(randn(rng, 5))) < 1e-4


def test_grad_check_through_conv():
    rng = np.random.default_rng(9)
    x = Tensor(randn(rng, 1, 2, 5, 5))
    w = Tensor(randn(rng, 3, 2, 3, 3, dtype=np.float64))
    assert T.grad_check(
        lambda t: (T.conv2d(t, w, stride=1, pad=1) ** 2.0).sum(), x) < 1e-4


@pytest.mark.parametrize("seed", SEEDS)
def test_elementwise_grad_battery(seed):
    rng = np.random.default_rng(seed)
    x = Tensor(randn(rng, 2, 4))
    pos = Tensor(np.abs(randn(rng, 2, 4)) + 0.5)
    other = Tensor(randn(rng, 2, 4, dtype=np.float64))
    divisor = Tensor(np.abs(randn(rng, 2, 4, dtype=np.float64)) + 1.0)
    cases = [
        (lambda t: (t + other).sum(), x),
        (lambda t: (t - other * 2.0).sum(), x),
        (lambda t: (t * other).sum(), x),
        (lambda t: (t / divisor).sum(), x),
        # away from 0 so the h^2 truncation term stays below tolerance
        (lambda t: (t ** 3.0).sum(), pos),
        (lambda t: (-t).mean(), x),
        (lambda t: t.exp().sum(), x),
        (lambda t: t.log().sum(), pos),
        (lambda t: t.sqrt().sum(), pos),
        (lambda t: T.swish(t).sum(), x),
        (lambda t: T.sigmoid(t).sum(), x),
        (lambda t: T.leaky_relu(t).sum(), x),
        (lambda t: (2.0 / (t * t + 1.0)).sum(), x),
        (lambda t: T.softmax(t, axis=1).max(axis=1).sum(), x),
        (lambda t: t.reshape(4, 2).transpose().sum(axis=1).mean(), x),
        (lambda t: t[0, 1:].sum(), x),
        (lambda t: T.concat([t, t * 0.5], axis=1).mean(), x),
    ]
    for i, (f, arg) in enumerate(cases):
        err = T.grad_check(f, arg)
        assert err < 1e-4, "case %d err %g" % (i, err)


@pytest.mark.parametrize("seed", SEEDS)
def test_composite_graph_grad(seed):
    """conv -> group_norm -> swish -> conv chain, checked end to end."""
    rng = np.random.default_rng(seed)
    x = Tensor(randn(rng, 1, 2, 6, 6, dtype=np.float64))
    w1 = randn(rng, 4, 2, 3, 3)
    gamma = np.ones(4, dtype=np.float32)
    beta = np.zeros(4, dtype=np.float32)
    w2 = randn(rng, 2, 4, 3, 3)

    def f(t):
        h = T.conv2d(x, t.reshape(4, 2, 3, 3), stride=1, pad=1)
        h = T.group_norm(h, 2, Tensor(gamma.astype(np.float64)),
                         Tensor(beta.astype(np.float64)))
        h = T.swish(h)
        h = T.conv2d(h, Tensor(w2.astype(np.float64)), stride=2, pad=1)
        return (h * h).mean()

    err = T.grad_check(f, Tensor(w1))
    assert err < 1e-3


def test_forward_determinism():
    rng = np.random.default_rng(11)
    x = randn(rng, 2, 3, 8, 8)
    w = randn(rng, 4, 3, 3, 3)
    a = T.conv2d(Tensor(x), Tensor(w), stride=2, pad=1).data
    b = T.conv2d(Tensor(x.copy()), Tensor(w.copy()), stride=2, pad=1).data
    assert np.array_equal(a, b)
    s1 = T.softmax(Tensor(x.reshape(2, -1)), axis=1).data
    s2 = T.softmax(Tensor(x.reshape(2, -1).copy()), axis=1).data
    assert np.array_equal(s1, s2)


def test_dtype_mismatch_rejected():
    a = Tensor(np.ones(3, dtype=np.float32))
    b = Tensor(np.ones(3, dtype=np.float64))
    with pytest.raises(TypeError):
        a * b


def test_pow_tensor_exponent_rejected():
    a = Tensor(np.ones(3, dtype=np.float32))
    with pytest.raises(TypeError):
        a ** a


def test_matmul_inner_mismatch():
    with pytest.raises(ValueError):
        Tensor(np.ones((2, 3), dtype=np.float32)) @ Tensor(
            np.ones((4, 2), dtype=np.float32))


def test_no_grad_blocks_recording():
    x = Tensor(np.ones(3, dtype=np.float32), requires_grad=True)
    with T.no_grad():
        y = (x * 2.0).sum()
    assert y._backward is None and not y.requires_grad
