import numpy as np
import pytest

from diffmorph import tensor as T
from diffmorph import warp as W
from diffmorph.tensor import Tensor

SEEDS = [0, 1, 2, 3, 4]


def make_field(data):
    return Tensor(np.asarray(data, dtype=np.float32))


def test_zero_field_is_identity():
    rng = np.random.default_rng(0)
    img = Tensor(rng.standard_normal((2, 3, 6, 7)).astype(np.float32))
    field = make_field(np.zeros((2, 2, 6, 7)))
    out = W.warp(img, field)
    assert np.array_equal(out.data, img.data)


def test_integer_shift():
    rng = np.random.default_rng(1)
    img = Tensor(rng.standard_normal((1, 1, 5, 5)).astype(np.float32))
    field = np.zeros((1, 2, 5, 5), dtype=np.float32)
    field[:, 0] = 1.0
    out = W.warp(img, make_field(field)).data
    assert np.array_equal(out[0, 0, :-1], img.data[0, 0, 1:])
    # border row clamps to the last row
    assert np.array_equal(out[0, 0, -1], img.data[0, 0, -1])


def test_half_shift_bilinear_average():
    row = np.array([0.0, 1.0, 0.0], dtype=np.float32)
    img = Tensor(np.tile(row, (1, 1, 3, 1)))
    field = np.zeros((1, 2, 3, 3), dtype=np.float32)
    field[:, 1] = 0.5
    out = W.warp(img, make_field(field)).data
    # sample at column j+0.5: average of neighbours per the bilinear formula
    assert np.allclose(out[0, 0, 1], [0.5, 0.5, 0.0], atol=1e-7)


def test_warp_linear_in_image():
    rng = np.random.default_rng(2)
    i1 = rng.standard_normal((1, 2, 8, 8)).astype(np.float32)
    i2 = rng.standard_normal((1, 2, 8, 8)).astype(np.float32)
    field = make_field(rng.uniform(-2, 2, (1, 2, 8, 8)))
    a, b = 1.7, -0.6
    lhs = W.warp(Tensor(a * i1 + b * i2), field).data
    rhs = a * W.warp(Tensor(i1), field).data + b * W.warp(Tensor(i2), field).data
    assert np.abs(lhs - rhs).max() < 1e-6


@pytest.mark.parametrize("seed", SEEDS)
def test_warp_grad_check(seed):
    rng = np.random.default_rng(seed)
    img = Tensor(rng.standard_normal((1, 2, 5, 5)).astype(np.float32))
    # keep samples away from exact integers and borders: clamp kinks break fd
    field = Tensor((rng.uniform(-1.3, 1.3, (1, 2, 5, 5))
                    + 0.25 * np.sign(rng.standard_normal((1, 2, 5, 5))))
                   .astype(np.float32))
    img64 = Tensor(img.data.astype(np.float64))
    w = Tensor(rng.standard_normal((1, 2, 5, 5)))
    w64 = Tensor(w.data.astype(np.float64))
    err_f = T.grad_check(lambda t: (W.warp(img64, t) * w64).sum(), field, h=1e-4)
    assert err_f < 1e-3
    f64 = Tensor(field.data.astype(np.float64))
    err_i = T.grad_check(lambda t: (W.warp(t, f64) * w64).sum(), img)
    assert err_i < 1e-4


def test_warp_rank_mismatch():
    img = Tensor(np.zeros((1, 1, 4, 4), dtype=np.float32))
    bad = Tensor(np.zeros((1, 3, 4, 4), dtype=np.float32))
    with pytest.raises(ValueError):
        W.warp(img, bad)


def test_warp_nearest_keeps_binary():
    rng = np.random.default_rng(3)
    mask = (rng.uniform(size=(1, 1, 8, 8)) > 0.5).astype(np.float32)
    field = make_field(rng.uniform(-2, 2, (1, 2, 8, 8)))
    out = W.warp_nearest(Tensor(mask), field).data
    assert set(np.unique(out)).issubset({0.0, 1.0})


def test_fold_fraction_zero_field():
    assert W.jacobian_fold_fraction(np.zeros((2, 8, 8), dtype=np.float32)) == 0.0


def test_fold_fraction_constant_field():
    u = np.full((2, 6, 6), 3.25, dtype=np.float32)
    assert W.jacobian_fold_fraction(u) == 0.0


def test_fold_fraction_reflection():
    # u_x(x) = -2x maps x to -x: det(I + grad u) = -1 everywhere
    h, w = 9, 9
    u = np.zeros((2, h, w), dtype=np.float32)
    u[0] = -2.0 * np.arange(h, dtype=np.float32)[:, None]
    assert W.jacobian_fold_fraction(u) == 1.0


@pytest.mark.parametrize("a_mat,expect", [
    (np.array([[1.3, 0.2], [-0.1, 0.8]]), 0.0),   # det > 0
    (np.array([[-1.1, 0.0], [0.3, 0.9]]), 1.0),   # det < 0
])
def test_fold_fraction_affine(a_mat, expect):
    h, w = 7, 8
    ii, jj = np.meshgrid(np.arange(h), np.arange(w), indexing="ij")
    x = np.stack([ii, jj]).astype(np.float64)
    u = np.einsum("ab,bhw->ahw", a_mat - np.eye(2), x)
    assert W.jacobian_fold_fraction(u.astype(np.float32)) == expect


def test_fold_fraction_too_small():
    with pytest.raises(ValueError):
        W.jacobian_fold_fraction(np.zeros((2, 2, 5), dtype=np.float32))


def test_energy_constant_field_is_zero():
    f = make_field(np.full((1, 2, 6, 6), 2.5))
    assert W.field_gradient_energy(f).item() == 0.0


def test_energy_ramp_closed_form():
    s = 0.75
    h, w = 6, 9
    u = np.zeros((1, 2, h, w), dtype=np.float32)
    u[0, 0] = s * np.arange(h, dtype=np.float32)[:, None]
    e = W.field_gradient_energy(make_field(u)).item()
    assert abs(e - s * s) < 1e-6


@pytest.mark.parametrize("seed", SEEDS)
def test_energy_grad_check(seed):
    rng = np.random.default_rng(seed)
    f = Tensor(rng.standard_normal((1, 2, 5, 6)).astype(np.float32))
    assert T.grad_check(lambda t: W.field_gradient_energy(t), f) < 1e-4


def test_warp3d_identity_and_shift():
    rng = np.random.default_rng(4)
    img = Tensor(rng.standard_normal((1, 2, 4, 5, 6)).astype(np.float32))
    zero = Tensor(np.zeros((1, 3, 4, 5, 6), dtype=np.float32))
    assert np.array_equal(W.warp(img, zero).data, img.data)

    field = np.zeros((1, 3, 4, 5, 6), dtype=np.float32)
    field[:, 2] = 1.0
    out = W.warp(img, Tensor(field)).data
    assert np.array_equal(out[..., :-1], img.data[..., 1:])


def test_warp3d_grad_check():
    rng = np.random.default_rng(5)
    img = Tensor(rng.standard_normal((1, 1, 4, 4, 4)).astype(np.float64))
    field = Tensor((rng.uniform(-0.8, 0.8, (1, 3, 4, 4, 4))
                    + 0.1).astype(np.float32))
    w = Tensor(rng.standard_normal((1, 1, 4, 4, 4)))
    w64 = Tensor(w.data.astype(np.float64))
    err = T.grad_check(lambda t: (W.warp(img, t) * w64).sum(), field, h=1e-4)
    assert err < 1e-3
    f64 = Tensor(field.data.astype(np.float64))
    err = T.grad_check(lambda t: (W.warp(t, f64) * w64).sum(),
                       Tensor(img.data.astype(np.float32)))
    assert err < 1e-4


def test_fold_fraction_3d():
    u = np.zeros((3, 5, 5, 5), dtype=np.float32)
    assert W.jacobian_fold_fraction(u) == 0.0
    u[0] = -2.0 * np.arange(5, dtype=np.float32)[:, None, None]
    assert W.jacobian_fold_fraction(u) == 1.0
