"""Joint training objective: score-matching term plus registration term
(negative local normalized cross-correlation and field smoothness).

local_ncc is a fused operation: window statistics come from float64
integral images and the backward pass redistributes per-window
quantities with box sums instead of replaying the windowed graph.
Only fully-inside windows enter the mean; clipped border windows would
mix in padding and break the exact affine invariance of CC.
"""

from dataclasses import dataclass

import numpy as np

from . import warp as warp_mod
from .tensor import Tensor, make_node


@dataclass(frozen=True)
class LossWeights:
    lam: float = 2.0
    lambda_phi: float = 1.0
    ncc_window: int = 9

    def __post_init__(self):
        if not self.lam > 0:
            raise ValueError("LossWeights: lambda must be > 0")
        if self.lambda_phi < 0:
            raise ValueError("LossWeights: lambda_phi must be >= 0")
        if self.ncc_window < 3 or self.ncc_window % 2 == 0:
            raise ValueError("LossWeights: ncc_window must be odd and >= 3")


NCC_EPS = 1e-5


def rescale01(x):
    """Map [-1,1] intensities to [0,1]."""
    return (x + 1.0) * 0.5


def diffusion_loss(eps_hat, eps):
    """Mean squared error between predicted and drawn noise."""
    if eps_hat.shape != eps.shape:
        raise ValueError("diffusion_loss: shapes %s and %s differ"
                         % (tuple(eps_hat.shape), tuple(eps.shape)))
    d = eps_hat - eps
    return (d * d).mean()


def _box_sums(x, win):
    """Sums over all fully-inside win x win windows: [B,C,Ho,Wo]."""
    c = np.cumsum(np.cumsum(x, axis=2), axis=3)
    c = np.pad(c, ((0, 0), (0, 0), (1, 0), (1, 0)))
    return (c[:, :, win:, win:] - c[:, :, :-win, win:]
            - c[:, :, win:, :-win] + c[:, :, :-win, :-win])


def _box_spread(x, win):
    """Adjoint of _box_sums: scatter per-window values back to pixels."""
    xp = np.pad(x, ((0, 0), (0, 0), (win - 1, win - 1), (win - 1, win - 1)))
    return _box_sums(xp, win)


def local_ncc(a, b, window=9):
    """Mean windowed squared cross-correlation, in [0, 1].

    Per window: (sum (a - mean a)(b - mean b))^2 over the product of the
    two centered sums of squares, stabilized by NCC_EPS.
    """
    if a.shape != b.shape:
        raise ValueError("local_ncc: shapes %s and %s differ"
                         % (tuple(a.shape), tuple(b.shape)))
    if a.ndim != 4:
        raise ValueError("local_ncc: expected [B,C,H,W]")
    if window % 2 == 0 or window < 3:
        raise ValueError("local_ncc: window must be odd and >= 3")
    h, w = a.shape[2], a.shape[3]
    if window > h or window > w:
        raise ValueError("local_ncc: window %d exceeds image %dx%d"
                         % (window, h, w))

    ad = a.data.astype(np.float64)
    bd = b.data.astype(np.float64)
    n = float(window * window)
    sa = _box_sums(ad, window)
    sb = _box_sums(bd, window)
    saa = _box_sums(ad * ad, window)
    sbb = _box_sums(bd * bd, window)
    sab = _box_sums(ad * bd, window)
    cross = sab - sa * sb / n
    va = saa - sa * sa / n
    vb = sbb - sb * sb / n
    dd = va * vb + NCC_EPS
    cc = cross * cross / dd
    value = cc.mean()

    def backward(g):
        gw = float(g) / cc.size
        p = gw * 2.0 * cross / dd
        qa = -gw * cross * cross * vb / (dd * dd)
        qb = -gw * cross * cross * va / (dd * dd)
        abar = sa / n
        bbar = sb / n
        da = (bd * _box_spread(p, window) - _box_spread(p * bbar, window)
              + 2.0 * ad * _box_spread(qa, window)
              - 2.0 * _box_spread(qa * abar, window))
        db = (ad * _box_spread(p, window) - _box_spread(p * abar, window)
              + 2.0 * bd * _box_spread(qb, window)
              - 2.0 * _box_spread(qb * bbar, window))
        return da.astype(a.dtype), db.astype(b.dtype)

    out_dtype = np.float64 if a.dtype == np.float64 else np.float32
    return make_node(np.asarray(value, dtype=out_dtype), (a, b), backward)


def registration_loss(m, f, field, w):
    """Eq.-style registration term: -NCC(warp(m01, field), f01)
    plus lambda_phi times the field smoothness energy.

    m and f arrive in [-1,1] and are mapped to [0,1] before warping.
    """
    warped = warp_mod.warp(rescale01(m), field)
    sim = local_ncc(warped, rescale01(f), w.ncc_window)
    loss = -sim
    if w.lambda_phi != 0.0:
        loss = loss + w.lambda_phi * warp_mod.field_gradient_energy(field)
    return loss


def total_loss(c, x_t, t, eps, G, M, w):
    """Joint objective: diffusion term plus lam times registration term.

    c = (m, f); G(c, x_t, t) -> eps_hat; M(m, eps_hat) -> field. The
    same eps_hat tensor feeds both terms, so registration gradients
    reach G. When w.lam == 0 the registration branch is skipped.
    """
    m, f = c
    eps_hat = G(c, x_t, t)
    l_diff = diffusion_loss(eps_hat, eps)
    if w.lam == 0.0:
        return l_diff
    field = M(m, eps_hat)
    l_reg = registration_loss(m, f, field, w)
    return l_diff + w.lam * l_reg
