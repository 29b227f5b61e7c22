"""Pure-numpy implementations of the hot kernels.

Same call signatures as ``numba_ops``; selected when DIFFMORPH_BACKEND=numpy
or when numba is unavailable. Convolutions go through im2col views plus a
BLAS tensordot, warps through fancy indexing.
"""

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


def conv_fwd(xp, w, stride, out_h, out_w):
    """Valid cross-correlation over a pre-padded input.

    xp: [B,C,Hp,Wp], w: [O,C,k,k] -> [B,O,out_h,out_w].
    Caller guarantees (out_h-1)*stride + k <= Hp (same for width).
    """
    k = w.shape[2]
    win = sliding_window_view(xp, (k, k), axis=(2, 3))[:, :, ::stride, ::stride]
    win = win[:, :, :out_h, :out_w]
    y = np.tensordot(win, w, axes=([1, 4, 5], [1, 2, 3]))
    return np.ascontiguousarray(y.transpose(0, 3, 1, 2))


def conv_dw(xp, dy, stride, k):
    """Weight gradient of conv_fwd: [O,C,k,k] from padded input and dy."""
    out_h, out_w = dy.shape[2], dy.shape[3]
    win = sliding_window_view(xp, (k, k), axis=(2, 3))[:, :, ::stride, ::stride]
    win = win[:, :, :out_h, :out_w]
    # sum over batch and output positions
    return np.tensordot(dy, win, axes=([0, 2, 3], [0, 2, 3]))


def _sample_coords(field):
    # float64 coordinate arithmetic, matching the numba kernels where
    # int index + f32 displacement promotes to f64; keeps both backends
    # in the same interpolation cell for borderline coordinates
    b, _, h, w2 = field.shape
    ii = np.arange(h, dtype=np.float64).reshape(1, h, 1)
    jj = np.arange(w2, dtype=np.float64).reshape(1, 1, w2)
    ty = ii + field[:, 0]
    tx = jj + field[:, 1]
    yc = np.clip(ty, 0.0, h - 1.0)
    xc = np.clip(tx, 0.0, w2 - 1.0)
    i0 = np.minimum(yc.astype(np.int64), h - 2)
    j0 = np.minimum(xc.astype(np.int64), w2 - 2)
    fy = yc - i0
    fx = xc - j0
    return ty, tx, i0, j0, fy, fx


def warp_bilinear(img, field):
    """Sample img at x + u(x) with border clamping.

    img: [B,C,H,W], field: [B,2,H,W] (channel 0 = displacement along rows).
    """
    b, c, h, w2 = img.shape
    _, _, i0, j0, fy, fx = _sample_coords(field)
    bidx = np.arange(b).reshape(b, 1, 1)
    v00 = img[bidx, :, i0, j0].transpose(0, 3, 1, 2)
    v01 = img[bidx, :, i0, j0 + 1].transpose(0, 3, 1, 2)
    v10 = img[bidx, :, i0 + 1, j0].transpose(0, 3, 1, 2)
    v11 = img[bidx, :, i0 + 1, j0 + 1].transpose(0, 3, 1, 2)
    fy = fy[:, None]
    fx = fx[:, None]
    out = ((1 - fy) * (1 - fx) * v00 + (1 - fy) * fx * v01
           + fy * (1 - fx) * v10 + fy * fx * v11)
    return out.astype(img.dtype, copy=False)


def warp_bilinear_grad(img, field, dy):
    """Gradients of warp_bilinear w.r.t. image and field."""
    b, c, h, w2 = img.shape
    ty, tx, i0, j0, fy, fx = _sample_coords(field)
    bidx = np.arange(b).reshape(b, 1, 1)
    v00 = img[bidx, :, i0, j0].transpose(0, 3, 1, 2)
    v01 = img[bidx, :, i0, j0 + 1].transpose(0, 3, 1, 2)
    v10 = img[bidx, :, i0 + 1, j0].transpose(0, 3, 1, 2)
    v11 = img[bidx, :, i0 + 1, j0 + 1].transpose(0, 3, 1, 2)
    fyb = fy[:, None]
    fxb = fx[:, None]

    # clamp saturates outside the open interval: no coordinate gradient there
    my = ((ty > 0.0) & (ty < h - 1.0)).astype(img.dtype)
    mx = ((tx > 0.0) & (tx < w2 - 1.0)).astype(img.dtype)
    dfy = ((v10 - v00) * (1 - fxb) + (v11 - v01) * fxb) * dy
    dfx = ((v01 - v00) * (1 - fyb) + (v11 - v10) * fyb) * dy
    dfield = np.empty_like(field)
    dfield[:, 0] = dfy.sum(axis=1) * my
    dfield[:, 1] = dfx.sum(axis=1) * mx

    dimg = np.zeros_like(img)
    w00 = ((1 - fyb) * (1 - fxb) * dy)
    w01 = ((1 - fyb) * fxb * dy)
    w10 = (fyb * (1 - fxb) * dy)
    w11 = (fyb * fxb * dy)
    flat = dimg.reshape(b, c, h * w2)
    base = (i0 * w2 + j0)[:, None, :, :].repeat(c, axis=1).reshape(b, c, -1)
    for off, wsrc in ((0, w00), (1, w01), (w2, w10), (w2 + 1, w11)):
        np.add.at(flat, (np.arange(b)[:, None, None],
                         np.arange(c)[None, :, None],
                         base + off), wsrc.reshape(b, c, -1))
    return dimg, dfield


def warp_nearest(img, field):
    """Nearest-neighbour variant (keeps binary masks binary); not differentiable."""
    b, c, h, w2 = img.shape
    ii = np.arange(h).reshape(1, h, 1)
    jj = np.arange(w2).reshape(1, 1, w2)
    yc = np.clip(ii + field[:, 0], 0.0, h - 1.0)
    xc = np.clip(jj + field[:, 1], 0.0, w2 - 1.0)
    i0 = np.floor(yc + 0.5).astype(np.int64)
    j0 = np.floor(xc + 0.5).astype(np.int64)
    np.clip(i0, 0, h - 1, out=i0)
    np.clip(j0, 0, w2 - 1, out=j0)
    bidx = np.arange(b).reshape(b, 1, 1)
    return np.ascontiguousarray(img[bidx, :, i0, j0].transpose(0, 3, 1, 2))
