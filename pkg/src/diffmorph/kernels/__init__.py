"""Backend dispatch and derived convolution operations.

The package carries two interchangeable kernel implementations:

* ``numba_ops``: serial ``@njit(cache=True)`` loops, the default.
* ``numpy_ops``: vectorized numpy, used as fallback or when requested.

Selection happens once at import time through ``DIFFMORPH_BACKEND``
(``numba`` or ``numpy``). ``DIFFMORPH_THREADS`` caps the numba thread
pool; the shipped kernels are serial so it only matters for forks that
add parallel regions.

Only four primitive kernels exist per backend: strided valid
cross-correlation, its weight gradient, and the bilinear/nearest warps.
Everything else here is algebra on top of them:

* transposed convolution = zero-dilate (+ adjust padding) then stride-1
  convolution with the spatially flipped, channel-transposed weight,
* conv input gradient = transposed convolution with the same weight,
* transposed-conv gradients reuse the convolution kernels with the
  argument roles swapped.
"""

import os
import warnings

import numpy as np

_req = os.environ.get("DIFFMORPH_BACKEND", "").strip().lower()
if _req not in ("", "numba", "numpy"):
    raise ValueError(
        "DIFFMORPH_BACKEND must be 'numba' or 'numpy', got %r" % _req)

if _req == "numpy":
    from . import numpy_ops as _ops
    BACKEND = "numpy"
else:
    try:
        from . import numba_ops as _ops
        BACKEND = "numba"
    except ImportError:
        if _req == "numba":
            raise
        warnings.warn("numba unavailable, falling back to the numpy backend")
        from . import numpy_ops as _ops
        BACKEND = "numpy"

if BACKEND == "numba":
    _threads = os.environ.get("DIFFMORPH_THREADS", "").strip()
    if _threads:
        import numba
        try:
            _n = int(_threads)
        except ValueError:
            raise ValueError(
                "DIFFMORPH_THREADS must be an integer, got %r" % _threads)
        numba.set_num_threads(max(1, min(_n, numba.config.NUMBA_NUM_THREADS)))


def _check_pair(a, b, name):
    if a.dtype != b.dtype:
        raise TypeError("%s: dtype mismatch %s vs %s" % (name, a.dtype, b.dtype))


def _pad2d(x, pad):
    if pad == 0:
        return np.ascontiguousarray(x)
    return np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))


def conv2d_forward(x, w, stride=1, pad=0):
    """Cross-correlate x [B,C,H,W] with w [O,C,k,k].

    Output spatial size floor((H + 2*pad - k) / stride) + 1; windows that
    would run past the padded input are dropped.
    """
    _check_pair(x, w, "conv2d_forward")
    k = w.shape[2]
    h, wd = x.shape[2], x.shape[3]
    out_h = (h + 2 * pad - k) // stride + 1
    out_w = (wd + 2 * pad - k) // stride + 1
    if out_h <= 0 or out_w <= 0:
        raise ValueError(
            "conv2d_forward: empty output for size %dx%d with k=%d pad=%d stride=%d"
            % (h, wd, k, pad, stride))
    xp = _pad2d(x, pad)
    return _ops.conv_fwd(xp, np.ascontiguousarray(w), stride, out_h, out_w)


def conv2d_grad_weight(x, dy, stride=1, pad=0, k=None):
    """Gradient of conv2d_forward w.r.t. w: [O,C,k,k]."""
    _check_pair(x, dy, "conv2d_grad_weight")
    if k is None:
        k = x.shape[2] + 2 * pad - (dy.shape[2] - 1) * stride
    xp = _pad2d(x, pad)
    return _ops.conv_dw(xp, np.ascontiguousarray(dy), stride, k)


def _tconv_core(x, wt, stride, pad, out_h, out_w):
    """Scatter-style (transposed) convolution via zero dilation.

    Dilate x by the stride, frame it with k-1-pad leading zeros and
    however many trailing zeros the requested output size needs (the
    forward floor may drop a remainder), then run a stride-1 convolution
    with the spatially flipped, channel-transposed weight.
    """
    k = wt.shape[2]
    b, c, h, wd = x.shape
    hd = (h - 1) * stride + 1
    wdd = (wd - 1) * stride + 1
    top = k - 1 - pad
    bot_h = out_h + k - 1 - (hd + top)
    bot_w = out_w + k - 1 - (wdd + top)
    if top < 0 or bot_h < 0 or bot_w < 0:
        raise ValueError("transposed conv: pad must not exceed kernel-1")
    buf = np.zeros((b, c, hd + top + bot_h, wdd + top + bot_w), dtype=x.dtype)
    buf[:, :, top:top + hd:stride, top:top + wdd:stride] = x
    wr = np.ascontiguousarray(wt[:, :, ::-1, ::-1].transpose(1, 0, 2, 3))
    return _ops.conv_fwd(buf, wr, 1, out_h, out_w)


def tconv2d_forward(x, w, stride=2, pad=1):
    """Transposed convolution of x [B,Ci,H,W] with w [Ci,Co,k,k].

    Output spatial size (H-1)*stride - 2*pad + k (the shape conv2d_forward
    maps back to the input size with the same stride/pad).
    """
    _check_pair(x, w, "tconv2d_forward")
    k = w.shape[2]
    out_h = (x.shape[2] - 1) * stride - 2 * pad + k
    out_w = (x.shape[3] - 1) * stride - 2 * pad + k
    if out_h <= 0 or out_w <= 0:
        raise ValueError("tconv2d_forward: empty output")
    return _tconv_core(x, w, stride, pad, out_h, out_w)


def conv2d_grad_input(dy, w, stride, pad, in_h, in_w):
    """Gradient of conv2d_forward w.r.t. x, given the input spatial size."""
    _check_pair(dy, w, "conv2d_grad_input")
    k = w.shape[2]
    core_h = (dy.shape[2] - 1) * stride - 2 * pad + k
    core_w = (dy.shape[3] - 1) * stride - 2 * pad + k
    if not (in_h - stride < core_h <= in_h and in_w - stride < core_w <= in_w):
        raise ValueError("conv2d_grad_input: dy shape inconsistent with input size")
    return _tconv_core(dy, w, stride, pad, in_h, in_w)


def tconv2d_grad_input(dy, w, stride=2, pad=1):
    """Gradient of tconv2d_forward w.r.t. x.

    The adjoint of a transposed convolution is the plain convolution with
    the same weight read as [O=Ci, C=Co, k, k].
    """
    return conv2d_forward(dy, w, stride=stride, pad=pad)


def tconv2d_grad_weight(x, dy, stride=2, pad=1):
    """Gradient of tconv2d_forward w.r.t. w: [Ci,Co,k,k].

    Same contraction as conv2d_grad_weight with x acting as the output
    gradient and dy as the (padded) input.
    """
    _check_pair(x, dy, "tconv2d_grad_weight")
    k = dy.shape[2] + 2 * pad - (x.shape[2] - 1) * stride
    dyp = _pad2d(dy, pad)
    return _ops.conv_dw(dyp, np.ascontiguousarray(x), stride, k)


def _check_warp(img, field):
    _check_pair(img, field, "warp")
    if img.ndim != 4 or field.ndim != 4 or field.shape[1] != 2:
        raise ValueError("warp: expected img [B,C,H,W] and field [B,2,H,W]")
    if img.shape[0] != field.shape[0] or img.shape[2:] != field.shape[2:]:
        raise ValueError("warp: shape mismatch %s vs %s"
                         % (img.shape, field.shape))
    if img.shape[2] < 2 or img.shape[3] < 2:
        raise ValueError("warp: spatial size must be at least 2x2")


def warp_bilinear(img, field):
    _check_warp(img, field)
    return _ops.warp_bilinear(np.ascontiguousarray(img),
                              np.ascontiguousarray(field))


def warp_bilinear_grad(img, field, dy):
    _check_warp(img, field)
    return _ops.warp_bilinear_grad(np.ascontiguousarray(img),
                                   np.ascontiguousarray(field),
                                   np.ascontiguousarray(dy))


def warp_nearest(img, field):
    _check_warp(img, field)
    return _ops.warp_nearest(np.ascontiguousarray(img),
                             np.ascontiguousarray(field))
