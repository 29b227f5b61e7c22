"""Spatial transformation layer and deformation-field diagnostics.

Fields are displacements in voxel units: the deformation maps voxel x to
x + u(x), so the zero field is the identity warp. Channel 0 displaces
along axis 0 (rows), channel 1 along axis 1, and so on. Out-of-bounds
sample coordinates clamp to the border.

2D warps run on the dispatched kernels (numba or numpy); the 3D
trilinear path is numpy only.
"""

import numpy as np

from . import kernels
from .tensor import Tensor, make_node


def _check_pair(image, field, name):
    if not isinstance(image, Tensor) or not isinstance(field, Tensor):
        raise TypeError("%s: expected Tensors" % name)
    d = image.ndim - 2
    if d not in (2, 3):
        raise ValueError("%s: expected [B,C,spatial...] with 2 or 3 spatial "
                         "dims, got rank %d" % (name, image.ndim))
    if field.ndim != image.ndim or field.shape[1] != d:
        raise ValueError(
            "%s: field rank mismatch, image %s needs a [B,%d,...] field, got %s"
            % (name, tuple(image.shape), d, tuple(field.shape)))
    if field.shape[0] != image.shape[0] or field.shape[2:] != image.shape[2:]:
        raise ValueError("%s: image %s and field %s disagree"
                         % (name, tuple(image.shape), tuple(field.shape)))
    # the field invariant: non-finite displacements would turn into
    # arbitrary sample indices inside the kernels
    if not np.isfinite(field.data).all():
        raise ValueError("%s: field contains non-finite values" % name)


def _nd_coords(field):
    """Clamped sample coordinates, base corner indices and fractions."""
    d = field.shape[1]
    spatial = field.shape[2:]
    ts, i0s, fs, masks = [], [], [], []
    for a in range(d):
        shape = [1] * (field.ndim - 1)
        shape[1 + a] = spatial[a]
        grid = np.arange(spatial[a], dtype=field.dtype).reshape(shape)
        t = grid + field[:, a]
        hi = spatial[a] - 1.0
        masks.append((t > 0.0) & (t < hi))
        tc = np.clip(t, 0.0, hi)
        i0 = np.minimum(tc.astype(np.int64), spatial[a] - 2)
        ts.append(tc)
        i0s.append(i0)
        fs.append(tc - i0)
    return i0s, fs, masks


def _corner_weights(fs, corner):
    w = 1.0
    for f, c in zip(fs, corner):
        w = w * (f if c else (1.0 - f))
    return w


def _warp3d_fwd(img, field):
    b, c = img.shape[0], img.shape[1]
    i0s, fs, _ = _nd_coords(field)
    bidx = np.arange(b).reshape((b,) + (1,) * 3)
    out = np.zeros_like(img)
    for corner in np.ndindex(2, 2, 2):
        idx = tuple(i0 + ci for i0, ci in zip(i0s, corner))
        w = _corner_weights(fs, corner)
        v = img[bidx, :, idx[0], idx[1], idx[2]]     # [B,D1,D2,D3,C]
        out += np.moveaxis(v, -1, 1) * w[:, None]
    return out.astype(img.dtype, copy=False)


def _warp3d_bwd(img, field, dy):
    b, c = img.shape[0], img.shape[1]
    i0s, fs, masks = _nd_coords(field)
    bidx = np.arange(b).reshape((b,) + (1,) * 3)
    dimg = np.zeros_like(img)
    dfield = np.zeros_like(field)
    flat = dimg.reshape(b, c, -1)
    strides = (img.shape[3] * img.shape[4], img.shape[4], 1)
    for corner in np.ndindex(2, 2, 2):
        idx = tuple(i0 + ci for i0, ci in zip(i0s, corner))
        w = _corner_weights(fs, corner)
        v = np.moveaxis(img[bidx, :, idx[0], idx[1], idx[2]], -1, 1)
        # field gradient: d w / d f_a times corner value
        for a in range(3):
            other = 1.0
            for bx in range(3):
                if bx != a:
                    other = other * (fs[bx] if corner[bx] else (1.0 - fs[bx]))
            sign = 1.0 if corner[a] else -1.0
            dfield[:, a] += sign * (dy * v).sum(axis=1) * other
        lin = sum(ix * s for ix, s in zip(idx, strides))
        lin = np.broadcast_to(lin[:, None], (b, c) + lin.shape[1:]).reshape(b, c, -1)
        np.add.at(flat, (np.arange(b)[:, None, None],
                         np.arange(c)[None, :, None], lin),
                  (dy * w[:, None]).reshape(b, c, -1))
    for a in range(3):
        dfield[:, a] *= masks[a]
    return dimg, dfield


def _warp3d_nearest(img, field):
    b = img.shape[0]
    spatial = field.shape[2:]
    idx = []
    for a in range(3):
        shape = [1] * 4
        shape[1 + a] = spatial[a]
        grid = np.arange(spatial[a], dtype=field.dtype).reshape(shape)
        t = np.clip(grid + field[:, a], 0.0, spatial[a] - 1.0)
        idx.append(np.clip(np.floor(t + 0.5).astype(np.int64), 0, spatial[a] - 1))
    bidx = np.arange(b).reshape((b,) + (1,) * 3)
    return np.ascontiguousarray(
        np.moveaxis(img[bidx, :, idx[0], idx[1], idx[2]], -1, 1))


def warp(image, field):
    """Differentiable bi/tri-linear warp of image [B,C,spatial...] by a
    displacement field [B,D,spatial...]."""
    _check_pair(image, field, "warp")
    if image.ndim == 4:
        data = kernels.warp_bilinear(image.data, field.data)

        def backward(g):
            di, df = kernels.warp_bilinear_grad(image.data, field.data,
                                                np.ascontiguousarray(g))
            return (di if image.requires_grad else None,
                    df if field.requires_grad else None)
    else:
        data = _warp3d_fwd(image.data, field.data)

        def backward(g):
            di, df = _warp3d_bwd(image.data, field.data, g)
            return (di if image.requires_grad else None,
                    df if field.requires_grad else None)

    return make_node(data, (image, field), backward)


def warp_nearest(image, field):
    """Nearest-neighbour warp; keeps label masks binary. Not differentiable."""
    _check_pair(image, field, "warp_nearest")
    if image.ndim == 4:
        return Tensor(kernels.warp_nearest(image.data, field.data))
    return Tensor(_warp3d_nearest(image.data, field.data))


def _field_array(field, name):
    a = field.data if isinstance(field, Tensor) else np.asarray(field)
    if a.ndim >= 3 and a.shape[0] == 1 and a.shape[1] == a.ndim - 2:
        a = a[0]
    d = a.shape[0]
    if a.ndim - 1 != d or d not in (2, 3):
        raise ValueError("%s: expected a [D, spatial...] displacement field "
                         "with D in (2,3), got %s" % (name, a.shape))
    return a


def jacobian_fold_fraction(field):
    """Fraction of interior voxels where det(I + grad u) <= 0.

    Central differences, boundary voxels excluded. Input is a single
    field [D, spatial...] (a leading batch axis of 1 is squeezed).
    """
    u = _field_array(field, "jacobian_fold_fraction").astype(np.float64)
    d = u.shape[0]
    spatial = u.shape[1:]
    if min(spatial) < 3:
        raise ValueError("jacobian_fold_fraction: spatial extents must be >= 3, "
                         "got %s" % (spatial,))
    interior = tuple(slice(1, n - 1) for n in spatial)
    n_int = int(np.prod([n - 2 for n in spatial]))
    jac = np.empty((n_int, d, d))
    for a in range(d):
        for bx in range(d):
            plus = tuple(slice(2, spatial[i]) if i == bx else interior[i]
                         for i in range(d))
            minus = tuple(slice(0, spatial[i] - 2) if i == bx else interior[i]
                          for i in range(d))
            du = 0.5 * (u[a][plus] - u[a][minus])
            jac[:, a, bx] = du.reshape(-1) + (1.0 if a == bx else 0.0)
    det = np.linalg.det(jac)
    return float(np.count_nonzero(det <= 0.0) / n_int)


def field_gradient_energy(field):
    """Smoothness penalty: sum over channels and axes of the mean squared
    forward difference of the displacement. Differentiable.

    Accepts [B,D,spatial...]; a bare [D,spatial...] field is also
    accepted where the shape is unambiguous (batched wins otherwise).
    """
    f = field
    if f.ndim in (4, 5) and f.shape[1] == f.ndim - 2:
        pass
    elif f.ndim in (3, 4) and f.shape[0] == f.ndim - 1:
        f = f.reshape((1,) + tuple(f.shape))
    else:
        raise ValueError("field_gradient_energy: unrecognized field shape %s"
                         % (tuple(f.shape),))
    d = f.shape[1]
    total = None
    for a in range(d):
        hi = [slice(None)] * f.ndim
        lo = [slice(None)] * f.ndim
        hi[2 + a] = slice(1, None)
        lo[2 + a] = slice(0, -1)
        diff = f[tuple(hi)] - f[tuple(lo)]
        sq = diff * diff
        axes = tuple(i for i in range(f.ndim) if i != 1)
        term = sq.mean(axis=axes).sum()
        total = term if total is None else total + term
    return total
