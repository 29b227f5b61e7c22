"""Numba implementations of the hot kernels.

Serial @njit(cache=True) functions; compiled lazily per dtype the first
time each signature is called. The convolution inner loops run over the
output column index with unit stride on the input row so LLVM can
vectorize them.
"""

import numpy as np
from numba import njit


@njit(cache=True)
def _phase_split(xc, stride, ph):
    # ph[s, r, t] = xc[r, s + t*stride]: strided reads become unit-stride
    hp, wp = xc.shape
    for r in range(hp):
        row = xc[r]
        for s in range(stride):
            dst = ph[s, r]
            n = (wp - s + stride - 1) // stride
            for t in range(n):
                dst[t] = row[s + t * stride]


@njit(cache=True)
def conv_fwd(xp, w, stride, out_h, out_w):
    bsz, cin, hp, wp = xp.shape
    cout = w.shape[0]
    k = w.shape[2]
    y = np.zeros((bsz, cout, out_h, out_w), dtype=xp.dtype)
    if stride == 1:
        for b in range(bsz):
            for o in range(cout):
                yo = y[b, o]
                for c in range(cin):
                    xc = xp[b, c]
                    wo = w[o, c]
                    for p in range(k):
                        for q in range(k):
                            wv = wo[p, q]
                            for i in range(out_h):
                                row = xc[i + p]
                                yr = yo[i]
                                for j in range(out_w):
                                    yr[j] += wv * row[q + j]
        return y
    pw = (wp + stride - 1) // stride
    ph = np.empty((stride, hp, pw), dtype=xp.dtype)
    for b in range(bsz):
        for c in range(cin):
            _phase_split(xp[b, c], stride, ph)
            for o in range(cout):
                yo = y[b, o]
                wo = w[o, c]
                for p in range(k):
                    for q in range(k):
                        wv = wo[p, q]
                        src = ph[q % stride]
                        base = q // stride
                        for i in range(out_h):
                            prow = src[i * stride + p]
                            yr = yo[i]
                            for j in range(out_w):
                                yr[j] += wv * prow[base + j]
    return y


@njit(cache=True, fastmath=True)
def conv_dw(xp, dy, stride, k):
    bsz, cin, hp, wp = xp.shape
    cout, out_h, out_w = dy.shape[1], dy.shape[2], dy.shape[3]
    dw = np.zeros((cout, cin, k, k), dtype=xp.dtype)
    if stride == 1:
        for b in range(bsz):
            for o in range(cout):
                for c in range(cin):
                    xc = xp[b, c]
                    for i in range(out_h):
                        gr = dy[b, o, i]
                        for p in range(k):
                            row = xc[i + p]
                            for q in range(k):
                                acc = 0.0
                                for j in range(out_w):
                                    acc += gr[j] * row[q + j]
                                dw[o, c, p, q] += acc
        return dw
    pw = (wp + stride - 1) // stride
    ph = np.empty((stride, hp, pw), dtype=xp.dtype)
    for b in range(bsz):
        for c in range(cin):
            _phase_split(xp[b, c], stride, ph)
            for o in range(cout):
                for i in range(out_h):
                    gr = dy[b, o, i]
                    for p in range(k):
                        for q in range(k):
                            src = ph[q % stride]
                            base = q // stride
                            prow = src[i * stride + p]
                            acc = 0.0
                            for j in range(out_w):
                                acc += gr[j] * prow[base + j]
                            dw[o, c, p, q] += acc
    return dw


@njit(cache=True)
def warp_bilinear(img, field):
    bsz, cch, h, w = img.shape
    out = np.empty_like(img)
    for b in range(bsz):
        for i in range(h):
            for j in range(w):
                ty = i + field[b, 0, i, j]
                tx = j + field[b, 1, i, j]
                if ty < 0.0:
                    ty = 0.0
                if ty > h - 1.0:
                    ty = h - 1.0
                if tx < 0.0:
                    tx = 0.0
                if tx > w - 1.0:
                    tx = w - 1.0
                i0 = int(ty)
                if i0 > h - 2:
                    i0 = h - 2
                j0 = int(tx)
                if j0 > w - 2:
                    j0 = w - 2
                fy = ty - i0
                fx = tx - j0
                w00 = (1.0 - fy) * (1.0 - fx)
                w01 = (1.0 - fy) * fx
                w10 = fy * (1.0 - fx)
                w11 = fy * fx
                for c in range(cch):
                    g = img[b, c]
                    out[b, c, i, j] = (w00 * g[i0, j0] + w01 * g[i0, j0 + 1]
                                       + w10 * g[i0 + 1, j0] + w11 * g[i0 + 1, j0 + 1])
    return out


@njit(cache=True)
def warp_bilinear_grad(img, field, dy):
    bsz, cch, h, w = img.shape
    dimg = np.zeros_like(img)
    dfield = np.zeros_like(field)
    for b in range(bsz):
        for i in range(h):
            for j in range(w):
                ty = i + field[b, 0, i, j]
                tx = j + field[b, 1, i, j]
                my = 1.0 if (ty > 0.0 and ty < h - 1.0) else 0.0
                mx = 1.0 if (tx > 0.0 and tx < w - 1.0) else 0.0
                if ty < 0.0:
                    ty = 0.0
                if ty > h - 1.0:
                    ty = h - 1.0
                if tx < 0.0:
                    tx = 0.0
                if tx > w - 1.0:
                    tx = w - 1.0
                i0 = int(ty)
                if i0 > h - 2:
                    i0 = h - 2
                j0 = int(tx)
                if j0 > w - 2:
                    j0 = w - 2
                fy = ty - i0
                fx = tx - j0
                w00 = (1.0 - fy) * (1.0 - fx)
                w01 = (1.0 - fy) * fx
                w10 = fy * (1.0 - fx)
                w11 = fy * fx
                gy = 0.0
                gx = 0.0
                for c in range(cch):
                    g = img[b, c]
                    go = dy[b, c, i, j]
                    v00 = g[i0, j0]
                    v01 = g[i0, j0 + 1]
                    v10 = g[i0 + 1, j0]
                    v11 = g[i0 + 1, j0 + 1]
                    gy += go * ((v10 - v00) * (1.0 - fx) + (v11 - v01) * fx)
                    gx += go * ((v01 - v00) * (1.0 - fy) + (v11 - v10) * fy)
                    dg = dimg[b, c]
                    dg[i0, j0] += go * w00
                    dg[i0, j0 + 1] += go * w01
                    dg[i0 + 1, j0] += go * w10
                    dg[i0 + 1, j0 + 1] += go * w11
                dfield[b, 0, i, j] = gy * my
                dfield[b, 1, i, j] = gx * mx
    return dimg, dfield


@njit(cache=True)
def warp_nearest(img, field):
    bsz, cch, h, w = img.shape
    out = np.empty_like(img)
    for b in range(bsz):
        for i in range(h):
            for j in range(w):
                ty = i + field[b, 0, i, j]
                tx = j + field[b, 1, i, j]
                if ty < 0.0:
                    ty = 0.0
                if ty > h - 1.0:
                    ty = h - 1.0
                if tx < 0.0:
                    tx = 0.0
                if tx > w - 1.0:
                    tx = w - 1.0
                i0 = int(ty + 0.5)
                j0 = int(tx + 0.5)
                if i0 > h - 1:
                    i0 = h - 1
                if j0 > w - 1:
                    j0 = w - 1
                for c in range(cch):
                    out[b, c, i, j] = img[b, c, i0, j0]
    return out
