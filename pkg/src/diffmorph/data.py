"""Synthetic training pairs with known deformations, joint geometric
augmentation, and the DMT / PGM file formats.

A pair is built by rendering soft random blobs, drawing a smooth
fold-free displacement field, and warping the render. The stored
ground-truth field is the approximate inverse of the generating field,
i.e. the field that maps the moving image toward the fixed one, which is
what the model is asked to recover.
"""

import os
import struct
from dataclasses import dataclass
from typing import Optional

import numpy as np

from . import warp as warp_mod
from .tensor import Tensor


@dataclass
class PairSample:
    m: Tensor
    f: Tensor
    gt_field: Optional[Tensor] = None
    mask_m: Optional[Tensor] = None
    mask_f: Optional[Tensor] = None

    def validate(self):
        spatial = tuple(self.m.shape[2:])
        if tuple(self.f.shape[2:]) != spatial:
            raise ValueError("PairSample: m/f spatial shapes differ")
        for t in (self.m, self.f):
            if np.abs(t.data).max() > 1.0 + 1e-6:
                raise ValueError("PairSample: intensities outside [-1,1]")
        if self.gt_field is not None \
                and tuple(self.gt_field.shape[2:]) != spatial:
            raise ValueError("PairSample: field spatial shape differs")
        for mask in (self.mask_m, self.mask_f):
            if mask is None:
                continue
            if tuple(mask.shape[2:]) != spatial:
                raise ValueError("PairSample: mask spatial shape differs")
            vals = np.unique(mask.data)
            if not np.isin(vals, (0.0, 1.0)).all():
                raise ValueError("PairSample: mask is not binary")
        return self


@dataclass(frozen=True)
class AugmentFlags:
    hflip: bool = True
    vflip: bool = True
    rot90: bool = True


def _blur(a, sigma):
    """Separable Gaussian blur with edge padding, float64."""
    out = np.asarray(a, dtype=np.float64)
    if sigma <= 0:
        return out.copy()
    r = max(1, int(np.ceil(3.0 * sigma)))
    x = np.arange(-r, r + 1, dtype=np.float64)
    k = np.exp(-0.5 * (x / sigma) ** 2)
    k /= k.sum()
    for ax in range(out.ndim - 2, out.ndim):
        mv = np.moveaxis(out, ax, -1)
        pad = [(0, 0)] * (mv.ndim - 1) + [(r, r)]
        win = np.lib.stride_tricks.sliding_window_view(
            np.pad(mv, pad, mode="edge"), 2 * r + 1, axis=-1)
        out = np.moveaxis(win @ k, -1, ax)
    return out


def _render_blobs(rng, size):
    """Soft union of 2-4 random ellipses in [0,1]."""
    yy, xx = np.meshgrid(np.arange(size, dtype=np.float64),
                         np.arange(size, dtype=np.float64), indexing="ij")
    field = np.zeros((size, size))
    # compact, spread-out structures: a couple of voxels of motion then
    # visibly changes the overlap, so alignment metrics have headroom
    for _ in range(int(rng.integers(2, 5))):
        cy, cx = rng.uniform(0.22 * size, 0.78 * size, size=2)
        ay, ax = np.maximum(rng.uniform(0.06 * size, 0.15 * size, size=2),
                            2.3)
        th = rng.uniform(0.0, np.pi)
        dy, dx = yy - cy, xx - cx
        u = (dy * np.cos(th) + dx * np.sin(th)) / ay
        v = (-dy * np.sin(th) + dx * np.cos(th)) / ax
        # signed pseudo-distance to the ellipse edge in voxels keeps the
        # rolloff ~1.5px wide whatever the size: sharp enough to register,
        # soft enough for the two-interpolation consistency check
        d = (np.sqrt(u * u + v * v) - 1.0) * min(ay, ax)
        field = np.maximum(field, 1.0 / (1.0 + np.exp(d / 0.7)))
    return field


def _invert_field(g, iters=5):
    """Approximate inverse displacement by fixed-point iteration."""
    inv = np.zeros_like(g)
    with_t = Tensor(g)
    for _ in range(iters):
        sampled = warp_mod.warp(with_t, Tensor(inv)).data
        inv = -sampled
    return inv


def synth_pair(rng, size=32, smoothness=4.0, magnitude=3.0):
    """Render one (moving, fixed) pair with ground truth.

    The displacement is Gaussian-blurred white noise scaled to a peak
    vector magnitude of `magnitude` voxels and redrawn (at most 100
    times) until it is fold-free.
    """
    if size < 16:
        raise ValueError("synth_pair: size must be >= 16, got %d" % size)
    blobs = _render_blobs(rng, size)
    texture = _blur(rng.standard_normal((size, size)), 2.0)
    texture = 0.25 * (texture - texture.min()) / np.ptp(texture)
    base01 = np.clip(0.75 * blobs + texture, 0.0, 1.0)

    if magnitude == 0.0:
        g = np.zeros((1, 2, size, size))
    else:
        # blur a padded noise grid and crop the valid center so the field
        # is stationary: with edge padding the border variance is higher,
        # the peak lands there, and normalizing by it starves the interior
        r = max(1, int(np.ceil(3.0 * smoothness)))
        for attempt in range(100):
            noise = rng.standard_normal((1, 2, size + 2 * r, size + 2 * r))
            g = _blur(noise, smoothness)[:, :, r:r + size, r:r + size]
            peak = np.sqrt((g * g).sum(axis=1)).max()
            g = g * (magnitude / peak)
            if warp_mod.jacobian_fold_fraction(Tensor(g)) == 0.0:
                break
        else:
            raise ValueError(
                "synth_pair: no fold-free field in 100 draws "
                "(magnitude %.3g too large for smoothness %.3g)"
                % (magnitude, smoothness))

    f01 = base01.reshape(1, 1, size, size)
    m01 = warp_mod.warp(Tensor(f01), Tensor(g)).data
    gt = _invert_field(g) if magnitude != 0.0 else g
    mask_f = (blobs > 0.5).astype(np.float64).reshape(1, 1, size, size)
    soft_m = warp_mod.warp(Tensor(blobs.reshape(1, 1, size, size)),
                           Tensor(g)).data
    mask_m = (soft_m > 0.5).astype(np.float64)

    as32 = lambda a: Tensor(np.ascontiguousarray(a, dtype=np.float32))
    return PairSample(
        m=as32(2.0 * m01 - 1.0),
        f=as32(2.0 * f01 - 1.0),
        gt_field=as32(gt),
        mask_m=as32(mask_m),
        mask_f=as32(mask_f),
    ).validate()


# ------------------------------------------------------------ augmentation

def _map_sample(sample, img_fn, field_fn):
    t = lambda x: Tensor(np.ascontiguousarray(img_fn(x.data),
                                              dtype=x.data.dtype))
    field = None
    if sample.gt_field is not None:
        field = Tensor(np.ascontiguousarray(field_fn(sample.gt_field.data),
                                            dtype=sample.gt_field.data.dtype))
    mm = t(sample.mask_m) if sample.mask_m is not None else None
    mf = t(sample.mask_f) if sample.mask_f is not None else None
    return PairSample(m=t(sample.m), f=t(sample.f), gt_field=field,
                      mask_m=mm, mask_f=mf)


def apply_hflip(sample):
    """Mirror columns; the column displacement component flips sign."""
    img = lambda a: a[..., ::-1]

    def fld(u):
        out = u[..., ::-1].copy()
        out[:, 1] = -out[:, 1]
        return out

    return _map_sample(sample, img, fld)


def apply_vflip(sample):
    """Mirror rows; the row displacement component flips sign."""
    img = lambda a: a[..., ::-1, :]

    def fld(u):
        out = u[..., ::-1, :].copy()
        out[:, 0] = -out[:, 0]
        return out

    return _map_sample(sample, img, fld)


def apply_rot90(sample, k=1):
    """Rotate spatial axes by k*90 degrees.

    With out(x) = in(Ax + b), the displacement transforms as
    u'(x) = A^-1 u(Ax + b); for one quarter turn that swaps the
    components and negates the new row component.
    """
    k = k % 4
    if k == 0:
        return sample
    img = lambda a: np.rot90(a, k, axes=(-2, -1))

    def fld(u):
        out = u
        for _ in range(k):
            rot = np.rot90(out, 1, axes=(-2, -1))
            out = np.stack([-rot[:, 1], rot[:, 0]], axis=1)
        return out

    return _map_sample(sample, img, fld)


def augment(sample, rng, flags=AugmentFlags()):
    """Random joint flip/rotation of a pair; geometry-equivariant."""
    if flags.hflip and rng.random() < 0.5:
        sample = apply_hflip(sample)
    if flags.vflip and rng.random() < 0.5:
        sample = apply_vflip(sample)
    if flags.rot90:
        sample = apply_rot90(sample, int(rng.integers(0, 4)))
    return sample


# ------------------------------------------------------------------ DMT io

_DMT_MAGIC = b"DMT1"


def save_tensor(path, arr):
    """Write a float32 little-endian DMT tensor file."""
    data = arr.data if isinstance(arr, Tensor) else np.asarray(arr)
    data = np.ascontiguousarray(data, dtype="<f4")
    with open(path, "wb") as fh:
        fh.write(_DMT_MAGIC)
        fh.write(struct.pack("<I", data.ndim))
        fh.write(struct.pack("<%dI" % data.ndim, *data.shape))
        fh.write(data.tobytes())


def load_tensor(path):
    with open(path, "rb") as fh:
        if fh.read(4) != _DMT_MAGIC:
            raise ValueError("%s: not a DMT file" % path)
        rank_raw = fh.read(4)
        if len(rank_raw) != 4:
            raise ValueError("%s: truncated DMT header" % path)
        rank = struct.unpack("<I", rank_raw)[0]
        ext_raw = fh.read(4 * rank)
        if len(ext_raw) != 4 * rank:
            raise ValueError("%s: truncated DMT header" % path)
        shape = struct.unpack("<%dI" % rank, ext_raw)
        n = int(np.prod(shape, dtype=np.int64)) if rank else 1
        payload = fh.read(4 * n)
        if len(payload) != 4 * n:
            raise ValueError("%s: truncated DMT payload" % path)
        return np.frombuffer(payload, dtype="<f4").reshape(shape).copy()


def save_field(path, field):
    """DMT plus the one-line sidecar describing the convention."""
    save_tensor(path, field)
    with open(path + ".txt", "w") as fh:
        fh.write("displacement, voxel units\n")


# ------------------------------------------------------------------ PGM io

def save_image(path, arr):
    """8-bit P5 PGM preview; input intensities are taken as [-1,1]."""
    data = arr.data if isinstance(arr, Tensor) else np.asarray(arr)
    img = np.asarray(data, dtype=np.float64).squeeze()
    if img.ndim != 2:
        raise ValueError("save_image: expected one 2-D channel, got %s"
                         % (tuple(data.shape),))
    u8 = np.clip(np.rint((img + 1.0) * 0.5 * 255.0), 0, 255).astype(np.uint8)
    with open(path, "wb") as fh:
        fh.write(b"P5\n%d %d\n255\n" % (img.shape[1], img.shape[0]))
        fh.write(u8.tobytes())


def load_image(path):
    """Parse a P5 PGM back to float32 in [-1,1]."""
    with open(path, "rb") as fh:
        raw = fh.read()
    if not raw.startswith(b"P5"):
        raise ValueError("%s: not a P5 PGM" % path)
    fields, pos = [], 2
    while len(fields) < 3:
        while pos < len(raw) and raw[pos:pos + 1].isspace():
            pos += 1
        if raw[pos:pos + 1] == b"#":
            while pos < len(raw) and raw[pos] != 0x0A:
                pos += 1
            continue
        start = pos
        while pos < len(raw) and not raw[pos:pos + 1].isspace():
            pos += 1
        fields.append(raw[start:pos])
    w, h, maxval = (int(v) for v in fields)
    if maxval != 255:
        raise ValueError("%s: expected maxval 255, got %d" % (path, maxval))
    pos += 1
    pixels = np.frombuffer(raw[pos:pos + w * h], dtype=np.uint8)
    if pixels.size != w * h:
        raise ValueError("%s: truncated pixel data" % path)
    return (pixels.reshape(h, w).astype(np.float32) / 255.0) * 2.0 - 1.0


# ----------------------------------------------------------------- dataset

_PARTS = ("m", "f", "field", "maskm", "maskf")


def write_dataset(root, n_pairs, size=32, smoothness=4.0, magnitude=3.0,
                  seed=0):
    """Generate n_pairs samples under root/pairs plus a manifest."""
    pair_dir = os.path.join(root, "pairs")
    os.makedirs(pair_dir, exist_ok=True)
    rng = np.random.default_rng(seed)
    names = []
    for i in range(n_pairs):
        s = synth_pair(rng, size=size, smoothness=smoothness,
                       magnitude=magnitude)
        name = "%04d" % i
        base = os.path.join(pair_dir, name)
        save_tensor(base + ".m.dmt", s.m.data[0, 0])
        save_tensor(base + ".f.dmt", s.f.data[0, 0])
        save_field(base + ".field.dmt", s.gt_field.data[0])
        save_tensor(base + ".maskm.dmt", s.mask_m.data[0, 0])
        save_tensor(base + ".maskf.dmt", s.mask_f.data[0, 0])
        names.append(name)
    with open(os.path.join(root, "manifest.txt"), "w") as fh:
        fh.write("# diffmorph synthetic dataset\n")
        fh.write("# pairs=%d size=%d smoothness=%g magnitude=%g seed=%d\n"
                 % (n_pairs, size, smoothness, magnitude, seed))
        for name in names:
            fh.write(name + "\n")
    return names


def load_dataset(root):
    """Read every pair listed in the manifest into PairSamples."""
    manifest = os.path.join(root, "manifest.txt")
    if not os.path.isfile(manifest):
        raise FileNotFoundError("%s: no manifest.txt" % root)
    samples = []
    with open(manifest) as fh:
        for line in fh:
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            base = os.path.join(root, "pairs", line)
            wrap = lambda a: Tensor(a.reshape((1, 1) + a.shape))
            m = wrap(load_tensor(base + ".m.dmt"))
            f = wrap(load_tensor(base + ".f.dmt"))
            fld = load_tensor(base + ".field.dmt")
            samples.append(PairSample(
                m=m, f=f,
                gt_field=Tensor(fld.reshape((1,) + fld.shape)),
                mask_m=wrap(load_tensor(base + ".maskm.dmt")),
                mask_f=wrap(load_tensor(base + ".maskf.dmt"))))
    return samples
