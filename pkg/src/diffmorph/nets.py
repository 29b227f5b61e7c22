"""The two trainable networks: a conditional score U-Net and a
deformation U-Net, plus the inference-time helpers built on them.

Both are pure functions of (parameters, inputs). Parameters live in an
ordered name -> Tensor dict so checkpoints can serialize them by name;
the constructor arguments live in ``.config`` so a checkpoint header can
rebuild the exact graph.
"""

import numpy as np

from . import tensor as T
from . import warp as warp_mod
from .tensor import Tensor


def _trunc_normal(rng, shape, fan_in, dtype):
    """Fan-in scaled normal draw, redrawn (then clipped) at two sigma."""
    x = rng.standard_normal(shape)
    for _ in range(4):
        bad = np.abs(x) > 2.0
        if not bad.any():
            break
        x[bad] = rng.standard_normal(int(bad.sum()))
    np.clip(x, -2.0, 2.0, out=x)
    return (x / np.sqrt(fan_in)).astype(dtype)


def sinusoidal_embedding(t, dim):
    """Deterministic float64 sin/cos position code for integer steps.

    Scalar t gives a flat (dim,) vector; a length-B sequence gives a
    (B, dim) matrix, one row per step.
    """
    half = dim // 2
    freqs = np.exp(-np.log(10000.0) * np.arange(half) / max(half - 1, 1))
    tv = np.asarray(t, dtype=np.float64)
    ang = tv.reshape(tv.shape + (1,)) * freqs
    return np.concatenate([np.sin(ang), np.cos(ang)], axis=-1)


def _groups(c):
    return 8 if c % 8 == 0 else 1


class _ParamStore:
    """Shared bookkeeping: named parameters plus init helpers."""

    def __init__(self, seed, dtype):
        self.params = {}
        self.dtype = np.dtype(dtype).type
        self._rng = np.random.default_rng(seed)

    def _tensor(self, name, data):
        p = Tensor(data, requires_grad=True)
        self.params[name] = p
        return p

    def _conv(self, name, c_out, c_in, k):
        self._tensor(name + ".w", _trunc_normal(
            self._rng, (c_out, c_in, k, k), c_in * k * k, self.dtype))
        self._tensor(name + ".b", np.zeros(c_out, dtype=self.dtype))

    def _tconv(self, name, c_in, c_out, k):
        self._tensor(name + ".w", _trunc_normal(
            self._rng, (c_in, c_out, k, k), c_in * k * k, self.dtype))
        self._tensor(name + ".b", np.zeros(c_out, dtype=self.dtype))

    def _linear(self, name, d_in, d_out):
        self._tensor(name + ".w", _trunc_normal(
            self._rng, (d_in, d_out), d_in, self.dtype))
        self._tensor(name + ".b", np.zeros(d_out, dtype=self.dtype))

    def _norm(self, name, c):
        self._tensor(name + ".g", np.ones(c, dtype=self.dtype))
        self._tensor(name + ".b", np.zeros(c, dtype=self.dtype))

    def p(self, name):
        return self.params[name]

    def conv(self, name, x, stride=1, pad=1):
        return T.conv2d(x, self.p(name + ".w"), self.p(name + ".b"),
                        stride=stride, pad=pad)

    def tconv(self, name, x):
        return T.transposed_conv2d(x, self.p(name + ".w"),
                                   self.p(name + ".b"), stride=2)

    def linear(self, name, x):
        return T.matmul(x, self.p(name + ".w")) + self.p(name + ".b")

    def norm(self, name, x):
        c = x.shape[1]
        return T.group_norm(x, _groups(c), self.p(name + ".g"),
                            self.p(name + ".b"))

    def cast(self, dtype):
        """Fresh copy of this net with every parameter cast to dtype."""
        other = object.__new__(type(self))
        other.__dict__.update(self.__dict__)
        other.dtype = np.dtype(dtype).type
        other.params = {k: Tensor(v.data.astype(dtype), requires_grad=True)
                        for k, v in self.params.items()}
        return other

    def zero_grad(self):
        for p in self.params.values():
            p.grad = None


class ScoreNet(_ParamStore):
    """Conditional noise predictor eps_hat = G((m, f), x_t, t).

    Four-level U-Net: stride-2 conv downsampling, nearest x2 + conv
    upsampling, skip connections at every level, residual blocks with
    groupnorm/swish and additive time conditioning, single-head
    self-attention at the bottleneck.

    The head predicts a correction that is added to x_t and is
    zero-initialized, so an untrained net returns x_t unchanged. That
    matters for the joint objective: at t=0 the latent then starts out
    as the fixed image itself, giving the deformation net a readable
    conditioning signal from the first step instead of waiting for the
    two networks to negotiate one through the noise-prediction loss.
    """

    def __init__(self, in_ch=3, out_ch=1, ladder=(16, 32, 64, 128),
                 emb_dim=64, seed=0, dtype=np.float32):
        super().__init__(seed, dtype)
        self.config = {"kind": "score", "in_ch": in_ch, "out_ch": out_ch,
                       "ladder": list(ladder), "emb_dim": emb_dim}
        self.in_ch = in_ch
        self.ladder = tuple(ladder)
        self.emb_dim = emb_dim
        l0, l1, l2, l3 = self.ladder

        self._linear("temb.fc1", emb_dim, emb_dim)
        self._linear("temb.fc2", emb_dim, emb_dim)
        self._conv("stem", l0, in_ch, 3)
        self._res("enc0", l0, l0)
        self._conv("down0", l1, l0, 3)
        self._res("enc1", l1, l1)
        self._conv("down1", l2, l1, 3)
        self._res("enc2", l2, l2)
        self._conv("down2", l3, l2, 3)
        self._res("mid0", l3, l3)
        self._attn("attn", l3)
        self._res("mid1", l3, l3)
        self._conv("up2", l2, l3, 3)
        self._res("dec2", 2 * l2, l2)
        self._conv("up1", l1, l2, 3)
        self._res("dec1", 2 * l1, l1)
        self._conv("up0", l0, l1, 3)
        self._res("dec0", 2 * l0, l0)
        self._norm("head.gn", l0)
        self._tensor("head.w", np.zeros((out_ch, l0, 3, 3), dtype=self.dtype))
        self._tensor("head.b", np.zeros(out_ch, dtype=self.dtype))

    def _res(self, name, c_in, c_out):
        self._norm(name + ".gn1", c_in)
        self._conv(name + ".conv1", c_out, c_in, 3)
        self._linear(name + ".emb", self.emb_dim, c_out)
        self._norm(name + ".gn2", c_out)
        self._conv(name + ".conv2", c_out, c_out, 3)
        if c_in != c_out:
            self._conv(name + ".skip", c_out, c_in, 1)

    def _attn(self, name, c):
        self._norm(name + ".gn", c)
        for part in ("q", "k", "v", "o"):
            self._conv(name + "." + part, c, c, 1)

    def _res_fwd(self, name, x, emb):
        c_out = self.p(name + ".conv1.w").shape[0]
        h = self.conv(name + ".conv1", T.swish(self.norm(name + ".gn1", x)))
        e = self.linear(name + ".emb", emb)
        h = h + e.reshape(e.shape[0], c_out, 1, 1)
        h = self.conv(name + ".conv2", T.swish(self.norm(name + ".gn2", h)))
        if x.shape[1] != c_out:
            x = self.conv(name + ".skip", x, pad=0)
        return h + x

    def _attn_fwd(self, name, x):
        b, c, h, w = x.shape
        n = h * w
        xn = self.norm(name + ".gn", x)
        q = self.conv(name + ".q", xn, pad=0).reshape(b, c, n)
        k = self.conv(name + ".k", xn, pad=0).reshape(b, c, n)
        v = self.conv(name + ".v", xn, pad=0).reshape(b, c, n)
        scores = T.matmul(q.transpose(0, 2, 1), k) * float(1.0 / np.sqrt(c))
        att = T.softmax(scores, axis=-1)
        out = T.matmul(v, att.transpose(0, 2, 1)).reshape(b, c, h, w)
        return x + self.conv(name + ".o", out, pad=0)

    def _time_embedding(self, t):
        e = sinusoidal_embedding(t, self.emb_dim).astype(self.dtype)
        e = Tensor(e.reshape(-1, self.emb_dim))
        return self.linear("temb.fc2", T.swish(self.linear("temb.fc1", e)))

    def __call__(self, c, x_t, t):
        """t is a single step shared by the batch or one step per sample."""
        m, f = c
        if m.shape != f.shape or m.shape != x_t.shape:
            raise ValueError("score net: m/f/x_t shapes differ: %s %s %s"
                             % (tuple(m.shape), tuple(f.shape),
                                tuple(x_t.shape)))
        tv = np.asarray(t)
        if tv.ndim > 1 or (tv.ndim == 1 and tv.shape[0] != x_t.shape[0]):
            raise ValueError("score net: t must be scalar or one per "
                             "sample, got shape %s for batch %d"
                             % (tv.shape, x_t.shape[0]))
        if (tv < 0).any():
            raise ValueError("score net: t must be >= 0, got %r" % (t,))
        x = T.concat([m, f, x_t], axis=1)
        if x.shape[1] != self.in_ch:
            raise ValueError("score net: expected %d input channels, got %d"
                             % (self.in_ch, x.shape[1]))
        emb = self._time_embedding(t)
        h0 = self._res_fwd("enc0", self.conv("stem", x), emb)
        h1 = self._res_fwd("enc1", self.conv("down0", h0, stride=2), emb)
        h2 = self._res_fwd("enc2", self.conv("down1", h1, stride=2), emb)
        hb = self.conv("down2", h2, stride=2)
        hb = self._res_fwd("mid0", hb, emb)
        hb = self._attn_fwd("attn", hb)
        hb = self._res_fwd("mid1", hb, emb)
        u2 = self.conv("up2", T.nearest_upsample2(hb))
        u2 = self._res_fwd("dec2", T.concat([u2, h2], axis=1), emb)
        u1 = self.conv("up1", T.nearest_upsample2(u2))
        u1 = self._res_fwd("dec1", T.concat([u1, h1], axis=1), emb)
        u0 = self.conv("up0", T.nearest_upsample2(u1))
        u0 = self._res_fwd("dec0", T.concat([u0, h0], axis=1), emb)
        return self.conv("head", T.swish(self.norm("head.gn", u0))) + x_t


class DeformNet(_ParamStore):
    """Deformation predictor phi = M(m, eps_hat).

    Plain conv + leaky-ReLU U-Net; stride-2 convolutions down, stride-2
    transposed convolutions (k=4) up, skip connections at every level.
    The final convolution is zero-initialized so an untrained net emits
    the identity (zero) field. Its output is scaled by a fixed gain:
    Adam moves each weight by at most the learning rate per step, and
    voxel-scale displacements must stay reachable within a short
    training budget without inflating the head weights themselves.
    """

    out_gain = 8.0

    def __init__(self, in_ch=2, ladder=(16, 32, 32, 32), seed=0,
                 dtype=np.float32):
        super().__init__(seed, dtype)
        self.config = {"kind": "deform", "in_ch": in_ch,
                       "ladder": list(ladder)}
        self.in_ch = in_ch
        self.ladder = tuple(ladder)
        l0, l1, l2, l3 = self.ladder

        self._conv("enc0", l0, in_ch, 3)
        self._conv("down0", l1, l0, 3)
        self._conv("down1", l2, l1, 3)
        self._conv("down2", l3, l2, 3)
        self._tconv("up2", l3, l2, 4)
        self._conv("dec2", l2, 2 * l2, 3)
        self._tconv("up1", l2, l1, 4)
        self._conv("dec1", l1, 2 * l1, 3)
        self._tconv("up0", l1, l0, 4)
        self._conv("dec0", l0, 2 * l0, 3)
        self._tensor("out.w", np.zeros((2, l0, 3, 3), dtype=self.dtype))
        self._tensor("out.b", np.zeros(2, dtype=self.dtype))

    def __call__(self, m, eps_hat):
        if m.shape != eps_hat.shape:
            raise ValueError("deform net: m/eps_hat shapes differ: %s %s"
                             % (tuple(m.shape), tuple(eps_hat.shape)))
        x = T.concat([m, eps_hat], axis=1)
        if x.shape[1] != self.in_ch:
            raise ValueError("deform net: expected %d input channels, got %d"
                             % (self.in_ch, x.shape[1]))
        a = T.leaky_relu
        e0 = a(self.conv("enc0", x))
        e1 = a(self.conv("down0", e0, stride=2))
        e2 = a(self.conv("down1", e1, stride=2))
        e3 = a(self.conv("down2", e2, stride=2))
        u2 = a(self.conv("dec2", T.concat([a(self.tconv("up2", e3)), e2],
                                          axis=1)))
        u1 = a(self.conv("dec1", T.concat([a(self.tconv("up1", u2)), e1],
                                          axis=1)))
        u0 = a(self.conv("dec0", T.concat([a(self.tconv("up0", u1)), e0],
                                          axis=1)))
        return self.conv("out", u0) * self.out_gain


def score_forward(G, c, x_t, t):
    return G(c, x_t, t)


def deform_forward(M, m, eps_hat):
    return M(m, eps_hat)


def latent_at_eta(G, c, eta):
    """Scaled registration latent: eta * G(c, f, 0), eta in [0, 1]."""
    if not 0.0 <= eta <= 1.0:
        raise ValueError("latent_at_eta: eta must be in [0, 1], got %r"
                         % (eta,))
    m, f = c
    return G(c, f, 0) * float(eta)


def register(G, M, m, f):
    """One-shot registration: field from the t=0 latent, then warp.

    Deterministic single forward pass; no gradients are recorded.
    """
    with T.no_grad():
        eps0 = G((m, f), f, 0)
        field = M(m, eps0)
        warped = warp_mod.warp(m, field)
    return field, warped
