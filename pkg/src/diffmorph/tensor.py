"""Minimal N-dimensional array with reverse-mode automatic differentiation.

Dynamic tape: every operation that touches a gradient-requiring input
records its parents and a backward closure on the output. ``backward``
walks the recorded graph once in reverse topological order and
accumulates gradients; a tensor feeding several consumers receives the
sum of their contributions.

Data is float32 by default. Operations preserve the dtype of their
inputs, so the same graph code runs in float64 when fed float64 leaves;
``grad_check`` relies on that to compare against central differences at
a precision float32 cannot reach.
"""

import contextlib

import numpy as np

from . import kernels

_grad_enabled = True


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the with-block."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def _as_data(x):
    a = np.asarray(x)
    if a.dtype != np.float32 and a.dtype != np.float64:
        a = a.astype(np.float32)
    return a


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad=False):
        self.data = _as_data(data)
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._parents = ()
        self._backward = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self):
        return self.data.size

    def __repr__(self):
        return "Tensor(shape=%s, dtype=%s, requires_grad=%s)" % (
            tuple(self.shape), self.data.dtype, self.requires_grad)

    def item(self):
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 \
            else self._size_error("item")

    def _size_error(self, what):
        raise ValueError("%s: expected a single element, got shape %s"
                         % (what, tuple(self.shape)))

    def numpy(self):
        return self.data

    def detach(self):
        return Tensor(self.data, requires_grad=False)

    # ---- graph walk ----

    def backward(self, grad=None):
        """Accumulate gradients into every reachable requires_grad tensor.

        Repeated calls keep accumulating; set ``grad = None`` on the
        leaves to start fresh.
        """
        if grad is None:
            if self.data.size != 1:
                raise ValueError(
                    "backward: loss must be scalar, got shape %s"
                    % (tuple(self.shape),))
            seed = np.ones_like(self.data)
        else:
            seed = _as_data(grad)
            if seed.shape != self.data.shape:
                raise ValueError("backward: seed shape %s != tensor shape %s"
                                 % (seed.shape, self.data.shape))

        topo = []
        visited = {id(self)}
        stack = [(self, iter(self._parents))]
        while stack:
            node, it = stack[-1]
            pushed = False
            for p in it:
                if id(p) not in visited:
                    visited.add(id(p))
                    stack.append((p, iter(p._parents)))
                    pushed = True
                    break
            if not pushed:
                topo.append(node)
                stack.pop()

        gmap = {id(self): seed}
        for node in reversed(topo):
            g = gmap.pop(id(node), None)
            if g is None:
                continue
            if node.requires_grad:
                node.grad = g if node.grad is None else node.grad + g
            if node._backward is not None:
                for p, pg in zip(node._parents, node._backward(g)):
                    if pg is None or not p.requires_grad:
                        continue
                    key = id(p)
                    gmap[key] = pg if key not in gmap else gmap[key] + pg

    # ---- operator sugar ----

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __pow__(self, p):
        return power(self, p)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return getitem(self, key)

    def exp(self):
        return exp(self)

    def log(self):
        return log(self)

    def sqrt(self):
        return sqrt(self)

    def sum(self, axis=None, keepdims=False):
        return reduce_sum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return reduce_mean(self, axis, keepdims)

    def max(self, axis=None, keepdims=False):
        return reduce_max(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes if axes else None)


def make_node(data, parents, backward):
    """Build a graph node from raw ndarray data.

    ``backward(g)`` must return one gradient array (or None) per parent.
    Used by ops in other modules (warp, fused losses) that bring their
    own analytic backward.
    """
    out = Tensor(data)
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    return out


def _unbroadcast(g, shape):
    """Sum g down to the given shape, undoing numpy broadcasting."""
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def _binary_data(a, b, fn, name):
    try:
        return fn(a, b)
    except ValueError:
        raise ValueError("%s: shapes %s and %s do not broadcast"
                         % (name, a.shape, b.shape))


def _binary(a, b, fn, bwd, name):
    """fn(a_data, b_data); bwd(g, a_data, b_data) -> (da, db) pre-unbroadcast."""
    a_t = a if isinstance(a, Tensor) else None
    b_t = b if isinstance(b, Tensor) else None
    ad = a_t.data if a_t is not None else a
    bd = b_t.data if b_t is not None else b
    if a_t is not None and b_t is not None and a_t.dtype != b_t.dtype:
        raise TypeError("%s: dtype mismatch %s vs %s" % (name, a_t.dtype, b_t.dtype))
    if a_t is not None and b_t is not None:
        data = _binary_data(ad, bd, fn, name)
    else:
        data = fn(ad, bd)

    parents = tuple(t for t in (a_t, b_t) if t is not None)

    def backward(g):
        da, db = bwd(g, ad, bd)
        outs = []
        if a_t is not None:
            outs.append(_unbroadcast(da, a_t.shape) if da is not None else None)
        if b_t is not None:
            outs.append(_unbroadcast(db, b_t.shape) if db is not None else None)
        return tuple(outs)

    return make_node(data, parents, backward)


def add(a, b):
    return _binary(a, b, lambda x, y: x + y,
                   lambda g, x, y: (g, g), "add")


def sub(a, b):
    return _binary(a, b, lambda x, y: x - y,
                   lambda g, x, y: (g, -g), "sub")


def mul(a, b):
    return _binary(a, b, lambda x, y: x * y,
                   lambda g, x, y: (g * y, g * x), "mul")


def div(a, b):
    return _binary(a, b, lambda x, y: x / y,
                   lambda g, x, y: (g / y, -g * x / (y * y)), "div")


def neg(a):
    return make_node(-a.data, (a,), lambda g: (-g,))


def power(a, p):
    """Elementwise a**p for scalar p."""
    if isinstance(p, Tensor):
        raise TypeError("pow: exponent must be a scalar")
    p = float(p)
    data = a.data ** p
    ad = a.data
    return make_node(data, (a,), lambda g: (g * p * ad ** (p - 1.0),))


def exp(a):
    e = np.exp(a.data)
    return make_node(e, (a,), lambda g: (g * e,))


def log(a):
    ad = a.data
    return make_node(np.log(ad), (a,), lambda g: (g / ad,))


def sqrt(a):
    r = np.sqrt(a.data)
    return make_node(r, (a,), lambda g: (g / (2.0 * r),))


def _sigmoid_data(x):
    # stable in both tails
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def sigmoid(a):
    s = _sigmoid_data(a.data)
    return make_node(s, (a,), lambda g: (g * s * (1.0 - s),))


def swish(a):
    """x * sigmoid(x)."""
    s = _sigmoid_data(a.data)
    ad = a.data
    return make_node(ad * s, (a,), lambda g: (g * (s + ad * s * (1.0 - s)),))


def leaky_relu(a, slope=0.2):
    ad = a.data
    data = np.where(ad > 0, ad, slope * ad)
    return make_node(data, (a,),
                     lambda g: (g * np.where(ad > 0, 1.0, slope).astype(ad.dtype),))


def matmul(a, b):
    """Matrix product; leading batch dimensions broadcast as in numpy."""
    if a.dtype != b.dtype:
        raise TypeError("matmul: dtype mismatch %s vs %s" % (a.dtype, b.dtype))
    if a.ndim < 2 or b.ndim < 2:
        raise ValueError("matmul: operands must have rank >= 2")
    if a.shape[-1] != b.shape[-2]:
        raise ValueError("matmul: inner dims disagree, %s vs %s"
                         % (a.shape, b.shape))
    ad, bd = a.data, b.data
    data = np.matmul(ad, bd)

    def backward(g):
        da = np.matmul(g, bd.swapaxes(-1, -2))
        db = np.matmul(ad.swapaxes(-1, -2), g)
        return _unbroadcast(da, a.shape), _unbroadcast(db, b.shape)

    return make_node(data, (a, b), backward)


def conv2d(x, w, bias=None, stride=1, pad=0):
    """Cross-correlation of x [B,C,H,W] with w [O,C,k,k], odd k."""
    k = w.shape[2]
    if k % 2 != 1:
        raise ValueError("conv2d: kernel size must be odd, got %d" % k)
    if x.ndim != 4 or w.ndim != 4 or w.shape[3] != k or x.shape[1] != w.shape[1]:
        raise ValueError("conv2d: bad shapes x=%s w=%s"
                         % (tuple(x.shape), tuple(w.shape)))
    data = kernels.conv2d_forward(x.data, w.data, stride, pad)
    if bias is not None:
        data = data + bias.data.reshape(1, -1, 1, 1)
    h, wd = x.shape[2], x.shape[3]
    parents = (x, w) if bias is None else (x, w, bias)

    def backward(g):
        dx = kernels.conv2d_grad_input(g, w.data, stride, pad, h, wd) \
            if x.requires_grad else None
        dw = kernels.conv2d_grad_weight(x.data, g, stride, pad, k) \
            if w.requires_grad else None
        if bias is None:
            return dx, dw
        return dx, dw, g.sum(axis=(0, 2, 3))

    return make_node(data, parents, backward)


def transposed_conv2d(x, w, bias=None, stride=2, pad=None):
    """Adjoint of conv2d; w is [Ci,Co,k,k].

    With the default pad=(k-stride)/2 the output spatial size is exactly
    stride times the input size.
    """
    k = w.shape[2]
    if x.ndim != 4 or w.ndim != 4 or x.shape[1] != w.shape[0]:
        raise ValueError("transposed_conv2d: bad shapes x=%s w=%s"
                         % (tuple(x.shape), tuple(w.shape)))
    if pad is None:
        if k < stride or (k - stride) % 2 != 0:
            raise ValueError(
                "transposed_conv2d: incompatible kernel/stride (k=%d, stride=%d)"
                % (k, stride))
        pad = (k - stride) // 2
    data = kernels.tconv2d_forward(x.data, w.data, stride, pad)
    if bias is not None:
        data = data + bias.data.reshape(1, -1, 1, 1)
    parents = (x, w) if bias is None else (x, w, bias)

    def backward(g):
        dx = kernels.tconv2d_grad_input(g, w.data, stride, pad) \
            if x.requires_grad else None
        dw = kernels.tconv2d_grad_weight(x.data, g, stride, pad) \
            if w.requires_grad else None
        if bias is None:
            return dx, dw
        return dx, dw, g.sum(axis=(0, 2, 3))

    return make_node(data, parents, backward)


def nearest_upsample2(x):
    """Replicate each pixel into a 2x2 block."""
    if x.ndim != 4:
        raise ValueError("nearest_upsample2: expected [B,C,H,W]")
    b, c, h, w = x.shape
    data = x.data.repeat(2, axis=2).repeat(2, axis=3)

    def backward(g):
        return (g.reshape(b, c, h, 2, w, 2).sum(axis=(3, 5)),)

    return make_node(data, (x,), backward)


def group_norm(x, groups, gamma, beta, eps=1e-5):
    """Normalize to zero mean / unit variance per (batch, group), then affine."""
    b, c = x.shape[0], x.shape[1]
    if c % groups != 0:
        raise ValueError("group_norm: %d channels not divisible by %d groups"
                         % (c, groups))
    spatial = int(np.prod(x.shape[2:], dtype=np.int64))
    xg = x.reshape(b, groups, (c // groups) * spatial)
    mu = xg.mean(axis=2, keepdims=True)
    d = xg - mu
    var = (d * d).mean(axis=2, keepdims=True)
    xn = d / (var + eps).sqrt()
    aff_shape = (1, c) + (1,) * (x.ndim - 2)
    return xn.reshape(x.shape) * gamma.reshape(aff_shape) \
        + beta.reshape(aff_shape)


def _norm_axes(axis, ndim):
    if axis is None:
        return None
    axes = (axis,) if isinstance(axis, int) else tuple(axis)
    out = []
    for a in axes:
        if not -ndim <= a < ndim:
            raise ValueError("axis %d out of range for rank %d" % (a, ndim))
        out.append(a % ndim)
    if len(set(out)) != len(out):
        raise ValueError("duplicate reduction axes %s" % (axes,))
    return tuple(sorted(out))


def _expand_reduced(g, shape, axes, keepdims):
    if axes is None:
        return np.broadcast_to(g, shape)
    if not keepdims:
        for a in axes:
            g = np.expand_dims(g, a)
    return np.broadcast_to(g, shape)


def reduce_sum(x, axis=None, keepdims=False):
    axes = _norm_axes(axis, x.ndim)
    data = x.data.sum(axis=axes, keepdims=keepdims)
    shape = x.shape

    def backward(g):
        return (_expand_reduced(g, shape, axes, keepdims).copy(),)

    return make_node(data, (x,), backward)


def reduce_mean(x, axis=None, keepdims=False):
    axes = _norm_axes(axis, x.ndim)
    data = x.data.mean(axis=axes, keepdims=keepdims)
    count = x.size if axes is None else int(
        np.prod([x.shape[a] for a in axes], dtype=np.int64))
    shape = x.shape

    def backward(g):
        return (_expand_reduced(g, shape, axes, keepdims) / count,)

    return make_node(data, (x,), backward)


def reduce_max(x, axis=None, keepdims=False):
    """Max reduction; gradient flows to the first maximal element of each
    reduced slice (lowest linear index)."""
    axes = _norm_axes(axis, x.ndim)
    data = x.data.max(axis=axes, keepdims=keepdims)
    xd = x.data
    shape = x.shape

    if axes is None:
        mask = np.zeros_like(xd)
        mask.reshape(-1)[int(np.argmax(xd))] = 1.0
    else:
        kept = tuple(i for i in range(x.ndim) if i not in axes)
        perm = kept + axes
        moved = xd.transpose(perm)
        lead = moved.shape[:len(kept)]
        blk = moved.reshape(lead + (-1,))
        onehot = np.zeros_like(blk)
        np.put_along_axis(onehot, np.argmax(blk, axis=-1)[..., None], 1.0, -1)
        inv = np.argsort(perm)
        mask = onehot.reshape(moved.shape).transpose(inv)

    def backward(g):
        return (_expand_reduced(g, shape, axes, keepdims) * mask,)

    return make_node(data, (x,), backward)


def softmax(x, axis=-1):
    m = x.data.max(axis=axis, keepdims=True)
    e = np.exp(x.data - m)
    s = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        return ((g - (g * s).sum(axis=axis, keepdims=True)) * s,)

    return make_node(s, (x,), backward)


def reshape(x, shape):
    data = x.data.reshape(shape)
    old = x.shape

    def backward(g):
        return (g.reshape(old),)

    return make_node(data, (x,), backward)


def transpose(x, axes=None):
    perm = tuple(axes) if axes is not None else tuple(range(x.ndim - 1, -1, -1))
    data = x.data.transpose(perm)
    inv = tuple(np.argsort(perm))

    def backward(g):
        return (g.transpose(inv),)

    return make_node(data, (x,), backward)


def _basic_key(key):
    parts = key if isinstance(key, tuple) else (key,)
    for p in parts:
        if not (p is None or p is Ellipsis or isinstance(p, (int, slice))):
            raise TypeError("getitem: only basic indexing is supported")
    return key


def getitem(x, key):
    key = _basic_key(key)
    data = x.data[key]
    shape = x.shape

    def backward(g):
        dz = np.zeros(shape, dtype=g.dtype)
        dz[key] = g
        return (dz,)

    return make_node(data, (x,), backward)


def concat(tensors, axis=0):
    tensors = list(tensors)
    if not tensors:
        raise ValueError("concat: need at least one tensor")
    dt = tensors[0].dtype
    for t in tensors[1:]:
        if t.dtype != dt:
            raise TypeError("concat: dtype mismatch")
    data = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def backward(g):
        return tuple(np.ascontiguousarray(p)
                     for p in np.split(g, splits, axis=axis))

    return make_node(data, tuple(tensors), backward)


def grad_check(f, x, h=1e-3):
    """Max relative error between analytic and central-difference gradients.

    The probe runs in float64 regardless of the input dtype: at h=1e-3 a
    float32 difference quotient carries rounding noise of order
    eps32*|f|/h, which would swamp the tolerance this check is meant to
    enforce. Error is |analytic - fd| / max(|analytic|, 1e-8), maximized
    over coordinates.
    """
    base = x.data if isinstance(x, Tensor) else np.asarray(x)
    xt = Tensor(base.astype(np.float64), requires_grad=True)
    y = f(xt)
    if y.data.size != 1:
        raise ValueError("grad_check: f must be scalar-valued")
    y.backward()
    ana = xt.grad if xt.grad is not None else np.zeros_like(xt.data)
    if not (np.isfinite(y.data).all() and np.isfinite(ana).all()):
        raise ValueError("grad_check: non-finite value or gradient")

    flat = xt.data.reshape(-1)
    fd = np.empty_like(flat)
    with no_grad():
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            fp = float(f(xt).data.reshape(-1)[0])
            flat[i] = orig - h
            fm = float(f(xt).data.reshape(-1)[0])
            flat[i] = orig
            fd[i] = (fp - fm) / (2.0 * h)
    if not np.isfinite(fd).all():
        raise ValueError("grad_check: non-finite finite-difference value")
    af = ana.reshape(-1)
    rel = np.abs(af - fd) / np.maximum(np.abs(af), 1e-8)
    return float(rel.max())
