"""A small reverse-mode autodiff engine over numpy arrays.

Only the operations needed by the translation models are provided. Every op
is a plain function that builds an output :class:`Tensor` and, when any input
requires a gradient, attaches a closure mapping the output gradient to the
input gradients.

Precision is a module-wide setting: ``"single"`` (float32) for training and
``"double"`` (float64) for gradient verification::

    with precision("double"):
        x = Tensor(np.random.randn(3, 4), requires_grad=True)
"""

from contextlib import contextmanager

import numpy as np

from . import _kernels
from .errors import DataError, DimensionError, VocabularyError

_DTYPES = {"single": np.float32, "double": np.float64}
_dtype = np.float32
_grad_enabled = True
_branch_log = None  # list while finite_diff_check watches relu/max-pool branch choices


def set_precision(name):
    global _dtype
    if name not in _DTYPES:
        raise ValueError(f"precision must be one of {sorted(_DTYPES)}, got {name!r}")
    _dtype = _DTYPES[name]


def get_precision():
    return "double" if _dtype is np.float64 else "single"


def default_dtype():
    return _dtype


@contextmanager
def precision(name):
    old = get_precision()
    set_precision(name)
    try:
        yield
    finally:
        set_precision(old)


@contextmanager
def no_grad():
    global _grad_enabled
    old = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = old


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "name")

    def __init__(self, data, requires_grad=False, name=None, _parents=(), _backward=None):
        arr = np.asarray(data)
        if arr.dtype != _dtype:
            arr = arr.astype(_dtype)
        self.data = arr
        self.requires_grad = requires_grad
        self.grad = None
        self._parents = _parents
        self._backward = _backward
        self.name = name

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def numpy(self):
        return self.data

    def item(self):
        return float(self.data.reshape(-1)[0])

    def zero_grad(self):
        self.grad = None

    def detach(self):
        return Tensor(self.data)

    def __repr__(self):
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad}{tag})"

    # operator sugar
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

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        return transpose(self, axes or None)

    def backward(self):
        backward(self)


def as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data, parents, backward_fn):
    needs = _grad_enabled and any(p.requires_grad for p in parents)
    if not needs:
        return Tensor(data)
    return Tensor(data, requires_grad=True, _parents=parents, _backward=backward_fn)


def _unbroadcast(g, shape):
    """Sum ``g`` down to ``shape`` after numpy broadcasting."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


# ---------------------------------------------------------------------------
# elementwise arithmetic
# ---------------------------------------------------------------------------

def add(a, b):
    a, b = as_tensor(a), as_tensor(b)

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _make(a.data + b.data, (a, b), bw)


def sub(a, b):
    a, b = as_tensor(a), as_tensor(b)

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _make(a.data - b.data, (a, b), bw)


def mul(a, b):
    a, b = as_tensor(a), as_tensor(b)

    def bw(g):
        ga = _unbroadcast(g * b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(g * a.data, b.shape) if b.requires_grad else None
        return ga, gb

    return _make(a.data * b.data, (a, b), bw)


def div(a, b):
    a, b = as_tensor(a), as_tensor(b)
    out = a.data / b.data

    def bw(g):
        ga = _unbroadcast(g / b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(-g * out / b.data, b.shape) if b.requires_grad else None
        return ga, gb

    return _make(out, (a, b), bw)


def exp(x):
    out = np.exp(x.data)
    return _make(out, (x,), lambda g: (g * out,))


def log(x):
    return _make(np.log(x.data), (x,), lambda g: (g / x.data,))


# ---------------------------------------------------------------------------
# shape manipulation
# ---------------------------------------------------------------------------

def reshape(x, shape):
    old = x.shape
    return _make(x.data.reshape(shape), (x,), lambda g: (g.reshape(old),))


def transpose(x, axes=None):
    if axes is None:
        axes = tuple(reversed(range(x.ndim)))
    inv = np.argsort(axes)
    return _make(x.data.transpose(axes), (x,), lambda g: (g.transpose(inv),))


def swap_last(x):
    axes = list(range(x.ndim))
    axes[-1], axes[-2] = axes[-2], axes[-1]
    return transpose(x, tuple(axes))


def getitem(x, idx):
    def bw(g):
        gx = np.zeros(x.shape, dtype=g.dtype)
        np.add.at(gx, idx, g)
        return (gx,)

    return _make(x.data[idx], (x,), bw)


def pick_lastdim(x, idx):
    """``x[..., idx[...]]``: one entry per leading position (e.g. gold-token log-probs)."""
    idx = np.asarray(idx, dtype=np.int64)[..., None]
    out = np.take_along_axis(x.data, idx, axis=-1)[..., 0]

    def bw(g):
        gx = np.zeros(x.shape, dtype=g.dtype)
        np.put_along_axis(gx, idx, g[..., None], axis=-1)
        return (gx,)

    return _make(out, (x,), bw)


def concat(tensors, axis=-1):
    tensors = [as_tensor(t) for t in tensors]
    ax = axis % tensors[0].ndim
    splits = np.cumsum([t.shape[ax] for t in tensors])[:-1]

    def bw(g):
        return tuple(np.split(g, splits, axis=ax))

    return _make(np.concatenate([t.data for t in tensors], axis=ax), tuple(tensors), bw)


def tsum(x, axis=None, keepdims=False):
    shape = x.shape

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return _make(np.sum(x.data, axis=axis, keepdims=keepdims), (x,), bw)


def mean(x, axis=None, keepdims=False):
    n = x.size if axis is None else np.prod([x.shape[a] for a in np.atleast_1d(axis)])
    return mul(tsum(x, axis, keepdims), 1.0 / n)


# ---------------------------------------------------------------------------
# linear algebra
# ---------------------------------------------------------------------------

def matmul(a, b):
    """Matrix product over the last two axes with numpy broadcasting of the rest."""
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul: cannot multiply shapes {a.shape} and {b.shape}")
    out = np.matmul(a.data, b.data)

    def bw(g):
        ga = gb = None
        if a.requires_grad:
            ga = _unbroadcast(np.matmul(g, np.swapaxes(b.data, -1, -2)), a.shape)
        if b.requires_grad:
            gb = _unbroadcast(np.matmul(np.swapaxes(a.data, -1, -2), g), b.shape)
        return ga, gb

    return _make(out, (a, b), bw)


def linear(x, w, b=None):
    """``x @ w + b`` over the last axis of ``x``; ``w`` is (in, out)."""
    if x.shape[-1] != w.shape[0]:
        raise DimensionError(f"linear: input {x.shape} does not match weight {w.shape}")
    lead = x.shape[:-1]
    x2 = x.data.reshape(-1, x.shape[-1])
    out = x2 @ w.data
    if b is not None:
        out += b.data
    out = out.reshape(lead + (w.shape[1],))

    def bw(g):
        g2 = g.reshape(-1, w.shape[1])
        gx = (g2 @ w.data.T).reshape(x.shape) if x.requires_grad else None
        gw = x2.T @ g2 if w.requires_grad else None
        if b is None:
            return gx, gw
        return gx, gw, g2.sum(axis=0)

    parents = (x, w) if b is None else (x, w, b)
    return _make(out, parents, bw)


# ---------------------------------------------------------------------------
# neural network ops
# ---------------------------------------------------------------------------

def softmax_lastdim(x):
    z = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=-1, keepdims=True)

    def bw(g):
        return (y * (g - (g * y).sum(axis=-1, keepdims=True)),)

    return _make(y, (x,), bw)


def log_softmax_lastdim(x):
    z = x.data - x.data.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=-1, keepdims=True))
    y = z - lse

    def bw(g):
        return (g - np.exp(y) * g.sum(axis=-1, keepdims=True),)

    return _make(y, (x,), bw)


def layer_norm(x, gain, bias, eps=1e-6):
    D = x.shape[-1]
    if gain.shape != (D,) or bias.shape != (D,):
        raise DimensionError(
            f"layer_norm: gain {gain.shape} / bias {bias.shape} do not match last dim of {x.shape}")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = xhat * gain.data + bias.data

    def bw(g):
        lead = tuple(range(g.ndim - 1))
        gx = None
        if x.requires_grad:
            gh = g * gain.data
            gx = inv * (gh - gh.mean(axis=-1, keepdims=True)
                        - xhat * (gh * xhat).mean(axis=-1, keepdims=True))
        return gx, (g * xhat).sum(axis=lead), g.sum(axis=lead)

    return _make(out, (x, gain, bias), bw)


def activation(x, kind):
    d = x.data
    if kind == "relu":
        if _branch_log is not None:
            _branch_log.append(d > 0)
        y = np.maximum(d, 0)
        return _make(y, (x,), lambda g: (g * (d > 0),))
    if kind == "sigmoid":
        y = 0.5 * (1.0 + np.tanh(0.5 * d))
        return _make(y, (x,), lambda g: (g * y * (1.0 - y),))
    if kind == "tanh":
        y = np.tanh(d)
        return _make(y, (x,), lambda g: (g * (1.0 - y * y),))
    raise ValueError(f"unknown activation {kind!r}")


def relu(x):
    return activation(x, "relu")


def sigmoid(x):
    return activation(x, "sigmoid")


def conv_padding(width):
    return (width - 1) // 2, width // 2


def conv1d_same(x, filters, width=None):
    """Length-preserving 1-D convolution.

    ``x`` is (L, E) or (B, L, E), ``filters`` is (width, E, F). Zero padding is
    floor((w-1)/2) on the left and ceil((w-1)/2) on the right, so even widths
    lean one step into the future.
    """
    w = filters.shape[0] if width is None else width
    if not 1 <= w <= 8:
        raise DataError(f"conv1d_same: width must be in 1..8, got {w}")
    if filters.shape[0] != w:
        raise DimensionError(f"conv1d_same: filters {filters.shape} do not have width {w}")
    squeeze = x.ndim == 2
    xd = x.data[None] if squeeze else x.data
    B, L, E = xd.shape
    if L < 1:
        raise DataError("conv1d_same: empty input")
    if filters.shape[1] != E:
        raise DimensionError(f"conv1d_same: input channels {E} vs filters {filters.shape}")
    F = filters.shape[2]
    left, right = conv_padding(w)
    xp = np.pad(xd, ((0, 0), (left, right), (0, 0)))
    cols = _kernels.unfold1d(xp, w)  # B, L, w*E
    wmat = filters.data.reshape(w * E, F)
    out = (cols.reshape(B * L, w * E) @ wmat).reshape(B, L, F)
    if squeeze:
        out = out[0]

    def bw(g):
        g3 = g[None] if squeeze else g
        g2 = g3.reshape(B * L, F)
        gx = gf = None
        if x.requires_grad:
            gcols = (g2 @ wmat.T).reshape(B, L, w * E)
            gxp = _kernels.fold1d(gcols, w, E)
            gx = gxp[:, left:left + L, :]
            if squeeze:
                gx = gx[0]
        if filters.requires_grad:
            gf = (cols.reshape(B * L, w * E).T @ g2).reshape(filters.shape)
        return gx, gf

    return _make(out, (x, filters), bw)


def maxpool1d(x, stride):
    """Max over non-overlapping windows of ``stride`` steps along the length axis."""
    squeeze = x.ndim == 2
    xd = x.data[None] if squeeze else x.data
    L = xd.shape[1]
    if stride < 1 or L % stride:
        raise DataError(f"maxpool1d: length {L} is not divisible by stride {stride}")
    out, idx = _kernels.maxpool_forward(np.ascontiguousarray(xd), stride)
    if _branch_log is not None:
        _branch_log.append(idx)
    if squeeze:
        out = out[0]

    def bw(g):
        g3 = g[None] if squeeze else g
        gx = _kernels.maxpool_backward(np.ascontiguousarray(g3), idx, stride)
        return (gx[0] if squeeze else gx,)

    return _make(out, (x,), bw)


def embedding_lookup(table, ids):
    ids = np.asarray(ids, dtype=np.int64)
    V = table.shape[0]
    if ids.size and (ids.min() < 0 or ids.max() >= V):
        bad = int(ids[(ids < 0) | (ids >= V)].reshape(-1)[0])
        raise VocabularyError(f"embedding_lookup: id {bad} outside vocabulary of size {V}")
    out = table.data[ids]

    def bw(g):
        gt = np.zeros(table.shape, dtype=g.dtype)
        _kernels.scatter_add_rows(gt, ids.reshape(-1), np.ascontiguousarray(g.reshape(-1, table.shape[1])))
        return (gt,)

    return _make(out, (table,), bw)


def dropout(x, rate, rng=None, training=True):
    if not training or rate <= 0.0:
        return x
    rng = rng if rng is not None else np.random.default_rng()
    keep = (rng.random(x.shape) >= rate).astype(x.data.dtype) / (1.0 - rate)
    return _make(x.data * keep, (x,), lambda g: (g * keep,))


# ---------------------------------------------------------------------------
# reverse pass
# ---------------------------------------------------------------------------

def _topo_order(root):
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        node, done = stack.pop()
        if done:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def backward(loss):
    """Accumulate d(loss)/d(t) into ``t.grad`` for every reachable ``t`` that requires grad."""
    if loss.size != 1:
        raise DimensionError(f"backward: loss must be a scalar, got shape {loss.shape}")
    if not loss.requires_grad:
        return
    grads = {id(loss): np.ones(loss.shape, dtype=loss.data.dtype)}
    for node in reversed(_topo_order(loss)):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        node.grad = g if node.grad is None else node.grad + g
        if node._backward is None:
            continue
        for p, gp in zip(node._parents, node._backward(g)):
            if gp is None or not p.requires_grad:
                continue
            key = id(p)
            if key in grads:
                grads[key] = grads[key] + gp
            else:
                grads[key] = gp


def finite_diff_check(f, x, eps=1e-4, seed=0, coords=None, smooth_only=False, info=None):
    """Compare analytic and central-difference gradients of ``f`` at ``x``.

    ``f`` maps the tensor ``x`` to a tensor of any shape; it is reduced to a
    scalar through a fixed random projection so that gradients of
    normalised outputs (softmax, layer norm) are not trivially zero.
    The numeric derivative uses the fourth-order central stencil
    (8 (f(x+h) - f(x-h)) - (f(x+2h) - f(x-2h))) / 12h.
    ``coords`` optionally limits the check to that many randomly chosen
    coordinates. Returns the maximum relative error
    |analytic - numeric| / max(|analytic|, |numeric|, 1e-8).

    With ``smooth_only`` every relu mask and max-pool argmax is recorded at
    each stencil point; a coordinate whose stencil flips any of them sits on
    a kink where no derivative exists, so it is replaced by the next random
    coordinate. ``info["skipped"]`` (if a dict is given) counts replacements.
    """
    if _dtype is not np.float64:
        raise DataError("finite_diff_check requires double precision")
    rng = np.random.default_rng(seed)
    x.data = np.ascontiguousarray(x.data)
    out = f(x)
    proj = rng.standard_normal(out.shape)

    def scalar():
        with no_grad():
            return float(np.sum(f(x).data * proj))

    def branches():
        global _branch_log
        _branch_log = []
        try:
            return scalar(), _branch_log
        finally:
            _branch_log = None

    x.grad = None
    backward(tsum(mul(out, Tensor(proj))))
    analytic = np.zeros(x.size) if x.grad is None else x.grad.reshape(-1).copy()
    flat = x.data.reshape(-1)
    want = flat.size if coords is None else min(coords, flat.size)
    if smooth_only:
        order = rng.permutation(flat.size)
        base = branches()[1]
    else:
        order = np.arange(flat.size) if want == flat.size else rng.choice(flat.size, size=want, replace=False)
    worst, done, skipped = 0.0, 0, 0
    for i in order:
        if done == want:
            break
        orig = flat[i]
        vals, kink = [], False
        for k in (-2, -1, 1, 2):
            flat[i] = orig + k * eps
            if smooth_only:
                v, log = branches()
                kink = kink or len(log) != len(base) or any(not np.array_equal(a, b) for a, b in zip(log, base))
            else:
                v = scalar()
            vals.append(v)
        flat[i] = orig
        if kink:
            skipped += 1
            continue
        done += 1
        num = (8 * (vals[2] - vals[1]) - (vals[3] - vals[0])) / (12 * eps)
        ana = analytic[i]
        worst = max(worst, abs(ana - num) / max(abs(ana), abs(num), 1e-8))
    if info is not None:
        info["skipped"] = info.get("skipped", 0) + skipped
        info["checked"] = info.get("checked", 0) + done
    x.grad = None
    return worst
