"""Reverse-mode automatic differentiation over dense float tensors.

Every backward rule is expressed through the same forward ops, so gradients
produced with ``create_graph=True`` are themselves differentiable.  This
tape-of-tape construction is what lets the critic gradient penalty be
backpropagated into the critic parameters (double backprop) without any
symbolic machinery.

Broadcasting is deliberately narrow: scalars, row vectors against matrices,
column vectors against matrices, and the (n,1)+(1,m) outer pattern needed by
pairwise-distance computations.  Anything wider is rejected.
"""

from __future__ import annotations

import contextlib

import numpy as np

__all__ = [
    "Tensor",
    "tensor",
    "no_grad",
    "apply",
    "backward",
    "grad_norm_penalty",
    "add", "sub", "mul", "scale", "matmul", "transpose",
    "tsum", "tmean", "square", "sqrt", "texp", "tlog", "reciprocal",
    "relu", "sigmoid", "clip", "concat_lastdim", "slice_lastdim",
    "gather_rows", "frobenius_sq", "l2_norm_rows", "reshape",
]

_grad_enabled = [True]


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block."""
    _grad_enabled.append(False)
    try:
        yield
    finally:
        _grad_enabled.pop()


@contextlib.contextmanager
def _grad_mode(enabled):
    _grad_enabled.append(bool(enabled))
    try:
        yield
    finally:
        _grad_enabled.pop()


def _as_array(data):
    arr = np.asarray(data)
    if arr.dtype not in (np.float32, np.float64):
        arr = arr.astype(np.float32)
    return arr


class Tensor:
    """Dense float array, optionally participating in the gradient graph.

    ``requires_grad`` leaves are parameters; op outputs carry ``_parents`` and
    a vector-Jacobian closure built from forward ops.  Tensors are treated as
    immutable once they appear in a graph; only leaf ``data`` may be updated
    between graph builds (optimizer steps).
    """

    __slots__ = ("data", "requires_grad", "_parents", "_vjp")

    def __init__(self, data, requires_grad=False, _parents=(), _vjp=None):
        self.data = _as_array(data)
        self.requires_grad = bool(requires_grad)
        self._parents = _parents
        self._vjp = _vjp

    # -- basic introspection -------------------------------------------------
    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def is_leaf(self):
        return self._vjp is None

    def item(self):
        return float(self.data.reshape(-1)[0])

    def detach(self):
        return Tensor(self.data)

    def __repr__(self):
        flag = ", grad" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    # -- operator sugar ------------------------------------------------------
    def __add__(self, other):
        return add(self, _lift(other, self))

    def __radd__(self, other):
        return add(_lift(other, self), self)

    def __sub__(self, other):
        return sub(self, _lift(other, self))

    def __rsub__(self, other):
        return sub(_lift(other, self), self)

    def __mul__(self, other):
        return mul(self, _lift(other, self))

    def __rmul__(self, other):
        return mul(_lift(other, self), self)

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    @property
    def T(self):
        return transpose(self)


def tensor(data, requires_grad=False):
    return Tensor(data, requires_grad=requires_grad)


def _lift(x, like):
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=like.dtype))


def _make(data, parents, vjp):
    track = _grad_enabled[-1] and any(p.requires_grad for p in parents)
    if track:
        return Tensor(data, requires_grad=True, _parents=tuple(parents), _vjp=vjp)
    return Tensor(data)


# -- broadcasting helpers ----------------------------------------------------

def _broadcast_ok(sa, sb, out):
    """Allowed patterns: equal shapes, scalar with anything, and 1-padded
    2-D pairs such as (d,)+(n,d), (n,1)+(n,d), (n,1)+(1,m)."""
    for s in (sa, sb):
        if len(s) > 2:
            return False
    return True


def _expand_pair(a, b):
    if a.shape == b.shape:
        return a, b
    try:
        out = np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ValueError(f"shapes {a.shape} and {b.shape} do not broadcast")
    if not _broadcast_ok(a.shape, b.shape, out):
        raise ValueError(f"broadcast of {a.shape} with {b.shape} not supported")
    if a.shape != out:
        a = expand(a, out)
    if b.shape != out:
        b = expand(b, out)
    return a, b


def expand(x, shp):
    shp = tuple(shp)
    out = np.broadcast_to(x.data, shp).copy()
    orig = x.shape

    def vjp(g):
        return (sum_to(g, orig),)

    return _make(out, (x,), vjp)


def sum_to(x, shp):
    """Reduce ``x`` back to ``shp`` by summing broadcast axes."""
    shp = tuple(shp)
    data = x.data
    # sum away leading axes
    while data.ndim > len(shp):
        data = data.sum(axis=0)
    axes = tuple(i for i, (d, t) in enumerate(zip(data.shape, shp)) if t == 1 and d != 1)
    if axes:
        data = data.sum(axis=axes, keepdims=True)
    assert data.shape == shp, (data.shape, shp)

    orig = x.shape

    def vjp(g):
        return (expand(g, orig),)

    return _make(data, (x,), vjp)


# -- elementwise arithmetic --------------------------------------------------

def add(a, b):
    a, b = _expand_pair(a, b)

    def vjp(g):
        return (g, g)

    return _make(a.data + b.data, (a, b), vjp)


def sub(a, b):
    a, b = _expand_pair(a, b)

    def vjp(g):
        return (g, scale(g, -1.0))

    return _make(a.data - b.data, (a, b), vjp)


def mul(a, b):
    a, b = _expand_pair(a, b)

    def vjp(g):
        return (mul(g, b), mul(g, a))

    return _make(a.data * b.data, (a, b), vjp)


def scale(x, c):
    c = float(c)

    def vjp(g):
        return (scale(g, c),)

    return _make(x.data * np.asarray(c, dtype=x.dtype), (x,), vjp)


def square(x):
    def vjp(g):
        return (mul(g, scale(x, 2.0)),)

    return _make(np.square(x.data), (x,), vjp)


def sqrt(x):
    if np.any(x.data < 0):
        raise ValueError("sqrt of negative input")
    out_data = np.sqrt(x.data)
    out = _make(out_data, (x,), None)

    def vjp(g):
        return (mul(g, scale(reciprocal(out), 0.5)),)

    out._vjp = vjp if out.requires_grad else None
    return out


def reciprocal(x):
    out = _make(1.0 / x.data, (x,), None)

    def vjp(g):
        return (scale(mul(g, square(out)), -1.0),)

    out._vjp = vjp if out.requires_grad else None
    return out


def texp(x):
    out = _make(np.exp(x.data), (x,), None)

    def vjp(g):
        return (mul(g, out),)

    out._vjp = vjp if out.requires_grad else None
    return out


def tlog(x):
    if np.any(x.data <= 0):
        raise ValueError("log of non-positive input")

    def vjp(g):
        return (mul(g, reciprocal(x)),)

    return _make(np.log(x.data), (x,), vjp)


def relu(x):
    mask = Tensor((x.data > 0).astype(x.dtype))

    def vjp(g):
        return (mul(g, mask),)

    return _make(np.maximum(x.data, 0), (x,), vjp)


def sigmoid(x):
    out = _make(1.0 / (1.0 + np.exp(-x.data)), (x,), None)

    def vjp(g):
        one = Tensor(np.asarray(1.0, dtype=out.dtype))
        return (mul(g, mul(out, sub(one, out))),)

    out._vjp = vjp if out.requires_grad else None
    return out


def clip(x, lo, hi):
    """Clamp values; gradient passes through only inside the open interval."""
    mask = Tensor(((x.data > lo) & (x.data < hi)).astype(x.dtype))

    def vjp(g):
        return (mul(g, mask),)

    return _make(np.clip(x.data, lo, hi), (x,), vjp)


# -- reductions / reshaping --------------------------------------------------

def tsum(x, axis=None, keepdims=False):
    out_data = x.data.sum(axis=axis, keepdims=keepdims)
    orig = x.shape

    def vjp(g):
        if axis is not None and not keepdims:
            kd = list(orig)
            for ax in (axis if isinstance(axis, tuple) else (axis,)):
                kd[ax] = 1
            g = reshape(g, tuple(kd))
        elif axis is None and not keepdims:
            g = reshape(g, (1,) * len(orig)) if orig else g
        return (expand(g, orig),)

    return _make(out_data, (x,), vjp)


def tmean(x, axis=None, keepdims=False):
    if axis is None:
        n = x.size
    else:
        n = x.shape[axis]
    return scale(tsum(x, axis=axis, keepdims=keepdims), 1.0 / n)


def reshape(x, shp):
    shp = tuple(shp)
    orig = x.shape

    def vjp(g):
        return (reshape(g, orig),)

    return _make(x.data.reshape(shp), (x,), vjp)


def transpose(x):
    if x.ndim != 2:
        raise ValueError(f"transpose expects a matrix, got shape {x.shape}")

    def vjp(g):
        return (transpose(g),)

    return _make(x.data.T.copy(), (x,), vjp)


def matmul(a, b):
    if a.ndim != 2 or b.ndim != 2:
        raise ValueError(f"matmul expects matrices, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ValueError(f"matmul inner dims differ: {a.shape} vs {b.shape}")

    def vjp(g):
        return (matmul(g, transpose(b)), matmul(transpose(a), g))

    return _make(a.data @ b.data, (a, b), vjp)


# -- structural ops ----------------------------------------------------------

def concat_lastdim(*tensors):
    if len(tensors) < 2:
        raise ValueError("concat_lastdim needs at least two tensors")
    lead = tensors[0].shape[:-1]
    for t in tensors[1:]:
        if t.shape[:-1] != lead:
            raise ValueError(
                f"concat_lastdim leading dims differ: {tensors[0].shape} vs {t.shape}")
    widths = [t.shape[-1] for t in tensors]
    offs = np.cumsum([0] + widths)

    def vjp(g):
        return tuple(slice_lastdim(g, int(offs[i]), int(offs[i + 1]))
                     for i in range(len(tensors)))

    return _make(np.concatenate([t.data for t in tensors], axis=-1), tensors, vjp)


def slice_lastdim(x, lo, hi):
    d = x.shape[-1]
    if not (0 <= lo <= hi <= d):
        raise ValueError(f"slice [{lo}:{hi}] out of range for width {d}")

    def vjp(g):
        parts = []
        if lo > 0:
            parts.append(Tensor(np.zeros(x.shape[:-1] + (lo,), dtype=x.dtype)))
        parts.append(g)
        if hi < d:
            parts.append(Tensor(np.zeros(x.shape[:-1] + (d - hi,), dtype=x.dtype)))
        if len(parts) == 1:
            return (g,)
        return (concat_lastdim(*parts),)

    return _make(np.ascontiguousarray(x.data[..., lo:hi]), (x,), vjp)


def gather_rows(x, idx):
    idx = np.asarray(idx, dtype=np.int64)
    if x.ndim != 2:
        raise ValueError(f"gather_rows expects a matrix, got shape {x.shape}")
    n = x.shape[0]

    def vjp(g):
        return (scatter_rows(g, idx, n),)

    return _make(x.data[idx], (x,), vjp)


def scatter_rows(x, idx, n_rows):
    idx = np.asarray(idx, dtype=np.int64)
    out = np.zeros((n_rows,) + x.shape[1:], dtype=x.dtype)
    np.add.at(out, idx, x.data)

    def vjp(g):
        return (gather_rows(g, idx),)

    return _make(out, (x,), vjp)


# -- composites --------------------------------------------------------------

def frobenius_sq(x):
    return tsum(square(x))


def l2_norm_rows(x):
    if x.ndim != 2:
        raise ValueError(f"l2_norm_rows expects a matrix, got shape {x.shape}")
    # tiny floor keeps the sqrt derivative finite when a row is exactly zero
    # (e.g. a fully dead relu path inside a gradient penalty)
    eps = Tensor(np.asarray(1e-12, dtype=x.data.dtype))
    return sqrt(add(tsum(square(x), axis=1), eps))


_OPS = {
    "matmul": matmul,
    "add": add,
    "sub": sub,
    "mul_elementwise": mul,
    "scale": scale,
    "mean": tmean,
    "sum": tsum,
    "square": square,
    "sqrt": sqrt,
    "exp": texp,
    "log": tlog,
    "concat_lastdim": concat_lastdim,
    "relu": relu,
    "sigmoid": sigmoid,
    "transpose": transpose,
    "frobenius_sq": frobenius_sq,
    "l2_norm_rows": l2_norm_rows,
    "gather_rows": gather_rows,
}


def apply(op_kind, inputs, **kwargs):
    """Name-based dispatch over the supported op set."""
    if op_kind not in _OPS:
        raise ValueError(f"unknown op kind {op_kind!r}")
    return _OPS[op_kind](*inputs, **kwargs)


# -- backward pass -----------------------------------------------------------

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


def backward(loss, create_graph=False):
    """Return a map {leaf tensor: gradient} of d(loss)/d(leaf).

    ``loss`` must be scalar.  With ``create_graph`` the returned gradients
    stay in the graph and can be differentiated again.  Leaves that do not
    appear in the loss's graph are simply absent from the result.
    """
    if loss.size != 1:
        raise ValueError(f"backward expects a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        raise ValueError("loss does not participate in any gradient graph")

    grads = {id(loss): Tensor(np.ones(loss.shape, dtype=loss.dtype))}
    result = {}
    with _grad_mode(create_graph):
        for node in reversed(_topo_order(loss)):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._vjp is None:
                result[node] = g
                continue
            parent_grads = node._vjp(g)
            for parent, pg in zip(node._parents, parent_grads):
                if pg is None or not parent.requires_grad:
                    continue
                prev = grads.get(id(parent))
                grads[id(parent)] = pg if prev is None else add(prev, pg)
    return result


def grad_norm_penalty(f, z_interp, target=1.0):
    """Mean over rows of (||d f / d z||_2 - target)^2, differentiable in f's
    parameters via double backprop."""
    if z_interp.shape[0] == 0:
        raise ValueError("grad_norm_penalty: empty batch")
    if not z_interp.requires_grad:
        raise ValueError("z_interp must participate in the graph")
    out = f(z_interp)
    total = tsum(out)
    grads = backward(total, create_graph=True)
    if z_interp not in grads:
        raise ValueError("critic output does not depend on z_interp")
    g = grads[z_interp]
    norms = l2_norm_rows(g)
    tgt = Tensor(np.asarray(target, dtype=norms.dtype))
    return tmean(square(sub(norms, tgt)))
