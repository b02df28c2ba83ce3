"""Reverse-mode autodiff on float64 numpy arrays, closed under a second backward pass.

Every vector-Jacobian product is itself expressed with :class:`Tensor` ops, so
calling :func:`grad` with ``create_graph=True`` yields gradients that can be
differentiated again.  That is all reverse gradient matching needs: the
derivative, with respect to synthetic inputs, of a distance between parameter
gradients.

The op set is deliberately small (affine maps, elementwise ReLU/tanh/exp/log/
sqrt, reductions, reshapes, an index gather used for convolution and shifts,
average pooling, softmax cross-entropy).  ReLU contributes no curvature: its
backward multiplies by a constant 0/1 mask.
"""

from contextlib import contextmanager
from dataclasses import dataclass
from functools import lru_cache
from typing import Callable, NamedTuple

import numpy as np

from .errors import ConfigError, DegenerateSegmentError, NumericError, ShapeError
from .params import ParamVector

_GRAD_ENABLED = True

COSINE_EPS = 1e-12
DEGENERATE_NORM = 1e-10


@contextmanager
def no_grad():
    global _GRAD_ENABLED
    prev, _GRAD_ENABLED = _GRAD_ENABLED, False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


@contextmanager
def enable_grad():
    global _GRAD_ENABLED
    prev, _GRAD_ENABLED = _GRAD_ENABLED, True
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


class Tensor:
    """An array plus, when it depends on a differentiable leaf, its graph node."""

    __slots__ = ("data", "requires_grad", "parents", "vjp", "op")
    __array_priority__ = 100

    def __init__(self, data, requires_grad=False):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.parents = ()
        self.vjp = None
        self.op = "leaf"

    # -- introspection -------------------------------------------------------
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
    def grad_enabled(self):
        return self.requires_grad

    def item(self):
        return float(self.data)

    def numpy(self):
        return self.data

    def detach(self):
        return Tensor(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, op={self.op}, requires_grad={self.requires_grad})"

    # -- arithmetic ----------------------------------------------------------
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

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        n = self.size if axis is None else np.prod([self.shape[a] for a in _axes(axis)])
        return tsum(self, axis, keepdims) * (1.0 / float(n))

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    @property
    def T(self):
        return transpose(self, None)

    def expand(self, shape):
        return expand(self, shape)

    def relu(self):
        return relu(self)

    def tanh(self):
        return tanh(self)

    def exp(self):
        return exp(self)

    def log(self):
        return log(self)

    def sqrt(self):
        return sqrt(self)

    def gather(self, idx):
        return gather(self, idx)


def _as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def _axes(axis):
    return axis if isinstance(axis, tuple) else (axis,)


def _node(data, parents, vjp, op):
    out = Tensor(data)
    if _GRAD_ENABLED and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out.parents = parents
        out.vjp = vjp
        out.op = op
    return out


def _unbroadcast(g, shape):
    """Sum ``g`` down to ``shape`` (inverse of numpy broadcasting)."""
    if g.shape == tuple(shape):
        return g
    lead = g.ndim - len(shape)
    axes = tuple(range(lead)) + tuple(
        i + lead for i, s in enumerate(shape) if s == 1 and g.shape[i + lead] != 1)
    if axes:
        g = tsum(g, axes, keepdims=True)
    return reshape(g, tuple(shape))


# -- primitive ops -----------------------------------------------------------

def add(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    sa, sb = a.shape, b.shape
    return _node(a.data + b.data, (a, b),
                 lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)), "add")


def sub(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    sa, sb = a.shape, b.shape
    return _node(a.data - b.data, (a, b),
                 lambda g: (_unbroadcast(g, sa), _unbroadcast(neg(g), sb)), "sub")


def neg(a):
    return _node(-a.data, (a,), lambda g: (neg(g),), "neg")


def mul(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    return _node(a.data * b.data, (a, b),
                 lambda g: (_unbroadcast(mul(g, b), a.shape), _unbroadcast(mul(g, a), b.shape)),
                 "mul")


def div(a, b):
    a, b = _as_tensor(a), _as_tensor(b)

    def vjp(g):
        ga = div(g, b)
        gb = neg(div(mul(g, a), mul(b, b)))
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return _node(a.data / b.data, (a, b), vjp, "div")


def matmul(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim != 2 or b.ndim != 2:
        raise ShapeError("2-D operands", (a.shape, b.shape), "matmul")
    return _node(a.data @ b.data, (a, b),
                 lambda g: (matmul(g, transpose(b, None)), matmul(transpose(a, None), g)),
                 "matmul")


def tsum(a, axis=None, keepdims=False):
    shape = a.shape

    def vjp(g):
        if axis is not None and not keepdims:
            kshape = list(shape)
            for ax in _axes(axis):
                kshape[ax] = 1
            g = reshape(g, tuple(kshape))
        elif axis is None and not keepdims:
            g = reshape(g, (1,) * len(shape))
        return (expand(g, shape),)

    return _node(a.data.sum(axis=axis, keepdims=keepdims), (a,), vjp, "sum")


def expand(a, shape):
    shape = tuple(shape)
    src = a.shape
    return _node(np.broadcast_to(a.data, shape), (a,),
                 lambda g: (_unbroadcast(g, src),), "expand")


def reshape(a, shape):
    src = a.shape
    return _node(a.data.reshape(shape), (a,), lambda g: (reshape(g, src),), "reshape")


def transpose(a, axes):
    inv = None if axes is None else tuple(np.argsort(axes))
    return _node(np.transpose(a.data, axes), (a,), lambda g: (transpose(g, inv),), "transpose")


def relu(a):
    mask = Tensor((a.data > 0).astype(np.float64))
    return _node(a.data * mask.data, (a,), lambda g: (mul(g, mask),), "relu")


def tanh(a):
    box = []

    def vjp(g):
        y = box[0]
        return (mul(g, sub(1.0, mul(y, y))),)

    out = _node(np.tanh(a.data), (a,), vjp, "tanh")
    box.append(out)
    return out


def exp(a):
    box = []
    out = _node(np.exp(a.data), (a,), lambda g: (mul(g, box[0]),), "exp")
    box.append(out)
    return out


def log(a):
    return _node(np.log(a.data), (a,), lambda g: (div(g, a),), "log")


def sqrt(a):
    box = []
    out = _node(np.sqrt(a.data), (a,), lambda g: (div(mul(g, 0.5), box[0]),), "sqrt")
    box.append(out)
    return out


def gather(a, idx):
    """``out[...] = a.flat[idx[...]]``; an index equal to ``a.size`` reads 0."""
    idx = np.asarray(idx, dtype=np.intp)
    n = a.size
    flat = np.concatenate([a.data.reshape(-1), [0.0]])
    shape = a.shape
    return _node(flat[idx], (a,), lambda g: (reshape(_scatter(g, idx, n), shape),), "gather")


def _scatter(g, idx, n):
    """Adjoint of :func:`gather`: accumulate ``g`` into a length-``n`` vector."""
    data = np.bincount(idx.reshape(-1), weights=g.data.reshape(-1), minlength=n + 1)[:n]
    return _node(data, (g,), lambda h: (gather(h, idx),), "scatter")


# -- composite ops -----------------------------------------------------------

def affine(x, w, b):
    """``x @ w + b`` for x (N, in), w (in, out), b (out,)."""
    return add(matmul(x, w), b)


@lru_cache(maxsize=32)
def _im2col_index(n, c, h, w, k, pad):
    ho, wo = h + 2 * pad - k + 1, w + 2 * pad - k + 1
    if ho < 1 or wo < 1:
        raise ShapeError(f"spatial >= {k - 2 * pad}", (h, w), "conv2d input")
    sentinel = n * c * h * w
    ni, ci, di, dj, oi, oj = np.ix_(np.arange(n), np.arange(c), np.arange(k), np.arange(k),
                                    np.arange(ho), np.arange(wo))
    r = oi + di - pad
    s = oj + dj - pad
    valid = (r >= 0) & (r < h) & (s >= 0) & (s < w)
    flat = ((ni * c + ci) * h + np.clip(r, 0, h - 1)) * w + np.clip(s, 0, w - 1)
    flat = np.where(valid, flat, sentinel)
    # (n, c, k, k, ho, wo) -> (n, ho, wo, c, k, k) -> (n*ho*wo, c*k*k)
    flat = flat.transpose(0, 4, 5, 1, 2, 3).reshape(n * ho * wo, c * k * k)
    flat.flags.writeable = False
    return flat, ho, wo


def conv2d(x, w, b=None, padding=0):
    """Stride-1 cross-correlation. x (N, C, H, W), w (O, C, k, k), b (O,)."""
    n, c, h, wd = x.shape
    o, c2, k, k2 = w.shape
    if c != c2 or k != k2:
        raise ShapeError((o, c, k, k), w.shape, "conv2d weight")
    idx, ho, wo = _im2col_index(n, c, h, wd, k, padding)
    cols = gather(x, idx)                                   # (N*P, C*k*k)
    out = matmul(cols, transpose(reshape(w, (o, c * k * k)), None))   # (N*P, O)
    out = transpose(reshape(out, (n, ho * wo, o)), (0, 2, 1))
    out = reshape(out, (n, o, ho, wo))
    if b is not None:
        out = add(out, reshape(b, (1, o, 1, 1)))
    return out


def avg_pool2d(x, size=2):
    n, c, h, w = x.shape
    if h % size or w % size:
        raise ShapeError(f"spatial dims divisible by {size}", (h, w), "avg_pool2d input")
    y = reshape(x, (n, c, h // size, size, w // size, size))
    return mul(tsum(y, (3, 5)), 1.0 / (size * size))


def log_softmax(logits):
    m = Tensor(logits.data.max(axis=1, keepdims=True))
    z = sub(logits, m)
    return sub(z, log(tsum(exp(z), 1, keepdims=True)))


def softmax(logits):
    return exp(log_softmax(logits))


def one_hot(labels, num_classes):
    labels = np.asarray(labels, dtype=np.intp)
    out = np.zeros((labels.size, num_classes))
    out[np.arange(labels.size), labels] = 1.0
    return out


def softmax_cross_entropy(logits, labels, weights=None):
    """Mean cross-entropy of integer ``labels`` under softmax(``logits``).

    With per-sample ``weights`` the result is ``sum_i weights[i] * CE_i``.
    """
    n, num_classes = logits.shape
    labels = np.asarray(labels)
    if labels.shape != (n,):
        raise ShapeError((n,), labels.shape, "labels")
    if labels.size and (labels.min() < 0 or labels.max() >= num_classes):
        raise ConfigError(f"labels must lie in [0, {num_classes})")
    if weights is None:
        picked = tsum(mul(log_softmax(logits), Tensor(one_hot(labels, num_classes))))
        return mul(picked, -1.0 / n)
    sel = one_hot(labels, num_classes) * _sample_weights(weights, n)[:, None]
    return mul(tsum(mul(log_softmax(logits), Tensor(sel))), -1.0)


def _sample_weights(weights, n):
    weights = np.asarray(weights, dtype=np.float64)
    if weights.shape != (n,):
        raise ShapeError((n,), weights.shape, "sample weights")
    return weights


def squared_error(outputs, targets, weights=None):
    """Mean over samples of the summed squared residual (or a weighted sum)."""
    targets = np.asarray(targets, dtype=np.float64).reshape(outputs.shape)
    r = sub(outputs, Tensor(targets))
    n = outputs.shape[0]
    if weights is None:
        return mul(tsum(mul(r, r)), 1.0 / n)
    w = _sample_weights(weights, n).reshape((n,) + (1,) * (r.ndim - 1))
    return tsum(mul(mul(r, r), Tensor(w)))


LOSSES = {"cross_entropy": softmax_cross_entropy, "squared": squared_error}


def get_loss(kind):
    try:
        return LOSSES[kind]
    except KeyError:
        raise ConfigError(f"unknown loss kind {kind!r}; expected one of {sorted(LOSSES)}") from None


# -- differentiation ---------------------------------------------------------

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
        for p in node.parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def grad(output, inputs, create_graph=False):
    """Gradients of scalar ``output`` with respect to each of ``inputs``.

    With ``create_graph=True`` the returned tensors carry their own graph and
    can be differentiated again. Inputs that ``output`` does not depend on
    get zero gradients.
    """
    if output.size != 1:
        raise ShapeError("scalar", output.shape, "grad output")
    grads = {}
    if output.requires_grad:
        ctx = enable_grad() if create_graph else no_grad()
        with ctx:
            grads[id(output)] = Tensor(np.ones_like(output.data))
            for node in reversed(_topo_order(output)):
                g = grads.pop(id(node), None) if node.parents else grads.get(id(node))
                if g is None or node.vjp is None:
                    continue
                for p, pg in zip(node.parents, node.vjp(g)):
                    if pg is None or not p.requires_grad:
                        continue
                    prev = grads.get(id(p))
                    grads[id(p)] = pg if prev is None else add(prev, pg)
    out = []
    for x in inputs:
        g = grads.get(id(x))
        out.append(g if g is not None else Tensor(np.zeros_like(x.data)))
    return out


def finite_diff(f, x, eps=1e-6):
    """Central-difference estimate of the gradient of scalar ``f`` at ``x``."""
    x = np.array(x, dtype=np.float64)
    flat = x.reshape(-1)
    out = np.zeros_like(flat)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        fp = float(f(x))
        flat[i] = orig - eps
        fm = float(f(x))
        flat[i] = orig
        out[i] = (fp - fm) / (2.0 * eps)
    return out.reshape(x.shape)


# -- gradient distances ------------------------------------------------------

@dataclass(frozen=True)
class GradDistance:
    """Distance between two parameter gradients given as per-segment arrays.

    ``cosine`` sums ``1 - cos`` over segments (each term in [0, 2]); a segment
    whose norm is below 1e-10 in either argument contributes exactly 1 and is
    reported as degenerate. ``mse`` is the mean squared difference over all
    entries.
    """

    kind: str = "cosine"
    layer_map: tuple = ()

    def __post_init__(self):
        if self.kind not in ("cosine", "mse"):
            raise ConfigError(f"unknown gradient distance {self.kind!r}")

    def __call__(self, a, b):
        """Returns ``(value Tensor, degenerate segment names)``."""
        a = [_as_tensor(t) for t in a]
        b = [_as_tensor(t) for t in b]
        if len(a) != len(b):
            raise ShapeError(len(a), len(b), "gradient segment count")
        names = self.layer_map or tuple(f"seg{i}" for i in range(len(a)))
        if self.kind == "mse":
            total = Tensor(0.0)
            count = 0
            for ta, tb in zip(a, b):
                d = sub(ta, tb)
                total = add(total, tsum(mul(d, d)))
                count += ta.size
            return mul(total, 1.0 / max(count, 1)), []
        total = Tensor(0.0)
        degenerate = []
        for name, ta, tb in zip(names, a, b):
            na2, nb2 = float(np.sum(ta.data ** 2)), float(np.sum(tb.data ** 2))
            if np.sqrt(na2) < DEGENERATE_NORM or np.sqrt(nb2) < DEGENERATE_NORM:
                degenerate.append(name)
                total = add(total, 1.0)
                continue
            dot = tsum(mul(ta, tb))
            denom = add(mul(sqrt(tsum(mul(ta, ta))), sqrt(tsum(mul(tb, tb)))), COSINE_EPS)
            total = add(total, sub(1.0, div(dot, denom)))
        return total, degenerate

    def value(self, a, b):
        with no_grad():
            v, _ = self(a, b)
        return v.item()


# -- parameter / input gradients ---------------------------------------------

class InputGradient(NamedTuple):
    grad: np.ndarray
    value: float
    degenerate: list


def param_tensors(params, requires_grad=True):
    return [Tensor(a, requires_grad=requires_grad) for a in params.arrays()]


def _diagnose(forward, tensors, params, x):
    for s, t in zip(params.segments, tensors):
        if not np.all(np.isfinite(t.data)):
            return s.name
    layer_outputs = getattr(forward, "layer_outputs", None)
    if layer_outputs is not None:
        with no_grad():
            for name, act in layer_outputs(tensors, x):
                if not np.all(np.isfinite(act.data)):
                    return name
    return "loss"


def loss_and_grad(forward, params, inputs, targets, loss="cross_entropy", weights=None):
    """Returns ``(loss value, gradient ParamVector)``.

    ``weights`` switches the batch mean to a per-sample weighted sum.
    """
    loss_fn = get_loss(loss)
    tensors = param_tensors(params)
    x = Tensor(inputs)
    with enable_grad():
        value = loss_fn(forward(tensors, x), targets, weights)
    if not np.isfinite(value.data):
        layer = _diagnose(forward, tensors, params, x)
        raise NumericError(f"non-finite loss ({value.item()}), first bad layer: {layer}", layer)
    grads = grad(value, tensors)
    return value.item(), params.with_data(np.concatenate([g.data.reshape(-1) for g in grads]))


def grad_params(forward, params, inputs, targets, loss="cross_entropy"):
    """Gradient of the batch loss with respect to every parameter."""
    if len(inputs) == 0:
        raise ConfigError("grad_params needs a nonempty batch")
    return loss_and_grad(forward, params, inputs, targets, loss)[1]


def _matching(forward, params, synth, labels, target_grad, dist, loss, mode, need_input_grad):
    if mode not in ("reverse", "forward"):
        raise ConfigError(f"unknown matching mode {mode!r}")
    if not target_grad.same_layout(params):
        raise ConfigError("target gradient segment map does not match the model")
    loss_fn = get_loss(loss)
    tensors = param_tensors(params)
    s = Tensor(synth, requires_grad=need_input_grad)
    with enable_grad():
        value = loss_fn(forward(tensors, s), labels)
        gs = grad(value, tensors, create_graph=need_input_grad)
        sign = -1.0 if mode == "reverse" else 1.0
        targets = [Tensor(sign * a) for a in target_grad.arrays()]
        d, degenerate = dist(gs, targets)
    return s, d, degenerate


def matching_value(forward, params, synth, labels, target_grad, dist,
                   loss="cross_entropy", mode="reverse"):
    """``dist(grad_theta L(theta, synth), -target)`` (reverse) or ``(..., +target)``."""
    _, d, _ = _matching(forward, params, synth, labels, target_grad, dist, loss, mode, False)
    return d.item()


def grad_synthetic(forward, params, synth, labels, target_grad, dist,
                   loss="cross_entropy", mode="reverse", strict=True):
    """Derivative of the gradient-matching distance with respect to the synthetic inputs.

    In ``reverse`` mode the synthetic gradient is matched against the negated
    ``target_grad``; in ``forward`` mode against ``target_grad`` itself.
    With ``strict`` a degenerate cosine segment raises instead of being
    scored as orthogonal.
    """
    s, d, degenerate = _matching(forward, params, synth, labels, target_grad, dist, loss, mode, True)
    if degenerate and strict:
        raise DegenerateSegmentError(
            f"zero-norm gradient segment(s) under cosine distance: {degenerate}", degenerate)
    if not np.isfinite(d.data):
        raise NumericError("non-finite matching distance", "matching")
    (gs,) = grad(d, [s])
    return InputGradient(gs.data, d.item(), degenerate)
