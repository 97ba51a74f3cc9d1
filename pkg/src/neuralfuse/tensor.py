"""Reverse-mode automatic differentiation on numpy arrays.

Every op returns a new :class:`Tensor` that remembers its parents and a
closure propagating the output gradient back to them. The tape lives on the
tensors themselves, so independent forward/backward passes never share
mutable state.
"""
from __future__ import annotations

import numpy as np

DTYPE = np.float64


class StateError(RuntimeError):
    """Raised when backward is requested on a value without a recorded tape."""


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "name")

    def __init__(self, data, requires_grad=False, _parents=(), _backward=None, name=None):
        self.data = np.asarray(data, dtype=DTYPE)
        self.grad = None
        self.requires_grad = requires_grad
        self._parents = _parents
        self._backward = _backward
        self.name = name

    @property
    def shape(self):
        return self.data.shape

    @property
    def size(self):
        return self.data.size

    def numpy(self):
        return self.data

    def item(self):
        return float(self.data)

    def detach(self):
        return Tensor(self.data)

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    def _accumulate(self, g):
        if self.grad is None:
            self.grad = np.array(g, dtype=DTYPE, copy=True)
        else:
            self.grad += g

    def backward(self, grad=None):
        """Propagate ``grad`` (default 1 for scalars) to every leaf on the tape.

        Leaf gradients accumulate across calls; intermediate gradients are reset
        first so the same tape can be walked more than once.
        """
        if not self.requires_grad:
            raise StateError("backward() on a tensor with no recorded tape")
        if grad is None:
            if self.data.size != 1:
                raise StateError("backward() without a seed gradient needs a scalar")
            grad = np.ones_like(self.data)
        order = _topo(self)
        for node in order:
            if node._parents:
                node.grad = None
        self._accumulate(np.asarray(grad, dtype=DTYPE))
        for node in reversed(order):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)

    # operator sugar; all routed through the functional ops below
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return mul(self, -1.0)

    def __sub__(self, other):
        return add(self, mul(_wrap(other), -1.0))

    def sum(self):
        return tsum(self)

    def mean(self):
        return mean(self)


def _topo(root):
    order, seen, stack = [], set(), [(root, False)]
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


def _wrap(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data, parents, backward):
    parents = tuple(p for p in parents if p.requires_grad)
    if not parents:
        return Tensor(data)
    return Tensor(data, requires_grad=True, _parents=parents, _backward=backward)


def _unbroadcast(g, shape):
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


# ---------------------------------------------------------------- elementwise

def add(a, b):
    a, b = _wrap(a), _wrap(b)

    def backward(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(g, b.shape))

    return _make(a.data + b.data, (a, b), backward)


def mul(a, b):
    a, b = _wrap(a), _wrap(b)

    def backward(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g * b.data, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(g * a.data, b.shape))

    return _make(a.data * b.data, (a, b), backward)


def tsum(a):
    def backward(g):
        a._accumulate(np.broadcast_to(g, a.shape))

    return _make(a.data.sum(), (a,), backward)


def mean(a):
    n = a.data.size

    def backward(g):
        a._accumulate(np.broadcast_to(g / n, a.shape))

    return _make(a.data.mean(), (a,), backward)


def relu(x):
    mask = x.data > 0

    def backward(g):
        x._accumulate(g * mask)

    return _make(x.data * mask, (x,), backward)


def tanh(x):
    y = np.tanh(x.data)

    def backward(g):
        x._accumulate(g * (1.0 - y * y))

    return _make(y, (x,), backward)


def clip(x, lo=-1.0, hi=1.0):
    """Clamp to ``[lo, hi]``; gradient passes only strictly inside the interval."""
    inside = (x.data > lo) & (x.data < hi)

    def backward(g):
        x._accumulate(g * inside)

    return _make(np.clip(x.data, lo, hi), (x,), backward)


def reshape(x, shape):
    def backward(g):
        x._accumulate(g.reshape(x.shape))

    return _make(x.data.reshape(shape), (x,), backward)


def concat(xs, axis=1):
    sizes = [t.shape[axis] for t in xs]
    bounds = np.cumsum([0] + sizes)

    def backward(g):
        for t, lo, hi in zip(xs, bounds[:-1], bounds[1:]):
            if t.requires_grad:
                t._accumulate(np.take(g, np.arange(lo, hi), axis=axis))

    return _make(np.concatenate([t.data for t in xs], axis=axis), xs, backward)


# ---------------------------------------------------------------- layers

def _im2col(xp, k, stride, ho, wo):
    b, c = xp.shape[:2]
    cols = np.empty((b, c, k, k, ho, wo), dtype=DTYPE)
    for i in range(k):
        for j in range(k):
            cols[:, :, i, j] = xp[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride]
    return cols.reshape(b, c * k * k, ho * wo)


def _col2im(cols, shape, k, stride, ho, wo):
    # shape is the padded (B, C, H, W); overlapping windows add up
    b, c = shape[:2]
    cols = cols.reshape(b, c, k, k, ho, wo)
    out = np.zeros(shape, dtype=DTYPE)
    for i in range(k):
        for j in range(k):
            out[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += cols[:, :, i, j]
    return out


def conv2d(x, w, b=None, stride=1, padding=0):
    """Cross-correlation; ``w`` is (Cout, Cin, k, k)."""
    bsz, cin, h, wd = x.shape
    cout, _, k, _ = w.shape
    ho = (h + 2 * padding - k) // stride + 1
    wo = (wd + 2 * padding - k) // stride + 1
    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else x.data
    cols = _im2col(xp, k, stride, ho, wo)
    w2 = w.data.reshape(cout, -1)
    out = np.matmul(w2, cols)
    if b is not None:
        out += b.data[None, :, None]
    out = out.reshape(bsz, cout, ho, wo)

    def backward(g):
        g2 = g.reshape(bsz, cout, ho * wo)
        if w.requires_grad:
            w._accumulate(np.tensordot(g2, cols, axes=([0, 2], [0, 2])).reshape(w.shape))
        if b is not None and b.requires_grad:
            b._accumulate(g2.sum(axis=(0, 2)))
        if x.requires_grad:
            dxp = _col2im(np.matmul(w2.T, g2), xp.shape, k, stride, ho, wo)
            if padding:
                dxp = dxp[:, :, padding:padding + h, padding:padding + wd]
            x._accumulate(dxp)

    parents = (x, w) if b is None else (x, w, b)
    return _make(out, parents, backward)


def conv_transpose2d(x, w, b=None, stride=2, padding=0):
    """Transposed convolution; ``w`` is (Cin, Cout, k, k)."""
    bsz, cin, h, wd = x.shape
    _, cout, k, _ = w.shape
    full_h = (h - 1) * stride + k
    full_w = (wd - 1) * stride + k
    ho, wo = full_h - 2 * padding, full_w - 2 * padding
    w2 = w.data.reshape(cin, cout * k * k)
    x2 = x.data.reshape(bsz, cin, h * wd)
    full = _col2im(np.matmul(w2.T, x2), (bsz, cout, full_h, full_w), k, stride, h, wd)
    out = full[:, :, padding:padding + ho, padding:padding + wo]
    if b is not None:
        out = out + b.data[None, :, None, None]

    def backward(g):
        gp = np.pad(g, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else g
        cols = _im2col(gp, k, stride, h, wd)
        if w.requires_grad:
            w._accumulate(np.tensordot(x2, cols, axes=([0, 2], [0, 2])).reshape(w.shape))
        if b is not None and b.requires_grad:
            b._accumulate(g.sum(axis=(0, 2, 3)))
        if x.requires_grad:
            x._accumulate(np.matmul(w2, cols).reshape(x.shape))

    parents = (x, w) if b is None else (x, w, b)
    return _make(np.ascontiguousarray(out), parents, backward)


def max_pool2x2(x):
    bsz, c, h, wd = x.shape
    win = (x.data.reshape(bsz, c, h // 2, 2, wd // 2, 2)
           .transpose(0, 1, 2, 4, 3, 5).reshape(bsz, c, h // 2, wd // 2, 4))
    # argmax returns the first maximum in scan order, which fixes tie routing
    idx = win.argmax(axis=-1)
    out = np.take_along_axis(win, idx[..., None], axis=-1)[..., 0]

    def backward(g):
        sel = np.zeros(win.shape, dtype=DTYPE)
        np.put_along_axis(sel, idx[..., None], g[..., None], axis=-1)
        x._accumulate(sel.reshape(bsz, c, h // 2, wd // 2, 2, 2)
                      .transpose(0, 1, 2, 4, 3, 5).reshape(x.shape))

    return _make(out, (x,), backward)


def upsample2x(x):
    bsz, c, h, wd = x.shape
    out = x.data.repeat(2, axis=2).repeat(2, axis=3)

    def backward(g):
        x._accumulate(g.reshape(bsz, c, h, 2, wd, 2).sum(axis=(3, 5)))

    return _make(out, (x,), backward)


def batch_norm(x, gamma, beta, running_mean, running_var, train, momentum=0.1, eps=1e-5):
    """Per-channel normalization over every axis except 1.

    In train mode batch statistics are used and the running buffers are
    updated in place; in eval mode the running buffers are used.
    """
    axes = (0,) + tuple(range(2, x.data.ndim))
    bshape = [1] * x.data.ndim
    bshape[1] = x.shape[1]
    if train:
        mu = x.data.mean(axis=axes)
        var = x.data.var(axis=axes)
        n = x.data.size // x.shape[1]
        running_mean *= 1 - momentum
        running_mean += momentum * mu
        running_var *= 1 - momentum
        running_var += momentum * var * n / max(n - 1, 1)
    else:
        mu, var = running_mean, running_var
    invstd = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mu.reshape(bshape)) * invstd.reshape(bshape)
    out = xhat * gamma.data.reshape(bshape) + beta.data.reshape(bshape)

    def backward(g):
        if gamma.requires_grad:
            gamma._accumulate((g * xhat).sum(axis=axes))
        if beta.requires_grad:
            beta._accumulate(g.sum(axis=axes))
        if x.requires_grad:
            dxhat = g * gamma.data.reshape(bshape)
            if train:
                m = x.data.size // x.shape[1]
                s1 = dxhat.sum(axis=axes).reshape(bshape)
                s2 = (dxhat * xhat).sum(axis=axes).reshape(bshape)
                dx = (dxhat - s1 / m - xhat * s2 / m) * invstd.reshape(bshape)
            else:
                dx = dxhat * invstd.reshape(bshape)
            x._accumulate(dx)

    return _make(out, (x, gamma, beta), backward)


def linear(x, w, b=None):
    """``x`` is flattened past the batch axis; ``w`` is (out, in)."""
    x2 = x.data.reshape(x.shape[0], -1)
    out = x2 @ w.data.T
    if b is not None:
        out = out + b.data

    def backward(g):
        if w.requires_grad:
            w._accumulate(g.T @ x2)
        if b is not None and b.requires_grad:
            b._accumulate(g.sum(axis=0))
        if x.requires_grad:
            x._accumulate((g @ w.data).reshape(x.shape))

    parents = (x, w) if b is None else (x, w, b)
    return _make(out, parents, backward)


def log_softmax(logits):
    z = logits - logits.max(axis=1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=1, keepdims=True))


def cross_entropy(logits, labels):
    """Mean softmax cross-entropy over the batch; ``labels`` are class ids."""
    labels = np.asarray(labels)
    n = logits.shape[0]
    logp = log_softmax(logits.data)
    loss = -logp[np.arange(n), labels].mean()

    def backward(g):
        d = np.exp(logp)
        d[np.arange(n), labels] -= 1.0
        logits._accumulate(g * d / n)

    return _make(loss, (logits,), backward)
