"""A small reverse-mode autodiff engine over numpy arrays.

Only what a byte-level GPT needs: matmul (2-D and batched), elementwise
add/mul/scale, gelu, layer norm, embedding gather, causal masked softmax and
softmax cross-entropy. Every op records a closure that maps the output
gradient to its parents' gradients; ``Tensor.backward`` walks the graph in
reverse topological order.
"""

from __future__ import annotations

import contextlib
import hashlib

import numpy as np

from . import kernels

LN_EPS = 1e-5

_grad_enabled = True


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block (used for evaluation)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


class ShapeError(ValueError):
    """Operand extents are incompatible."""


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "name")

    def __init__(self, data, requires_grad=False, name=None):
        self.data = np.asarray(data)
        if self.data.dtype.kind != "f":
            self.data = self.data.astype(np.float64)
        self.grad = None
        self.requires_grad = requires_grad
        self._parents = ()
        self._backward = None
        self.name = name

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def __repr__(self):
        tag = f", name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{tag})"

    def numpy(self):
        return self.data

    def item(self):
        return float(self.data)

    def zero_grad(self):
        self.grad = None

    def _accumulate(self, g):
        # never in-place: the same array may have been handed to several parents
        if self.grad is None:
            self.grad = g
        else:
            self.grad = self.grad + g

    def backward(self, grad=None):
        """Backpropagate from this tensor; a scalar by default seeds grad 1."""
        if grad is None:
            if self.data.size != 1:
                raise ShapeError("backward() without a seed needs a scalar output")
            grad = np.ones_like(self.data)
        order = []
        seen = set()
        stack = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if id(p) not in seen and p.requires_grad:
                    stack.append((p, False))
        self._accumulate(np.asarray(grad, dtype=self.dtype))
        for node in reversed(order):
            if node._backward is None or node.grad is None:
                continue
            grads = node._backward(node.grad)
            for p, g in zip(node._parents, grads):
                if g is not None and p.requires_grad:
                    p._accumulate(g)
            # interior grads are not needed once propagated
            if node._parents:
                node.grad = None

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    def __mul__(self, other):
        if isinstance(other, Tensor):
            return mul(self, other)
        return scale(self, other)

    __rmul__ = __mul__

    def __matmul__(self, other):
        return matmul(self, other)


def _as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def _result(data, parents, backward):
    out = Tensor(data)
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = backward
    return out


def _unbroadcast(g, shape):
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


# ---------------------------------------------------------------- elementwise


def add(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    out = a.data + b.data

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _result(out, (a, b), backward)


def mul(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    out = a.data * b.data

    def backward(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _result(out, (a, b), backward)


def scale(a, c):
    """Multiply by a Python scalar constant."""
    a = _as_tensor(a)
    c = float(c)
    out = a.data * a.dtype.type(c)

    def backward(g):
        return (g * g.dtype.type(c),)

    return _result(out, (a,), backward)


def gelu(x):
    x = _as_tensor(x)
    out, th = kernels.gelu_fwd(x.data)

    def backward(g):
        return (kernels.gelu_bwd(g, x.data, th),)

    return _result(out, (x,), backward)


# ---------------------------------------------------------------- shape ops


def reshape(x, shape):
    x = _as_tensor(x)
    src = x.shape

    def backward(g):
        return (g.reshape(src),)

    return _result(x.data.reshape(shape), (x,), backward)


def transpose(x, axes):
    x = _as_tensor(x)
    inv = tuple(np.argsort(axes))

    def backward(g):
        return (np.ascontiguousarray(g.transpose(inv)),)

    return _result(np.ascontiguousarray(x.data.transpose(axes)), (x,), backward)


# ---------------------------------------------------------------- linear algebra


def matmul(a, b):
    """``a @ b`` for 2-D operands, (..., m, k) @ (k, n), or equal-rank batches."""
    a, b = _as_tensor(a), _as_tensor(b)
    if a.data.ndim < 2 or b.data.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    if b.data.ndim > 2 and b.shape[:-2] != a.shape[:-2]:
        raise ShapeError(f"matmul: batch extents differ {a.shape} vs {b.shape}")
    out = np.matmul(a.data, b.data)

    def backward(g):
        ga = gb = None
        if a.requires_grad:
            ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
        if b.requires_grad:
            if b.data.ndim == 2:
                k = a.shape[-1]
                gb = a.data.reshape(-1, k).T @ g.reshape(-1, g.shape[-1])
            else:
                gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
        return ga, gb

    return _result(out, (a, b), backward)


# ---------------------------------------------------------------- normalization


def layer_norm(x, gain, bias, eps=LN_EPS):
    x, gain, bias = _as_tensor(x), _as_tensor(gain), _as_tensor(bias)
    d = x.shape[-1]
    if gain.shape != (d,) or bias.shape != (d,):
        raise ShapeError(f"layer_norm: feature extent {d} vs gain {gain.shape}, bias {bias.shape}")
    x2 = np.ascontiguousarray(x.data.reshape(-1, d))
    y, mean, rstd = kernels.layernorm_fwd(x2, gain.data, bias.data, eps)

    def backward(g):
        g2 = np.ascontiguousarray(g.reshape(-1, d))
        gx, gg, gb = kernels.layernorm_bwd(g2, x2, mean, rstd, gain.data)
        return gx.reshape(x.shape), gg, gb

    return _result(y.reshape(x.shape), (x, gain, bias), backward)


# ---------------------------------------------------------------- attention / loss


def causal_softmax(x, scale=1.0):
    """Softmax of ``scale * x`` over the last axis with keys after the query masked.

    ``x`` has shape (..., T, T); entry [i, j] with j > i gets probability 0.
    """
    x = _as_tensor(x)
    t = x.shape[-1]
    if x.data.ndim < 2 or x.shape[-2] != t:
        raise ShapeError(f"causal_softmax: expects (..., T, T), got {x.shape}")
    lead = x.shape[:-2]
    x3 = np.ascontiguousarray(x.data.reshape(-1, t, t))
    p = kernels.causal_softmax_fwd(x3, scale)

    def backward(g):
        g3 = np.ascontiguousarray(g.reshape(-1, t, t))
        return (kernels.causal_softmax_bwd(g3, p, scale).reshape(lead + (t, t)),)

    return _result(p.reshape(lead + (t, t)), (x,), backward)


def softmax_cross_entropy(logits, targets):
    """Mean over rows of -log softmax(logits)[target]."""
    logits = _as_tensor(logits)
    if logits.data.ndim != 2:
        raise ShapeError(f"softmax_cross_entropy: expects (B, V) logits, got {logits.shape}")
    n, v = logits.shape
    targets = np.ascontiguousarray(targets, dtype=np.int64).reshape(-1)
    if targets.shape[0] != n:
        raise ShapeError(f"softmax_cross_entropy: {targets.shape[0]} targets for {n} rows")
    if n and (targets.min() < 0 or targets.max() >= v):
        raise IndexError(f"target out of range [0, {v})")
    loss, probs = kernels.xent_fwd(np.ascontiguousarray(logits.data), targets)

    def backward(g):
        return (kernels.xent_bwd(probs, targets, float(g)),)

    return _result(np.asarray(loss, dtype=logits.dtype), (logits,), backward)


def embedding(table, ids):
    """Gather rows of a (V, d) table by integer ids of any shape."""
    table = _as_tensor(table)
    ids = np.ascontiguousarray(ids, dtype=np.int64)
    vocab, d = table.shape
    if ids.size and (ids.min() < 0 or ids.max() >= vocab):
        raise IndexError(f"embedding id out of range [0, {vocab})")
    out = table.data[ids]

    def backward(g):
        g2 = np.ascontiguousarray(g.reshape(-1, d))
        return (kernels.embedding_bwd(g2, ids.reshape(-1), vocab),)

    return _result(out, (table,), backward)


# ---------------------------------------------------------------- randomness


def stream_id(name):
    """Stable 64-bit stream id for a string key (independent of PYTHONHASHSEED)."""
    return int.from_bytes(hashlib.blake2b(name.encode(), digest_size=8).digest(), "little")


class Rng:
    """Counter-based Gaussian source keyed by (seed, stream_id).

    Backed by numpy's Philox, so each stream is independent of how many
    draws other streams have made.
    """

    def __init__(self, seed, stream_id=0):
        self.seed = int(seed) & 0xFFFFFFFFFFFFFFFF
        self.stream_id = int(stream_id) & 0xFFFFFFFFFFFFFFFF
        bitgen = np.random.Philox(key=[self.seed, self.stream_id])
        self._gen = np.random.Generator(bitgen)

    @classmethod
    def for_name(cls, seed, name):
        return cls(seed, stream_id(name))

    def normal(self, shape):
        return self._gen.standard_normal(shape)

    def uniform(self, n):
        return self._gen.random(n)


def gaussian(rng, shape, std, dtype=np.float32):
    """Tensor of i.i.d. N(0, std^2) samples; std == 0 gives exact zeros."""
    if std < 0:
        raise ValueError(f"std must be non-negative, got {std}")
    return Tensor(gaussian_array(rng, shape, std, dtype))


def gaussian_array(rng, shape, std, dtype=np.float32):
    shape = tuple(shape)
    if std == 0:
        return np.zeros(shape, dtype=dtype)
    return (std * rng.normal(shape)).astype(dtype)
