"""Reverse-mode autodiff on dense float64 numpy arrays.

A ``Tensor`` wraps an ndarray plus an optional place on the gradient tape.
The tape is a DAG built eagerly by the ops below; ``backward()`` walks it in
reverse topological order and accumulates gradients into ``.grad``.

Conventions that make runs bitwise reproducible:

* all arithmetic is float64, all reductions use numpy's native ordering,
* graph traversal order is fixed by construction order,
* masked softmax treats any logit <= MASK_SENTINEL as minus infinity, so
  masked entries receive probability exactly 0.0 (via exp(-inf) == 0.0).

Parameters are mutated in place by optimizers; ``detach()`` therefore copies.
"""

from __future__ import annotations

import numpy as np

from .errors import NumericalError

# Logit value treated as minus infinity by the masked softmax. Chosen large
# enough that no genuine activation reaches it at this model scale.
MASK_SENTINEL = -1.0e30

_grad_enabled = True
_finite_checks = False


class no_grad:
    """Context manager that suppresses tape construction."""

    def __enter__(self):
        global _grad_enabled
        self._prev = _grad_enabled
        _grad_enabled = False
        return self

    def __exit__(self, exc_type, exc, tb):
        global _grad_enabled
        _grad_enabled = self._prev
        return False


def set_finite_checks(enabled):
    """Toggle per-op NaN/Inf validation of freshly produced values.

    Off by default; tests switch it on to localize numerical failures.
    Returns the previous setting.
    """
    global _finite_checks
    prev = _finite_checks
    _finite_checks = bool(enabled)
    return prev


def _validate_finite(data, opname):
    if not np.all(np.isfinite(data)):
        raise NumericalError(f"non-finite values produced by op '{opname}'")


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad=False):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad = None
        self.requires_grad = bool(requires_grad) and _grad_enabled
        self._parents = ()
        self._backward = None

    # -- construction ------------------------------------------------------

    @staticmethod
    def _from_op(data, parents, backward, opname):
        if _finite_checks:
            _validate_finite(data, opname)
        t = Tensor.__new__(Tensor)
        t.data = data
        t.grad = None
        if _grad_enabled and any(p.requires_grad for p in parents):
            t.requires_grad = True
            t._parents = tuple(parents)
            t._backward = backward
        else:
            t.requires_grad = False
            t._parents = ()
            t._backward = None
        return t

    # -- basic introspection ----------------------------------------------

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def item(self):
        return float(self.data)

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.data.shape}{flag})"

    def zero_grad(self):
        self.grad = None

    def check_finite(self, label="tensor"):
        """Raise NumericalError if any stored value is NaN or infinite."""
        if not np.all(np.isfinite(self.data)):
            raise NumericalError(f"non-finite values in {label}")
        return self

    def detach(self):
        """Constant copy with no tape history."""
        return Tensor(self.data.copy())

    # -- arithmetic --------------------------------------------------------

    def __add__(self, other):
        if isinstance(other, Tensor):
            a, b = self, other
            out = a.data + b.data

            def backward(g):
                return _unbroadcast(g, a.data.shape), _unbroadcast(g, b.data.shape)

            return Tensor._from_op(out, (a, b), backward, "add")
        c = np.asarray(other, dtype=np.float64)
        out = self.data + c

        def backward(g):
            return (_unbroadcast(g, self.data.shape),)

        return Tensor._from_op(out, (self,), backward, "add")

    __radd__ = __add__

    def __neg__(self):
        out = -self.data

        def backward(g):
            return (-g,)

        return Tensor._from_op(out, (self,), backward, "neg")

    def __sub__(self, other):
        if isinstance(other, Tensor):
            a, b = self, other
            out = a.data - b.data

            def backward(g):
                return _unbroadcast(g, a.data.shape), -_unbroadcast(g, b.data.shape)

            return Tensor._from_op(out, (a, b), backward, "sub")
        return self + (-np.asarray(other, dtype=np.float64))

    def __rsub__(self, other):
        return (-self) + other

    def __mul__(self, other):
        if isinstance(other, Tensor):
            a, b = self, other
            out = a.data * b.data

            def backward(g):
                return (
                    _unbroadcast(g * b.data, a.data.shape),
                    _unbroadcast(g * a.data, b.data.shape),
                )

            return Tensor._from_op(out, (a, b), backward, "mul")
        c = np.asarray(other, dtype=np.float64)
        out = self.data * c

        def backward(g):
            return (_unbroadcast(g * c, self.data.shape),)

        return Tensor._from_op(out, (self,), backward, "mul")

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            a, b = self, other
            out = a.data / b.data

            def backward(g):
                return (
                    _unbroadcast(g / b.data, a.data.shape),
                    _unbroadcast(-g * a.data / (b.data * b.data), b.data.shape),
                )

            return Tensor._from_op(out, (a, b), backward, "div")
        return self * (1.0 / np.asarray(other, dtype=np.float64))

    def __rtruediv__(self, other):
        c = np.asarray(other, dtype=np.float64)
        out = c / self.data

        def backward(g):
            return (_unbroadcast(-g * c / (self.data * self.data), self.data.shape),)

        return Tensor._from_op(out, (self,), backward, "rdiv")

    def __pow__(self, exponent):
        e = float(exponent)
        out = self.data**e

        def backward(g):
            return (g * e * self.data ** (e - 1.0),)

        return Tensor._from_op(out, (self,), backward, "pow")

    def __matmul__(self, other):
        return matmul(self, other)

    # -- shape ops ---------------------------------------------------------

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        old = self.data.shape
        out = self.data.reshape(shape)

        def backward(g):
            return (g.reshape(old),)

        return Tensor._from_op(out, (self,), backward, "reshape")

    def transpose(self, axes):
        axes = tuple(axes)
        inv = tuple(np.argsort(axes))
        out = np.ascontiguousarray(self.data.transpose(axes))

        def backward(g):
            return (np.ascontiguousarray(g.transpose(inv)),)

        return Tensor._from_op(out, (self,), backward, "transpose")

    @property
    def T(self):
        if self.data.ndim != 2:
            raise ValueError(f".T requires a 2-d tensor, got shape {self.data.shape}")
        return self.transpose((1, 0))

    # -- reductions --------------------------------------------------------

    def sum(self, axis=None, keepdims=False):
        out = self.data.sum(axis=axis, keepdims=keepdims)
        shape = self.data.shape
        norm_axis = _normalize_axis(axis, self.data.ndim)

        def backward(g):
            g2 = g
            if not keepdims and norm_axis is not None:
                g2 = np.expand_dims(g, norm_axis)
            return (np.broadcast_to(g2, shape).copy(),)

        return Tensor._from_op(np.asarray(out), (self,), backward, "sum")

    def mean(self, axis=None, keepdims=False):
        if axis is None:
            count = self.data.size
        else:
            norm = _normalize_axis(axis, self.data.ndim)
            count = 1
            for ax in norm:
                count *= self.data.shape[ax]
        return self.sum(axis=axis, keepdims=keepdims) * (1.0 / count)

    # -- elementwise -------------------------------------------------------

    def exp(self):
        out = np.exp(self.data)

        def backward(g):
            return (g * out,)

        return Tensor._from_op(out, (self,), backward, "exp")

    def log(self):
        out = np.log(self.data)

        def backward(g):
            return (g / self.data,)

        return Tensor._from_op(out, (self,), backward, "log")

    def silu(self):
        # exp(-logaddexp(0, -x)) is a stable sigmoid on both tails
        s = np.exp(-np.logaddexp(0.0, -self.data))
        out = self.data * s

        def backward(g):
            return (g * s * (1.0 + self.data * (1.0 - s)),)

        return Tensor._from_op(out, (self,), backward, "silu")

    # -- backward pass -----------------------------------------------------

    def backward(self):
        if self.data.size != 1:
            raise ValueError(
                f"backward() requires a scalar, got shape {self.data.shape}"
            )
        topo = []
        seen = set()
        stack = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                topo.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            # reversed so parents are visited in construction order
            for parent in reversed(node._parents):
                if id(parent) not in seen:
                    stack.append((parent, False))
        self.grad = np.ones_like(self.data)
        for node in reversed(topo):
            if node._backward is None:
                continue
            grads = node._backward(node.grad)
            for parent, g in zip(node._parents, grads):
                if g is None or not parent.requires_grad:
                    continue
                if parent.grad is None:
                    parent.grad = np.zeros_like(parent.data)
                parent.grad += g


def _unbroadcast(g, shape):
    """Sum a broadcast gradient back down to the original shape."""
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def _normalize_axis(axis, ndim):
    if axis is None:
        return None
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(a % ndim for a in axis)


# -- multi-tensor ops ------------------------------------------------------


def matmul(a, b):
    """Matrix product. Supports [..., m, n] @ [n, p] and batched nd @ nd."""
    ad, bd = a.data, b.data
    if ad.ndim < 2 or bd.ndim < 2:
        raise ValueError(f"matmul requires >=2-d operands, got {ad.shape} @ {bd.shape}")
    if ad.shape[-1] != bd.shape[-2]:
        raise ValueError(f"matmul inner dimensions differ: {ad.shape} @ {bd.shape}")
    if bd.ndim == 2:
        out = ad @ bd

        def backward(g):
            ga = g @ bd.T
            contract = tuple(range(ad.ndim - 1))
            gb = np.tensordot(ad, g, axes=(contract, contract))
            return ga, gb

        return Tensor._from_op(out, (a, b), backward, "matmul")
    if ad.shape[:-2] != bd.shape[:-2]:
        raise ValueError(f"matmul batch dimensions differ: {ad.shape} @ {bd.shape}")
    out = np.matmul(ad, bd)

    def backward(g):
        ga = np.matmul(g, bd.swapaxes(-1, -2))
        gb = np.matmul(ad.swapaxes(-1, -2), g)
        return ga, gb

    return Tensor._from_op(out, (a, b), backward, "matmul")


def matmul_t(a, b):
    """Product against a transposed weight: [..., m, n] @ [p, n]^T -> [..., m, p].

    Lets weights live in [out, in] orientation without materializing a
    transposed copy on every call.
    """
    ad, bd = a.data, b.data
    if ad.ndim < 2 or bd.ndim != 2:
        raise ValueError(
            f"matmul_t requires [..., m, n] @ [p, n], got {ad.shape} @ {bd.shape}"
        )
    if ad.shape[-1] != bd.shape[-1]:
        raise ValueError(f"matmul_t inner dimensions differ: {ad.shape} @ {bd.shape}")
    out = ad @ bd.T

    def backward(g):
        ga = g @ bd
        contract = tuple(range(ad.ndim - 1))
        gb = np.tensordot(g, ad, axes=(contract, contract))
        return ga, gb

    return Tensor._from_op(out, (a, b), backward, "matmul_t")


def take_rows(x, idx):
    """Gather rows of ``x`` along axis 0: out[...] = x[idx[...]].

    ``idx`` is an integer ndarray of any shape; the result has shape
    ``idx.shape + x.shape[1:]``. Backward scatter-adds (duplicates allowed).
    """
    idx = np.asarray(idx)
    if idx.size and (idx.min() < 0 or idx.max() >= x.data.shape[0]):
        raise IndexError(
            f"take_rows index out of range [0, {x.data.shape[0]}): "
            f"min={idx.min()}, max={idx.max()}"
        )
    out = x.data[idx]

    def backward(g):
        gx = np.zeros_like(x.data)
        np.add.at(gx, idx, g)
        return (gx,)

    return Tensor._from_op(out, (x,), backward, "take_rows")


def scatter_rows(values, idx, num_rows):
    """Place rows into a zero tensor: out[idx[j]] = values[j].

    ``idx`` must contain unique indices (the caller guarantees this; expert
    dispatch produces sorted unique token positions).
    """
    idx = np.asarray(idx)
    out = np.zeros((num_rows,) + values.data.shape[1:], dtype=np.float64)
    out[idx] = values.data

    def backward(g):
        return (g[idx],)

    return Tensor._from_op(out, (values,), backward, "scatter_rows")


def gather_lastdim(x, idx):
    """out[...] = x[..., idx[...]] with idx.shape == x.shape[:-1]."""
    idx = np.asarray(idx)
    if idx.shape != x.data.shape[:-1]:
        raise ValueError(
            f"gather_lastdim index shape {idx.shape} != leading shape "
            f"{x.data.shape[:-1]}"
        )
    out = np.take_along_axis(x.data, idx[..., None], axis=-1)[..., 0]

    def backward(g):
        gx = np.zeros_like(x.data)
        np.put_along_axis(gx, idx[..., None], g[..., None], axis=-1)
        return (gx,)

    return Tensor._from_op(out, (x,), backward, "gather_lastdim")


def masked_fill(x, mask, value):
    """Replace entries where ``mask`` is True by ``value`` (constant)."""
    mask = np.asarray(mask, dtype=bool)
    out = np.where(mask, float(value), x.data)

    def backward(g):
        return (np.where(mask, 0.0, g),)

    return Tensor._from_op(out, (x,), backward, "masked_fill")


def repeat_axis(x, repeats, axis):
    """Repeat each slice along ``axis`` consecutively ``repeats`` times."""
    out = np.repeat(x.data, repeats, axis=axis)
    shape = x.data.shape
    axis = axis % x.data.ndim

    def backward(g):
        folded = g.reshape(shape[:axis] + (shape[axis], repeats) + shape[axis + 1 :])
        return (folded.sum(axis=axis + 1),)

    return Tensor._from_op(out, (x,), backward, "repeat_axis")


def narrow(x, axis, start, length):
    """Contiguous slice [start, start+length) along ``axis``."""
    axis = axis % x.data.ndim
    if start < 0 or start + length > x.data.shape[axis]:
        raise ValueError(
            f"narrow range [{start}, {start + length}) exceeds axis size "
            f"{x.data.shape[axis]}"
        )
    sl = (slice(None),) * axis + (slice(start, start + length),)
    out = x.data[sl].copy()

    def backward(g):
        gx = np.zeros_like(x.data)
        gx[sl] = g
        return (gx,)

    return Tensor._from_op(out, (x,), backward, "narrow")


def concat(tensors, axis):
    """Concatenate along ``axis``; backward splits the gradient."""
    axis = axis % tensors[0].data.ndim
    datas = [t.data for t in tensors]
    out = np.concatenate(datas, axis=axis)
    sizes = [d.shape[axis] for d in datas]

    def backward(g):
        pieces = []
        offset = 0
        for size in sizes:
            sl = (slice(None),) * axis + (slice(offset, offset + size),)
            pieces.append(g[sl])
            offset += size
        return tuple(pieces)

    return Tensor._from_op(out, tuple(tensors), backward, "concat")


def softmax_lastdim(x):
    """Softmax over the last axis with sentinel masking.

    Entries <= MASK_SENTINEL are treated as minus infinity and receive
    probability exactly 0.0. Max-subtraction keeps the exponentials in
    range, so [1000, 0] maps to [1.0, 0.0] without overflow.
    """
    xd = x.data
    masked = xd <= MASK_SENTINEL
    if masked.all(axis=-1).any():
        raise NumericalError("degenerate softmax: a slice has every entry masked")
    shifted = np.where(masked, -np.inf, xd)
    shifted = shifted - shifted.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    p = e / e.sum(axis=-1, keepdims=True)

    def backward(g):
        inner = (g * p).sum(axis=-1, keepdims=True)
        return (p * (g - inner),)

    return Tensor._from_op(p, (x,), backward, "softmax_lastdim")


def log_softmax_lastdim(x):
    """Log-softmax over the last axis (no sentinel masking: logits must be
    genuine finite values, as in vocabulary distributions)."""
    xd = x.data
    mx = xd.max(axis=-1, keepdims=True)
    shifted = xd - mx
    lse = np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
    out = shifted - lse

    def backward(g):
        p = np.exp(out)
        return (g - p * g.sum(axis=-1, keepdims=True),)

    return Tensor._from_op(out, (x,), backward, "log_softmax_lastdim")


def entropy_lastdim(logits):
    """Shannon entropy (nats) of softmax(logits) along the last axis.

    Pure numpy: accepts an ndarray, returns an ndarray, builds no tape.
    Sentinel-masked entries contribute exactly zero.
    """
    xd = np.asarray(logits, dtype=np.float64)
    masked = xd <= MASK_SENTINEL
    shifted = np.where(masked, -np.inf, xd)
    shifted = shifted - shifted.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    p = e / e.sum(axis=-1, keepdims=True)
    plogp = np.where(p > 0.0, p * np.log(np.where(p > 0.0, p, 1.0)), 0.0)
    return -plogp.sum(axis=-1)
