"""Dense tensors with tape-recorded reverse-mode differentiation."""

from __future__ import annotations

import numpy as np

_tapes = []
_debug = False


def set_debug(flag=True):
    """Check every forward result for NaN/Inf."""
    global _debug
    _debug = bool(flag)


class Tensor:
    """A numpy buffer that can take part in recorded computations."""

    def __init__(self, data, requires_grad=False, name=None):
        self.data = data if isinstance(data, np.ndarray) else np.asarray(data)
        self.requires_grad = requires_grad
        self.grad = None
        self.node_id = None
        self.name = name

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def ndim(self):
        return self.data.ndim

    def numpy(self):
        return self.data

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        label = f" {self.name!r}" if self.name else ""
        return f"Tensor{label}(shape={self.shape}, dtype={self.dtype}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return add(self, scale(other, -1.0))

    def __mul__(self, c):
        return scale(self, c)

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


def as_tensor(x, dtype=None):
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype))


class _Node:
    __slots__ = ("out", "parents", "backward")

    def __init__(self, out, parents, backward):
        self.out = out
        self.parents = parents
        self.backward = backward


class Tape:
    """Ordered record of differentiable operations.

    Operations executed inside ``with Tape() as tape:`` whose inputs require
    gradients are appended in execution order, which is already topological.
    :meth:`backward` walks the record once in reverse and accumulates
    gradients additively into ``.grad`` of the leaf tensors.
    """

    def __init__(self):
        self.nodes = []

    def __enter__(self):
        _tapes.append(self)
        return self

    def __exit__(self, *exc):
        _tapes.remove(self)
        return False

    def __len__(self):
        return len(self.nodes)

    def record(self, out, parents, backward):
        out.requires_grad = True
        out.node_id = len(self.nodes)
        self.nodes.append(_Node(out, parents, backward))

    def backward(self, loss, grad=None):
        if loss.node_id is None or loss.node_id >= len(self.nodes) or self.nodes[loss.node_id].out is not loss:
            raise ValueError("loss was not recorded on this tape")
        grads = {loss.node_id: np.ones_like(loss.data) if grad is None else np.asarray(grad)}
        for node_id in range(loss.node_id, -1, -1):
            g = grads.pop(node_id, None)
            if g is None:
                continue
            node = self.nodes[node_id]
            for parent, pg in zip(node.parents, node.backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                if parent.node_id is not None and self._owns(parent):
                    prev = grads.get(parent.node_id)
                    grads[parent.node_id] = pg if prev is None else prev + pg
                else:
                    parent.grad = pg.copy() if parent.grad is None else parent.grad + pg

    def _owns(self, t):
        return t.node_id < len(self.nodes) and self.nodes[t.node_id].out is t


def _active_tape():
    return _tapes[-1] if _tapes else None


def record(out_data, parents, backward):
    """Wrap ``out_data`` as a Tensor and record it if any parent needs gradients."""
    if _debug and not np.all(np.isfinite(out_data)):
        raise FloatingPointError("non-finite value produced in forward pass")
    out = Tensor(out_data)
    tape = _active_tape()
    if tape is not None and any(p.requires_grad for p in parents):
        tape.record(out, parents, backward)
    return out


# ---------------------------------------------------------------- elementary ops

def add(a, b):
    """``a + b``; ``b`` may also be a row vector broadcast over the rows of ``a``."""
    a, b = as_tensor(a), as_tensor(b)
    if a.shape != b.shape and not (b.ndim == 1 and a.shape[-1:] == b.shape):
        raise ValueError(f"add: shapes {a.shape} and {b.shape} are incompatible")
    bias = a.shape != b.shape

    def backward(g):
        return g, (g.reshape(-1, g.shape[-1]).sum(axis=0) if bias else g)

    return record(a.data + b.data, (a, b), backward)


def scale(a, c):
    a = as_tensor(a)
    c = float(c)
    return record(a.data * a.data.dtype.type(c), (a,), lambda g: (g * g.dtype.type(c),))


def matmul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ValueError(f"matmul: shapes {a.shape} and {b.shape} do not chain")

    def backward(g):
        return (g @ b.data.T if a.requires_grad else None,
                a.data.T @ g if b.requires_grad else None)

    return record(a.data @ b.data, (a, b), backward)


def relu(a):
    a = as_tensor(a)
    on = a.data > 0
    return record(np.where(on, a.data, 0).astype(a.dtype, copy=False), (a,), lambda g: (g * on,))


def elu1(a):
    """``elu(a) + 1``, a strictly positive feature map."""
    a = as_tensor(a)
    e = np.exp(np.minimum(a.data, 0))
    out = np.where(a.data > 0, a.data + 1, e).astype(a.dtype, copy=False)
    return record(out, (a,), lambda g: (g * np.where(a.data > 0, 1, e).astype(g.dtype, copy=False),))


def spmm(m, x):
    """``m @ x`` for a constant sparse (or dense) matrix ``m``."""
    x = as_tensor(x)
    if m.shape[1] != x.shape[0]:
        raise ValueError(f"spmm: operator width {m.shape[1]} does not match {x.shape[0]} rows")
    mt = m.T

    def backward(g):
        return (np.asarray(mt @ g, dtype=g.dtype),)

    return record(np.asarray(m @ x.data, dtype=x.dtype), (x,), backward)


def total(a):
    """Sum of all entries as a 0-d tensor."""
    a = as_tensor(a)
    return record(np.asarray(a.data.sum(), dtype=a.dtype), (a,),
                  lambda g: (np.broadcast_to(g, a.shape).astype(a.dtype),))


def mul(a, b):
    """Elementwise product of equal-shape tensors."""
    a, b = as_tensor(a), as_tensor(b)
    if a.shape != b.shape:
        raise ValueError(f"mul: shapes {a.shape} and {b.shape} differ")
    return record(a.data * b.data, (a, b), lambda g: (g * b.data, g * a.data))
