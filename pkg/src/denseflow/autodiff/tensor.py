"""Tensor with a reverse-mode tape.

Every tensor produced by a primitive carries a sequence number taken from a
global counter at creation time.  Parents are always created before their
children, so visiting the reachable nodes in decreasing sequence order is both
a valid topological order and exactly the reverse of execution order.
"""

from __future__ import annotations

import contextlib
import itertools

import numpy as np

DTYPES = (np.float32, np.float64)

_sequence = itertools.count()
_grad_enabled = True


@contextlib.contextmanager
def no_grad():
    """Run primitives without recording backward information."""
    global _grad_enabled
    previous = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = previous


def is_grad_enabled():
    return _grad_enabled


def _as_float_array(data, dtype):
    arr = np.asarray(data)
    if dtype is None:
        dtype = arr.dtype if arr.dtype in DTYPES else np.float32
    dtype = np.dtype(dtype)
    if dtype not in DTYPES:
        raise TypeError(f"unsupported dtype {dtype}; expected float32 or float64")
    return np.asarray(arr, dtype=dtype, order="C")


class Tensor:
    """Dense NCHW-friendly array that can take part in a backward pass."""

    __slots__ = ("data", "requires_grad", "grad", "name", "_parents", "_backward", "_seq")

    def __init__(self, data, requires_grad=False, dtype=None, name=None):
        self.data = _as_float_array(data, dtype)
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self.name = name
        self._parents = ()
        self._backward = None
        self._seq = next(_sequence)

    # -- construction helpers -------------------------------------------------

    @classmethod
    def _from_op(cls, data, parents, backward):
        """Wrap the result of a primitive.

        ``backward`` maps the output gradient to a tuple with one entry per
        parent (None where no gradient flows).
        """
        out = cls.__new__(cls)
        out.data = data
        out.grad = None
        out.name = None
        out._seq = next(_sequence)
        track = _grad_enabled and any(p.requires_grad for p in parents)
        out.requires_grad = track
        if track:
            out._parents = tuple(parents)
            out._backward = backward
        else:
            out._parents = ()
            out._backward = None
        return out

    # -- array-like surface ---------------------------------------------------

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    @property
    def is_leaf(self):
        return self._backward is None

    def numpy(self):
        return self.data

    def item(self):
        return self.data.item()

    def detach(self):
        return Tensor(self.data, dtype=self.dtype)

    def astype(self, dtype):
        return Tensor(self.data.astype(dtype), requires_grad=self.requires_grad, dtype=dtype)

    def zero_grad(self):
        self.grad = np.zeros_like(self.data)

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype.name}{flag})"

    def __len__(self):
        return len(self.data)

    # -- operators (thin wrappers over the functional primitives) -------------

    def __add__(self, other):
        from . import ops

        return ops.add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        from . import ops

        return ops.sub(self, other)

    def __rsub__(self, other):
        from . import ops

        return ops.add(ops.neg(self), other)

    def __mul__(self, other):
        from . import ops

        return ops.mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        from . import ops

        return ops.neg(self)

    def __pow__(self, exponent):
        from . import ops

        return ops.pow(self, exponent)

    def mean(self):
        from . import ops

        return ops.mean(self)

    def backward(self):
        backward(self)


def tape_order(root):
    """Nodes reachable from ``root`` that carry a backward rule, newest first."""
    seen = set()
    nodes = []
    stack = [root]
    while stack:
        node = stack.pop()
        if id(node) in seen:
            continue
        seen.add(id(node))
        if node._backward is not None:
            nodes.append(node)
            stack.extend(node._parents)
    nodes.sort(key=lambda t: t._seq, reverse=True)
    return nodes


def backward(loss):
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every reachable leaf.

    Gradients add onto whatever ``.grad`` already holds, so calling this twice
    without resetting doubles them.  Intermediate gradients live only for the
    duration of the call.
    """
    if loss.data.size != 1 or loss.data.ndim != 0:
        raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        raise ValueError("loss is not connected to any tensor that requires grad")

    pending = {id(loss): np.ones_like(loss.data)}
    # keys whose pending array was allocated here and may be updated in place
    owned = set()
    for node in tape_order(loss):
        g = pending.pop(id(node), None)
        if g is None:
            continue
        parent_grads = node._backward(g)
        for parent, pg in zip(node._parents, parent_grads):
            if pg is None or not parent.requires_grad:
                continue
            if parent._backward is None:
                if parent.grad is None:
                    parent.grad = np.array(pg, dtype=parent.dtype, copy=True)
                else:
                    parent.grad += pg
            else:
                key = id(parent)
                if key in owned:
                    pending[key] += pg
                elif key in pending:
                    pending[key] = pending[key] + pg
                    owned.add(key)
                else:
                    pending[key] = pg
