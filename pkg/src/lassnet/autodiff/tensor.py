"""Tensor and tape for reverse-mode differentiation.

Operations record themselves on the tape that is active in the current
thread. Outside a ``Tape`` context nothing is recorded, which is how
inference runs.
"""

from __future__ import annotations

import threading

import numpy as np

_local = threading.local()


def _tape_stack():
    stack = getattr(_local, "stack", None)
    if stack is None:
        stack = _local.stack = []
    return stack


def active_tape():
    stack = _tape_stack()
    return stack[-1] if stack else None


class Node:
    __slots__ = ("inputs", "output", "backward", "op", "index", "tape")

    def __init__(self, inputs, output, backward, op, index, tape):
        self.tape = tape
        self.inputs = inputs
        self.output = output
        self.backward = backward
        self.op = op
        self.index = index


class Tape:
    """Ordered record of differentiable operations.

    Use as a context manager; ops executed inside the block are appended in
    execution order, which is a valid topological order by construction.
    """

    def __init__(self):
        self.nodes = []

    def __enter__(self):
        _tape_stack().append(self)
        return self

    def __exit__(self, *exc):
        stack = _tape_stack()
        if not stack or stack[-1] is not self:
            raise RuntimeError("tape stack corrupted: exiting a tape that is not active")
        stack.pop()
        return False

    def __len__(self):
        return len(self.nodes)

    def record(self, inputs, output, backward, op):
        node = Node(tuple(inputs), output, backward, op, len(self.nodes), self)
        self.nodes.append(node)
        output.node = node
        output.requires_grad = True
        return node

    def backward(self, loss, grad=None, retain=False):
        """Accumulate d(loss)/d(leaf) into every reachable leaf's ``.grad``.

        Unless ``retain`` is set the recorded graph is released afterwards:
        nodes and outputs reference each other, and leaving those cycles to
        the cyclic garbage collector keeps whole steps of activations alive.
        """
        if loss.node is None or loss.node.tape is not self:
            raise ValueError("loss was not produced on this tape")
        if grad is None:
            if loss.data.size != 1:
                raise ValueError(f"backward() needs a scalar loss, got shape {loss.shape}")
            grad = np.ones_like(loss.data)
        grads = {id(loss): np.asarray(grad, dtype=loss.data.dtype)}
        for node in reversed(self.nodes[: loss.node.index + 1]):
            g = grads.pop(id(node.output), None)
            if g is None:
                continue
            in_grads = node.backward(g)
            for t, gi in zip(node.inputs, in_grads):
                if gi is None or not t.requires_grad:
                    continue
                if gi.shape != t.shape:
                    raise RuntimeError(f"{node.op}: gradient shape {gi.shape} != input shape {t.shape}")
                if t.node is None:
                    t.grad = gi.copy() if t.grad is None else t.grad + gi
                else:
                    key = id(t)
                    grads[key] = gi if key not in grads else grads[key] + gi
        if not retain:
            self.release()

    def release(self):
        for node in self.nodes:
            node.output.node = None
            node.backward = None
            node.inputs = ()
        self.nodes = []


class no_grad:
    """Suspend recording: ops inside run without any active tape."""

    def __enter__(self):
        self._saved = list(_tape_stack())
        _tape_stack().clear()
        return self

    def __exit__(self, *exc):
        stack = _tape_stack()
        stack.clear()
        stack.extend(self._saved)
        return False


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "node", "name")

    def __init__(self, data, requires_grad=False, dtype=None, name=None):
        if isinstance(data, Tensor):
            data = data.data
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype.kind != "f":
            arr = arr.astype(np.float64)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self.node = None
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

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self):
        return self.data

    def item(self):
        return self.data.item()

    def zero_grad(self):
        self.grad = None

    def detach(self):
        return Tensor(self.data)

    def __repr__(self):
        label = f", name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, requires_grad={self.requires_grad}{label})"

    def __len__(self):
        return self.shape[0]

    # operator sugar; implementations live in ops
    def __add__(self, other):
        from . import ops
        return ops.add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        from . import ops
        return ops.sub(self, other)

    def __rsub__(self, other):
        from . import ops
        return ops.sub(other, self)

    def __mul__(self, other):
        from . import ops
        return ops.mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        from . import ops
        return ops.div(self, other)

    def __neg__(self):
        from . import ops
        return ops.neg(self)

    def __matmul__(self, other):
        from . import ops
        return ops.matmul(self, other)

    def __getitem__(self, index):
        from . import ops
        return ops.getitem(self, index)

    def reshape(self, *shape):
        from . import ops
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return ops.reshape(self, shape)

    def transpose(self, *axes):
        from . import ops
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return ops.transpose(self, axes or None)

    def sum(self, axis=None, keepdims=False):
        from . import ops
        return ops.sum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        from . import ops
        return ops.mean(self, axis=axis, keepdims=keepdims)


def as_tensor(x, dtype=None):
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype))


def backward(loss, grad=None):
    """Populate ``.grad`` on every leaf reachable from ``loss``."""
    if loss.node is None:
        raise ValueError("loss has no recorded history; run the forward pass inside a Tape")
    if loss.data.size != 1 and grad is None:
        raise ValueError(f"backward() needs a scalar loss, got shape {loss.shape}")
    loss.node.tape.backward(loss, grad)
