"""Dense NCHW tensor with tape-based reverse-mode differentiation.

A :class:`Tensor` either holds a numpy array (numeric mode) or only a shape
(meta mode, ``data is None``).  Meta tensors flow through every primitive op
so that networks can be shape-checked and cost-traced without allocating
activations.
"""
from __future__ import annotations

import contextlib
from dataclasses import dataclass, field

import numpy as np

from .errors import StateError

_GRAD_ENABLED = True
_SCOPES: list[str] = []
_TRACERS: list["Trace"] = []


class Tensor:
    """A node in the autograd tape.

    ``parents`` and ``backward_fn`` are set by the op that produced the
    tensor; ``backward_fn(grad)`` returns one gradient (or None) per parent.
    """

    __slots__ = ("data", "_shape", "grad", "requires_grad", "parents",
                 "backward_fn", "op", "__weakref__")

    def __init__(self, data=None, shape=None, requires_grad=False, dtype=None):
        if data is not None:
            data = np.asarray(data, dtype=dtype)
            if data.dtype.kind != "f":
                data = data.astype(np.float64 if dtype is None else dtype)
            shape = data.shape
        elif shape is None:
            raise ValueError("need data or shape")
        self.data = data
        self._shape = tuple(int(s) for s in shape)
        self.grad = None
        self.requires_grad = requires_grad
        self.parents = ()
        self.backward_fn = None
        self.op = None

    @classmethod
    def meta(cls, shape):
        return cls(shape=shape)

    @property
    def shape(self):
        return self._shape

    @property
    def is_meta(self):
        return self.data is None

    @property
    def dtype(self):
        return None if self.data is None else self.data.dtype

    @property
    def size(self):
        return int(np.prod(self._shape))

    def numpy(self):
        if self.data is None:
            raise StateError("meta tensor has no data")
        return self.data

    def zero_grad(self):
        self.grad = None

    def detach(self):
        return Tensor(self.data, shape=self._shape)

    def __repr__(self):
        kind = "meta" if self.data is None else str(self.data.dtype)
        return f"Tensor(shape={self._shape}, {kind}, op={self.op})"

    def backward(self, seed_grad=None):
        backward(self, seed_grad)


class Parameter(Tensor):
    """Learnable tensor.

    ``decay_exempt`` marks parameters that are not convolution kernels
    (batch-norm scale/shift and biases); weight decay skips them.
    The array may be absent until the owning network is initialized.
    """

    __slots__ = ("decay_exempt", "name", "init", "velocity")

    def __init__(self, shape, decay_exempt=False, init="kaiming", name=""):
        super().__init__(shape=shape, requires_grad=True)
        self.decay_exempt = decay_exempt
        self.init = init
        self.name = name
        self.velocity = None

    @property
    def initialized(self):
        return self.data is not None

    def set(self, value):
        value = np.asarray(value)
        if value.shape != self._shape:
            raise StateError(
                f"parameter {self.name!r}: shape {value.shape} != {self._shape}")
        self.data = value

    def __repr__(self):
        return f"Parameter({self.name!r}, shape={self._shape})"


def grad_enabled():
    return _GRAD_ENABLED


@contextlib.contextmanager
def no_grad():
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


def make_output(data, parents, backward_fn, op, shape=None):
    """Wrap an op result, wiring it into the tape if any parent needs grad."""
    out = Tensor(data, shape=shape)
    out.op = op
    if _GRAD_ENABLED and data is not None and any(
            p is not None and p.requires_grad for p in parents):
        out.requires_grad = True
        out.parents = tuple(parents)
        out.backward_fn = backward_fn
    return out


def _toposort(root):
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node.parents:
            if p is not None and p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def backward(output, seed_grad=None):
    """Propagate ``seed_grad`` from ``output`` to every reachable leaf.

    Leaf gradients accumulate into ``.grad`` across calls; intermediate
    gradients are discarded once consumed.
    """
    if output.is_meta:
        raise StateError("backward on a meta tensor: no forward values recorded")
    if not output.requires_grad:
        raise StateError("backward before forward: output is not attached to a "
                         "recorded graph")
    if seed_grad is None:
        seed = np.ones(output.shape, dtype=output.data.dtype)
    else:
        seed = np.asarray(seed_grad.data if isinstance(seed_grad, Tensor) else seed_grad)
        if seed.shape != output.shape:
            raise StateError(f"seed grad shape {seed.shape} != output shape {output.shape}")
    grads = {id(output): seed}
    for node in reversed(_toposort(output)):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node.backward_fn is None:
            node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        for parent, pg in zip(node.parents, node.backward_fn(g)):
            if parent is None or pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            grads[key] = pg if key not in grads else grads[key] + pg


# --- scopes and tracing ---------------------------------------------------

@contextlib.contextmanager
def scope(name):
    _SCOPES.append(name)
    try:
        yield
    finally:
        _SCOPES.pop()


def current_scope():
    return "/".join(s for s in _SCOPES if s)


@dataclass
class OpRecord:
    op: str
    scope: str
    in_shapes: tuple
    out_shape: tuple
    macs: int = 0
    elementwise: int = 0
    params: int = 0
    attrs: dict = field(default_factory=dict)


@dataclass
class Trace:
    records: list = field(default_factory=list)


@contextlib.contextmanager
def trace():
    """Collect an :class:`OpRecord` for every primitive op executed inside."""
    t = Trace()
    _TRACERS.append(t)
    try:
        yield t
    finally:
        _TRACERS.remove(t)


def record(op, inputs, out_shape, macs=0, elementwise=0, params=0, **attrs):
    if not _TRACERS:
        return
    rec = OpRecord(op, current_scope(), tuple(tuple(x.shape) for x in inputs),
                   tuple(out_shape), int(macs), int(elementwise), int(params), attrs)
    for t in _TRACERS:
        t.records.append(rec)
