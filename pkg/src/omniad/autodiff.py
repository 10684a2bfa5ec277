"""Dense float64 tensors with taped reverse-mode differentiation.

Every value flowing through the network is a :class:`Tensor` wrapping a
row-major ``numpy`` array of 64-bit reals.  Differentiable operations record
a backward closure on the currently active :class:`Tape`; running
:func:`backward` replays those closures in reverse execution order and
accumulates gradients into every participating tensor's ``grad`` slot.

The tape is rebuilt on every forward pass (define-by-run).  With no tape
active, the same operations run as plain numpy computations, which is how
inference and the frozen feature extractor execute.
"""

import numpy as np

from .errors import ContractError, DimensionError


class Tensor:
    """A dense n-d float64 array with an optional same-shape gradient."""

    __slots__ = ("data", "grad", "requires_grad")

    def __init__(self, data, requires_grad=False):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad = None
        self.requires_grad = bool(requires_grad)

    @property
    def shape(self):
        return self.data.shape

    @property
    def size(self):
        return self.data.size

    def item(self):
        if self.data.size != 1:
            raise ContractError(f"item() needs a single-element tensor, got shape {self.data.shape}")
        return float(self.data.reshape(()))

    def detach(self):
        return Tensor(self.data.copy())

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"


_TAPES = []


class Tape:
    """Execution-ordered record of differentiable operations."""

    __slots__ = ("_nodes",)

    def __init__(self):
        self._nodes = []

    def __enter__(self):
        _TAPES.append(self)
        return self

    def __exit__(self, exc_type, exc, tb):
        _TAPES.pop()
        return False

    def record(self, out, backward_fn):
        out.requires_grad = True
        self._nodes.append((out, backward_fn))

    def __len__(self):
        return len(self._nodes)


def active_tape():
    return _TAPES[-1] if _TAPES else None


def tape_for(*tensors):
    """Active tape if any input participates in differentiation, else None."""
    tape = _TAPES[-1] if _TAPES else None
    if tape is not None and any(t.requires_grad for t in tensors):
        return tape
    return None


def accumulate(t, g, own=False):
    """Add ``g`` into ``t.grad``.

    ``own=True`` asserts that ``g`` is a freshly allocated array not aliased
    by any other tensor, so it may be adopted without copying.
    """
    if t.grad is None:
        t.grad = g if own else g.copy()
    else:
        t.grad += g


def backward(loss, tape):
    """Populate grads of every tensor reachable from ``loss`` through ``tape``.

    Visits each recorded operation exactly once, in reverse execution order.
    Gradients of leaf tensors accumulate across repeated calls; intermediate
    gradients are cleared before each replay.
    """
    if loss.data.shape != ():
        raise ContractError(f"backward needs a scalar loss, got shape {loss.data.shape}")
    for out, _ in tape._nodes:
        out.grad = None
    loss.grad = np.array(1.0)
    for out, fn in reversed(tape._nodes):
        if out.grad is not None:
            fn(out.grad)


def zero_grad(params):
    for p in params:
        p.grad = None


def _check_same_shape(name, a, b):
    if a.data.shape != b.data.shape:
        raise DimensionError(f"{name}: shapes differ: {a.data.shape} vs {b.data.shape}")


def add(a, b):
    _check_same_shape("add", a, b)
    out = Tensor(a.data + b.data)
    tape = tape_for(a, b)
    if tape is not None:
        def backward_fn(g):
            if a.requires_grad:
                accumulate(a, g)
            if b.requires_grad:
                accumulate(b, g)
        tape.record(out, backward_fn)
    return out


def sub(a, b):
    _check_same_shape("sub", a, b)
    out = Tensor(a.data - b.data)
    tape = tape_for(a, b)
    if tape is not None:
        def backward_fn(g):
            if a.requires_grad:
                accumulate(a, g)
            if b.requires_grad:
                accumulate(b, -g, own=True)
        tape.record(out, backward_fn)
    return out


def mul(a, b):
    _check_same_shape("mul", a, b)
    out = Tensor(a.data * b.data)
    tape = tape_for(a, b)
    if tape is not None:
        def backward_fn(g):
            if a.requires_grad:
                accumulate(a, g * b.data, own=True)
            if b.requires_grad:
                accumulate(b, g * a.data, own=True)
        tape.record(out, backward_fn)
    return out


def neg(a):
    out = Tensor(-a.data)
    tape = tape_for(a)
    if tape is not None:
        def backward_fn(g):
            accumulate(a, -g, own=True)
        tape.record(out, backward_fn)
    return out


def scale(a, s):
    s = float(s)
    out = Tensor(a.data * s)
    tape = tape_for(a)
    if tape is not None:
        def backward_fn(g):
            accumulate(a, g * s, own=True)
        tape.record(out, backward_fn)
    return out


def add_bias(x, b):
    """Broadcast-add a vector over the trailing axis of ``x``."""
    if x.data.shape[-1] != b.data.shape[0] or b.data.ndim != 1:
        raise DimensionError(f"add_bias: shapes differ: {x.data.shape} vs {b.data.shape}")
    out = Tensor(x.data + b.data)
    tape = tape_for(x, b)
    if tape is not None:
        lead = tuple(range(x.data.ndim - 1))
        def backward_fn(g):
            if x.requires_grad:
                accumulate(x, g)
            if b.requires_grad:
                accumulate(b, g.sum(axis=lead), own=True)
        tape.record(out, backward_fn)
    return out


def matmul(a, b):
    """Matrix product; ``a`` may carry one leading batch axis."""
    if a.data.ndim not in (2, 3) or b.data.ndim != 2:
        raise DimensionError(f"matmul: expected rank-2 operands, got {a.data.shape} and {b.data.shape}")
    if a.data.shape[-1] != b.data.shape[0]:
        raise DimensionError(f"matmul: inner extents differ: {a.data.shape} vs {b.data.shape}")
    out = Tensor(a.data @ b.data)
    tape = tape_for(a, b)
    if tape is not None:
        lead = tuple(range(a.data.ndim - 1))
        def backward_fn(g):
            if a.requires_grad:
                accumulate(a, g @ b.data.T, own=True)
            if b.requires_grad:
                if a.data.ndim == 2:
                    db = a.data.T @ g
                else:
                    db = np.tensordot(a.data, g, axes=(lead, lead))
                accumulate(b, db, own=True)
        tape.record(out, backward_fn)
    return out


def transpose(a):
    if a.data.ndim != 2:
        raise DimensionError(f"transpose: expected rank-2 operand, got {a.data.shape}")
    out = Tensor(a.data.T.copy())
    tape = tape_for(a)
    if tape is not None:
        def backward_fn(g):
            accumulate(a, np.ascontiguousarray(g.T), own=True)
        tape.record(out, backward_fn)
    return out


def reshape(a, shape):
    # The output shares storage with the input; tensors are never mutated
    # once produced, so the view is safe.
    shape = tuple(shape)
    if int(np.prod(shape, dtype=np.int64)) != a.data.size:
        raise DimensionError(f"reshape: cannot view {a.data.shape} as {shape}")
    out = Tensor(np.ascontiguousarray(a.data).reshape(shape))
    tape = tape_for(a)
    if tape is not None:
        in_shape = a.data.shape
        def backward_fn(g):
            accumulate(a, np.ascontiguousarray(g).reshape(in_shape))
        tape.record(out, backward_fn)
    return out


def linear(x, w, b):
    """Fused ``x @ w + b``; ``x`` may carry one leading batch axis."""
    if x.data.ndim not in (2, 3) or x.data.shape[-1] != w.data.shape[0]:
        raise DimensionError(f"linear: inner extents differ: {x.data.shape} vs {w.data.shape}")
    out = Tensor(x.data @ w.data + b.data)
    tape = tape_for(x, w, b)
    if tape is not None:
        lead = tuple(range(x.data.ndim - 1))
        def backward_fn(g):
            if x.requires_grad:
                accumulate(x, g @ w.data.T, own=True)
            if w.requires_grad:
                if x.data.ndim == 2:
                    dw = x.data.T @ g
                else:
                    dw = np.tensordot(x.data, g, axes=(lead, lead))
                accumulate(w, dw, own=True)
            if b.requires_grad:
                accumulate(b, g.sum(axis=lead), own=True)
        tape.record(out, backward_fn)
    return out


def concat_last(tensors):
    """Concatenate along the trailing axis; leading extents must agree."""
    lead = tensors[0].data.shape[:-1]
    for t in tensors[1:]:
        if t.data.shape[:-1] != lead:
            raise DimensionError(
                f"concat_last: leading extents differ: {tensors[0].data.shape} vs {t.data.shape}")
    out = Tensor(np.concatenate([t.data for t in tensors], axis=-1))
    tape = tape_for(*tensors)
    if tape is not None:
        widths = [t.data.shape[-1] for t in tensors]
        def backward_fn(g):
            off = 0
            for t, w in zip(tensors, widths):
                if t.requires_grad:
                    accumulate(t, np.ascontiguousarray(g[..., off:off + w]), own=True)
                off += w
        tape.record(out, backward_fn)
    return out


def slice_last(a, start, stop):
    """Slice the trailing axis; gradient scatters back into the slice."""
    out = Tensor(np.ascontiguousarray(a.data[..., start:stop]))
    tape = tape_for(a)
    if tape is not None:
        def backward_fn(g):
            full = np.zeros_like(a.data)
            full[..., start:stop] = g
            accumulate(a, full, own=True)
        tape.record(out, backward_fn)
    return out


def sum_all(a):
    out = Tensor(a.data.sum())
    tape = tape_for(a)
    if tape is not None:
        shape = a.data.shape
        def backward_fn(g):
            accumulate(a, np.full(shape, float(g)), own=True)
        tape.record(out, backward_fn)
    return out


def mean_all(a):
    return scale(sum_all(a), 1.0 / a.data.size)
