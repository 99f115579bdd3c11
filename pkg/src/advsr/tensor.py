"""Reverse-mode automatic differentiation over dense float64 arrays.

A Tensor wraps a contiguous numpy float64 array.  Every operation validates
its inputs eagerly and, when an explicit Tape is active and some input
requires a gradient, records a backward closure on that tape.  Calling
Tape.backward(root) replays the recorded operations in reverse, accumulating
gradients additively across fan-out, and leaves the result on each
participating tensor's .grad.

The graph is rebuilt from scratch on every forward pass.  The active-tape
stack is thread-local, so independent forward/backward passes may run on
separate threads; sharing one Tape or Tensor across threads is not supported.
"""

from __future__ import annotations

import threading

import numpy as np

# Arguments of log and sqrt are clamped to these floors before evaluation so
# that finite inputs can never produce non-finite outputs or gradients.
LOG_FLOOR = 1e-12
SQRT_FLOOR = 1e-24


class ShapeMismatchError(ValueError):
    """An operation received inputs with incompatible shapes."""


class NonFiniteInputError(ValueError):
    """A tensor would contain NaN or infinity."""


_TAPE_STACKS = threading.local()


def _tape_stack():
    stack = getattr(_TAPE_STACKS, "stack", None)
    if stack is None:
        stack = _TAPE_STACKS.stack = []
    return stack


def _active_tape():
    stack = _tape_stack()
    return stack[-1] if stack else None


class Tensor:
    """Dense float64 array with an optional gradient slot.

    Tensors are immutable after construction except for .grad (written by
    Tape.backward) and the in-place parameter updates an optimizer applies
    between forward passes.
    """

    __slots__ = ("data", "requires_grad", "grad")

    def __init__(self, data, requires_grad=False):
        arr = np.ascontiguousarray(data, dtype=np.float64)
        if not np.isfinite(arr).all():
            raise NonFiniteInputError("tensor data contains non-finite values")
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def size(self):
        return self.data.size

    def item(self):
        if self.data.size != 1:
            raise ValueError(f"item() needs a single-element tensor, got shape {self.data.shape}")
        return float(self.data.reshape(()))

    def detach(self):
        """Copy of this tensor cut loose from any recorded graph."""
        return Tensor(self.data.copy())

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

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
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


class Tape:
    """Ordered record of the operations of one forward pass."""

    def __init__(self):
        self._entries = []

    def __enter__(self):
        _tape_stack().append(self)
        return self

    def __exit__(self, exc_type, exc, tb):
        popped = _tape_stack().pop()
        if popped is not self:  # pragma: no cover - misuse guard
            raise RuntimeError("tape stack corrupted")
        return False

    def __len__(self):
        return len(self._entries)

    def record(self, out, inputs, backward_fn):
        self._entries.append((out, inputs, backward_fn))

    def backward(self, root):
        """Populate .grad = d(root)/d(tensor) for every recorded tensor.

        root must be scalar-shaped.  Gradients are overwritten, not
        accumulated, across separate backward calls; within one call fan-out
        contributions add up.  Entries whose output does not influence root
        are skipped, every entry is visited at most once.
        """
        if not isinstance(root, Tensor):
            raise TypeError("backward root must be a Tensor")
        if root.size != 1:
            raise ValueError(f"backward root must be scalar-shaped, got {root.shape}")
        grads = {id(root): np.ones_like(root.data)}
        tensors = {id(root): root}
        for out, inputs, backward_fn in reversed(self._entries):
            tensors.setdefault(id(out), out)
            for tensor in inputs:
                if tensor.requires_grad:
                    tensors.setdefault(id(tensor), tensor)
            gout = grads.get(id(out))
            if gout is None:
                continue
            for tensor, grad in zip(inputs, backward_fn(gout)):
                if grad is None or not tensor.requires_grad:
                    continue
                key = id(tensor)
                tensors[key] = tensor
                if key in grads:
                    grads[key] = grads[key] + grad
                else:
                    grads[key] = np.asarray(grad, dtype=np.float64)
        for key, tensor in tensors.items():
            if tensor.requires_grad:
                found = grads.get(key)
                tensor.grad = np.zeros_like(tensor.data) if found is None else found


def backward(tape, root):
    """Free-function alias for Tape.backward."""
    tape.backward(root)


def _as_tensor(x):
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=np.float64))


def _emit(out_data, inputs, backward_fn):
    tape = _active_tape()
    track = tape is not None and any(t.requires_grad for t in inputs)
    out = Tensor(out_data, requires_grad=track)
    if track:
        tape.record(out, inputs, backward_fn)
    return out


def _unbroadcast(grad, shape):
    """Sum a broadcast gradient back down to the original input shape."""
    for _ in range(grad.ndim - len(shape)):
        grad = grad.sum(axis=0)
    for axis, dim in enumerate(shape):
        if dim == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad.reshape(shape)


def _broadcast_forward(name, a, b, fn):
    try:
        return fn(a.data, b.data)
    except ValueError as exc:
        raise ShapeMismatchError(f"{name}: incompatible shapes {a.shape} and {b.shape}") from exc


def add(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    out = _broadcast_forward("add", a, b, np.add)

    def backward_fn(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _emit(out, (a, b), backward_fn)


def sub(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    out = _broadcast_forward("sub", a, b, np.subtract)

    def backward_fn(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _emit(out, (a, b), backward_fn)


def mul(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    out = _broadcast_forward("mul", a, b, np.multiply)

    def backward_fn(g):
        ga = _unbroadcast(g * b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(g * a.data, b.shape) if b.requires_grad else None
        return ga, gb

    return _emit(out, (a, b), backward_fn)


def div(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    out = _broadcast_forward("div", a, b, np.divide)

    def backward_fn(g):
        ga = _unbroadcast(g / b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(-g * a.data / (b.data * b.data), b.shape) if b.requires_grad else None
        return ga, gb

    return _emit(out, (a, b), backward_fn)


def matmul(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeMismatchError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    out = a.data @ b.data

    def backward_fn(g):
        ga = g @ b.data.T if a.requires_grad else None
        gb = a.data.T @ g if b.requires_grad else None
        return ga, gb

    return _emit(out, (a, b), backward_fn)


def relu(a):
    a = _as_tensor(a)
    # Subgradient at exactly zero is zero.
    mask = a.data > 0.0
    out = np.where(mask, a.data, 0.0)

    def backward_fn(g):
        return (g * mask,)

    return _emit(out, (a,), backward_fn)


def log(a):
    a = _as_tensor(a)
    clamped = np.maximum(a.data, LOG_FLOOR)
    out = np.log(clamped)
    # Gradient matches the implemented forward: zero below the floor, the
    # floor boundary itself is inclusive.
    mask = a.data >= LOG_FLOOR

    def backward_fn(g):
        return (g * mask / clamped,)

    return _emit(out, (a,), backward_fn)


def exp(a):
    a = _as_tensor(a)
    out = np.exp(a.data)

    def backward_fn(g):
        return (g * out,)

    return _emit(out, (a,), backward_fn)


def sqrt(a):
    a = _as_tensor(a)
    clamped = np.maximum(a.data, SQRT_FLOOR)
    out = np.sqrt(clamped)
    mask = a.data >= SQRT_FLOOR

    def backward_fn(g):
        return (g * mask * 0.5 / out,)

    return _emit(out, (a,), backward_fn)


def log_softmax(a):
    """Row-wise log softmax of a 2D tensor."""
    a = _as_tensor(a)
    if a.data.ndim != 2:
        raise ShapeMismatchError(f"log_softmax: expected a 2D tensor, got {a.shape}")
    shifted = a.data - a.data.max(axis=1, keepdims=True)
    out = shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))

    def backward_fn(g):
        return (g - np.exp(out) * g.sum(axis=1, keepdims=True),)

    return _emit(out, (a,), backward_fn)


def tsum(a):
    """Sum of all elements, scalar-shaped output."""
    a = _as_tensor(a)
    out = np.asarray(a.data.sum())

    def backward_fn(g):
        return (np.full(a.shape, g.reshape(())),)

    return _emit(out, (a,), backward_fn)


def tmean(a):
    """Mean of all elements, scalar-shaped output."""
    a = _as_tensor(a)
    out = np.asarray(a.data.mean())
    scale = 1.0 / a.size

    def backward_fn(g):
        return (np.full(a.shape, g.reshape(()) * scale),)

    return _emit(out, (a,), backward_fn)


def clamp(a, lo, hi):
    a = _as_tensor(a)
    lo, hi = float(lo), float(hi)
    if lo > hi:
        raise ValueError(f"clamp: lo {lo} exceeds hi {hi}")
    out = np.clip(a.data, lo, hi)
    # Boundary values pass gradient; only strictly clipped entries block it.
    mask = (a.data >= lo) & (a.data <= hi)

    def backward_fn(g):
        return (g * mask,)

    return _emit(out, (a,), backward_fn)


def crop(a, start, stop, axis=0):
    """Slice [start:stop) along one axis."""
    a = _as_tensor(a)
    n = a.shape[axis]
    if not 0 <= start <= stop <= n:
        raise ShapeMismatchError(f"slice: [{start}:{stop}) out of bounds for axis {axis} of {a.shape}")
    index = [np.s_[:]] * a.data.ndim
    index[axis] = np.s_[start:stop]
    index = tuple(index)
    out = a.data[index].copy()

    def backward_fn(g):
        full = np.zeros_like(a.data)
        full[index] = g
        return (full,)

    return _emit(out, (a,), backward_fn)


def pad(a, before, after, axis=0):
    """Zero-pad along one axis."""
    a = _as_tensor(a)
    if before < 0 or after < 0:
        raise ValueError("pad: amounts must be nonnegative")
    widths = [(0, 0)] * a.data.ndim
    widths[axis] = (before, after)
    out = np.pad(a.data, widths)
    index = [np.s_[:]] * a.data.ndim
    index[axis] = np.s_[before:before + a.shape[axis]]
    index = tuple(index)

    def backward_fn(g):
        return (g[index],)

    return _emit(out, (a,), backward_fn)


def concat(tensors, axis=0):
    tensors = [_as_tensor(t) for t in tensors]
    if not tensors:
        raise ValueError("concat: need at least one tensor")
    try:
        out = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError as exc:
        raise ShapeMismatchError(f"concat: incompatible shapes {[t.shape for t in tensors]}") from exc
    sizes = [t.shape[axis] for t in tensors]
    bounds = np.cumsum([0] + sizes)

    def backward_fn(g):
        pieces = []
        for i in range(len(tensors)):
            index = [np.s_[:]] * g.ndim
            index[axis] = np.s_[bounds[i]:bounds[i + 1]]
            pieces.append(g[tuple(index)])
        return tuple(pieces)

    return _emit(out, tuple(tensors), backward_fn)


def absolute(a):
    a = _as_tensor(a)
    out = np.abs(a.data)
    s = np.sign(a.data)

    def backward_fn(g):
        return (g * s,)

    return _emit(out, (a,), backward_fn)


def sign(a):
    a = _as_tensor(a)
    out = np.sign(a.data)

    def backward_fn(g):
        # Zero almost everywhere; contributes nothing.
        return (None,)

    return _emit(out, (a,), backward_fn)


def max_elementwise(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    out = _broadcast_forward("max_elementwise", a, b, np.maximum)
    # Ties route the gradient to the first argument.
    mask = _broadcast_forward("max_elementwise", a, b, np.greater_equal)

    def backward_fn(g):
        ga = _unbroadcast(g * mask, a.shape) if a.requires_grad else None
        gb = _unbroadcast(g * ~mask, b.shape) if b.requires_grad else None
        return ga, gb

    return _emit(out, (a, b), backward_fn)


def reshape(a, shape):
    a = _as_tensor(a)
    try:
        out = a.data.reshape(shape)
    except ValueError as exc:
        raise ShapeMismatchError(f"reshape: cannot view {a.shape} as {shape}") from exc

    def backward_fn(g):
        return (g.reshape(a.shape),)

    return _emit(out, (a,), backward_fn)


def frame(a, window, shift):
    """Gather overlapping windows of rows (or samples) into a matrix.

    1D input of length n yields (count, window); 2D input (n, c) yields
    (count, window * c) with the window dimension flattened row-major, where
    count = 1 + (n - window) // shift.
    """
    a = _as_tensor(a)
    if window < 1 or shift < 1:
        raise ValueError("frame: window and shift must be positive")
    n = a.shape[0]
    if n < window:
        raise ShapeMismatchError(f"frame: input length {n} shorter than window {window}")
    count = 1 + (n - window) // shift
    span = (count - 1) * shift + 1
    if a.data.ndim == 1:
        view = np.lib.stride_tricks.sliding_window_view(a.data, window)[::shift][:count]
        out = np.ascontiguousarray(view)

        def backward_fn(g):
            acc = np.zeros_like(a.data)
            for j in range(window):
                acc[j:j + span:shift] += g[:, j]
            return (acc,)

    elif a.data.ndim == 2:
        c = a.shape[1]
        view = np.lib.stride_tricks.sliding_window_view(a.data, (window, c))[::shift, 0][:count]
        out = np.ascontiguousarray(view).reshape(count, window * c)

        def backward_fn(g):
            g3 = g.reshape(count, window, c)
            acc = np.zeros_like(a.data)
            for j in range(window):
                acc[j:j + span:shift] += g3[:, j]
            return (acc,)

    else:
        raise ShapeMismatchError(f"frame: expected 1D or 2D input, got {a.shape}")
    return _emit(out, (a,), backward_fn)


def overlap_add(frames_, shift):
    """Adjoint of frame for 1D signals: sum (count, window) rows into a signal.

    Output length is (count - 1) * shift + window.
    """
    frames_ = _as_tensor(frames_)
    if frames_.data.ndim != 2:
        raise ShapeMismatchError(f"overlap_add: expected a 2D tensor, got {frames_.shape}")
    if shift < 1:
        raise ValueError("overlap_add: shift must be positive")
    count, window = frames_.shape
    length = (count - 1) * shift + window
    span = (count - 1) * shift + 1
    out = np.zeros(length)
    for j in range(window):
        out[j:j + span:shift] += frames_.data[:, j]

    def backward_fn(g):
        view = np.lib.stride_tricks.sliding_window_view(g, window)[::shift][:count]
        return (np.ascontiguousarray(view),)

    return _emit(out, (frames_,), backward_fn)


def conv1d(x, w, b=None, stride=1, padding=0):
    """1D convolution over rows: x (n, c_in), w (k, c_in, c_out), b (c_out,).

    Composed from pad, frame, reshape and matmul, so its gradient follows
    from those operations.  Output has 1 + (n + 2 * padding - k) // stride
    rows.
    """
    x, w = _as_tensor(x), _as_tensor(w)
    if x.data.ndim != 2 or w.data.ndim != 3:
        raise ShapeMismatchError(f"conv1d: expected x (n, c_in) and w (k, c_in, c_out), got {x.shape} and {w.shape}")
    k, c_in, c_out = w.shape
    if x.shape[1] != c_in:
        raise ShapeMismatchError(f"conv1d: input channels {x.shape[1]} do not match weight channels {c_in}")
    padded = pad(x, padding, padding, axis=0) if padding else x
    cols = frame(padded, k, stride)
    out = matmul(cols, reshape(w, (k * c_in, c_out)))
    if b is not None:
        out = add(out, b)
    return out


_OPS = {
    "add": add,
    "sub": sub,
    "mul": mul,
    "div": div,
    "matmul": matmul,
    "conv1d": conv1d,
    "relu": relu,
    "log": log,
    "exp": exp,
    "sqrt": sqrt,
    "log_softmax": log_softmax,
    "sum": tsum,
    "mean": tmean,
    "clamp": clamp,
    "slice": crop,
    "concat": concat,
    "pad": pad,
    "abs": absolute,
    "sign": sign,
    "max_elementwise": max_elementwise,
    "frame": frame,
    "overlap_add": overlap_add,
    "reshape": reshape,
}


def forward_op(op_kind, inputs, **params):
    """Generic dispatcher: apply a named operation to already-built tensors."""
    if op_kind not in _OPS:
        raise ValueError(f"unknown op_kind {op_kind!r}")
    fn = _OPS[op_kind]
    if op_kind == "concat":
        return fn(inputs, **params)
    return fn(*inputs, **params)
