"""Dense tensors with tape-based reverse-mode differentiation.

A :class:`Tensor` wraps a numpy array. Operations executed while a
:class:`GradTape` is active (and touching at least one tensor that requires a
gradient) are appended to that tape together with a closure computing the
vector-Jacobian product. ``GradTape.backward`` replays the record in reverse.

Outside a tape nothing is recorded, which is how inference runs.
"""

from __future__ import annotations

import os
import struct
import threading
from typing import Callable, Iterable, Optional, Sequence, Union

import numpy as np

from .errors import GraphError, NumericError, ShapeError

DEFAULT_DTYPE = np.float32

_DEBUG = os.environ.get("BDG_DEBUG", "") not in ("", "0")
_state = threading.local()


def set_debug(flag: bool) -> None:
    """Toggle NaN checks on every recorded op output."""
    global _DEBUG
    _DEBUG = bool(flag)


def debug_enabled() -> bool:
    return _DEBUG


ArrayLike = Union[np.ndarray, float, int, Sequence]


class Tensor:
    """Numpy-backed value with an optional gradient slot.

    Args:
        data: anything ``np.asarray`` accepts.
        requires_grad: mark as a differentiable leaf.
        dtype: storage type; float32 unless the input is already float64
            or ``dtype`` says otherwise.
    """

    __slots__ = ("data", "grad", "requires_grad", "_node", "name")

    def __init__(self, data: ArrayLike, requires_grad: bool = False,
                 dtype=None, name: str = ""):
        if isinstance(data, Tensor):
            data = data.data
        arr = np.asarray(data)
        if dtype is not None:
            arr = arr.astype(dtype, copy=False)
        elif arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(DEFAULT_DTYPE)
        if any(s < 1 for s in arr.shape):
            raise ShapeError(f"tensor shape components must be >= 1, got {arr.shape}")
        self.data = arr
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = bool(requires_grad)
        self._node: Optional[_Node] = None
        self.name = name

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float("nan")

    def detach(self) -> "Tensor":
        return Tensor(self.data, dtype=self.data.dtype)

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self) -> None:
        if self._node is None:
            raise GraphError("loss is detached: it was not produced under an active GradTape")
        self._node.tape.backward(self)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    # operator sugar -- all routed through the recorded functions below
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(_as_tensor(other, self.dtype), self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise TypeError("tensor/tensor division is not supported")
        return mul(self, 1.0 / other)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self):
        return sum_all(self)

    def mean(self):
        return mean_all(self)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        return transpose(self, axes or None)

    def relu(self):
        return relu(self)


class _Node:
    __slots__ = ("tape", "out", "inputs", "vjp", "op")

    def __init__(self, tape, out, inputs, vjp, op):
        self.tape = tape
        self.out = out
        self.inputs = inputs
        self.vjp = vjp
        self.op = op


class GradTape:
    """Ordered record of differentiable ops executed inside its context.

    Usage::

        with GradTape() as tape:
            loss = model(x).sum()
        tape.backward(loss)

    A tape can be replayed once; the record is dropped afterwards.
    """

    def __init__(self):
        self.nodes: list[_Node] = []
        self.consumed = False

    def __enter__(self) -> "GradTape":
        if self.consumed:
            raise GraphError("this tape was already used for backward; start a new one")
        _tape_stack().append(self)
        return self

    def __exit__(self, *exc) -> None:
        stack = _tape_stack()
        if stack and stack[-1] is self:
            stack.pop()

    def __len__(self) -> int:
        return len(self.nodes)

    def backward(self, loss: Tensor) -> None:
        if self.consumed:
            raise GraphError("backward called twice on the same tape; re-run the forward pass")
        if loss.size != 1:
            raise GraphError(f"loss must be a scalar, got shape {loss.shape}")
        if loss._node is None or loss._node.tape is not self:
            raise GraphError("loss is detached from this tape")
        grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
        for node in reversed(self.nodes):
            g = grads.pop(id(node.out), None)
            if g is None:
                continue
            in_grads = node.vjp(g)
            for inp, gi in zip(node.inputs, in_grads):
                if gi is None or not inp.requires_grad:
                    continue
                if gi.shape != inp.shape:
                    raise ShapeError(f"{node.op}: gradient shape {gi.shape} != input shape {inp.shape}")
                if inp._node is None:
                    inp.grad = gi.copy() if inp.grad is None else inp.grad + gi
                else:
                    key = id(inp)
                    if key in grads:
                        grads[key] = grads[key] + gi
                    else:
                        grads[key] = gi
        self.consumed = True
        for node in self.nodes:
            node.out._node = None
        self.nodes = []


def _tape_stack() -> list:
    stack = getattr(_state, "stack", None)
    if stack is None:
        stack = _state.stack = []
    return stack


def active_tape() -> Optional[GradTape]:
    stack = _tape_stack()
    return stack[-1] if stack else None


class BranchLog:
    """Collects the discrete choices (ReLU masks, max-pool winners) made by a
    forward pass.

    With ``replay`` set to an earlier log's choices, those choices are reused
    in order instead of recomputed, pinning the pass to the linear piece of
    the earlier one. Finite differences taken that way see no kinks.
    """

    def __init__(self, replay: Optional[list] = None):
        self.choices: list[np.ndarray] = []
        self._replay = None if replay is None else iter(replay)

    def __enter__(self):
        _state.branch_log = self
        return self

    def __exit__(self, *exc):
        _state.branch_log = None

    def same_as(self, other: "BranchLog") -> bool:
        return len(self.choices) == len(other.choices) and all(
            np.array_equal(a, b) for a, b in zip(self.choices, other.choices))


def log_branch(choice: np.ndarray) -> np.ndarray:
    """Record ``choice`` in the active log, returning the choice to use."""
    log = getattr(_state, "branch_log", None)
    if log is None:
        return choice
    if log._replay is not None:
        choice = next(log._replay)
    log.choices.append(choice)
    return choice


def record(op: str, out: np.ndarray, inputs: Sequence[Tensor],
           vjp: Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]) -> Tensor:
    """Wrap ``out`` as a Tensor and, when differentiating, log it on the tape.

    ``vjp`` receives the output gradient and returns one gradient (or None)
    per input, in order.
    """
    if _DEBUG and np.issubdtype(out.dtype, np.floating) and not np.isfinite(out).all():
        raise NumericError(f"{op}: non-finite values in output")
    res = Tensor(out, dtype=out.dtype)
    tape = active_tape()
    if tape is not None and any(t.requires_grad for t in inputs):
        res.requires_grad = True
        node = _Node(tape, res, tuple(inputs), vjp, op)
        res._node = node
        tape.nodes.append(node)
    return res


def _as_tensor(x, dtype) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype), dtype=dtype)


def unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum ``g`` down to ``shape`` (inverse of numpy broadcasting)."""
    if g.shape == shape:
        return g
    lead = g.ndim - len(shape)
    if lead:
        g = g.sum(axis=tuple(range(lead)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


# elementwise ---------------------------------------------------------------

def add(a, b) -> Tensor:
    a = _as_tensor(a, getattr(b, "dtype", DEFAULT_DTYPE))
    b = _as_tensor(b, a.dtype)
    out = a.data + b.data
    return record("add", out, (a, b),
                  lambda g: (unbroadcast(g, a.shape), unbroadcast(g, b.shape)))


def sub(a, b) -> Tensor:
    a = _as_tensor(a, getattr(b, "dtype", DEFAULT_DTYPE))
    b = _as_tensor(b, a.dtype)
    out = a.data - b.data
    return record("sub", out, (a, b),
                  lambda g: (unbroadcast(g, a.shape), unbroadcast(-g, b.shape)))


def mul(a, b) -> Tensor:
    a = _as_tensor(a, getattr(b, "dtype", DEFAULT_DTYPE))
    if not isinstance(b, Tensor):
        c = np.asarray(b, dtype=a.dtype)
        return record("mul", a.data * c, (a,), lambda g: (g * c,))
    out = a.data * b.data
    return record("mul", out, (a, b),
                  lambda g: (unbroadcast(g * b.data, a.shape), unbroadcast(g * a.data, b.shape)))


def relu(x: Tensor) -> Tensor:
    mask = log_branch(x.data > 0)
    return record("relu", x.data * mask, (x,), lambda g: (g * mask,))


def sum_all(x: Tensor) -> Tensor:
    return record("sum", np.asarray(x.data.sum(), dtype=x.dtype), (x,),
                  lambda g: (np.broadcast_to(g, x.shape).astype(x.dtype),))


def mean_all(x: Tensor) -> Tensor:
    n = x.size
    return record("mean", np.asarray(x.data.mean(), dtype=x.dtype), (x,),
                  lambda g: (np.full(x.shape, g / n, dtype=x.dtype),))


def mean_axes(x: Tensor, axes: tuple) -> Tensor:
    """Mean over ``axes`` keeping dims (e.g. global average pooling)."""
    count = int(np.prod([x.shape[a] for a in axes]))
    out = x.data.mean(axis=axes, keepdims=True)
    return record("mean_axes", out, (x,),
                  lambda g: (np.broadcast_to(g / count, x.shape).astype(x.dtype),))


def reshape(x: Tensor, shape: tuple) -> Tensor:
    old = x.shape
    return record("reshape", x.data.reshape(shape), (x,), lambda g: (g.reshape(old),))


def transpose(x: Tensor, axes: Optional[tuple] = None) -> Tensor:
    if axes is None:
        axes = tuple(range(x.ndim))[::-1]
    inv = tuple(np.argsort(axes))
    return record("transpose", np.ascontiguousarray(x.data.transpose(axes)), (x,),
                  lambda g: (g.transpose(inv),))


# linear algebra --------------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product over the last two axes.

    ``a`` may carry leading batch axes; ``b`` is either a single (K, M) matrix
    shared across the batch or has the same leading axes as ``a``.
    """
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: inner dimensions differ for shapes {a.shape} and {b.shape}")
    if b.ndim > 2 and b.shape[:-2] != a.shape[:-2]:
        raise ShapeError(f"matmul: batch dimensions differ for shapes {a.shape} and {b.shape}")
    out = np.matmul(a.data, b.data)

    def vjp(g):
        ga = np.matmul(g, np.swapaxes(b.data, -1, -2)) if a.requires_grad else None
        gb = None
        if b.requires_grad:
            gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
            if b.ndim == 2 and gb.ndim > 2:
                gb = gb.reshape(-1, *b.shape).sum(axis=0)
        return ga, gb

    return record("matmul", out, (a, b), vjp)


def _check_nan(x: np.ndarray, op: str) -> None:
    if np.isnan(x).any():
        raise NumericError(f"{op}: NaN in input")


def softmax_axis(x: Tensor, axis: int) -> Tensor:
    """Softmax along ``axis`` with max subtraction.

    ``axis=-2`` normalizes the rows within each column, ``axis=-1`` the
    columns within each row.
    """
    _check_nan(x.data, "softmax_axis")
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=axis, keepdims=True)

    def vjp(g):
        return (y * (g - (g * y).sum(axis=axis, keepdims=True)),)

    return record("softmax_axis", y, (x,), vjp)


def l1_normalize_axis(x: Tensor, axis: int) -> Tensor:
    """Divide each slice along ``axis`` by its sum (inputs must be >= 0)."""
    _check_nan(x.data, "l1_normalize_axis")
    if (x.data < 0).any():
        raise ShapeError("l1_normalize_axis: input has negative entries")
    s = x.data.sum(axis=axis, keepdims=True)
    if (s <= 0).any():
        bad = np.argwhere(np.squeeze(s <= 0, axis=axis))
        raise NumericError(f"l1_normalize_axis: zero-sum slice at index {tuple(bad[0])}")
    y = x.data / s

    def vjp(g):
        return ((g - (g * y).sum(axis=axis, keepdims=True)) / s,)

    return record("l1_normalize_axis", y, (x,), vjp)


# channel plumbing --------------------------------------------------------------

def concat_channels(xs: Sequence[Tensor]) -> Tensor:
    """Concatenate (n, c, h, w) tensors along channels, in argument order."""
    xs = list(xs)
    if not xs:
        raise ShapeError("concat_channels: empty input list")
    ref = xs[0].shape
    for t in xs[1:]:
        if t.ndim != 4 or t.shape[0] != ref[0] or t.shape[2:] != ref[2:]:
            raise ShapeError(f"concat_channels: spatial mismatch {ref} vs {t.shape}")
    if len(xs) == 1:
        return xs[0]
    out = np.concatenate([t.data for t in xs], axis=1)
    bounds = np.cumsum([0] + [t.shape[1] for t in xs])

    def vjp(g):
        return tuple(g[:, bounds[i]:bounds[i + 1]] for i in range(len(xs)))

    return record("concat_channels", out, xs, vjp)


def slice_channels(x: Tensor, start: int, stop: int) -> Tensor:
    if not 0 <= start < stop <= x.shape[1]:
        raise ShapeError(f"slice_channels: bad range [{start}, {stop}) for {x.shape}")

    def vjp(g):
        full = np.zeros_like(x.data)
        full[:, start:stop] = g
        return (full,)

    return record("slice_channels", x.data[:, start:stop].copy(), (x,), vjp)


def flatten_pixels(x: Tensor) -> Tensor:
    """(n, c, h, w) -> (n, h*w, c); pixels in row-major (h, w) order."""
    n, c, h, w = x.shape
    return transpose(reshape(x, (n, c, h * w)), (0, 2, 1))


def unflatten_pixels(m: Tensor, h: int, w: int) -> Tensor:
    """Inverse of :func:`flatten_pixels`."""
    n, npix, c = m.shape
    if npix != h * w:
        raise ShapeError(f"unflatten_pixels: {npix} rows cannot form a {h}x{w} map")
    return reshape(transpose(m, (0, 2, 1)), (n, c, h, w))


# serialization -------------------------------------------------------------------

MAGIC = b"BDGT"
_DTYPE_CODES = {np.dtype("<f4"): 0, np.dtype("<f8"): 1}
_CODE_DTYPES = {v: k for k, v in _DTYPE_CODES.items()}
_HEADER = struct.Struct("<4sB4I")


def _shape4(shape: tuple) -> tuple:
    if len(shape) > 4:
        raise ShapeError(f"cannot serialize a {len(shape)}-d tensor")
    return (1,) * (4 - len(shape)) + tuple(shape)


def tensor_to_bytes(t: Union[Tensor, np.ndarray]) -> bytes:
    """Encode as magic, dtype code, four u32 shape fields, raw LE values.

    Tensors of rank < 4 are padded with leading unit axes.
    """
    arr = t.data if isinstance(t, Tensor) else np.asarray(t)
    le = arr.astype(arr.dtype.newbyteorder("<"), copy=False)
    code = _DTYPE_CODES.get(np.dtype(le.dtype))
    if code is None:
        raise ShapeError(f"unsupported dtype {arr.dtype}")
    return _HEADER.pack(MAGIC, code, *_shape4(arr.shape)) + np.ascontiguousarray(le).tobytes()


def tensor_from_bytes(buf: bytes, offset: int = 0) -> tuple[Tensor, int]:
    """Decode one record starting at ``offset``; returns (tensor, next offset)."""
    if len(buf) - offset < _HEADER.size:
        raise ShapeError("truncated tensor header")
    magic, code, *shape = _HEADER.unpack_from(buf, offset)
    if magic != MAGIC:
        raise ShapeError(f"bad tensor magic {magic!r}")
    if code not in _CODE_DTYPES:
        raise ShapeError(f"unknown dtype code {code}")
    dt = _CODE_DTYPES[code]
    count = int(np.prod(shape))
    start = offset + _HEADER.size
    end = start + count * dt.itemsize
    if end > len(buf):
        raise ShapeError("truncated tensor payload")
    arr = np.frombuffer(buf, dtype=dt, count=count, offset=start).reshape(shape)
    return Tensor(arr.astype(dt.newbyteorder("="), copy=True)), end


def save_tensor(path, t: Tensor) -> None:
    with open(path, "wb") as fh:
        fh.write(tensor_to_bytes(t))


def load_tensor(path) -> Tensor:
    with open(path, "rb") as fh:
        t, _ = tensor_from_bytes(fh.read())
    return t


def zeros(shape, dtype=DEFAULT_DTYPE, requires_grad=False) -> Tensor:
    return Tensor(np.zeros(shape, dtype=dtype), requires_grad=requires_grad, dtype=dtype)

