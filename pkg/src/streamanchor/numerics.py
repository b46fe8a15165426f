"""Dense float64 tensors with tape-based reverse-mode differentiation.

Every primitive accepts either :class:`Tensor` objects or plain numbers/arrays.
When no Tensor is involved the primitive returns a plain numpy value, so the
same formula can be evaluated symbolically (on a tape) or numerically.

Ops are recorded only while a :class:`Tape` is active and at least one input
requires a gradient::

    w = Tensor(np.ones(3), requires_grad=True)
    with Tape() as tape:
        loss = mean(w * w)
    grads = backward(tape, loss)
"""
from __future__ import annotations

import threading
from typing import Callable, NamedTuple, Sequence

import numpy as np

__all__ = [
    "ShapeError",
    "Tensor",
    "Tape",
    "backward",
    "add",
    "sub",
    "mul",
    "div",
    "neg",
    "matmul",
    "conv1d",
    "sigmoid",
    "tanh",
    "log",
    "exp",
    "pow",
    "maximum",
    "relu",
    "clamp",
    "sum",
    "mean",
    "take",
    "concat",
    "stack",
    "reshape",
    "softmax",
    "dropout",
    "forward_op",
]


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible for a primitive."""

    def __init__(self, op: str, *shapes: tuple[int, ...], detail: str = ""):
        self.op = op
        self.shapes = shapes
        msg = f"{op}: incompatible shapes {', '.join(str(s) for s in shapes)}"
        if detail:
            msg += f" ({detail})"
        super().__init__(msg)


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "name")
    # make numpy defer to our reflected operators (array * Tensor)
    __array_ufunc__ = None

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def __repr__(self) -> str:
        tag = f" {self.name!r}" if self.name else ""
        return f"Tensor{tag}(shape={self.shape}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __pow__(self, exponent):
        return pow(self, exponent)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return take(self, index)


class _Record(NamedTuple):
    op: str
    inputs: tuple
    output: Tensor
    backward: Callable[[np.ndarray], Sequence]


class _Indexed(NamedTuple):
    """Gradient contribution to a sub-block of an input."""

    index: object
    value: np.ndarray


_local = threading.local()


def _tape_stack() -> list:
    stack = getattr(_local, "stack", None)
    if stack is None:
        stack = _local.stack = []
    return stack


class Tape:
    """Ordered log of recorded primitive ops (creation order is topological).

    A tape belongs to the thread that entered it.
    """

    def __init__(self):
        self.records: list[_Record] = []

    def __enter__(self) -> "Tape":
        _tape_stack().append(self)
        return self

    def __exit__(self, *exc) -> None:
        _tape_stack().pop()

    def __len__(self) -> int:
        return len(self.records)


def _current_tape() -> Tape | None:
    stack = _tape_stack()
    return stack[-1] if stack else None


def _data(x) -> np.ndarray:
    if isinstance(x, Tensor):
        return x.data
    return np.asarray(x, dtype=np.float64)


def _emit(op: str, inputs: tuple, out: np.ndarray, bwd: Callable | None):
    if not any(isinstance(i, Tensor) for i in inputs):
        return out
    result = Tensor(out)
    tape = _current_tape()
    if tape is not None and bwd is not None:
        if any(isinstance(i, Tensor) and i.requires_grad for i in inputs):
            result.requires_grad = True
            tape.records.append(_Record(op, inputs, result, bwd))
    return result


def backward(tape: Tape, loss: Tensor) -> dict[Tensor, np.ndarray]:
    """Gradients of scalar ``loss`` with respect to every leaf on ``tape``.

    Leaves are tensors created with ``requires_grad=True`` that were not
    produced by a recorded op. Their ``.grad`` attribute is also set.
    """
    if not isinstance(loss, Tensor) or loss.data.size != 1:
        shape = loss.shape if isinstance(loss, Tensor) else np.shape(loss)
        raise ShapeError("backward", shape, detail="loss must be a scalar tensor")
    produced = {id(r.output) for r in tape.records}
    grads: dict[int, list] = {id(loss): [np.ones_like(loss.data), False]}
    leaves: dict[int, Tensor] = {}
    for rec in reversed(tape.records):
        entry = grads.pop(id(rec.output), None)
        if entry is None:
            continue
        for inp, g in zip(rec.inputs, rec.backward(entry[0])):
            if g is None or not isinstance(inp, Tensor) or not inp.requires_grad:
                continue
            key = id(inp)
            if key not in produced:
                leaves[key] = inp
            _accumulate(grads, key, inp.shape, g)
    out = {}
    for key, tensor in leaves.items():
        g = grads[key][0]
        tensor.grad = g
        out[tensor] = g
    if id(loss) not in produced and loss.requires_grad:
        loss.grad = np.ones_like(loss.data)
        out[loss] = loss.grad
    return out


def _accumulate(grads: dict, key: int, shape: tuple, g) -> None:
    entry = grads.get(key)
    if isinstance(g, _Indexed):
        if entry is None:
            entry = grads[key] = [np.zeros(shape), True]
        elif not entry[1]:
            entry[0] = entry[0].copy()
            entry[1] = True
        entry[0][g.index] += g.value
        return
    if entry is None:
        grads[key] = [g, False]
    elif entry[1]:
        entry[0] += g
    else:
        entry[0] = entry[0] + g
        entry[1] = True


# -- broadcasting -----------------------------------------------------------

def _check_pair(op: str, a: np.ndarray, b: np.ndarray) -> None:
    sa, sb = a.shape, b.shape
    if sa == sb or a.ndim == 0 or b.ndim == 0:
        return
    if a.ndim >= b.ndim and sa[a.ndim - b.ndim:] == sb:
        return
    if b.ndim > a.ndim and sb[b.ndim - a.ndim:] == sa:
        return
    raise ShapeError(op, sa, sb)


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    if len(shape) == 0:
        return np.asarray(g.sum())
    lead = g.ndim - len(shape)
    return g.sum(axis=tuple(range(lead)))


# -- elementwise binary -----------------------------------------------------

def add(a, b):
    da, db = _data(a), _data(b)
    _check_pair("add", da, db)

    def bwd(g):
        return _unbroadcast(g, da.shape), _unbroadcast(g, db.shape)

    return _emit("add", (a, b), da + db, bwd)


def sub(a, b):
    da, db = _data(a), _data(b)
    _check_pair("sub", da, db)

    def bwd(g):
        return _unbroadcast(g, da.shape), _unbroadcast(-g, db.shape)

    return _emit("sub", (a, b), da - db, bwd)


def mul(a, b):
    da, db = _data(a), _data(b)
    _check_pair("mul", da, db)

    def bwd(g):
        return _unbroadcast(g * db, da.shape), _unbroadcast(g * da, db.shape)

    return _emit("mul", (a, b), da * db, bwd)


def div(a, b):
    da, db = _data(a), _data(b)
    _check_pair("div", da, db)
    out = da / db

    def bwd(g):
        return _unbroadcast(g / db, da.shape), _unbroadcast(-g * out / db, db.shape)

    return _emit("div", (a, b), out, bwd)


def neg(a):
    return _emit("neg", (a,), -_data(a), lambda g: (-g,))


def matmul(a, b, rowwise=False):
    """``a`` of shape (..., n) times matrix ``b`` of shape (n, m).

    With ``rowwise`` every output row is computed by the same fixed
    summation order regardless of how many rows are in ``a``. BLAS picks
    kernels by problem size, so plain ``@`` can differ in the last bit
    between a full sequence and a chunk of it.
    """
    da, db = _data(a), _data(b)
    if db.ndim != 2 or da.ndim < 1 or da.shape[-1] != db.shape[0]:
        raise ShapeError("matmul", da.shape, db.shape)
    out = np.einsum("...n,nm->...m", da, db) if rowwise else da @ db

    def bwd(g):
        ga = g @ db.T
        gb = da.reshape(-1, da.shape[-1]).T @ g.reshape(-1, db.shape[1])
        return ga, gb

    return _emit("matmul", (a, b), out, bwd)


def conv1d(x, kernel, dilation: int = 1):
    """Causal depthwise 1-D convolution along the time axis.

    ``x`` is (..., T, C) and ``kernel`` is (k, C); the last tap multiplies the
    current frame, tap ``j`` looks back ``(k - 1 - j) * dilation`` frames.
    Frames before the start are zero. 1-D ``x`` with 1-D ``kernel`` is also
    accepted (single channel).
    """
    dx, dk = _data(x), _data(kernel)
    flat = dx.ndim == 1 and dk.ndim == 1
    if flat:
        dx, dk = dx[:, None], dk[:, None]
    if dilation < 1 or dk.ndim != 2 or dx.ndim < 2 or dx.shape[-1] != dk.shape[1]:
        raise ShapeError("conv1d", _data(x).shape, _data(kernel).shape,
                         detail=f"dilation={dilation}")
    k = dk.shape[0]
    T = dx.shape[-2]
    # tap j multiplies the frame (k - 1 - j) * dilation steps back
    shifts = [(k - 1 - j) * dilation for j in range(k)]
    out = dx * dk[k - 1]
    tmp = np.empty(dx.shape)
    for j in range(k - 1):
        s = shifts[j]
        if s >= T:
            continue
        view = tmp[..., :T - s, :]
        np.multiply(dx[..., :T - s, :], dk[j], out=view)
        out[..., s:, :] += view
    if flat:
        out = out[:, 0]

    def bwd(g):
        g2 = g[:, None] if flat else g
        gx = g2 * dk[k - 1]
        gk = np.zeros(dk.shape)
        buf = np.empty(g2.shape)
        lx = dx.reshape(-1, T, dx.shape[-1])
        lg = g2.reshape(-1, T, dx.shape[-1])
        for j in range(k):
            s = shifts[j]
            if s >= T:
                continue
            if j < k - 1:
                view = buf[..., :T - s, :]
                np.multiply(g2[..., s:, :], dk[j], out=view)
                gx[..., :T - s, :] += view
            gk[j] = np.einsum("btc,btc->c", lx[:, :T - s], lg[:, s:])
        if flat:
            return gx[:, 0], gk[:, 0]
        return gx, gk

    return _emit("conv1d", (x, kernel), out, bwd)


# -- elementwise unary ------------------------------------------------------

def sigmoid(a):
    out = 0.5 * (1.0 + np.tanh(0.5 * _data(a)))
    return _emit("sigmoid", (a,), out, lambda g: (g * out * (1.0 - out),))


def tanh(a):
    out = np.tanh(_data(a))
    return _emit("tanh", (a,), out, lambda g: (g * (1.0 - out * out),))


def log(a):
    da = _data(a)
    return _emit("log", (a,), np.log(da), lambda g: (g / da,))


def exp(a):
    out = np.exp(_data(a))
    return _emit("exp", (a,), out, lambda g: (g * out,))


def pow(a, exponent: float):
    """Elementwise power with a constant exponent."""
    if isinstance(exponent, Tensor):
        raise TypeError("pow: exponent must be a constant")
    da = _data(a)
    c = float(exponent)
    out = da ** c

    def bwd(g):
        if c == 0.0:
            return (np.zeros_like(da),)
        return (g * c * da ** (c - 1.0),)

    return _emit("pow", (a,), out, bwd)


def maximum(a, floor: float):
    """Elementwise max against a constant; gradient flows where ``a > floor``."""
    da = _data(a)
    keep = da > floor
    return _emit("max", (a,), np.maximum(da, floor), lambda g: (g * keep,))


def relu(a):
    return maximum(a, 0.0)


def clamp(a, lo: float, hi: float):
    da = _data(a)
    inside = (da >= lo) & (da <= hi)
    return _emit("clamp", (a,), np.clip(da, lo, hi), lambda g: (g * inside,))


# -- reductions and structure -----------------------------------------------

def sum(a, axis: int | None = None):
    da = _data(a)
    out = da.sum(axis=axis)

    def bwd(g):
        if axis is None:
            return (np.broadcast_to(g, da.shape).copy(),)
        return (np.broadcast_to(np.expand_dims(g, axis), da.shape).copy(),)

    return _emit("sum", (a,), out, bwd)


def mean(a, axis: int | None = None):
    da = _data(a)
    n = da.size if axis is None else da.shape[axis]
    if n == 0:
        raise ShapeError("mean", da.shape, detail="empty reduction")
    out = da.mean(axis=axis)

    def bwd(g):
        if axis is None:
            return (np.full(da.shape, g / n),)
        return (np.broadcast_to(np.expand_dims(g / n, axis), da.shape).copy(),)

    return _emit("mean", (a,), out, bwd)


def take(a, index):
    """Basic (view) indexing, e.g. ``x[:, t]`` or ``x[..., 0:8]``."""
    da = _data(a)
    try:
        out = da[index]
    except IndexError as exc:
        raise ShapeError("slice", da.shape, detail=str(exc)) from None
    return _emit("slice", (a,), out, lambda g: (_Indexed(index, g),))


def concat(items: Sequence, axis: int = -1):
    arrays = [_data(i) for i in items]
    try:
        out = np.concatenate(arrays, axis=axis)
    except ValueError:
        raise ShapeError("concat", *(x.shape for x in arrays)) from None
    bounds = np.cumsum([0] + [x.shape[axis] for x in arrays])

    def bwd(g):
        return [np.take(g, np.arange(bounds[i], bounds[i + 1]), axis=axis)
                for i in range(len(arrays))]

    return _emit("concat", tuple(items), out, bwd)


def stack(items: Sequence, axis: int = 0):
    arrays = [_data(i) for i in items]
    try:
        out = np.stack(arrays, axis=axis)
    except ValueError:
        raise ShapeError("stack", *(x.shape for x in arrays)) from None

    def bwd(g):
        return [np.take(g, i, axis=axis) for i in range(len(arrays))]

    return _emit("stack", tuple(items), out, bwd)


def reshape(a, shape: tuple[int, ...]):
    da = _data(a)
    try:
        out = da.reshape(shape)
    except ValueError:
        raise ShapeError("reshape", da.shape, tuple(shape)) from None
    return _emit("reshape", (a,), out, lambda g: (g.reshape(da.shape),))


def softmax(a):
    """Softmax over the last axis."""
    da = _data(a)
    z = np.exp(da - da.max(axis=-1, keepdims=True))
    out = z / z.sum(axis=-1, keepdims=True)

    def bwd(g):
        return (out * (g - (g * out).sum(axis=-1, keepdims=True)),)

    return _emit("softmax", (a,), out, bwd)


def dropout(a, rate: float, rng: np.random.Generator | None, training: bool = True):
    """Inverted dropout; identity when not training or ``rate == 0``."""
    if not 0.0 <= rate < 1.0:
        raise ValueError(f"dropout: rate must be in [0, 1), got {rate}")
    if not training or rate == 0.0:
        return a
    if rng is None:
        raise ValueError("dropout: training mode needs a seeded generator")
    da = _data(a)
    mask = (rng.random(da.shape) >= rate) / (1.0 - rate)
    return _emit("dropout", (a,), da * mask, lambda g: (g * mask,))


_OPS: dict[str, Callable] = {
    "add": add,
    "sub": sub,
    "mul": mul,
    "div": div,
    "neg": neg,
    "matmul": matmul,
    "conv1d": conv1d,
    "sigmoid": sigmoid,
    "tanh": tanh,
    "log": log,
    "exp": exp,
    "pow": pow,
    "max": maximum,
    "clamp": clamp,
    "sum": sum,
    "mean": mean,
    "slice": take,
    "concat": lambda *xs, axis=-1: concat(xs, axis=axis),
    "stack": lambda *xs, axis=0: stack(xs, axis=axis),
    "reshape": reshape,
    "softmax": softmax,
    "dropout": dropout,
}


def forward_op(op: str, *inputs, **kwargs):
    """Apply a primitive by name."""
    try:
        fn = _OPS[op]
    except KeyError:
        raise ValueError(f"unknown primitive {op!r}") from None
    return fn(*inputs, **kwargs)
