"""Dense float64 tensors with tape-based reverse-mode differentiation.

Every differentiable op computes its value with numpy and, when any input is
tracked, appends ``(output, inputs, backward_rule)`` to the active tape.
``backward(root)`` replays the tape once in reverse and then retires it;
leaf gradients accumulate additively across tapes.
"""

from __future__ import annotations

import threading
from contextlib import contextmanager
from typing import Callable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


class DimensionError(ValueError):
    pass


class TapeError(RuntimeError):
    pass


class NonFiniteError(FloatingPointError):
    pass


class Tape:
    """Ordered record of operations; consumed by a single backward pass."""

    def __init__(self) -> None:
        self.ops: list[tuple[Tensor, tuple[Tensor, ...], Callable]] = []
        self.consumed = False

    def __len__(self) -> int:
        return len(self.ops)

    def record(self, out: Tensor, inputs: tuple[Tensor, ...], rule: Callable) -> None:
        if self.consumed:
            raise TapeError("cannot record onto a tape that has already been replayed")
        out._tape = self
        self.ops.append((out, inputs, rule))

    def backward(self, root: Tensor) -> None:
        if self.consumed:
            raise TapeError("tape already replayed; run a fresh forward pass first")
        if root._tape is not self:
            raise TapeError("root was not produced on this tape")
        self.consumed = True
        pending: dict[int, np.ndarray] = {id(root): np.ones_like(root.data)}
        for out, inputs, rule in reversed(self.ops):
            g = pending.pop(id(out), None)
            if g is None:
                continue
            for x, gx in zip(inputs, rule(g)):
                if gx is None or not x.tracked:
                    continue
                if x._tape is None:
                    x.grad = gx.copy() if x.grad is None else x.grad + gx
                else:
                    prev = pending.get(id(x))
                    pending[id(x)] = gx if prev is None else prev + gx
        self.ops.clear()


_local = threading.local()


def current_tape() -> Tape:
    tape = getattr(_local, "tape", None)
    if tape is None or tape.consumed:
        tape = Tape()
        _local.tape = tape
    return tape


def new_tape() -> Tape:
    """Start a fresh tape for subsequent ops on this thread."""
    _local.tape = Tape()
    return _local.tape


def _grad_enabled() -> bool:
    return getattr(_local, "grad_enabled", True)


@contextmanager
def no_grad():
    prev = _grad_enabled()
    _local.grad_enabled = False
    try:
        yield
    finally:
        _local.grad_enabled = prev


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_tape")
    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.array(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._tape: Tape | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def tracked(self) -> bool:
        return self.requires_grad or self._tape is not None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise DimensionError(f"item() needs a single element, got shape {self.shape}")
        return float(self.data.reshape(()))

    def detach(self) -> Tensor:
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return add(neg(self), other)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise DimensionError("division is only defined by a scalar")
        return scale(self, 1.0 / other)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self):
        return sum(self)

    def mean(self):
        return mean(self)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    @property
    def T(self):
        return transpose(self, None)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _finish(value: np.ndarray, inputs: Sequence[Tensor], rule: Callable, name: str) -> Tensor:
    if not np.all(np.isfinite(value)):
        raise NonFiniteError(f"{name} produced non-finite values")
    out = Tensor.__new__(Tensor)
    out.data = value
    out.requires_grad = False
    out.grad = None
    out._tape = None
    tracked = [x for x in inputs if x.tracked]
    if tracked and _grad_enabled():
        tapes = {id(x._tape): x._tape for x in tracked if x._tape is not None}
        if len(tapes) > 1:
            raise TapeError(f"{name}: inputs come from different tapes")
        tape = next(iter(tapes.values())) if tapes else current_tape()
        if tape.consumed:
            raise TapeError(f"{name}: input belongs to a tape that was already replayed")
        tape.record(out, tuple(inputs), rule)
    return out


def _is_scalar(x) -> bool:
    return not isinstance(x, Tensor) and np.ndim(x) == 0


def _same_shape(a: Tensor, b: Tensor, name: str) -> None:
    if a.shape != b.shape:
        raise DimensionError(f"{name}: shapes {a.shape} and {b.shape} differ")


# ---------------------------------------------------------------- elementwise


def add(a, b) -> Tensor:
    if _is_scalar(b):
        a = as_tensor(a)
        return _finish(a.data + float(b), (a,), lambda g: (g,), "add")
    if _is_scalar(a):
        return add(b, a)
    a, b = as_tensor(a), as_tensor(b)
    _same_shape(a, b, "add")
    return _finish(a.data + b.data, (a, b), lambda g: (g, g), "add")


def sub(a, b) -> Tensor:
    if _is_scalar(b):
        return add(a, -float(b))
    a, b = as_tensor(a), as_tensor(b)
    _same_shape(a, b, "sub")
    return _finish(a.data - b.data, (a, b), lambda g: (g, -g), "sub")


def neg(a: Tensor) -> Tensor:
    return _finish(-a.data, (a,), lambda g: (-g,), "neg")


def scale(a: Tensor, c: float) -> Tensor:
    c = float(c)
    return _finish(a.data * c, (a,), lambda g: (g * c,), "scale")


def mul(a, b) -> Tensor:
    if _is_scalar(b):
        return scale(as_tensor(a), b)
    if _is_scalar(a):
        return scale(as_tensor(b), a)
    a, b = as_tensor(a), as_tensor(b)
    _same_shape(a, b, "mul")
    ad, bd = a.data, b.data
    return _finish(ad * bd, (a, b), lambda g: (g * bd, g * ad), "mul")


def square(a: Tensor) -> Tensor:
    ad = a.data
    return _finish(ad * ad, (a,), lambda g: (2.0 * ad * g,), "square")


def silu(a: Tensor) -> Tensor:
    x = a.data
    sig = 0.5 * (1.0 + np.tanh(0.5 * x))  # overflow-free logistic

    def rule(g):
        return (g * sig * (1.0 + x * (1.0 - sig)),)

    return _finish(x * sig, (a,), rule, "silu")


def elementwise(op: str, *args) -> Tensor:
    """Name-dispatched entry point over the elementwise ops."""
    table = {"add": add, "sub": sub, "mul": mul, "scale": scale, "silu": silu, "neg": neg, "square": square}
    try:
        fn = table[op]
    except KeyError:
        raise ValueError(f"unknown elementwise op {op!r}") from None
    return fn(*args)


# ---------------------------------------------------------------- reductions & shape


def sum(a: Tensor) -> Tensor:  # noqa: A001 - mirrors numpy naming
    shape = a.shape
    return _finish(np.asarray(a.data.sum()), (a,), lambda g: (np.full(shape, float(g)),), "sum")


def mean(a: Tensor) -> Tensor:
    shape, n = a.shape, a.size
    return _finish(np.asarray(a.data.mean()), (a,), lambda g: (np.full(shape, float(g) / n),), "mean")


def reshape(a: Tensor, shape: tuple[int, ...]) -> Tensor:
    src = a.shape
    try:
        value = a.data.reshape(shape)
    except ValueError as err:
        raise DimensionError(str(err)) from None
    return _finish(value, (a,), lambda g: (g.reshape(src),), "reshape")


def transpose(a: Tensor, axes: Sequence[int] | None = None) -> Tensor:
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    inv = tuple(np.argsort(axes))
    return _finish(a.data.transpose(axes), (a,), lambda g: (g.transpose(inv),), "transpose")


def concat(xs: Sequence[Tensor], axis: int = 0) -> Tensor:
    xs = [as_tensor(x) for x in xs]
    sizes = [x.shape[axis] for x in xs]
    cuts = np.cumsum(sizes)[:-1]

    def rule(g):
        return tuple(np.split(g, cuts, axis=axis))

    return _finish(np.concatenate([x.data for x in xs], axis=axis), tuple(xs), rule, "concat")


def add_bias(x: Tensor, b: Tensor, axis: int) -> Tensor:
    """Add a bias along one axis of ``x`` (per-channel or per-feature).

    ``b`` is either 1-D with length ``x.shape[axis]``, or 2-D with shape
    ``(x.shape[0], x.shape[axis])`` for a separate bias per leading sample.
    """
    axis = axis % x.ndim
    if b.ndim == 1 and b.shape[0] == x.shape[axis]:
        view = [1] * x.ndim
        view[axis] = -1
        reduce_axes = tuple(i for i in range(x.ndim) if i != axis)
    elif b.ndim == 2 and axis > 0 and b.shape == (x.shape[0], x.shape[axis]):
        view = [1] * x.ndim
        view[0], view[axis] = x.shape[0], -1
        reduce_axes = tuple(i for i in range(1, x.ndim) if i != axis)
    else:
        raise DimensionError(f"add_bias: bias {b.shape} does not fit axis {axis} of {x.shape}")
    bshape = b.shape
    return _finish(
        x.data + b.data.reshape(view),
        (x, b),
        lambda g: (g, g.sum(axis=reduce_axes).reshape(bshape)),
        "add_bias",
    )


# ---------------------------------------------------------------- linear algebra


def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul: cannot multiply {a.shape} by {b.shape}")
    ad, bd = a.data, b.data
    return _finish(ad @ bd, (a, b), lambda g: (g @ bd.T, ad.T @ g), "matmul")


def mode_product(x: Tensor, m, axis: int) -> Tensor:
    """Apply matrix ``m`` (q x p) along ``axis`` of ``x`` (size p there)."""
    x = as_tensor(x)
    m = as_tensor(m)
    axis = axis % x.ndim
    if m.ndim != 2 or m.shape[1] != x.shape[axis]:
        raise DimensionError(f"mode_product: matrix {m.shape} does not fit axis {axis} of {x.shape}")
    xd, md = x.data, m.data
    value = np.moveaxis(np.tensordot(xd, md, axes=([axis], [1])), -1, axis)
    others = [i for i in range(x.ndim) if i != axis]

    def rule(g):
        gx = np.moveaxis(np.tensordot(g, md, axes=([axis], [0])), -1, axis) if x.tracked else None
        gm = np.tensordot(g, xd, axes=(others, others)) if m.tracked else None
        return gx, gm

    return _finish(value, (x, m), rule, "mode_product")


# ---------------------------------------------------------------- image ops


def conv2d(x: Tensor, w: Tensor, stride: int = 1) -> Tensor:
    """Zero-padded 'same' convolution (cross-correlation) with an odd square kernel.

    ``x`` is (ch_in, H, W) or (N, ch_in, H, W); ``w`` is (ch_out, ch_in, k, k).
    Output spatial size is ceil(H / stride).
    """
    if stride not in (1, 2):
        raise ValueError(f"stride must be 1 or 2, got {stride}")
    batched = x.ndim == 4
    if x.ndim not in (3, 4) or w.ndim != 4:
        raise DimensionError(f"conv2d: bad ranks {x.shape}, {w.shape}")
    xd = x.data if batched else x.data[None]
    n, cin, h, wd = xd.shape
    cout, cin_w, k, k2 = w.shape
    if cin != cin_w:
        raise DimensionError(f"conv2d: input has {cin} channels, kernel expects {cin_w}")
    if k != k2 or k % 2 == 0:
        raise DimensionError(f"conv2d: kernel must be odd and square, got {k}x{k2}")
    p = k // 2
    xp = np.pad(xd, ((0, 0), (0, 0), (p, p), (p, p))) if p else xd
    ho, wo = (h - 1) // stride + 1, (wd - 1) // stride + 1
    win = sliding_window_view(xp, (k, k), axis=(2, 3))[:, :, ::stride, ::stride]
    cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(n * ho * wo, cin * k * k)
    wmat = w.data.reshape(cout, -1)
    out = (cols @ wmat.T).reshape(n, ho, wo, cout).transpose(0, 3, 1, 2)
    if not batched:
        out = out[0]

    def rule(g):
        g4 = g if batched else g[None]
        gm = g4.transpose(0, 2, 3, 1).reshape(-1, cout)
        gw = (gm.T @ cols).reshape(w.shape) if w.tracked else None
        gx = None
        if x.tracked:
            dcols = (gm @ wmat).reshape(n, ho, wo, cin, k, k)
            gxp = np.zeros_like(xp)
            for i in range(k):
                for j in range(k):
                    gxp[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += (
                        dcols[..., i, j].transpose(0, 3, 1, 2)
                    )
            gx = gxp[:, :, p:p + h, p:p + wd] if p else gxp
            if not batched:
                gx = gx[0]
        return gx, gw

    return _finish(np.ascontiguousarray(out), (x, w), rule, "conv2d")


def resize_nearest(x: Tensor, factor: int) -> Tensor:
    """Replicate each pixel of the last two axes into a factor x factor block."""
    factor = int(factor)
    if factor < 1:
        raise ValueError(f"factor must be >= 1, got {factor}")
    if x.ndim < 2:
        raise DimensionError("resize_nearest needs at least two axes")
    if factor == 1:
        return _finish(x.data.copy(), (x,), lambda g: (g,), "resize_nearest")
    value = x.data.repeat(factor, axis=-2).repeat(factor, axis=-1)
    lead = x.shape[:-2]
    h, w = x.shape[-2:]

    def rule(g):
        return (g.reshape(*lead, h, factor, w, factor).sum(axis=(-3, -1)),)

    return _finish(value, (x,), rule, "resize_nearest")


# ---------------------------------------------------------------- backward


def backward(root: Tensor) -> None:
    """Populate ``.grad`` on every requires_grad leaf reachable from scalar ``root``."""
    if root.size != 1:
        raise TapeError(f"backward needs a scalar root, got shape {root.shape}")
    if root._tape is None:
        raise TapeError("root has no recorded tape")
    root._tape.backward(root)
