"""Dense float tensors with tape-based reverse-mode differentiation.

Only the handful of operations the segmentation pipeline needs are provided.
Binary ops require equal shapes; the only broadcasting allowed is against a
Python scalar. Storage is float32 by default; float64 tensors are accepted
everywhere (used by the finite-difference checks). Reductions and the
convolution inner products accumulate in float64.

Usage::

    with Tape() as tape:
        loss = mean(sigmoid(conv2d(x, w, b)))
    grads = tape.backward(loss)     # {tensor: ndarray}
"""

from __future__ import annotations

import numbers
from typing import Callable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.special import expit

__all__ = [
    "Tensor",
    "Tape",
    "NonFiniteError",
    "StaleTapeError",
    "MissingGradientError",
    "tensor",
    "zeros",
    "backward",
    "add",
    "sub",
    "mul",
    "div",
    "scale",
    "add_scalar",
    "sigmoid",
    "silu",
    "elementwise",
    "tsum",
    "mean",
    "conv2d",
    "bilinear_resize",
    "interp_matrix",
    "crop",
    "slice_crop",
    "paste",
    "sgd_step",
    "adam_step",
]

DEFAULT_DTYPE = np.float32


class NonFiniteError(FloatingPointError):
    """An op produced NaN or Inf."""


class StaleTapeError(RuntimeError):
    """backward() was called on a tape that was already replayed."""


class MissingGradientError(KeyError):
    pass


class Tensor:
    """Immutable dense array plus a flag saying whether gradients flow to it."""

    __slots__ = ("data", "requires_grad", "_tape", "__weakref__")
    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data).astype(DEFAULT_DTYPE if dtype is None else dtype, copy=False)
        if arr.dtype not in (np.float32, np.float64):
            raise TypeError(f"only float32 and float64 tensors are supported, got {arr.dtype}")
        if arr.ndim == 0:
            arr = arr.reshape(())
        if any(d < 1 for d in arr.shape):
            raise ValueError(f"all dimensions must be positive, got {arr.shape}")
        arr.setflags(write=False)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self._tape: Tape | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else _raise_item(self)

    def detach(self) -> "Tensor":
        return Tensor(self.data, dtype=self.dtype)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return add_scalar(scale(self, -1.0), other)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return scale(self, -1.0)


def _raise_item(t: Tensor):
    raise ValueError(f"item() needs a single-element tensor, got shape {t.shape}")


def tensor(data, requires_grad: bool = False, dtype=None) -> Tensor:
    return Tensor(data, requires_grad=requires_grad, dtype=dtype)


def zeros(shape: Sequence[int], dtype=DEFAULT_DTYPE) -> Tensor:
    return Tensor(np.zeros(tuple(shape)), dtype=dtype)


# ---------------------------------------------------------------------------
# Tape
# ---------------------------------------------------------------------------

_ACTIVE: list["Tape"] = []


class Tape:
    """Ordered record of differentiable ops executed while the tape is active.

    Ops are recorded only when at least one input requires a gradient. A tape
    can be replayed backwards exactly once.
    """

    def __init__(self):
        self.records: list[tuple[Tensor, tuple[Tensor, ...], Callable, str]] = []
        self.consumed = False

    def __enter__(self) -> "Tape":
        _ACTIVE.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _ACTIVE.remove(self)

    def __len__(self) -> int:
        return len(self.records)

    def backward(self, loss: Tensor) -> dict[Tensor, np.ndarray]:
        if self.consumed:
            raise StaleTapeError("tape already replayed; run a new forward pass")
        if loss.data.size != 1:
            raise ValueError(f"loss must be a scalar, got shape {loss.shape}")
        if loss._tape is not self:
            raise ValueError("loss was not produced on this tape")
        self.consumed = True

        pending: dict[int, np.ndarray] = {id(loss): np.ones(loss.shape, dtype=np.float64)}
        leaves: dict[int, Tensor] = {}
        for out, inputs, grad_fn, _name in reversed(self.records):
            g = pending.pop(id(out), None)
            if g is None:
                continue
            in_grads = grad_fn(g)
            for inp, gi in zip(inputs, in_grads):
                if gi is None or not inp.requires_grad:
                    continue
                key = id(inp)
                if key in pending:
                    pending[key] = pending[key] + gi
                else:
                    pending[key] = gi
                if inp._tape is None:
                    leaves[key] = inp
        # drop references to intermediates as soon as the replay is done
        self.records = []
        return {
            t: pending[k].astype(t.dtype, copy=False).reshape(t.shape)
            for k, t in leaves.items()
            if k in pending
        }


def backward(loss: Tensor) -> dict[Tensor, np.ndarray]:
    """Gradients of a scalar ``loss`` w.r.t. every leaf tensor that requires grad."""
    if loss._tape is None:
        raise ValueError("loss is not reachable from any tape")
    return loss._tape.backward(loss)


def _result_dtype(*arrays: np.ndarray):
    return np.result_type(*[a.dtype for a in arrays])


def _emit(name: str, data: np.ndarray, inputs: tuple[Tensor, ...], grad_fn: Callable) -> Tensor:
    if not np.isfinite(data).all():
        raise NonFiniteError(f"{name} produced non-finite values")
    out = Tensor(data, dtype=data.dtype)
    if _ACTIVE and any(t.requires_grad for t in inputs):
        tape = _ACTIVE[-1]
        out.requires_grad = True
        out._tape = tape
        tape.records.append((out, inputs, grad_fn, name))
    return out


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _check_same(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape != b.shape:
        raise ValueError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


# ---------------------------------------------------------------------------
# Elementwise
# ---------------------------------------------------------------------------


def add(a: Tensor, b) -> Tensor:
    if isinstance(b, numbers.Real):
        return add_scalar(a, b)
    b = _as_tensor(b)
    _check_same(a, b, "add")
    return _emit("add", a.data + b.data, (a, b), lambda g: (g, g))


def sub(a: Tensor, b) -> Tensor:
    if isinstance(b, numbers.Real):
        return add_scalar(a, -b)
    b = _as_tensor(b)
    _check_same(a, b, "sub")
    return _emit("sub", a.data - b.data, (a, b), lambda g: (g, -g))


def mul(a: Tensor, b) -> Tensor:
    if isinstance(b, numbers.Real):
        return scale(a, b)
    b = _as_tensor(b)
    _check_same(a, b, "mul")
    ad, bd = a.data, b.data
    return _emit("mul", ad * bd, (a, b), lambda g: (g * bd, g * ad))


def div(a: Tensor, b) -> Tensor:
    if isinstance(b, numbers.Real):
        return scale(a, 1.0 / b)
    b = _as_tensor(b)
    _check_same(a, b, "div")
    ad, bd = a.data, b.data
    out = ad / bd

    def grad_fn(g):
        gb = g / bd.astype(np.float64)
        return gb, -gb * out

    return _emit("div", out, (a, b), grad_fn)


def scale(a: Tensor, s: float) -> Tensor:
    s_arr = a.dtype.type(s)
    return _emit("scale", a.data * s_arr, (a,), lambda g: (g * float(s),))


def add_scalar(a: Tensor, s: float) -> Tensor:
    return _emit("add_scalar", a.data + a.dtype.type(s), (a,), lambda g: (g,))


def sigmoid(a: Tensor) -> Tensor:
    out = expit(a.data)
    return _emit("sigmoid", out, (a,), lambda g: (g * out * (1.0 - out),))


def silu(a: Tensor) -> Tensor:
    """x * sigmoid(x); smooth, and zero at zero."""
    x = a.data
    s = expit(x)
    return _emit("silu", x * s, (a,), lambda g: (g * (s * (1.0 + x * (1.0 - s))),))


def elementwise(op: str, a: Tensor, b=None) -> Tensor:
    """Dispatch by name: ``add``, ``mul``, ``scale`` (b scalar) or ``sigmoid``."""
    if op == "add":
        return add(a, b)
    if op == "mul":
        return mul(a, b)
    if op == "scale":
        if not isinstance(b, numbers.Real):
            raise TypeError("scale expects a scalar factor")
        return scale(a, b)
    if op == "sigmoid":
        return sigmoid(a)
    raise ValueError(f"unknown elementwise op {op!r}")


# ---------------------------------------------------------------------------
# Reductions
# ---------------------------------------------------------------------------


def tsum(a: Tensor, axis: int | tuple[int, ...] | None = None) -> Tensor:
    """Sum with float64 accumulation."""
    out = np.sum(a.data, axis=axis, dtype=np.float64).astype(a.dtype)
    shape = a.shape
    if axis is None:
        axes = tuple(range(a.ndim))
    else:
        axes = tuple(ax % a.ndim for ax in ((axis,) if isinstance(axis, int) else axis))

    def grad_fn(g):
        g = np.asarray(g, dtype=np.float64)
        keep = [1 if i in axes else d for i, d in enumerate(shape)]
        return (np.broadcast_to(g.reshape(keep), shape),)

    return _emit("sum", np.asarray(out), (a,), grad_fn)


def mean(a: Tensor) -> Tensor:
    return scale(tsum(a), 1.0 / a.data.size)


# ---------------------------------------------------------------------------
# Convolution
# ---------------------------------------------------------------------------


def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None, stride: int = 1, padding: int = 0) -> Tensor:
    """Cross-correlation over NCHW input with a square OIkk kernel."""
    if x.ndim != 4 or weight.ndim != 4:
        raise ValueError("conv2d expects 4-d input and kernel")
    n, cin, h, w = x.shape
    cout, kcin, k, k2 = weight.shape
    if kcin != cin:
        raise ValueError(f"conv2d: input has {cin} channels, kernel expects {kcin}")
    if k != k2:
        raise ValueError("conv2d: kernel must be square")
    if stride < 1 or padding < 0:
        raise ValueError("conv2d: stride >= 1 and padding >= 0 required")
    if k > h + 2 * padding or k > w + 2 * padding:
        raise ValueError("conv2d: kernel larger than padded input")
    if bias is not None and bias.shape != (cout,):
        raise ValueError(f"conv2d: bias shape {bias.shape} != ({cout},)")

    out_h = (h + 2 * padding - k) // stride + 1
    out_w = (w + 2 * padding - k) // stride + 1
    hp, wp = h + 2 * padding, w + 2 * padding
    xp = np.pad(x.data.astype(np.float64), ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    win = sliding_window_view(xp, (k, k), axis=(2, 3))[:, :, ::stride, ::stride]
    # im2col: rows are output pixels, columns are (cin, ki, kj) taps
    cols = np.ascontiguousarray(win.transpose(0, 2, 3, 1, 4, 5)).reshape(n * out_h * out_w, cin * k * k)
    del xp, win
    wmat = weight.data.astype(np.float64).reshape(cout, cin * k * k)
    acc = cols @ wmat.T
    if bias is not None:
        acc += bias.data.astype(np.float64)
    dtype = _result_dtype(x.data, weight.data)
    out = np.ascontiguousarray(acc.reshape(n, out_h, out_w, cout).transpose(0, 3, 1, 2)).astype(dtype)

    def grad_fn(g):
        g2 = np.ascontiguousarray(np.asarray(g, dtype=np.float64).transpose(0, 2, 3, 1)).reshape(-1, cout)
        gw = (g2.T @ cols).reshape(weight.shape) if weight.requires_grad else None
        gb = g2.sum(axis=0) if bias is not None and bias.requires_grad else None
        gx = None
        if x.requires_grad:
            gcols = (g2 @ wmat).reshape(n, out_h, out_w, cin, k, k)
            taps = np.ascontiguousarray(gcols.transpose(4, 5, 3, 0, 1, 2))  # k, k, cin, n, h', w'
            gxp = np.zeros((cin, n, hp, wp))
            span_h = stride * (out_h - 1) + 1
            span_w = stride * (out_w - 1) + 1
            for i in range(k):
                for j in range(k):
                    gxp[:, :, i:i + span_h:stride, j:j + span_w:stride] += taps[i, j]
            gx = gxp[:, :, padding:padding + h, padding:padding + w].transpose(1, 0, 2, 3)
        return gx, gw, gb

    inputs = (x, weight) if bias is None else (x, weight, bias)
    return _emit("conv2d", out, inputs, grad_fn)


# ---------------------------------------------------------------------------
# Resampling
# ---------------------------------------------------------------------------


def interp_matrix(in_size: int, out_size: int, align_corners: bool = False) -> np.ndarray:
    """(out_size, in_size) linear-interpolation weights along one axis.

    ``align_corners=False`` uses half-pixel centres with the source coordinate
    clamped at zero, the convention of most deep-learning frameworks.
    """
    if in_size < 1 or out_size < 1:
        raise ValueError("sizes must be >= 1")
    m = np.zeros((out_size, in_size), dtype=np.float64)
    if in_size == out_size:
        np.fill_diagonal(m, 1.0)
        return m
    dst = np.arange(out_size, dtype=np.float64)
    if align_corners:
        src = dst * ((in_size - 1) / (out_size - 1)) if out_size > 1 else np.zeros(1)
    else:
        src = np.maximum((dst + 0.5) * (in_size / out_size) - 0.5, 0.0)
    i0 = np.minimum(np.floor(src).astype(np.int64), in_size - 1)
    i1 = np.minimum(i0 + 1, in_size - 1)
    frac = src - i0
    rows = np.arange(out_size)
    np.add.at(m, (rows, i0), 1.0 - frac)
    np.add.at(m, (rows, i1), frac)
    return m


def bilinear_resize(x: Tensor, out_h: int, out_w: int, align_corners: bool = False) -> Tensor:
    """Bilinear resampling of the two trailing axes of an NCHW tensor."""
    if x.ndim != 4:
        raise ValueError("bilinear_resize expects NCHW input")
    if out_h < 1 or out_w < 1:
        raise ValueError("target size must be >= 1")
    h, w = x.shape[2:]
    if (h, w) == (out_h, out_w):
        return _emit("resize", x.data.copy(), (x,), lambda g: (g,))
    rh = interp_matrix(h, out_h, align_corners)
    rw = interp_matrix(w, out_w, align_corners)
    out = np.einsum("oh,nchw,pw->ncop", rh, x.data.astype(np.float64), rw, optimize=True)

    def grad_fn(g):
        return (np.einsum("oh,ncop,pw->nchw", rh, np.asarray(g, dtype=np.float64), rw, optimize=True),)

    return _emit("resize", out.astype(x.dtype), (x,), grad_fn)


# ---------------------------------------------------------------------------
# Cropping and pasting
# ---------------------------------------------------------------------------


def _check_box(shape: tuple[int, ...], r0: int, r1: int, c0: int, c1: int) -> None:
    h, w = shape[-2:]
    if not (0 <= r0 < r1 <= h and 0 <= c0 < c1 <= w):
        raise IndexError(f"box rows {r0}:{r1} cols {c0}:{c1} outside {h}x{w}")


def crop(x: Tensor, r0: int, r1: int, c0: int, c1: int) -> Tensor:
    """Copy of ``x[..., r0:r1, c0:c1]``; the gradient scatters back into the window."""
    _check_box(x.shape, r0, r1, c0, c1)
    shape = x.shape

    def grad_fn(g):
        full = np.zeros(shape, dtype=np.float64)
        full[..., r0:r1, c0:c1] = g
        return (full,)

    return _emit("crop", x.data[..., r0:r1, c0:c1].copy(), (x,), grad_fn)


def slice_crop(x: Tensor, box) -> Tensor:
    """Crop with a box exposing ``b1, b2`` (rows) and ``b3, b4`` (columns)."""
    return crop(x, box.b1, box.b2, box.b3, box.b4)


def paste(x: Tensor, r0: int, c0: int, out_h: int, out_w: int) -> Tensor:
    """Place ``x`` at (r0, c0) on a zero canvas of size out_h x out_w."""
    h, w = x.shape[-2:]
    _check_box((out_h, out_w), r0, r0 + h, c0, c0 + w)
    canvas = np.zeros(x.shape[:-2] + (out_h, out_w), dtype=x.dtype)
    canvas[..., r0:r0 + h, c0:c0 + w] = x.data
    return _emit("paste", canvas, (x,), lambda g: (g[..., r0:r0 + h, c0:c0 + w],))


# ---------------------------------------------------------------------------
# Optimiser
# ---------------------------------------------------------------------------


def sgd_step(
    params: dict[str, Tensor],
    grads: dict[Tensor, np.ndarray],
    lr: float,
    momentum: float = 0.0,
    velocity: dict[str, np.ndarray] | None = None,
) -> dict[str, Tensor]:
    """SGD with optional heavy-ball momentum. Returns fresh parameter tensors.

    ``v <- momentum * v + g`` and ``p <- p - lr * v``; with ``momentum = 0``
    this is plain ``p <- p - lr * g``. ``velocity`` is updated in place and
    must be passed again on the next step.
    """
    if momentum and velocity is None:
        raise ValueError("momentum needs a velocity dict to carry state between steps")
    updated = {}
    for name, p in params.items():
        if not p.requires_grad:
            updated[name] = p
            continue
        if p not in grads:
            raise MissingGradientError(f"no gradient for trainable parameter {name!r}")
        g = grads[p].astype(np.float64)
        if momentum:
            g = momentum * velocity.get(name, 0.0) + g
        if velocity is not None:
            velocity[name] = g
        new = (p.data.astype(np.float64) - lr * g).astype(p.dtype)
        updated[name] = Tensor(new, requires_grad=True, dtype=p.dtype)
    return updated


def adam_step(
    params: dict[str, Tensor],
    grads: dict[Tensor, np.ndarray],
    lr: float,
    state: dict,
    betas: tuple[float, float] = (0.9, 0.999),
    eps: float = 1e-8,
) -> dict[str, Tensor]:
    """Adam with bias correction. ``state`` holds the moments and step count; pass it back each step."""
    b1, b2 = betas
    t = state.get("t", 0) + 1
    state["t"] = t
    moments = state.setdefault("moments", {})
    updated = {}
    for name, p in params.items():
        if not p.requires_grad:
            updated[name] = p
            continue
        if p not in grads:
            raise MissingGradientError(f"no gradient for trainable parameter {name!r}")
        g = grads[p].astype(np.float64)
        m, v = moments.get(name, (0.0, 0.0))
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        moments[name] = (m, v)
        m_hat = m / (1 - b1**t)
        v_hat = v / (1 - b2**t)
        new = p.data.astype(np.float64) - lr * m_hat / (np.sqrt(v_hat) + eps)
        updated[name] = Tensor(new, requires_grad=True, dtype=p.dtype)
    return updated
