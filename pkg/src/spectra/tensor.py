"""
Dense float64 tensors with tape-based reverse-mode differentiation.

Every differentiable op checks its inputs, computes the forward value
with numpy (or the convolution kernels in :mod:`spectra._kernels`),
refuses non-finite results, and -- when any input requires a gradient
and recording is enabled -- appends a backward rule to the calling
thread's active :class:`Tape`. :func:`backward` replays that tape once,
in reverse recording order, and then retires it.
"""

from __future__ import annotations

import threading
from contextlib import contextmanager
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from . import _kernels


class ShapeError(ValueError):
    """Operand shapes are incompatible with the requested op."""


class NonFiniteError(FloatingPointError):
    """An op produced NaN or Inf."""


class TapeError(RuntimeError):
    """Backward was requested on a missing or already-replayed tape."""


# ---------------------------------------------------------------- tape


@dataclass
class _Node:
    out: "Tensor"
    inputs: tuple
    backward: Callable


@dataclass
class Tape:
    """Ordered record of differentiable ops for one forward pass."""

    nodes: list = field(default_factory=list)
    consumed: bool = False

    def record(self, out: "Tensor", inputs: Sequence["Tensor"], backward: Callable) -> None:
        if self.consumed:
            raise TapeError("cannot record on a tape that was already replayed")
        self.nodes.append(_Node(out, tuple(inputs), backward))
        out._tape = self


_local = threading.local()


def current_tape() -> Tape:
    tape = getattr(_local, "tape", None)
    if tape is None or tape.consumed:
        tape = _local.tape = Tape()
    return tape


def reset_tape() -> None:
    """Drop whatever the current thread has recorded so far."""
    _local.tape = Tape()


def is_grad_enabled() -> bool:
    return getattr(_local, "grad_enabled", True)


@contextmanager
def no_grad():
    prev = is_grad_enabled()
    _local.grad_enabled = False
    try:
        yield
    finally:
        _local.grad_enabled = prev


# ---------------------------------------------------------------- tensor


class Tensor:
    """A float64 array, an optional gradient buffer, and a requires-grad flag."""

    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.array(data, dtype=np.float64)
        if not np.isfinite(arr).all():
            raise NonFiniteError(f"tensor {name or ''} initialised with non-finite values")
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self.name = name
        self._tape: Tape | None = None

    @classmethod
    def _wrap(cls, arr: np.ndarray, requires_grad: bool) -> "Tensor":
        t = cls.__new__(cls)
        t.data = arr
        t.requires_grad = requires_grad
        t.grad = None
        t.name = None
        t._tape = None
        return t

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad}{tag})"

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(as_tensor(other), self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise TypeError("division is only supported by a python scalar")
        return scale(self, 1.0 / other)

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self, axis=None, keepdims: bool = False):
        return sum_(self, axis, keepdims)

    def mean(self, axis=None, keepdims: bool = False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    def backward(self) -> None:
        backward(self)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _emit(arr: np.ndarray, inputs: Sequence[Tensor], grad_fn: Callable, op: str) -> Tensor:
    if not np.isfinite(arr).all():
        raise NonFiniteError(f"{op} produced non-finite values (output shape {arr.shape})")
    req = is_grad_enabled() and any(t.requires_grad for t in inputs)
    out = Tensor._wrap(arr, req)
    if req:
        current_tape().record(out, inputs, grad_fn)
    return out


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, s in enumerate(shape):
        if s == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g


def backward(loss: Tensor) -> None:
    """Populate ``.grad`` of every requires-grad tensor that feeds ``loss``.

    Gradients accumulate into existing leaf buffers; callers reset them
    with :meth:`Tensor.zero_grad` between steps.
    """
    if loss.ndim != 0:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    tape = loss._tape
    if tape is None:
        raise TapeError("loss was not recorded on any tape (nothing requires grad?)")
    if tape.consumed:
        raise TapeError("tape already replayed; run a new forward pass first")
    if tape is not getattr(_local, "tape", None):
        raise TapeError("loss belongs to a stale tape")

    loss.grad = np.ones((), dtype=np.float64)
    for node in reversed(tape.nodes):
        g = node.out.grad
        if g is None:
            continue
        grads = node.backward(g)
        for t, gi in zip(node.inputs, grads):
            if gi is None or not t.requires_grad:
                continue
            # never updated in place, so sharing buffers between tensors is safe
            if t.grad is None:
                t.grad = np.asarray(gi, dtype=np.float64)
            else:
                t.grad = t.grad + gi
    tape.consumed = True
    tape.nodes.clear()
    _local.tape = Tape()


# ---------------------------------------------------------------- elementwise


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    try:
        out = a.data + b.data
    except ValueError as exc:
        raise ShapeError(f"add: {a.shape} vs {b.shape}") from exc

    def grad_fn(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _emit(out, (a, b), grad_fn, "add")


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    try:
        out = a.data - b.data
    except ValueError as exc:
        raise ShapeError(f"sub: {a.shape} vs {b.shape}") from exc

    def grad_fn(g):
        return _unbroadcast(g, a.shape), -_unbroadcast(g, b.shape)

    return _emit(out, (a, b), grad_fn, "sub")


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    try:
        out = a.data * b.data
    except ValueError as exc:
        raise ShapeError(f"mul: {a.shape} vs {b.shape}") from exc

    def grad_fn(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _emit(out, (a, b), grad_fn, "mul")


def scale(a: Tensor, c: float) -> Tensor:
    c = float(c)
    return _emit(a.data * c, (a,), lambda g: (g * c,), "scale")


class _MaskReplay:
    """Records ReLU activation patterns on one pass and replays them on later passes."""

    def __init__(self):
        self.masks: list[np.ndarray] = []
        self.replaying = False
        self.pos = 0

    def __call__(self, x: np.ndarray) -> np.ndarray:
        if not self.replaying:
            mask = x > 0.0
            self.masks.append(mask)
            return mask
        if self.pos >= len(self.masks) or self.masks[self.pos].shape != x.shape:
            raise RuntimeError("op sequence changed while ReLU patterns were frozen")
        mask = self.masks[self.pos]
        self.pos += 1
        return mask

    def rewind(self) -> None:
        self.replaying = True
        self.pos = 0


@contextmanager
def frozen_relu_patterns():
    """Pin every ReLU's on/off pattern to the one seen on the first pass.

    Used by gradient checking so that central differences stay on the
    linear piece the analytic gradient was taken on.
    """
    prev = getattr(_local, "relu_replay", None)
    replay = _local.relu_replay = _MaskReplay()
    try:
        yield replay
    finally:
        _local.relu_replay = prev


def relu(x: Tensor) -> Tensor:
    replay = getattr(_local, "relu_replay", None)
    mask = x.data > 0.0 if replay is None else replay(x.data)  # derivative at 0 is 0
    return _emit(np.where(mask, x.data, 0.0), (x,), lambda g: (g * mask,), "relu")


# ---------------------------------------------------------------- shape ops


def reshape(x: Tensor, shape) -> Tensor:
    shape = tuple(int(s) for s in shape)
    try:
        out = x.data.reshape(shape)
    except ValueError as exc:
        raise ShapeError(f"reshape: cannot view {x.shape} as {shape}") from exc
    src = x.shape
    return _emit(out, (x,), lambda g: (g.reshape(src),), "reshape")


def transpose(x: Tensor, axes=None) -> Tensor:
    if axes is None:
        axes = tuple(reversed(range(x.ndim)))
    axes = tuple(axes)
    if sorted(axes) != list(range(x.ndim)):
        raise ShapeError(f"transpose: {axes} is not a permutation of {x.ndim} axes")
    inv = tuple(np.argsort(axes))
    return _emit(np.transpose(x.data, axes), (x,), lambda g: (np.transpose(g, inv),), "transpose")


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    tensors = tuple(tensors)
    if not tensors:
        raise ShapeError("concat of no tensors")
    try:
        out = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError as exc:
        raise ShapeError(f"concat: {[t.shape for t in tensors]}") from exc
    bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def grad_fn(g):
        return tuple(np.split(g, bounds, axis=axis))

    return _emit(out, tensors, grad_fn, "concat")


def sum_(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = np.sum(x.data, axis=axis, keepdims=keepdims)
    src = x.shape

    def grad_fn(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, src),)

    return _emit(np.asarray(out), (x,), grad_fn, "sum")


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    """Mean over ``axis`` (an int, a tuple, or ``None`` for all)."""
    if axis is None:
        count = x.size
    else:
        axes = (axis,) if np.isscalar(axis) else tuple(axis)
        count = int(np.prod([x.shape[a] for a in axes]))
    if count == 0:
        raise ShapeError("mean over an empty axis")
    return scale(sum_(x, axis, keepdims), 1.0 / count)


mean_over_axis = mean


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError("matmul operands need at least two dimensions")
    try:
        out = np.matmul(a.data, b.data)
    except ValueError as exc:
        raise ShapeError(f"matmul: {a.shape} @ {b.shape}") from exc

    def grad_fn(g):
        ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
        gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return _emit(out, (a, b), grad_fn, "matmul")


# ---------------------------------------------------------------- layers


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """``x @ weight.T + bias`` over the last axis; ``weight`` is ``[out, in]``."""
    if weight.ndim != 2 or x.shape[-1] != weight.shape[1]:
        raise ShapeError(f"linear: input {x.shape} vs weight {weight.shape}")
    if bias is not None and bias.shape != (weight.shape[0],):
        raise ShapeError(f"linear: bias {bias.shape} vs weight {weight.shape}")
    # flatten leading axes so each product is a single 2-D BLAS call
    x2 = x.data.reshape(-1, x.shape[-1])
    out = (x2 @ weight.data.T).reshape(x.shape[:-1] + (weight.shape[0],))
    if bias is not None:
        out += bias.data

    def grad_fn(g):
        g2 = g.reshape(-1, g.shape[-1])
        gx = (g2 @ weight.data).reshape(x.shape) if x.requires_grad else None
        gw = g2.T @ x2
        if bias is None:
            return gx, gw
        return gx, gw, g2.sum(axis=0)

    inputs = (x, weight) if bias is None else (x, weight, bias)
    return _emit(out, inputs, grad_fn, "linear")


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    if x.shape[axis] == 0:
        raise ShapeError("softmax over an empty axis")
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=axis, keepdims=True)

    def grad_fn(g):
        return (y * (g - (g * y).sum(axis=axis, keepdims=True)),)

    return _emit(y, (x,), grad_fn, "softmax")


def layernorm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalise over the last axis, then scale by ``gamma`` and shift by ``beta``."""
    if eps <= 0:
        raise ValueError("layernorm eps must be positive")
    D = x.shape[-1]
    if gamma.shape != (D,) or beta.shape != (D,):
        raise ShapeError(f"layernorm: gamma/beta {gamma.shape}/{beta.shape} vs features {D}")
    mu = x.data.mean(axis=-1, keepdims=True)
    var = x.data.var(axis=-1, keepdims=True)
    invstd = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mu) * invstd
    out = xhat * gamma.data + beta.data
    lead = tuple(range(x.ndim - 1))

    def grad_fn(g):
        gxhat = g * gamma.data
        gx = invstd / D * (
            D * gxhat
            - gxhat.sum(axis=-1, keepdims=True)
            - xhat * (gxhat * xhat).sum(axis=-1, keepdims=True)
        )
        return gx, (g * xhat).sum(axis=lead), g.sum(axis=lead)

    return _emit(out, (x, gamma, beta), grad_fn, "layernorm")


@dataclass
class RunningStats:
    """Per-channel running mean/variance for batch normalisation."""

    mean: np.ndarray
    var: np.ndarray
    momentum: float = 0.1

    @classmethod
    def fresh(cls, channels: int, momentum: float = 0.1) -> "RunningStats":
        return cls(np.zeros(channels), np.ones(channels), momentum)

    def update(self, batch_mean: np.ndarray, batch_var_unbiased: np.ndarray) -> None:
        m = self.momentum
        self.mean = (1.0 - m) * self.mean + m * batch_mean
        self.var = (1.0 - m) * self.var + m * batch_var_unbiased


def batchnorm(
    x: Tensor,
    gamma: Tensor,
    beta: Tensor,
    running: RunningStats,
    mode: str = "train",
    axis: int = 1,
    eps: float = 1e-5,
) -> Tensor:
    """Batch normalisation over every axis except ``axis``.

    In train mode the batch statistics are used (and differentiated
    through) and ``running`` is updated in place; a batch of one sample
    falls back to the running statistics and leaves them untouched.
    Eval mode always uses the running statistics.
    """
    if eps <= 0:
        raise ValueError("batchnorm eps must be positive")
    if mode not in ("train", "eval"):
        raise ValueError(f"unknown batchnorm mode {mode!r}")
    axis = axis % x.ndim
    C = x.shape[axis]
    if gamma.shape != (C,) or beta.shape != (C,) or running.mean.shape != (C,):
        raise ShapeError(f"batchnorm: channel extent {C} vs gamma {gamma.shape}")
    red = tuple(i for i in range(x.ndim) if i != axis)
    bshape = [1] * x.ndim
    bshape[axis] = C
    M = x.size // C
    batch = x.shape[0] if axis != 0 else M
    use_batch = mode == "train" and batch > 1

    if use_batch:
        mu = x.data.mean(axis=red)
        var = x.data.var(axis=red)
        running.update(mu, var * (M / (M - 1)))
    else:
        mu, var = running.mean, running.var
    invstd = (1.0 / np.sqrt(var + eps)).reshape(bshape)
    xhat = (x.data - mu.reshape(bshape)) * invstd
    gam = gamma.data.reshape(bshape)
    out = xhat * gam + beta.data.reshape(bshape)

    def grad_fn(g):
        ggamma = (g * xhat).sum(axis=red)
        gbeta = g.sum(axis=red)
        gxhat = g * gam
        if use_batch:
            gx = invstd / M * (
                M * gxhat
                - gxhat.sum(axis=red, keepdims=True)
                - xhat * (gxhat * xhat).sum(axis=red, keepdims=True)
            )
        else:
            gx = gxhat * invstd
        return gx, ggamma, gbeta

    return _emit(out, (x, gamma, beta), grad_fn, "batchnorm")


def _conv(x: Tensor, weight: Tensor, bias: Tensor, pad, nsp: int) -> Tensor:
    op = f"conv{nsp}d"
    if x.ndim == nsp + 1:
        out = _conv(reshape(x, (1,) + x.shape), weight, bias, pad, nsp)
        return reshape(out, out.shape[1:])
    if x.ndim != nsp + 2 or weight.ndim != nsp + 2:
        raise ShapeError(f"{op}: input {x.shape}, weight {weight.shape}")
    pad = tuple(int(p) for p in pad)
    if len(pad) != nsp or min(pad) < 0:
        raise ShapeError(f"{op}: padding {pad} needs {nsp} non-negative entries")
    Co, Ci = weight.shape[:2]
    if x.shape[1] != Ci:
        raise ShapeError(f"{op}: input channels {x.shape[1]} vs weight {Ci}")
    if bias.shape != (Co,):
        raise ShapeError(f"{op}: bias {bias.shape} vs {Co} filters")
    k = weight.shape[2:]
    extents = [x.shape[2 + i] + 2 * pad[i] - k[i] + 1 for i in range(nsp)]
    if min(extents) < 1:
        raise ShapeError(f"{op}: non-positive output extent {extents}")

    widths = ((0, 0), (0, 0)) + tuple((p, p) for p in pad)
    xp = np.pad(x.data, widths) if any(pad) else np.ascontiguousarray(x.data)
    w = np.ascontiguousarray(weight.data)
    out = _kernels.conv_forward(xp, w)
    out += bias.data.reshape((1, Co) + (1,) * nsp)
    crop = (slice(None), slice(None)) + tuple(slice(p, p + n) for p, n in zip(pad, x.shape[2:]))

    def grad_fn(g):
        g = np.ascontiguousarray(g)
        gx = _kernels.conv_backward_input(g, w)[crop] if x.requires_grad else None
        gw = _kernels.conv_backward_weight(xp, g, k) if weight.requires_grad else None
        gb = g.sum(axis=(0,) + tuple(range(2, 2 + nsp)))
        return gx, gw, gb

    return _emit(out, (x, weight, bias), grad_fn, op)


def conv2d(x: Tensor, weight: Tensor, bias: Tensor, pad=(0, 0)) -> Tensor:
    """Stride-1 zero-padded 2-D convolution (cross-correlation).

    ``x`` is ``[C_in, H, W]`` or ``[B, C_in, H, W]``; ``weight`` is
    ``[C_out, C_in, kh, kw]``.
    """
    return _conv(x, weight, bias, pad, 2)


def conv3d(x: Tensor, weight: Tensor, bias: Tensor, pad=(0, 0, 0)) -> Tensor:
    """Stride-1 zero-padded 3-D convolution; ``x`` is ``[(B,) C_in, D, H, W]``."""
    return _conv(x, weight, bias, pad, 3)


def cross_entropy(logits: Tensor, labels) -> Tensor:
    """Batch-mean negative log-likelihood of ``labels`` under ``softmax(logits)``."""
    labels = np.asarray(labels, dtype=np.int64)
    if logits.ndim != 2:
        raise ShapeError(f"cross_entropy expects [B, n] logits, got {logits.shape}")
    B, n = logits.shape
    if B < 1 or labels.shape != (B,):
        raise ShapeError(f"cross_entropy: {B} rows vs labels {labels.shape}")
    if labels.min() < 0 or labels.max() >= n:
        raise ValueError(f"cross_entropy: labels must lie in [0, {n})")
    rows = np.arange(B)
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1))
    loss = np.mean(lse - z[rows, labels])

    def grad_fn(g):
        p = np.exp(z - lse[:, None])
        p[rows, labels] -= 1.0
        return (p * (g / B),)

    return _emit(np.asarray(loss), (logits,), grad_fn, "cross_entropy")
