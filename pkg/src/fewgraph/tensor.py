"""Dense float64 tensors with taped reverse-mode differentiation.

Every numerical primitive used elsewhere in the package lives here. Forward
calls run on plain numpy arrays; while a :class:`Trace` is active, each
primitive appends one record (inputs, output, backward closure) to the tape.
``backward(loss)`` replays the tape once, in exact reverse order, and
accumulates gradients into the grad slots of the leaf tensors that requested
them.

Conventions baked into the backward rules:
  * ``abs`` has subgradient 0 at exactly 0 (and ``sqrt`` likewise).
  * ``leaky_relu`` uses the x >= 0 branch at exactly 0.
  * ``maxpool2`` routes gradient to the first maximum in row-major window
    order when a window ties.

Single-threaded per trace: nothing here locks. Concurrent forward/backward
passes must use disjoint traces and disjoint parameter copies.
"""

from __future__ import annotations

from contextlib import contextmanager
from typing import Callable, Iterator, Sequence

import numpy as np

from fewgraph import backend


class ShapeError(ValueError):
    """Operand shapes violate an operation's contract."""


class NumericError(ArithmeticError):
    """Non-finite values where the contract demands finite ones."""


class TraceError(RuntimeError):
    """Backward-pass contract violation (non-scalar loss, detached loss, reuse)."""


class DegenerateBatchError(ValueError):
    """Batch statistics requested over a batch of size 1."""


class Tensor:
    """A dense float64 array plus an optional gradient accumulator.

    ``requires_grad=True`` marks a leaf: its ``grad`` slot is allocated at
    construction (all zeros) and ``backward`` adds into it. Non-leaf tensors
    never hold gradient; their intermediate gradients live only inside the
    backward sweep.
    """

    __slots__ = ("data", "grad", "requires_grad", "_trace", "_tid")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.grad = np.zeros_like(self.data) if requires_grad else None
        self._trace = None
        self._tid = None

    # -- basic introspection -------------------------------------------------

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a single element, got shape {self.shape}")
        return float(self.data.reshape(()))

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    # -- graph bookkeeping ---------------------------------------------------

    def detach(self) -> "Tensor":
        """A view of the same data with no trace attachment and no grad slot."""
        out = Tensor.__new__(Tensor)
        out.data = self.data
        out.requires_grad = False
        out.grad = None
        out._trace = None
        out._tid = None
        return out

    def zero_grad(self) -> None:
        if self.grad is not None:
            self.grad[...] = 0.0

    # -- operator sugar --------------------------------------------------------

    def __add__(self, other):
        return add(self, _as_tensor(other))

    def __radd__(self, other):
        return add(_as_tensor(other), self)

    def __sub__(self, other):
        return sub(self, _as_tensor(other))

    def __rsub__(self, other):
        return sub(_as_tensor(other), self)

    def __mul__(self, other):
        return mul(self, _as_tensor(other))

    def __rmul__(self, other):
        return mul(_as_tensor(other), self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, _as_tensor(other))

    def abs(self) -> "Tensor":
        return absolute(self)

    def log(self) -> "Tensor":
        return log(self)

    def sqrt(self) -> "Tensor":
        return sqrt(self)

    def sum(self, axis: int | None = None) -> "Tensor":
        return reduce_sum(self, axis)

    def mean(self, axis: int | None = None) -> "Tensor":
        return reduce_mean(self, axis)

    def reshape(self, *shape: int) -> "Tensor":
        return reshape(self, shape if len(shape) != 1 or isinstance(shape[0], int) else shape[0])

    def transpose(self) -> "Tensor":
        return transpose2d(self)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=np.float64))


class _Record:
    __slots__ = ("out_tid", "in_tids", "bwd")

    def __init__(self, out_tid, in_tids, bwd):
        self.out_tid = out_tid
        self.in_tids = in_tids
        self.bwd = bwd


class Trace:
    """Append-only tape of primitive applications.

    The tape order is the execution order, so every input id precedes its
    output id by construction; the backward sweep walks the records exactly
    once in reverse. A trace can be consumed by ``backward`` a single time.
    """

    def __init__(self):
        self.records: list[_Record] = []
        self.leaves: dict[int, Tensor] = {}
        self._next_tid = 0
        self._consumed = False
        self._outer = None

    def _new_tid(self) -> int:
        tid = self._next_tid
        self._next_tid += 1
        return tid

    def _adopt_leaf(self, t: Tensor) -> int:
        tid = self._new_tid()
        t._trace = self
        t._tid = tid
        self.leaves[tid] = t
        return tid

    def _tid_of(self, t: Tensor) -> int | None:
        """Trace id of ``t`` on this trace, adopting grad-requiring leaves."""
        if t._trace is self:
            return t._tid
        if t.requires_grad:
            return self._adopt_leaf(t)
        return None

    def record(self, out: Tensor, inputs: Sequence[Tensor], bwd: Callable) -> None:
        in_tids = tuple(self._tid_of(t) for t in inputs)
        if all(tid is None for tid in in_tids):
            return
        out._trace = self
        out._tid = self._new_tid()
        self.records.append(_Record(out._tid, in_tids, bwd))

    def __enter__(self) -> "Trace":
        global _ACTIVE
        self._outer = _ACTIVE
        _ACTIVE = self
        return self

    def __exit__(self, *exc) -> None:
        global _ACTIVE
        _ACTIVE = self._outer


_ACTIVE: Trace | None = None


def active_trace() -> Trace | None:
    return _ACTIVE


@contextmanager
def no_grad() -> Iterator[None]:
    """Suspend recording for the enclosed forward computations."""
    global _ACTIVE
    saved, _ACTIVE = _ACTIVE, None
    try:
        yield
    finally:
        _ACTIVE = saved


def backward(loss: Tensor) -> None:
    """Fill the grad slot of every leaf the loss depends on.

    The loss must be a scalar produced under a still-unconsumed trace. Leaves
    registered on the trace but unreachable from the loss keep whatever their
    accumulator already holds (zeros after construction or ``zero_grad``).
    """
    tr = loss._trace
    if tr is None or loss._tid is None:
        raise TraceError("loss is not attached to any trace")
    if loss.data.size != 1:
        raise TraceError(f"loss must be scalar, got shape {loss.shape}")
    if tr._consumed:
        raise TraceError("trace already consumed by a previous backward pass")
    tr._consumed = True

    grads: dict[int, np.ndarray] = {loss._tid: np.ones_like(loss.data)}
    for rec in reversed(tr.records):
        g = grads.pop(rec.out_tid, None)
        if g is None:
            continue
        for tid, gi in zip(rec.in_tids, rec.bwd(g)):
            if tid is None or gi is None:
                continue
            acc = grads.get(tid)
            grads[tid] = gi if acc is None else acc + gi

    for tid, leaf in tr.leaves.items():
        g = grads.get(tid)
        if g is not None:
            if leaf.grad is None:
                leaf.grad = np.zeros_like(leaf.data)
            leaf.grad += g.reshape(leaf.data.shape)


def _emit(out_data: np.ndarray, inputs: Sequence[Tensor], bwd: Callable) -> Tensor:
    out = Tensor(out_data)
    if _ACTIVE is not None:
        _ACTIVE.record(out, inputs, bwd)
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum a broadcast gradient back down to ``shape``."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


# -- elementwise arithmetic ----------------------------------------------------


def add(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    out = a.data + b.data
    ash, bsh = a.shape, b.shape
    return _emit(out, (a, b), lambda g: (_unbroadcast(g, ash), _unbroadcast(g, bsh)))


def sub(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    out = a.data - b.data
    ash, bsh = a.shape, b.shape
    return _emit(out, (a, b), lambda g: (_unbroadcast(g, ash), _unbroadcast(-g, bsh)))


def mul(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    out = a.data * b.data
    ad, bd = a.data, b.data
    return _emit(
        out,
        (a, b),
        lambda g: (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)),
    )


def neg(a: Tensor) -> Tensor:
    return _emit(-a.data, (a,), lambda g: (-g,))


def absolute(a: Tensor) -> Tensor:
    s = np.sign(a.data)  # sign(0) == 0 realises the declared subgradient
    return _emit(np.abs(a.data), (a,), lambda g: (g * s,))


def log(a: Tensor) -> Tensor:
    ad = a.data
    return _emit(np.log(ad), (a,), lambda g: (g / ad,))


def sqrt(a: Tensor) -> Tensor:
    out = np.sqrt(a.data)
    safe = np.where(out == 0.0, np.inf, 2.0 * out)  # subgradient 0 at exactly 0
    return _emit(out, (a,), lambda g: (g / safe,))


def leaky_relu(a: Tensor, slope: float = 0.2) -> Tensor:
    if not 0.0 < slope < 1.0:
        raise ValueError(f"leaky_relu slope must lie in (0, 1), got {slope}")
    keep = a.data >= 0.0
    out = np.where(keep, a.data, slope * a.data)
    return _emit(out, (a,), lambda g: (np.where(keep, g, slope * g),))


# -- shape manipulation ----------------------------------------------------------


def reshape(a: Tensor, shape) -> Tensor:
    old = a.shape
    return _emit(a.data.reshape(shape), (a,), lambda g: (g.reshape(old),))


def transpose2d(a: Tensor) -> Tensor:
    if a.ndim != 2:
        raise ShapeError(f"transpose2d expects a matrix, got shape {a.shape}")
    return _emit(a.data.T.copy(), (a,), lambda g: (g.T,))


def concat(parts: Sequence[Tensor], axis: int = 1) -> Tensor:
    parts = [_as_tensor(p) for p in parts]
    out = np.concatenate([p.data for p in parts], axis=axis)
    sizes = [p.shape[axis] for p in parts]
    splits = np.cumsum(sizes)[:-1]

    def bwd(g):
        return tuple(np.split(g, splits, axis=axis))

    return _emit(out, parts, bwd)


def gather_rows(a: Tensor, idx) -> Tensor:
    """Select rows along axis 0; backward scatter-adds (duplicates welcome)."""
    idx = np.asarray(idx, dtype=np.intp)
    n = a.shape[0]

    def bwd(g):
        gx = np.zeros((n,) + g.shape[1:], dtype=np.float64)
        np.add.at(gx, idx, g)
        return (gx,)

    return _emit(a.data[idx], (a,), bwd)


def scatter_add_2d(values: Tensor, rows, cols, shape: tuple[int, int]) -> Tensor:
    """Build a matrix holding ``values`` at (rows, cols); repeats accumulate."""
    rows = np.asarray(rows, dtype=np.intp)
    cols = np.asarray(cols, dtype=np.intp)
    if values.ndim != 1 or len(rows) != values.size or len(cols) != values.size:
        raise ShapeError(
            f"scatter_add_2d needs 1-d values matching index length, got "
            f"values {values.shape}, {len(rows)} rows, {len(cols)} cols"
        )
    out = np.zeros(shape, dtype=np.float64)
    np.add.at(out, (rows, cols), values.data)
    return _emit(out, (values,), lambda g: (g[rows, cols],))


def one_hot(indices, width: int) -> Tensor:
    """Constant one-hot rows from 0-based indices. Not differentiable."""
    idx = np.asarray(indices, dtype=np.intp)
    if np.any(idx < 0) or np.any(idx >= width):
        raise ShapeError(f"one_hot indices out of range for width {width}")
    out = np.zeros((idx.size, width), dtype=np.float64)
    out[np.arange(idx.size), idx.ravel()] = 1.0
    return Tensor(out.reshape(idx.shape + (width,)))


# -- reductions -------------------------------------------------------------------


def reduce_sum(a: Tensor, axis: int | None = None) -> Tensor:
    shape = a.shape

    if axis is None:
        return _emit(np.sum(a.data), (a,), lambda g: (np.broadcast_to(g, shape).copy(),))

    def bwd(g):
        return (np.broadcast_to(np.expand_dims(g, axis), shape).copy(),)

    return _emit(np.sum(a.data, axis=axis), (a,), bwd)


def reduce_mean(a: Tensor, axis: int | None = None) -> Tensor:
    shape = a.shape
    count = a.size if axis is None else shape[axis]

    if axis is None:
        return _emit(
            np.mean(a.data), (a,), lambda g: (np.broadcast_to(g / count, shape).copy(),)
        )

    def bwd(g):
        return (np.broadcast_to(np.expand_dims(g / count, axis), shape).copy(),)

    return _emit(np.mean(a.data, axis=axis), (a,), bwd)


# -- linear algebra ----------------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul shapes do not chain: {a.shape} x {b.shape}")
    ad, bd = a.data, b.data
    return _emit(ad @ bd, (a, b), lambda g: (g @ bd.T, ad.T @ g))


def linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """Fully-connected layer: x @ w (+ b broadcast over rows)."""
    out = matmul(x, w)
    if b is not None:
        out = add(out, b)
    return out


# -- softmax family -----------------------------------------------------------------


def _check_rows(a: Tensor, name: str) -> None:
    if a.ndim != 2:
        raise ShapeError(f"{name} expects a matrix, got shape {a.shape}")
    if np.isnan(a.data).any():
        raise NumericError(f"{name} received NaN input")


def softmax_rows(a: Tensor) -> Tensor:
    """Row-wise softmax, stabilised by row-max subtraction."""
    _check_rows(a, "softmax_rows")
    z = a.data - a.data.max(axis=1, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=1, keepdims=True)

    def bwd(g):
        return ((g - (g * out).sum(axis=1, keepdims=True)) * out,)

    return _emit(out, (a,), bwd)


def log_softmax_rows(a: Tensor) -> Tensor:
    _check_rows(a, "log_softmax_rows")
    z = a.data - a.data.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1, keepdims=True))
    out = z - lse
    sm = np.exp(out)

    def bwd(g):
        return (g - sm * g.sum(axis=1, keepdims=True),)

    return _emit(out, (a,), bwd)


# -- dropout ----------------------------------------------------------------------


def dropout(a: Tensor, p: float, train: bool, rng: np.random.Generator | None = None) -> Tensor:
    """Inverted-scaling dropout; eval mode is the identity."""
    if not 0.0 <= p < 1.0:
        raise ValueError(f"dropout rate must lie in [0, 1), got {p}")
    if not train or p == 0.0:
        return a
    if rng is None:
        raise ValueError("dropout in train mode needs an rng")
    mask = (rng.random(a.shape) >= p) / (1.0 - p)
    return _emit(a.data * mask, (a,), lambda g: (g * mask,))


# -- convolution / pooling (backend-dispatched hot kernels) -------------------------


def conv2d(x: Tensor, kernel: Tensor) -> Tensor:
    """3x3 cross-correlation with zero padding 1 (same-size output).

    x is (b, c, h, w); kernel is (f, c, 3, 3). The inner loops run in the
    compiled backend when it is available.
    """
    if x.ndim != 4 or kernel.ndim != 4:
        raise ShapeError(f"conv2d expects 4-d input and kernel, got {x.shape}, {kernel.shape}")
    if kernel.shape[2:] != (3, 3):
        raise ShapeError(f"conv2d kernel must be spatially 3x3, got {kernel.shape}")
    if x.shape[1] != kernel.shape[1]:
        raise ShapeError(
            f"conv2d channel mismatch: input {x.shape} vs kernel {kernel.shape}"
        )
    xd = np.ascontiguousarray(x.data)
    kd = np.ascontiguousarray(kernel.data)
    out = backend.conv3x3_forward(xd, kd)

    def bwd(g):
        g = np.ascontiguousarray(g)
        return (backend.conv3x3_grad_input(g, kd), backend.conv3x3_grad_kernel(g, xd))

    return _emit(out, (x, kernel), bwd)


def maxpool2(x: Tensor) -> Tensor:
    """2x2 max pooling, stride 2; odd trailing rows/columns are dropped."""
    if x.ndim != 4:
        raise ShapeError(f"maxpool2 expects 4-d input, got {x.shape}")
    b, c, h, w = x.shape
    if h < 2 or w < 2:
        raise ShapeError(f"maxpool2 needs spatial extents >= 2, got {h}x{w}")
    xd = np.ascontiguousarray(x.data)
    out, arg = backend.maxpool2_forward(xd)

    def bwd(g):
        return (backend.maxpool2_backward(np.ascontiguousarray(g), arg, h, w),)

    return _emit(out, (x,), bwd)


# -- batch normalisation ------------------------------------------------------------


class RunningMoments:
    """Per-channel running mean/variance for batchnorm eval mode."""

    def __init__(self, channels: int, momentum: float = 0.1):
        self.mean = np.zeros(channels, dtype=np.float64)
        self.var = np.ones(channels, dtype=np.float64)
        self.momentum = momentum

    def update(self, mean: np.ndarray, var: np.ndarray) -> None:
        # in place: checkpoint code holds references to these arrays
        m = self.momentum
        self.mean *= 1.0 - m
        self.mean += m * mean
        self.var *= 1.0 - m
        self.var += m * var


def batchnorm(
    x: Tensor,
    gamma: Tensor,
    beta: Tensor,
    state: RunningMoments,
    train: bool,
    eps: float = 1e-5,
) -> Tensor:
    """Per-channel normalisation over all axes except axis 1.

    Train mode uses (biased) batch moments and updates ``state``; eval mode
    normalises with the frozen running moments.
    """
    if x.ndim < 2:
        raise ShapeError(f"batchnorm expects at least 2-d input, got {x.shape}")
    c = x.shape[1]
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ShapeError(
            f"batchnorm gamma/beta must be ({c},), got {gamma.shape}, {beta.shape}"
        )
    axes = (0,) + tuple(range(2, x.ndim))
    cshape = (1, c) + (1,) * (x.ndim - 2)
    n = x.size // c

    if train:
        if x.shape[0] < 2:
            raise DegenerateBatchError("batchnorm train mode needs a batch of at least 2")
        mean = x.data.mean(axis=axes)
        var = x.data.var(axis=axes)
        state.update(mean, var)
    else:
        mean = state.mean
        var = state.var

    invstd = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mean.reshape(cshape)) * invstd.reshape(cshape)
    out = gamma.data.reshape(cshape) * xhat + beta.data.reshape(cshape)
    gd = gamma.data

    if train:

        def bwd(g):
            dgamma = (g * xhat).sum(axis=axes)
            dbeta = g.sum(axis=axes)
            dxhat = g * gd.reshape(cshape)
            t1 = dxhat.sum(axis=axes).reshape(cshape)
            t2 = (dxhat * xhat).sum(axis=axes).reshape(cshape)
            dx = (invstd.reshape(cshape) / n) * (n * dxhat - t1 - xhat * t2)
            return (dx, dgamma, dbeta)

    else:

        def bwd(g):
            dgamma = (g * xhat).sum(axis=axes)
            dbeta = g.sum(axis=axes)
            dx = g * (gd * invstd).reshape(cshape)
            return (dx, dgamma, dbeta)

    return _emit(out, (x, gamma, beta), bwd)
