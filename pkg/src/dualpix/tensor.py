"""Minimal reverse-mode autodiff over numpy arrays.

Operations are recorded onto the active :class:`Tape` only while one is open,
so plain forward passes (inference, metrics) cost nothing extra::

    with Tape() as tape:
        loss = mse(conv2d(x, w, padding=1), y)
    tape.backward(loss)
    w.grad  # dLoss/dw
"""

from __future__ import annotations

import contextlib
from dataclasses import dataclass
from typing import Callable, Iterator, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

_DTYPE = np.float32
_TAPES: list["Tape"] = []


@contextlib.contextmanager
def precision(dtype) -> Iterator[None]:
    """Temporarily change the dtype new tensors are created with.

    Only meant for validation: finite differences need float64 to resolve
    per-element gradients of mean reductions.
    """
    global _DTYPE
    previous = _DTYPE
    _DTYPE = np.dtype(dtype).type
    try:
        yield
    finally:
        _DTYPE = previous


class Tensor:
    """An n-d float array with an optional gradient buffer."""

    __slots__ = ("data", "requires_grad", "grad", "_produced", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.asarray(data, dtype=_DTYPE)
        if arr.ndim == 0:
            arr = arr.reshape(())
        if any(d <= 0 for d in arr.shape) and arr.size != 0:
            raise ValueError(f"invalid shape {arr.shape}")
        self.data = arr
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self._produced = False
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad}{tag})"

    # arithmetic sugar for the loss code
    def __add__(self, other: "Tensor") -> "Tensor":
        return add(self, other)

    def __sub__(self, other: "Tensor") -> "Tensor":
        return sub(self, other)

    def __mul__(self, c: float) -> "Tensor":
        return scale(self, c)

    __rmul__ = __mul__


@dataclass
class _Op:
    out: Tensor
    inputs: tuple[Tensor, ...]
    backward: Callable[[np.ndarray], Sequence[np.ndarray | None]]


class Tape:
    """Ordered record of differentiable operations.

    Recording order is a topological order of the graph, so ``backward``
    just walks the list in reverse and visits each op once.
    """

    def __init__(self) -> None:
        self.ops: list[_Op] = []

    def __enter__(self) -> "Tape":
        _TAPES.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _TAPES.remove(self)

    def record(self, out: Tensor, inputs: tuple[Tensor, ...], backward) -> None:
        out.requires_grad = True
        out._produced = True
        self.ops.append(_Op(out, inputs, backward))

    def backward(self, loss: Tensor) -> None:
        """Accumulate dLoss/dLeaf into ``.grad`` of every grad-enabled leaf."""
        if loss.data.size != 1:
            raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
        pending: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
        for op in reversed(self.ops):
            g = pending.pop(id(op.out), None)
            if g is None:
                continue
            for inp, gi in zip(op.inputs, op.backward(g)):
                if gi is None or not inp.requires_grad:
                    continue
                if inp._produced:
                    key = id(inp)
                    pending[key] = pending[key] + gi if key in pending else gi
                else:
                    inp.grad = gi.copy() if inp.grad is None else inp.grad + gi
        if not loss._produced and loss.requires_grad:
            loss.grad = np.ones_like(loss.data)


def backward(loss: Tensor, tape: Tape | None = None) -> None:
    """Run reverse mode on ``tape`` (default: the innermost open tape)."""
    if tape is None:
        if not _TAPES:
            raise RuntimeError("no tape is active; pass the tape explicitly")
        tape = _TAPES[-1]
    tape.backward(loss)


def _record(out_data: np.ndarray, inputs: tuple[Tensor, ...], backward) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = out_data
    out.requires_grad = False
    out.grad = None
    out._produced = False
    out.name = None
    if _TAPES and any(t.requires_grad for t in inputs):
        _TAPES[-1].record(out, inputs, backward)
    return out


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


# ---------------------------------------------------------------------------
# convolution


def _nhwc(a: np.ndarray) -> np.ndarray:
    # NCHW-shaped arrays produced here are views of channels-last buffers,
    # so this transpose is free on the hot path
    return a.transpose(0, 2, 3, 1)


def _nchw(a: np.ndarray) -> np.ndarray:
    return a.transpose(0, 3, 1, 2)


def conv2d(x: Tensor, kernel: Tensor, bias: Tensor | None = None,
           stride: int = 1, padding: int = 0) -> Tensor:
    """2-D cross-correlation of an NCHW input with an OIKK kernel, zero padded."""
    if x.data.ndim != 4 or kernel.data.ndim != 4:
        raise ValueError(f"conv2d expects NCHW input and OIKK kernel, got {x.shape} and {kernel.shape}")
    n, c, h, w = x.shape
    o, ci, k, k2 = kernel.shape
    if ci != c or k != k2:
        raise ValueError(f"conv2d shape mismatch: input {x.shape} vs kernel {kernel.shape}")
    if stride < 1 or padding < 0:
        raise ValueError(f"bad stride/padding ({stride}, {padding})")
    ho = (h + 2 * padding - k) // stride + 1
    wo = (w + 2 * padding - k) // stride + 1
    if ho < 1 or wo < 1:
        raise ValueError(f"kernel {kernel.shape} larger than padded input {x.shape}")
    if bias is not None and bias.shape != (o,):
        raise ValueError(f"bias shape {bias.shape} does not match {o} output channels")

    xh = _nhwc(x.data)
    if padding:
        xh = np.pad(xh, ((0, 0), (padding, padding), (padding, padding), (0, 0)))
    if k == 1 and stride == 1:
        cols = np.ascontiguousarray(xh).reshape(n * ho * wo, c)
    else:
        win = sliding_window_view(xh, (k, k), axis=(1, 2))
        win = win[:, : (ho - 1) * stride + 1 : stride, : (wo - 1) * stride + 1 : stride]
        # columns ordered (ki, kj, c)
        cols = win.transpose(0, 1, 2, 4, 5, 3).reshape(n * ho * wo, k * k * c)
    wmat = kernel.data.transpose(2, 3, 1, 0).reshape(k * k * c, o)
    out = cols @ wmat
    if bias is not None:
        out += bias.data
    out_data = _nchw(out.reshape(n, ho, wo, o))

    def back(g: np.ndarray):
        g2 = np.ascontiguousarray(_nhwc(g)).reshape(-1, o)
        gk = gb = gx = None
        if kernel.requires_grad:
            gk = np.ascontiguousarray((cols.T @ g2).reshape(k, k, c, o).transpose(3, 2, 0, 1))
        if bias is not None and bias.requires_grad:
            gb = g2.sum(axis=0, dtype=np.float64).astype(g.dtype)
        if x.requires_grad:
            if stride == 1 and 2 * padding == k - 1:
                # "same" convolution: the input gradient is a correlation of the
                # output gradient with the flipped, transposed kernel
                gh = g2.reshape(n, ho, wo, o)
                if k > 1:
                    gh = np.pad(gh, ((0, 0), (padding, padding), (padding, padding), (0, 0)))
                    gcols = sliding_window_view(gh, (k, k), axis=(1, 2)).transpose(0, 1, 2, 4, 5, 3)
                    gcols = gcols.reshape(n * h * w, k * k * o)
                else:
                    gcols = g2
                wflip = kernel.data[:, :, ::-1, ::-1].transpose(2, 3, 0, 1).reshape(k * k * o, c)
                return _nchw((gcols @ wflip).reshape(n, h, w, c)), gk, gb
            dcols = (g2 @ wmat.T).reshape(n, ho, wo, k, k, c)
            if k == 1 and stride == 1:
                gxp = dcols[:, :, :, 0, 0]
            else:
                gxp = np.zeros(xh.shape, dtype=g.dtype)
                for i in range(k):
                    for j in range(k):
                        gxp[:, i : i + stride * ho : stride, j : j + stride * wo : stride] += dcols[:, :, :, i, j]
            if padding:
                gxp = gxp[:, padding : padding + h, padding : padding + w]
            gx = _nchw(gxp)
        return gx, gk, gb

    inputs = (x, kernel) if bias is None else (x, kernel, bias)
    return _record(out_data, inputs, back)


# ---------------------------------------------------------------------------
# elementwise / structural


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return _record(np.maximum(x.data, 0), (x,), lambda g: (g * mask,))


def clamp01(x: Tensor) -> Tensor:
    """Clip to [0, 1]; gradient passes only strictly inside the range."""
    inside = (x.data > 0) & (x.data < 1)
    return _record(np.clip(x.data, 0, 1), (x,), lambda g: (g * inside,))


def upsample2x(x: Tensor) -> Tensor:
    """Nearest-neighbour 2x upsampling of an NCHW tensor."""
    n, c, h, w = x.shape
    xh = _nhwc(x.data)
    out = np.broadcast_to(xh[:, :, None, :, None, :], (n, h, 2, w, 2, c)).reshape(n, 2 * h, 2 * w, c)

    def back(g):
        return (_nchw(_nhwc(g).reshape(n, h, 2, w, 2, c).sum(axis=(2, 4))),)

    return _record(_nchw(out), (x,), back)


def concat_channels(*xs: Tensor) -> Tensor:
    """Concatenate NCHW tensors along the channel axis."""
    if not xs:
        raise ValueError("nothing to concatenate")
    ref = xs[0].shape
    for t in xs[1:]:
        if t.data.ndim != 4 or (t.shape[0], *t.shape[2:]) != (ref[0], *ref[2:]):
            raise ValueError(f"concat_channels: incompatible shapes {ref} and {t.shape}")
    bounds = np.cumsum([0] + [t.shape[1] for t in xs])

    def back(g):
        return tuple(g[:, bounds[i] : bounds[i + 1]] for i in range(len(xs)))

    out = np.concatenate([_nhwc(t.data) for t in xs], axis=3)
    return _record(_nchw(out), tuple(xs), back)


def _check_same(a: Tensor, b: Tensor, what: str) -> None:
    if a.shape != b.shape:
        raise ValueError(f"{what}: shape mismatch {a.shape} vs {b.shape}")


def add(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_same(a, b, "add")
    return _record(a.data + b.data, (a, b), lambda g: (g, g))


def sub(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_same(a, b, "sub")
    return _record(a.data - b.data, (a, b), lambda g: (g, -g))


def scale(a: Tensor, c: float) -> Tensor:
    c = a.data.dtype.type(c)
    return _record(a.data * c, (a,), lambda g: (g * c,))


def mse(a: Tensor, b: Tensor) -> Tensor:
    """Mean of squared differences over every element (float64 accumulation)."""
    a, b = _as_tensor(a), _as_tensor(b)
    _check_same(a, b, "mse")
    diff = a.data.astype(np.float64) - b.data
    n = diff.size
    value = np.asarray(np.dot(diff.ravel(), diff.ravel()) / n, dtype=np.result_type(a.data, b.data))

    def back(g):
        ga = 2.0 * float(g) / n * diff
        return ga.astype(a.data.dtype), (-ga).astype(b.data.dtype)

    return _record(value, (a, b), back)


def sum_all(a: Tensor) -> Tensor:
    """Scalar sum of every element (float64 accumulation)."""
    value = np.asarray(a.data.sum(dtype=np.float64), dtype=a.data.dtype)
    return _record(value, (a,), lambda g: (np.full(a.shape, g, dtype=a.data.dtype),))


def weighted_sum(terms: Sequence[Tensor], weights: Sequence[float]) -> Tensor:
    """Scalar sum of ``w_i * t_i``; used to assemble composite losses."""
    if len(terms) != len(weights) or not terms:
        raise ValueError("weighted_sum needs matching, non-empty terms and weights")
    dt = np.result_type(*(t.data for t in terms))
    value = np.asarray(sum(float(w) * float(t.data) for t, w in zip(terms, weights)), dtype=dt)

    def back(g):
        return tuple(np.asarray(float(g) * w, dtype=dt) for w in weights)

    return _record(value, tuple(terms), back)


# ---------------------------------------------------------------------------
# validation


def grad_check(f: Callable[..., Tensor], inputs: Sequence[Tensor], epsilon: float = 1e-3,
               samples: int | None = 32, seed: int = 0) -> float:
    """Max relative error between tape gradients and central differences.

    ``f`` maps ``inputs`` to a scalar tensor. Both routes are evaluated in
    float64. ``samples`` coordinates are drawn per input (all when None).
    Error per coordinate is ``|a - n| / max(|a|, |n|, 1e-8)``.
    """
    rng = np.random.default_rng(seed)
    with precision(np.float64):
        leaves = [Tensor(t.data.astype(np.float64), requires_grad=True) for t in inputs]
        with Tape() as tape:
            out = f(*leaves)
        tape.backward(out)
        worst = 0.0
        for leaf in leaves:
            analytic = leaf.grad if leaf.grad is not None else np.zeros_like(leaf.data)
            flat = leaf.data.reshape(-1)
            size = flat.size
            idx = np.arange(size) if samples is None or samples >= size else rng.choice(size, samples, replace=False)
            for i in idx:
                orig = flat[i]
                flat[i] = orig + epsilon
                fp = float(f(*leaves).data)
                flat[i] = orig - epsilon
                fm = float(f(*leaves).data)
                flat[i] = orig
                num = (fp - fm) / (2 * epsilon)
                ana = float(analytic.reshape(-1)[i])
                err = abs(ana - num) / max(abs(ana), abs(num), 1e-8)
                worst = max(worst, err)
    return worst
