"""Dense float tensors with tape-based reverse-mode differentiation.

Only the operations the training pipeline needs are provided. Operations are
recorded on the innermost active :class:`Tape`; outside a tape they run as
plain numpy computations and nothing is recorded::

    with Tape() as tape:
        loss = softmax_cross_entropy(matmul(x, w), labels)
    tape.backward(loss)
    w.grad  # dloss/dw
"""

from __future__ import annotations

import threading
from typing import Callable, Optional, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ShapeError

__all__ = [
    "Tensor",
    "Tape",
    "backward",
    "matmul",
    "add",
    "mul",
    "tensor_sum",
    "add_bias",
    "reshape",
    "concat_cols",
    "conv2d",
    "maxpool2d",
    "relu",
    "embedding_mean",
    "embedding_mean_batch",
    "softmax_cross_entropy",
]

_local = threading.local()


def _tape_stack() -> list:
    stack = getattr(_local, "tapes", None)
    if stack is None:
        stack = _local.tapes = []
    return stack


class Tensor:
    """A dense row-major array with an optional gradient buffer.

    Data is stored as a contiguous numpy array, 32-bit by default. Passing
    ``dtype=np.float64`` is reserved for numerical gradient checking.
    """

    __slots__ = ("data", "grad", "requires_grad")

    def __init__(self, data, requires_grad: bool = False, dtype=np.float32):
        arr = np.array(data, dtype=dtype, order="C")
        if any(d < 1 for d in arr.shape):
            raise ShapeError(f"tensor dimensions must be >= 1, got shape {arr.shape}")
        self.data = arr
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = bool(requires_grad)

    @classmethod
    def _wrap(cls, arr: np.ndarray, requires_grad: bool = False) -> "Tensor":
        t = cls.__new__(cls)
        t.data = np.ascontiguousarray(arr)
        t.grad = None
        t.requires_grad = requires_grad
        return t

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor._wrap(self.data)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    def __add__(self, other: "Tensor") -> "Tensor":
        return add(self, other)

    def __mul__(self, other: "Tensor") -> "Tensor":
        return mul(self, other)

    def __matmul__(self, other: "Tensor") -> "Tensor":
        return matmul(self, other)

    def sum(self) -> "Tensor":
        return tensor_sum(self)

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


class _Node:
    __slots__ = ("out", "inputs", "backward_fn")

    def __init__(self, out, inputs, backward_fn):
        self.out = out
        self.inputs = inputs
        self.backward_fn = backward_fn


class Tape:
    """Ordered record of differentiable operations executed inside ``with``."""

    def __init__(self):
        self._nodes: list[_Node] = []

    def __enter__(self) -> "Tape":
        _tape_stack().append(self)
        return self

    def __exit__(self, *exc) -> None:
        _tape_stack().pop()

    def __len__(self) -> int:
        return len(self._nodes)

    def backward(self, loss: Tensor) -> None:
        backward(self, loss)

    def clear(self) -> None:
        self._nodes.clear()


def _active_tape() -> Optional[Tape]:
    stack = _tape_stack()
    return stack[-1] if stack else None


def _result(
    out_data: np.ndarray,
    inputs: Sequence[Tensor],
    backward_fn: Callable[[np.ndarray], Sequence[Optional[np.ndarray]]],
) -> Tensor:
    tape = _active_tape()
    track = tape is not None and any(t.requires_grad for t in inputs)
    out = Tensor._wrap(out_data, requires_grad=track)
    if track:
        tape._nodes.append(_Node(out, tuple(inputs), backward_fn))
    return out


def backward(tape: Tape, loss: Tensor) -> None:
    """Populate ``.grad`` of every requires-grad tensor reachable from ``loss``.

    Gradients are added to any existing ``.grad`` buffers, so callers zero
    them between steps.
    """
    if loss.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not tape._nodes and not loss.requires_grad:
        return
    pending: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    owners: dict[int, Tensor] = {id(loss): loss}

    def finalize(t: Tensor, g: np.ndarray) -> None:
        if t.requires_grad:
            t.grad = g.copy() if t.grad is None else t.grad + g

    for node in reversed(tape._nodes):
        g = pending.pop(id(node.out), None)
        owners.pop(id(node.out), None)
        if g is None:
            continue
        finalize(node.out, g)
        input_grads = node.backward_fn(g)
        for t, gi in zip(node.inputs, input_grads):
            if gi is None or not t.requires_grad:
                continue
            key = id(t)
            if key in pending:
                pending[key] = pending[key] + gi
            else:
                pending[key] = gi
                owners[key] = t
    for key, g in pending.items():
        finalize(owners[key], g)


def _same_shape(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


def add(a: Tensor, b: Tensor) -> Tensor:
    _same_shape(a, b, "add")
    return _result(a.data + b.data, (a, b), lambda g: (g, g))


def mul(a: Tensor, b: Tensor) -> Tensor:
    _same_shape(a, b, "mul")
    return _result(a.data * b.data, (a, b), lambda g: (g * b.data, g * a.data))


def tensor_sum(a: Tensor) -> Tensor:
    out = np.asarray(a.data.sum(), dtype=a.dtype)
    return _result(out, (a,), lambda g: (np.full_like(a.data, g.reshape(())),))


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product of ``m x k`` and ``k x n`` tensors."""
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: cannot multiply {a.shape} by {b.shape}")

    def grad_fn(g):
        return g @ b.data.T, a.data.T @ g

    return _result(a.data @ b.data, (a, b), grad_fn)


def add_bias(x: Tensor, bias: Tensor) -> Tensor:
    """Add a per-feature bias along the leading batch dimension."""
    if x.ndim != 2 or bias.shape != (x.shape[1],):
        raise ShapeError(f"add_bias: bias {bias.shape} does not fit input {x.shape}")
    return _result(x.data + bias.data, (x, bias), lambda g: (g, g.sum(axis=0)))


def reshape(x: Tensor, shape) -> Tensor:
    shape = tuple(int(d) for d in shape)
    if int(np.prod(shape)) != x.size:
        raise ShapeError(f"reshape: cannot view {x.shape} as {shape}")
    return _result(x.data.reshape(shape), (x,), lambda g: (g.reshape(x.shape),))


def concat_cols(a: Tensor, b: Tensor) -> Tensor:
    """Row-wise concatenation ``[a | b]`` of two ``N x d`` tensors."""
    if a.ndim != 2 or b.ndim != 2 or a.shape[0] != b.shape[0]:
        raise ShapeError(f"concat_cols: row mismatch {a.shape} vs {b.shape}")
    split = a.shape[1]
    out = np.concatenate([a.data, b.data], axis=1)
    return _result(out, (a, b), lambda g: (g[:, :split], g[:, split:]))


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return _result(np.where(mask, x.data, 0).astype(x.dtype), (x,), lambda g: (g * mask,))


def conv2d(
    x: Tensor,
    kernel: Tensor,
    bias: Optional[Tensor] = None,
    stride: int = 1,
    padding: int = 0,
) -> Tensor:
    """2-D cross-correlation of ``N x C x H x W`` input with ``F x C x kh x kw`` kernels."""
    if x.ndim != 4 or kernel.ndim != 4 or x.shape[1] != kernel.shape[1]:
        raise ShapeError(f"conv2d: input {x.shape} incompatible with kernel {kernel.shape}")
    if stride < 1 or padding < 0:
        raise ShapeError(f"conv2d: invalid stride {stride} / padding {padding}")
    n, c, h, w = x.shape
    f, _, kh, kw = kernel.shape
    hp, wp = h + 2 * padding, w + 2 * padding
    if kh > hp or kw > wp:
        raise ShapeError(f"conv2d: kernel {kh}x{kw} larger than padded input {hp}x{wp}")
    if bias is not None and bias.shape != (f,):
        raise ShapeError(f"conv2d: bias {bias.shape} does not match {f} filters")
    ho = (hp - kh) // stride + 1
    wo = (wp - kw) // stride + 1

    xp = x.data
    if padding:
        xp = np.pad(xp, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride][:, :, :ho, :wo]
    out = np.tensordot(win, kernel.data, axes=([1, 4, 5], [1, 2, 3])).transpose(0, 3, 1, 2)
    if bias is not None:
        out = out + bias.data[None, :, None, None]

    def grad_fn(g):
        dk = np.tensordot(g, win, axes=([0, 2, 3], [0, 2, 3]))
        cols = np.tensordot(g, kernel.data, axes=([1], [0]))  # n, ho, wo, c, kh, kw
        dxp = np.zeros((n, c, hp, wp), dtype=g.dtype)
        for i in range(kh):
            for j in range(kw):
                dxp[:, :, i : i + stride * (ho - 1) + 1 : stride, j : j + stride * (wo - 1) + 1 : stride] += (
                    cols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
                )
        dx = dxp[:, :, padding : padding + h, padding : padding + w] if padding else dxp
        db = g.sum(axis=(0, 2, 3)) if bias is not None else None
        return dx, dk, db

    inputs = (x, kernel) if bias is None else (x, kernel, bias)
    return _result(np.ascontiguousarray(out), inputs, grad_fn)


def maxpool2d(x: Tensor, window: int, stride: Optional[int] = None) -> Tensor:
    """Max over ``window x window`` patches; ties route gradient to the lowest index."""
    stride = window if stride is None else stride
    if x.ndim != 4:
        raise ShapeError(f"maxpool2d: expected N x C x H x W input, got {x.shape}")
    n, c, h, w = x.shape
    if window < 1 or stride < 1 or window > h or window > w:
        raise ShapeError(f"maxpool2d: window {window} does not fit input {h}x{w}")
    ho = (h - window) // stride + 1
    wo = (w - window) // stride + 1
    win = sliding_window_view(x.data, (window, window), axis=(2, 3))[:, :, ::stride, ::stride][:, :, :ho, :wo]
    flat = win.reshape(n, c, ho, wo, window * window)
    arg = flat.argmax(axis=-1)
    out = np.take_along_axis(flat, arg[..., None], axis=-1)[..., 0]

    def grad_fn(g):
        rows = np.arange(ho)[:, None] * stride + arg // window
        cols = np.arange(wo)[None, :] * stride + arg % window
        ni = np.arange(n)[:, None, None, None]
        ci = np.arange(c)[None, :, None, None]
        dx = np.zeros_like(x.data)
        if stride >= window:
            dx[ni, ci, rows, cols] = g
        else:
            np.add.at(dx, (ni, ci, rows, cols), g)
        return (dx,)

    return _result(np.ascontiguousarray(out), (x,), grad_fn)


def _check_ids(ids, vocab_size: int) -> np.ndarray:
    arr = np.asarray(ids, dtype=np.int64).reshape(-1)
    if arr.size == 0:
        raise ValueError("embedding_mean: empty id sequence")
    if arr.min() < 0 or arr.max() >= vocab_size:
        raise IndexError(f"embedding_mean: id out of range for table of {vocab_size} rows")
    return arr


def embedding_mean(ids: Sequence[int], table: Tensor) -> Tensor:
    """Mean of the table rows selected by ``ids`` as a length-``d`` vector."""
    if table.ndim != 2:
        raise ShapeError(f"embedding_mean: table must be V x d, got {table.shape}")
    arr = _check_ids(ids, table.shape[0])
    count = arr.size

    def grad_fn(g):
        dt = np.zeros_like(table.data)
        np.add.at(dt, arr, g / count)
        return (dt,)

    return _result(table.data[arr].mean(axis=0), (table,), grad_fn)


def embedding_mean_batch(batch: Sequence[Sequence[int]], table: Tensor) -> Tensor:
    """Stack :func:`embedding_mean` over a batch of id sequences into ``N x d``."""
    if table.ndim != 2:
        raise ShapeError(f"embedding_mean: table must be V x d, got {table.shape}")
    seqs = [_check_ids(ids, table.shape[0]) for ids in batch]
    if not seqs:
        raise ValueError("embedding_mean_batch: empty batch")
    out = np.stack([table.data[s].mean(axis=0) for s in seqs])

    def grad_fn(g):
        dt = np.zeros_like(table.data)
        for row, s in zip(g, seqs):
            np.add.at(dt, s, row / s.size)
        return (dt,)

    return _result(out, (table,), grad_fn)


def softmax_cross_entropy(logits: Tensor, labels: Sequence[int]) -> Tensor:
    """Mean negative log-likelihood of ``labels`` under ``softmax(logits)``."""
    if logits.ndim != 2:
        raise ShapeError(f"softmax_cross_entropy: logits must be N x C, got {logits.shape}")
    n, c = logits.shape
    y = np.asarray(labels, dtype=np.int64).reshape(-1)
    if y.size != n:
        raise ShapeError(f"softmax_cross_entropy: {y.size} labels for {n} rows")
    if y.size and (y.min() < 0 or y.max() >= c):
        raise IndexError(f"softmax_cross_entropy: label outside [0, {c})")
    shifted = logits.data - logits.data.max(axis=1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=1))
    rows = np.arange(n)
    loss = np.asarray((lse - shifted[rows, y]).mean(), dtype=logits.dtype)

    def grad_fn(g):
        probs = np.exp(shifted - lse[:, None])
        probs[rows, y] -= 1
        return (probs * (g.reshape(()) / n),)

    return _result(loss, (logits,), grad_fn)
