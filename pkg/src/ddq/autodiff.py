"""Small reverse-mode autodiff engine over float64 numpy arrays.

Only what the quantized networks need: dense/conv layers, ReLU, a
cross-entropy head and a hook (:func:`custom_op`) for operations whose
backward rule is not the derivative of their forward map (STE and the
gradient-corrected quantizer both go through it).
"""

from __future__ import annotations

import itertools
import threading
from typing import Callable, Iterable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


class DimensionError(ValueError):
    """Operand shapes are incompatible."""


class TrainingDiverged(RuntimeError):
    """A loss or gradient became non-finite."""

    def __init__(self, message: str, step: int | None = None):
        super().__init__(message)
        self.step = step


_ids = itertools.count()
_local = threading.local()


class Tensor:
    """A float64 array that records how it was produced.

    ``grad`` stays ``None`` until a backward pass reaches the tensor.
    """

    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, _parents: tuple = (), _backward=None, name: str = ""):
        self.data = np.ascontiguousarray(np.asarray(data, dtype=np.float64))
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad or any(p.requires_grad for p in _parents)
        self._parents = _parents if self.requires_grad else ()
        self._backward = _backward if self.requires_grad else None
        self.node_id = next(_ids)
        self.name = name
        tape = getattr(_local, "tape", None)
        if tape is not None and self._parents:
            tape.record(self)

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    def zero_grad(self):
        self.grad = None

    def accumulate(self, g: np.ndarray):
        if g.shape != self.data.shape:
            raise DimensionError(f"gradient shape {g.shape} does not match tensor shape {self.data.shape}")
        if self.grad is None:
            self.grad = np.array(g, dtype=np.float64, copy=True)
        else:
            self.grad += g

    def backward(self, grad: np.ndarray | None = None):
        """Run reverse accumulation from this tensor.

        Nodes are visited in strict reverse creation order, which is the
        execution order of the forward pass.
        """
        if grad is None:
            if self.data.size != 1:
                raise DimensionError(f"backward() without a seed needs a scalar, got shape {self.shape}")
            grad = np.ones_like(self.data)
        nodes = _reachable(self)
        self.accumulate(np.asarray(grad, dtype=np.float64).reshape(self.shape))
        for node in nodes:
            if node._backward is None or node.grad is None:
                continue
            grads = node._backward(node.grad)
            for parent, g in zip(node._parents, grads):
                if g is not None and parent.requires_grad:
                    parent.accumulate(g)

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __matmul__(self, other):
        return matmul(self, other)


def _reachable(root: Tensor) -> list[Tensor]:
    seen: dict[int, Tensor] = {}
    stack = [root]
    while stack:
        t = stack.pop()
        if t.node_id in seen:
            continue
        seen[t.node_id] = t
        stack.extend(t._parents)
    return sorted(seen.values(), key=lambda t: t.node_id, reverse=True)


class Tape:
    """Explicit record of the operations executed inside a ``with`` block.

    Tensors carry their own parent links, so a tape is optional; it is
    useful for inspecting execution order and for running backward over
    exactly the recorded nodes.
    """

    def __init__(self):
        self.nodes: list[Tensor] = []
        self._previous = None

    def record(self, node: Tensor):
        self.nodes.append(node)

    def __enter__(self):
        self._previous = getattr(_local, "tape", None)
        _local.tape = self
        return self

    def __exit__(self, *exc):
        _local.tape = self._previous
        return False

    def backward(self, root: Tensor):
        if root.data.size != 1:
            raise DimensionError(f"tape backward needs a scalar root, got {root.shape}")
        root.accumulate(np.ones_like(root.data))
        for node in reversed(self.nodes):
            if node._backward is None or node.grad is None:
                continue
            for parent, g in zip(node._parents, node._backward(node.grad)):
                if g is not None and parent.requires_grad:
                    parent.accumulate(g)


def _scalar(g) -> float:
    return float(np.asarray(g).reshape(-1)[0])


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def custom_op(data: np.ndarray, parents: Sequence[Tensor], backward: Callable[[np.ndarray], Iterable]) -> Tensor:
    """Create a node with an arbitrary backward closure.

    ``backward(grad_out)`` must return one gradient (or ``None``) per parent.
    """
    return Tensor(data, _parents=tuple(parents), _backward=backward)


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.shape == b.shape:
        return Tensor(a.data + b.data, _parents=(a, b), _backward=lambda g: (g, g))
    # bias-add: b is [C] broadcast along axis 1 of a
    if b.data.ndim == 1 and a.data.ndim >= 2 and a.shape[1] == b.shape[0]:
        expand = (1, -1) + (1,) * (a.data.ndim - 2)
        axes = (0,) + tuple(range(2, a.data.ndim))
        return Tensor(
            a.data + b.data.reshape(expand),
            _parents=(a, b),
            _backward=lambda g: (g, g.sum(axis=axes)),
        )
    raise DimensionError(f"cannot add shapes {a.shape} and {b.shape}")


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.shape != b.shape:
        raise DimensionError(f"cannot subtract shapes {a.shape} and {b.shape}")
    return Tensor(a.data - b.data, _parents=(a, b), _backward=lambda g: (g, -g))


def mul(a, b) -> Tensor:
    if isinstance(b, (int, float)):
        a = as_tensor(a)
        return Tensor(a.data * b, _parents=(a,), _backward=lambda g: (g * b,))
    a, b = as_tensor(a), as_tensor(b)
    if a.shape != b.shape:
        raise DimensionError(f"cannot multiply shapes {a.shape} and {b.shape}")
    return Tensor(a.data * b.data, _parents=(a, b), _backward=lambda g: (g * b.data, g * a.data))


def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
    return Tensor(
        a.data @ b.data,
        _parents=(a, b),
        _backward=lambda g: (g @ b.data.T, a.data.T @ g),
    )


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    src = a.shape
    return Tensor(a.data.reshape(shape), _parents=(a,), _backward=lambda g: (g.reshape(src),))


def transpose(a: Tensor) -> Tensor:
    if a.data.ndim != 2:
        raise DimensionError(f"transpose expects a matrix, got {a.shape}")
    return Tensor(a.data.T, _parents=(a,), _backward=lambda g: (g.T,))


def flatten(a: Tensor) -> Tensor:
    return reshape(a, (a.shape[0], -1))


def total(a: Tensor) -> Tensor:
    return Tensor(a.data.sum(), _parents=(a,), _backward=lambda g: (np.full(a.shape, _scalar(g)),))


def mean(a: Tensor) -> Tensor:
    n = a.data.size
    return Tensor(a.data.mean(), _parents=(a,), _backward=lambda g: (np.full(a.shape, _scalar(g) / n),))


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    return Tensor(np.where(mask, a.data, 0.0), _parents=(a,), _backward=lambda g: (g * mask,))


def softmax_cross_entropy(logits: Tensor, labels: np.ndarray) -> Tensor:
    """Mean cross-entropy of integer ``labels`` under softmax(``logits``)."""
    labels = np.asarray(labels, dtype=np.int64)
    if logits.data.ndim != 2 or labels.shape != (logits.shape[0],):
        raise DimensionError(f"logits {logits.shape} and labels {labels.shape} disagree")
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    logsum = np.log(np.exp(z).sum(axis=1))
    rows = np.arange(len(labels))
    loss = float(np.mean(logsum - z[rows, labels]))
    if not np.isfinite(loss):
        raise TrainingDiverged(f"non-finite loss {loss}")

    def backward(g):
        p = np.exp(z - logsum[:, None])
        p[rows, labels] -= 1.0
        return (p * (_scalar(g) / len(labels)),)

    return Tensor(np.array(loss), _parents=(logits,), _backward=backward)


def _conv_out(size: int, k: int, stride: int, padding: int) -> int:
    return (size + 2 * padding - k) // stride + 1


def conv2d(x: Tensor, w: Tensor, bias: Tensor | None = None, stride: int = 1, padding: int = 0, groups: int = 1) -> Tensor:
    """Cross-correlation over NCHW input with OIHW kernels."""
    x, w = as_tensor(x), as_tensor(w)
    if x.data.ndim != 4 or w.data.ndim != 4:
        raise DimensionError(f"conv2d expects 4-d input and kernel, got {x.shape} and {w.shape}")
    n, c_in, h, wd = x.shape
    c_out, c_per, kh, kw = w.shape
    if c_in % groups or c_out % groups or c_per * groups != c_in:
        raise DimensionError(f"channel mismatch: input {x.shape}, kernel {w.shape}, groups={groups}")
    if kh > h + 2 * padding or kw > wd + 2 * padding:
        raise DimensionError(f"kernel {w.shape} larger than padded input {x.shape}")
    ho, wo = _conv_out(h, kh, stride, padding), _conv_out(wd, kw, stride, padding)
    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    # (n, c, ho, wo, kh, kw)
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride]
    og = c_out // groups
    cols, outs = [], []
    for gi in range(groups):
        xs = win[:, gi * c_per:(gi + 1) * c_per]
        col = xs.transpose(0, 2, 3, 1, 4, 5).reshape(n * ho * wo, c_per * kh * kw)
        wm = w.data[gi * og:(gi + 1) * og].reshape(og, -1)
        cols.append(col)
        outs.append(col @ wm.T)
    out = np.concatenate(outs, axis=1).reshape(n, ho, wo, c_out).transpose(0, 3, 1, 2)
    if bias is not None:
        if bias.shape != (c_out,):
            raise DimensionError(f"bias shape {bias.shape} does not match {c_out} output channels")
        out = out + bias.data.reshape(1, -1, 1, 1)

    def backward(g):
        gm = g.transpose(0, 2, 3, 1).reshape(n * ho * wo, c_out)
        gw = np.empty_like(w.data)
        gxp = np.zeros_like(xp)
        for gi in range(groups):
            gsl = gm[:, gi * og:(gi + 1) * og]
            gw[gi * og:(gi + 1) * og] = (gsl.T @ cols[gi]).reshape(og, c_per, kh, kw)
            wm = w.data[gi * og:(gi + 1) * og].reshape(og, -1)
            gcol = (gsl @ wm).reshape(n, ho, wo, c_per, kh, kw)
            block = gxp[:, gi * c_per:(gi + 1) * c_per]
            for i in range(kh):
                for j in range(kw):
                    block[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += gcol[..., i, j].transpose(0, 3, 1, 2)
        gx = gxp[:, :, padding:padding + h, padding:padding + wd]
        gb = g.sum(axis=(0, 2, 3)) if bias is not None else None
        return (gx, gw, gb) if bias is not None else (gx, gw)

    parents = (x, w, bias) if bias is not None else (x, w)
    return Tensor(out, _parents=parents, _backward=backward)


class SGD:
    """SGD with optional momentum and L2 weight decay; clears grads after stepping."""

    def __init__(self, params: Sequence[Tensor], lr: float, momentum: float = 0.0, weight_decay: float = 0.0):
        self.params = list(params)
        self.lr = lr
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.buffers: list[np.ndarray | None] = [None] * len(self.params)

    def step(self):
        sgd_step(self.params, self.lr, self.momentum, self.weight_decay, self.buffers)


def sgd_step(params: Sequence[Tensor], lr: float, momentum: float = 0.0, weight_decay: float = 0.0, buffers: list | None = None):
    """Update ``params`` in place from their gradients, then clear the gradients."""
    for i, p in enumerate(params):
        if p.grad is None:
            continue
        g = p.grad
        if weight_decay:
            g = g + weight_decay * p.data
        if momentum and buffers is not None:
            buf = buffers[i]
            buf = g.copy() if buf is None else momentum * buf + g
            buffers[i] = buf
            g = buf
        if lr:
            p.data -= lr * g
        p.grad = None
