"""A small reverse-mode differentiation tape over numpy arrays.

Only the operations needed to train the encoders and decoder end to end are
provided. Every op returns a new :class:`Tensor`; values are never mutated in
place once created, and ``Tensor.backward`` walks the graph in reverse
topological order exactly once per node.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from crane._kernels import min_ratio_rows as _min_ratio_rows_kernel
from crane._kernels import scatter_rows as _scatter_rows


class ShapeError(ValueError):
    """Operand shapes are incompatible."""


class DomainError(ValueError):
    """An operand lies outside the domain of the operation."""


class DegenerateBatchError(ValueError):
    """Batch statistics requested for a batch that is too small."""


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "op")

    def __init__(self, data, requires_grad=False, _parents=(), _op=""):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad = None
        self.requires_grad = requires_grad
        self._parents = _parents
        self._backward = None
        self.op = _op

    @property
    def shape(self):
        return self.data.shape

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, op={self.op or 'leaf'})"

    def item(self) -> float:
        return float(self.data)

    def numpy(self) -> np.ndarray:
        return self.data

    def zero_grad(self):
        self.grad = None

    def _accumulate(self, g):
        # gradients are never mutated in place, so aliasing is safe
        if self.grad is None:
            self.grad = np.asarray(g, dtype=np.float64)
        else:
            self.grad = self.grad + g

    def backward(self, grad=None):
        """Back-propagate from this node; scalar outputs default to grad 1."""
        if grad is None:
            if self.data.size != 1:
                raise ShapeError("backward() without a seed needs a scalar output")
            grad = np.ones_like(self.data)
        order = []
        seen = set()
        stack = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for parent in node._parents:
                if parent.requires_grad and id(parent) not in seen:
                    stack.append((parent, False))
        self._accumulate(grad)
        for node in reversed(order):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)
                if node._parents:
                    # interior gradients are not needed after use
                    node.grad = None


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _result(data, parents, op):
    parents = tuple(p for p in parents if isinstance(p, Tensor))
    out = Tensor(data, requires_grad=any(p.requires_grad for p in parents),
                 _parents=parents, _op=op)
    return out


def _unbroadcast(g, shape):
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, dim in enumerate(shape):
        if dim == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    out = _result(a.data + b.data, (a, b), "add")

    def backward(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(g, b.shape))

    out._backward = backward
    return out


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    out = _result(a.data - b.data, (a, b), "sub")

    def backward(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g, a.shape))
        if b.requires_grad:
            b._accumulate(-_unbroadcast(g, b.shape))

    out._backward = backward
    return out


def mul(a, b) -> Tensor:
    """Elementwise product with numpy broadcasting."""
    a, b = _as_tensor(a), _as_tensor(b)
    out = _result(a.data * b.data, (a, b), "mul")

    def backward(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g * b.data, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(g * a.data, b.shape))

    out._backward = backward
    return out


def matmul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul of {a.shape} and {b.shape}")
    out = _result(a.data @ b.data, (a, b), "matmul")

    def backward(g):
        if a.requires_grad:
            a._accumulate(g @ b.data.T)
        if b.requires_grad:
            b._accumulate(a.data.T @ g)

    out._backward = backward
    return out


def transpose(a) -> Tensor:
    a = _as_tensor(a)
    out = _result(a.data.T, (a,), "transpose")

    def backward(g):
        a._accumulate(g.T)

    out._backward = backward
    return out


def relu(x) -> Tensor:
    x = _as_tensor(x)
    mask = x.data > 0
    out = _result(np.maximum(x.data, 0.0), (x,), "relu")

    def backward(g):
        x._accumulate(g * mask)

    out._backward = backward
    return out


def take_rows(x, index) -> Tensor:
    """Gather rows ``x[index]``; gradients scatter-add back."""
    x = _as_tensor(x)
    index = np.asarray(index, dtype=np.int64)
    out = _result(x.data[index], (x,), "take_rows")

    def backward(g):
        if x.data.ndim == 2:
            n = len(index)
            x._accumulate(_scatter_rows(x.shape[0], index, np.ascontiguousarray(g),
                                        np.arange(n), np.ones(n)))
        else:
            acc = np.zeros_like(x.data)
            np.add.at(acc, index, g)
            x._accumulate(acc)

    out._backward = backward
    return out


def total(x) -> Tensor:
    x = _as_tensor(x)
    out = _result(np.array(x.data.sum()), (x,), "sum")

    def backward(g):
        x._accumulate(np.broadcast_to(g, x.shape))

    out._backward = backward
    return out


def mean(items) -> Tensor:
    """Mean of a sequence of scalar tensors."""
    items = [_as_tensor(t) for t in items]
    if not items:
        raise ValueError("mean of an empty sequence")
    n = len(items)
    out = _result(np.array(sum(t.data for t in items) / n), items, "mean")

    def backward(g):
        for t in items:
            if t.requires_grad:
                t._accumulate(g / n)

    out._backward = backward
    return out


def stack_columns(columns, n_rows) -> Tensor:
    """Stack vectors (or ``None`` for an all-zero column) into an n×k matrix."""
    k = len(columns)
    data = np.zeros((n_rows, k))
    parents = []
    for i, col in enumerate(columns):
        if col is not None:
            data[:, i] = col.data
            parents.append(col)
    out = _result(data, parents, "stack_columns")

    def backward(g):
        for i, col in enumerate(columns):
            if col is not None and col.requires_grad:
                col._accumulate(g[:, i])

    out._backward = backward
    return out


def outer(u, v) -> Tensor:
    u, v = _as_tensor(u), _as_tensor(v)
    if u.data.ndim != 1 or v.data.ndim != 1:
        raise ShapeError(f"outer expects vectors, got {u.shape} and {v.shape}")
    out = _result(np.outer(u.data, v.data), (u, v), "outer")

    def backward(g):
        if u.requires_grad:
            u._accumulate(g @ v.data)
        if v.requires_grad:
            v._accumulate(g.T @ u.data)

    out._backward = backward
    return out


def min_ratio(m, a) -> Tensor:
    """min over all cells of m / a; the gradient goes to the first argmin cell."""
    m, a = _as_tensor(m), _as_tensor(a)
    if m.shape != a.shape:
        raise ShapeError(f"min_ratio of {m.shape} and {a.shape}")
    if np.any(a.data <= 0):
        raise DomainError("basis entries must be strictly positive")
    ratio = m.data / a.data
    idx = np.unravel_index(int(np.argmin(ratio)), ratio.shape)
    out = _result(np.array(ratio[idx]), (m, a), "min_ratio")

    def backward(g):
        if m.requires_grad:
            gm = np.zeros_like(m.data)
            gm[idx] = g / a.data[idx]
            m._accumulate(gm)
        if a.requires_grad:
            ga = np.zeros_like(a.data)
            ga[idx] = -g * m.data[idx] / a.data[idx] ** 2
            a._accumulate(ga)

    out._backward = backward
    return out


def min_ratio_rows(memory, emb_o, emb_d, eps) -> Tensor:
    """Batched ``min_ratio(memory, outer(emb_o[j], emb_d[j]) + eps)`` for every row j."""
    memory, emb_o, emb_d = _as_tensor(memory), _as_tensor(emb_o), _as_tensor(emb_d)
    if eps <= 0:
        raise DomainError("eps must be positive")
    h, w = memory.shape
    values, flat = _min_ratio_rows_kernel(memory.data, emb_o.data, emb_d.data, float(eps))
    out = _result(values, (memory, emb_o, emb_d), "min_ratio_rows")

    def backward(g):
        rows = np.arange(len(flat))
        p, q = flat // w, flat % w
        eo = emb_o.data[rows, p]
        ed = emb_d.data[rows, q]
        a = eo * ed + eps
        mval = memory.data[p, q]
        if memory.requires_grad:
            gm = np.zeros(h * w)
            np.add.at(gm, flat, g / a)
            memory._accumulate(gm.reshape(h, w))
        da = -g * mval / a**2
        if emb_o.requires_grad:
            go = np.zeros_like(emb_o.data)
            go[rows, p] = da * ed
            emb_o._accumulate(go)
        if emb_d.requires_grad:
            gd = np.zeros_like(emb_d.data)
            gd[rows, q] = da * eo
            emb_d._accumulate(gd)

    out._backward = backward
    return out


def floor_div_clip(x, theta, rtol=0.0) -> int:
    """``max(floor(x / theta), 0)`` as a plain integer; never part of the tape."""
    if theta <= 0:
        raise ValueError(f"theta must be positive, got {theta}")
    value = x.item() if isinstance(x, Tensor) else float(x)
    return max(int(np.floor(value / theta * (1.0 + rtol))), 0)


def mae_loss(pred, truth) -> Tensor:
    pred = _as_tensor(pred)
    truth = np.asarray(truth.data if isinstance(truth, Tensor) else truth, dtype=np.float64)
    if pred.shape != truth.shape:
        raise ShapeError(f"mae_loss of {pred.shape} and {truth.shape}")
    n = truth.size
    if n == 0:
        raise ValueError("mae_loss needs at least one element")
    diff = pred.data - truth
    out = _result(np.array(np.abs(diff).mean()), (pred,), "mae")

    def backward(g):
        pred._accumulate(g * np.sign(diff) / n)

    out._backward = backward
    return out


@dataclass
class BatchNormState:
    """Running statistics for one batch-norm layer."""

    running_mean: np.ndarray
    running_var: np.ndarray
    momentum: float = 0.1
    eps: float = 1e-5

    @classmethod
    def fresh(cls, dim: int) -> "BatchNormState":
        return cls(np.zeros(dim), np.ones(dim))


def batchnorm(x, gamma, beta, state: BatchNormState, mode: str = "train") -> Tensor:
    x, gamma, beta = _as_tensor(x), _as_tensor(gamma), _as_tensor(beta)
    if mode == "infer":
        inv = 1.0 / np.sqrt(state.running_var + state.eps)
        xhat = (x.data - state.running_mean) * inv
        out = _result(gamma.data * xhat + beta.data, (x, gamma, beta), "batchnorm")

        def backward_infer(g):
            if x.requires_grad:
                x._accumulate(g * gamma.data * inv)
            if gamma.requires_grad:
                gamma._accumulate((g * xhat).sum(axis=0))
            if beta.requires_grad:
                beta._accumulate(g.sum(axis=0))

        out._backward = backward_infer
        return out
    if mode != "train":
        raise ValueError(f"unknown batchnorm mode {mode!r}")
    n = x.shape[0]
    if n < 2:
        raise DegenerateBatchError("train-mode batchnorm needs a batch of at least 2")
    mu = x.data.mean(axis=0)
    var = x.data.var(axis=0)
    inv = 1.0 / np.sqrt(var + state.eps)
    xhat = (x.data - mu) * inv
    state.running_mean = (1 - state.momentum) * state.running_mean + state.momentum * mu
    state.running_var = ((1 - state.momentum) * state.running_var
                         + state.momentum * var * n / (n - 1))
    out = _result(gamma.data * xhat + beta.data, (x, gamma, beta), "batchnorm")

    def backward(g):
        if gamma.requires_grad:
            gamma._accumulate((g * xhat).sum(axis=0))
        if beta.requires_grad:
            beta._accumulate(g.sum(axis=0))
        if x.requires_grad:
            dxhat = g * gamma.data
            dx = (inv / n) * (n * dxhat - dxhat.sum(axis=0)
                              - xhat * (dxhat * xhat).sum(axis=0))
            x._accumulate(dx)

    out._backward = backward
    return out


def superpose(emb_o, emb_d, rows_o, rows_d, coef, eps) -> Tensor:
    """Memory built from per-edge coefficients: sum_k coef_k * (emb_o[ro_k] outer emb_d[rd_k] + eps).

    ``coef`` is a constant (carry factors carry no gradient); gradients flow
    to both embedding tables.
    """
    emb_o, emb_d = _as_tensor(emb_o), _as_tensor(emb_d)
    rows_o = np.asarray(rows_o, dtype=np.int64)
    rows_d = np.asarray(rows_d, dtype=np.int64)
    coef = np.asarray(coef, dtype=np.float64)
    mixed = _scatter_rows(emb_o.shape[0], rows_o, emb_d.data, rows_d, coef)
    out = _result(emb_o.data.T @ mixed + eps * coef.sum(), (emb_o, emb_d), "superpose")

    def backward(g):
        if emb_o.requires_grad:
            emb_o._accumulate(mixed @ g.T)
        if emb_d.requires_grad:
            d_mixed = emb_o.data @ g
            emb_d._accumulate(_scatter_rows(emb_d.shape[0], rows_d, d_mixed, rows_o, coef))

    out._backward = backward
    return out


def matvec(a, v) -> Tensor:
    """Matrix-vector product ``a @ v`` for a 2-D ``a`` and 1-D ``v``."""
    a, v = _as_tensor(a), _as_tensor(v)
    if a.data.ndim != 2 or v.data.ndim != 1 or a.shape[1] != v.shape[0]:
        raise ShapeError(f"matvec of {a.shape} and {v.shape}")
    out = _result(a.data @ v.data, (a, v), "matvec")

    def backward(g):
        if a.requires_grad:
            a._accumulate(np.outer(g, v.data))
        if v.requires_grad:
            v._accumulate(a.data.T @ g)

    out._backward = backward
    return out
