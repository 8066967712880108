"""Dense tensors with reverse-mode automatic differentiation.

Every op records its parents and a closure mapping the output gradient to
one gradient per parent. Ops are deliberately coarse (linear, batch norm,
softmax, gather) so the graph stays small and numpy does the heavy lifting.
"""
from __future__ import annotations

from typing import Callable, Sequence

import numpy as np
from scipy import sparse

from . import kernels

DEFAULT_DTYPE = np.float32


class ShapeError(ValueError):
    pass


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "name")

    def __init__(self, data, requires_grad: bool = False, dtype=None, name: str | None = None):
        if isinstance(data, Tensor):
            data = data.data
        if dtype is None:
            arr = np.asarray(data)
            dtype = arr.dtype if np.issubdtype(arr.dtype, np.floating) else DEFAULT_DTYPE
        self.data = np.ascontiguousarray(data, dtype=dtype)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable | None = None
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    def __repr__(self) -> str:
        tag = f", name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, requires_grad={self.requires_grad}{tag})"

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> Tensor:
        return Tensor(self.data, dtype=self.dtype)

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self, grad: np.ndarray | None = None) -> None:
        """Accumulate d(self)/d(leaf) into ``.grad`` of every leaf requiring grad."""
        if grad is None:
            if self.data.size != 1:
                raise ShapeError("backward() without a seed gradient needs a scalar output")
            grad = np.ones_like(self.data)
        order = _topological_order(self)
        pending: dict[int, np.ndarray] = {id(self): np.asarray(grad, dtype=self.dtype)}
        for node in reversed(order):
            g = pending.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                if node.requires_grad:
                    node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if key in pending:
                    pending[key] = pending[key] + pg
                else:
                    pending[key] = pg

    # operator sugar
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

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self, axis=None, keepdims: bool = False) -> Tensor:
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims: bool = False) -> Tensor:
        return mean(self, axis, keepdims)

    def max(self, axis: int) -> Tensor:
        return tmax(self, axis)

    def reshape(self, *shape) -> Tensor:
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


def _topological_order(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in seen and p.requires_grad:
                stack.append((p, False))
    return order


def as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(x, dtype=dtype)


def _make(data: np.ndarray, parents: Sequence[Tensor], backward: Callable) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.name = None
    live = tuple(parents)
    out.requires_grad = any(p.requires_grad for p in live)
    if out.requires_grad:
        out._parents = live
        out._backward = backward
    else:
        out._parents = ()
        out._backward = None
    return out


def unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum ``grad`` down to ``shape`` after numpy broadcasting."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


def _coerce(a, b) -> tuple[Tensor, Tensor]:
    if isinstance(a, Tensor) and not isinstance(b, Tensor):
        b = Tensor(b, dtype=a.dtype)
    elif isinstance(b, Tensor) and not isinstance(a, Tensor):
        a = Tensor(a, dtype=b.dtype)
    return a, b


# elementwise arithmetic

def add(a, b) -> Tensor:
    a, b = _coerce(a, b)

    def backward(g):
        return unbroadcast(g, a.shape), unbroadcast(g, b.shape)

    return _make(a.data + b.data, (a, b), backward)


def sub(a, b) -> Tensor:
    a, b = _coerce(a, b)

    def backward(g):
        return unbroadcast(g, a.shape), unbroadcast(-g, b.shape)

    return _make(a.data - b.data, (a, b), backward)


def mul(a, b) -> Tensor:
    a, b = _coerce(a, b)

    def backward(g):
        ga = unbroadcast(g * b.data, a.shape) if a.requires_grad else None
        gb = unbroadcast(g * a.data, b.shape) if b.requires_grad else None
        return ga, gb

    return _make(a.data * b.data, (a, b), backward)


def exp(x: Tensor) -> Tensor:
    out = np.exp(x.data)
    return _make(out, (x,), lambda g: (g * out,))


def log(x: Tensor) -> Tensor:
    return _make(np.log(x.data), (x,), lambda g: (g / x.data,))


def square(x: Tensor) -> Tensor:
    return _make(x.data * x.data, (x,), lambda g: (2.0 * g * x.data,))


def leaky_relu(x: Tensor, slope: float = 0.2) -> Tensor:
    if not 0.0 < slope < 1.0:
        raise ValueError(f"leaky_relu slope must lie in (0, 1), got {slope}")
    pos = x.data > 0
    out = np.maximum(x.data, slope * x.data)

    def backward(g):
        d = g * slope
        np.copyto(d, g, where=pos)
        return (d,)

    return _make(out, (x,), backward)


# reductions and reshaping

def tsum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = np.sum(x.data, axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape).copy(),)

    return _make(np.asarray(out, dtype=x.dtype), (x,), backward)


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    if axis is None:
        count = x.data.size
    else:
        axes = (axis,) if isinstance(axis, int) else tuple(axis)
        count = int(np.prod([x.shape[a] for a in axes]))
    out = np.mean(x.data, axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g / count, x.shape).astype(x.dtype),)

    return _make(np.asarray(out, dtype=x.dtype), (x,), backward)


def sorted_mean(x: Tensor, axis: int) -> Tensor:
    """Mean along ``axis`` summed in sorted order, so the value is bitwise
    independent of how the entries are ordered along that axis."""
    n = x.shape[axis]
    out = np.sort(x.data, axis=axis).sum(axis=axis) / x.dtype.type(n)

    def backward(g):
        return (np.broadcast_to(np.expand_dims(g, axis) / x.dtype.type(n), x.shape).copy(),)

    return _make(np.asarray(out, dtype=x.dtype), (x,), backward)


def tmax(x: Tensor, axis: int) -> Tensor:
    """Max along ``axis``; the gradient goes to the first maximal entry."""
    idx = np.argmax(x.data, axis=axis)
    idx_k = np.expand_dims(idx, axis)
    out = np.take_along_axis(x.data, idx_k, axis=axis).squeeze(axis)

    def backward(g):
        full = np.zeros_like(x.data)
        np.put_along_axis(full, idx_k, np.expand_dims(g, axis), axis=axis)
        return (full,)

    return _make(out, (x,), backward)


def reshape(x: Tensor, shape: tuple[int, ...]) -> Tensor:
    return _make(x.data.reshape(shape), (x,), lambda g: (g.reshape(x.shape),))


def swapaxes(x: Tensor, a: int, b: int) -> Tensor:
    return _make(np.swapaxes(x.data, a, b), (x,), lambda g: (np.swapaxes(g, a, b),))


def concat(parts: Sequence[Tensor], axis: int = -1) -> Tensor:
    parts = list(parts)
    sizes = [p.shape[axis] for p in parts]
    splits = np.cumsum(sizes)[:-1]

    def backward(g):
        return tuple(np.split(g, splits, axis=axis))

    return _make(np.concatenate([p.data for p in parts], axis=axis), parts, backward)


def slice_rows(x: Tensor, index) -> Tensor:
    """Basic indexing ``x[index]`` with a scatter-back gradient."""

    def backward(g):
        full = np.zeros_like(x.data)
        full[index] = g
        return (full,)

    return _make(x.data[index], (x,), backward)


# linear algebra

def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Batched ``a @ b`` with numpy broadcasting over leading axes."""
    a, b = _coerce(a, b)
    if a.shape[-1] != b.shape[-2 if b.ndim > 1 else 0]:
        raise ShapeError(f"matmul shape mismatch: {a.shape} @ {b.shape}")

    def backward(g):
        ga = unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.shape) if a.requires_grad else None
        gb = unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.shape) if b.requires_grad else None
        return ga, gb

    return _make(a.data @ b.data, (a, b), backward)


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """Pointwise channel map over the last axis: ``x @ W + b``."""
    if x.shape[-1] != weight.shape[0]:
        raise ShapeError(f"linear expects {weight.shape[0]} input channels, got {x.shape[-1]}")
    flat = x.data.reshape(-1, x.shape[-1])
    out = flat @ weight.data
    if bias is not None:
        out += bias.data
    out = out.reshape(*x.shape[:-1], weight.shape[1])
    parents = (x, weight) if bias is None else (x, weight, bias)

    def backward(g):
        g2 = g.reshape(-1, weight.shape[1])
        gx = (g2 @ weight.data.T).reshape(x.shape) if x.requires_grad else None
        gw = flat.T @ g2 if weight.requires_grad else None
        if bias is None:
            return gx, gw
        return gx, gw, g2.sum(axis=0)

    return _make(out, parents, backward)


def _flat_index(index: np.ndarray, n: int) -> np.ndarray:
    B = index.shape[0]
    return (index + (np.arange(B) * n)[:, None, None]).reshape(-1)


def _adjacency(flat_idx: np.ndarray, rows: int, k: int, dtype) -> sparse.csr_matrix:
    """Sparse (rows x rows) matrix with a 1 at (i, j) for each neighbour j of i."""
    indptr = np.arange(0, rows * k + 1, k)
    return sparse.csr_matrix((np.ones(rows * k, dtype=dtype), flat_idx, indptr), shape=(rows, rows))


def _check_index(x: Tensor, index: np.ndarray) -> None:
    if x.ndim != 3 or index.ndim != 3 or index.shape[:2] != x.shape[:2]:
        raise ShapeError(f"expected features (B,N,C) and neighbours (B,N,k), got {x.shape} and {index.shape}")
    if index.size and (index.min() < 0 or index.max() >= x.shape[1]):
        raise IndexError(f"neighbour index out of range [0, {x.shape[1]})")


def gather_rows(x: Tensor, index: np.ndarray) -> Tensor:
    """``out[b, i, j] = x[b, index[b, i, j]]`` for x of shape (B, N, C).

    The backward pass scatters additively, so a row chosen by several
    neighbourhoods collects every contribution.
    """
    if x.ndim != 3 or index.ndim != 3 or index.shape[0] != x.shape[0]:
        raise ShapeError(f"gather_rows expects (B,N,C) and (B,N,k), got {x.shape} and {index.shape}")
    B, N, C = x.shape
    if index.size and (index.min() < 0 or index.max() >= N):
        raise IndexError(f"neighbour index out of range [0, {N})")
    flat_idx = _flat_index(index, N)
    src = x.data.reshape(B * N, C)
    out = src[flat_idx].reshape(*index.shape, C)

    def backward(g):
        scatter = sparse.csr_matrix(
            (np.ones(flat_idx.size, dtype=g.dtype), (flat_idx, np.arange(flat_idx.size))),
            shape=(B * N, flat_idx.size))
        return (np.asarray(scatter @ g.reshape(-1, C)).reshape(B, N, C),)

    return _make(out, (x,), backward)


def neighbor_mean(x: Tensor, index: np.ndarray) -> Tensor:
    """Mean of each row's neighbour features: (B, N, C) -> (B, N, C)."""
    _check_index(x, index)
    B, N, C = x.shape
    k = index.shape[-1]
    adj = _adjacency(_flat_index(index, N), B * N, k, x.dtype)
    out = np.asarray(adj @ x.data.reshape(B * N, C)) / x.dtype.type(k)

    def backward(g):
        return (np.asarray(adj.T @ g.reshape(B * N, C)).reshape(x.shape) / x.dtype.type(k),)

    return _make(out.reshape(x.shape).astype(x.dtype, copy=False), (x,), backward)


def neighbor_max_bn_leaky(proj: Tensor, index: np.ndarray, bias: Tensor, gamma: Tensor, beta: Tensor,
                          running_mean: np.ndarray, running_var: np.ndarray, training: bool,
                          centered: bool = True, slope: float = 0.2, momentum: float = 0.9,
                          eps: float = 1e-5) -> Tensor:
    """Fused edge map + batch norm + LeakyReLU + max over neighbours.

    Equivalent to building the edge tensor ``e[b,i,j] = proj[b, index[b,i,j]]
    - centre[b,i] + bias`` (centre = neighbourhood mean when ``centered``,
    else 0), batch-normalising it over all B*N*k edges, applying LeakyReLU
    and max-pooling over j. Batch norm is a per-channel affine map and
    LeakyReLU is increasing, so the max over j is attained at the largest
    edge (smallest when gamma < 0); only that edge per channel is pushed
    through the nonlinearity, and the edge statistics come from N-level sums.
    """
    _check_index(proj, index)
    B, N, C = proj.shape
    k = index.shape[-1]
    R = B * N
    M = R * k
    dtype = proj.dtype
    flat_idx = _flat_index(index, N)
    adj = _adjacency(flat_idx, R, k, dtype)
    p = proj.data.reshape(R, C)
    nb = flat_idx.reshape(R, k)
    # max edge where gamma >= 0, min edge elsewhere, with its source row
    sel, src_rows = kernels.neighbor_extrema(np.ascontiguousarray(p), nb, gamma.data >= 0)
    cnt = np.bincount(flat_idx, minlength=R).astype(dtype)[:, None]
    cp = cnt * p
    centre = np.asarray(adj @ p) / dtype.type(k) if centered else None

    if training:
        if M < 2:
            raise ValueError("batch too small: training-mode batch norm needs at least 2 samples per channel")
        sum_sq = (cp * p).sum(axis=0, dtype=np.float64)
        if centered:
            mu = np.zeros(C)
            var = (sum_sq - k * (centre * centre).sum(axis=0, dtype=np.float64)) / M
        else:
            mu = cp.sum(axis=0, dtype=np.float64) / M
            var = sum_sq / M - mu * mu
        var = np.maximum(var, 0.0)
        std = np.sqrt(var + eps)
        offset = mu
        running_mean *= momentum
        running_mean += (1.0 - momentum) * (mu + bias.data)
        running_var *= momentum
        running_var += (1.0 - momentum) * var
    else:
        std = np.sqrt(running_var.astype(np.float64) + eps)
        offset = running_mean.astype(np.float64) - bias.data
    std = std.astype(dtype)
    gam = gamma.data
    xhat = sel - offset.astype(dtype)
    if centered:
        xhat -= centre
    xhat /= std
    pre = xhat * gam + beta.data
    pos = pre > 0
    out = np.maximum(pre, slope * pre).reshape(B, N, C)

    def backward(gout):
        gout = gout.reshape(R, C)
        dpre = np.where(pos, gout, slope * gout)
        dgamma = (dpre * xhat).sum(axis=0)
        dbeta = dpre.sum(axis=0)
        s = gam / std
        d_sel = dpre * s
        dp = kernels.scatter_columns(src_rows, np.ascontiguousarray(d_sel, dtype=dtype), R)
        if centered:
            dp -= np.asarray(adj.T @ d_sel) / dtype.type(k)
        if training:
            a = -s * dbeta / M
            b = -s * dgamma / M
            if centered:
                dp += (cp - np.asarray(adj.T @ centre)) * (b / std)
            else:
                dp += cnt * a + cp * (b / std) - cnt * (b * mu.astype(dtype) / std)
            dbias = np.zeros(C, dtype=dtype)
        else:
            dbias = d_sel.sum(axis=0)
        return dp.reshape(B, N, C), dbias, dgamma, dbeta

    return _make(out, (proj, bias, gamma, beta), backward)


# normalisation and probability

def softmax(x: Tensor, axis: int = -1) -> Tensor:
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return _make(out, (x,), backward)


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    out = shifted - lse
    probs = np.exp(out)

    def backward(g):
        return (g - probs * g.sum(axis=axis, keepdims=True),)

    return _make(out, (x,), backward)


def cross_entropy(logits: Tensor, labels: np.ndarray) -> Tensor:
    """Mean softmax cross-entropy; ``logits`` is (..., K), ``labels`` integer (...)."""
    labels = np.asarray(labels)
    if logits.shape[:-1] != labels.shape:
        raise ShapeError(f"labels shape {labels.shape} does not match logits {logits.shape}")
    K = logits.shape[-1]
    z = logits.data.reshape(-1, K)
    y = labels.reshape(-1)
    if y.size and (y.min() < 0 or y.max() >= K):
        raise ValueError(f"labels must lie in [0, {K})")
    shifted = z - z.max(axis=1, keepdims=True)
    logp = shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    rows = np.arange(len(y))
    loss = -logp[rows, y].mean()

    def backward(g):
        d = np.exp(logp)
        d[rows, y] -= 1.0
        d *= g / len(y)
        return (d.reshape(logits.shape),)

    return _make(np.asarray(loss, dtype=logits.dtype), (logits,), backward)


def batch_norm(x: Tensor, gamma: Tensor, beta: Tensor, running_mean: np.ndarray,
               running_var: np.ndarray, training: bool, momentum: float = 0.9,
               eps: float = 1e-5) -> Tensor:
    """Batch normalisation over every axis except the last (channel) one.

    In training mode the running statistics are blended in place as
    ``running = momentum * running + (1 - momentum) * batch``.
    """
    C = x.shape[-1]
    if gamma.shape != (C,) or running_mean.shape != (C,):
        raise ShapeError(f"batch norm width {gamma.shape[0]} does not match input channels {C}")
    flat = x.data.reshape(-1, C)
    M = flat.shape[0]
    if training:
        if M < 2:
            raise ValueError("batch too small: training-mode batch norm needs at least 2 samples per channel")
        mu = flat.mean(axis=0)
        centred = flat - mu
        var = (centred * centred).mean(axis=0)
        inv_std = 1.0 / np.sqrt(var + eps)
        xhat = centred * inv_std
        running_mean *= momentum
        running_mean += (1.0 - momentum) * mu
        running_var *= momentum
        running_var += (1.0 - momentum) * var
    else:
        inv_std = 1.0 / np.sqrt(running_var + eps)
        xhat = (flat - running_mean) * inv_std
    inv_std = inv_std.astype(x.dtype, copy=False)
    xhat = xhat.astype(x.dtype, copy=False)
    out = (xhat * gamma.data + beta.data).reshape(x.shape)

    def backward(g):
        g2 = g.reshape(-1, C)
        dgamma = (g2 * xhat).sum(axis=0)
        dbeta = g2.sum(axis=0)
        dxhat = g2 * gamma.data
        if training:
            dx = inv_std / M * (M * dxhat - dxhat.sum(axis=0) - xhat * (dxhat * xhat).sum(axis=0))
        else:
            dx = dxhat * inv_std
        return dx.reshape(x.shape), dgamma, dbeta

    return _make(out, (x, gamma, beta), backward)


def batch_norm_leaky(x: Tensor, gamma: Tensor, beta: Tensor, running_mean: np.ndarray,
                     running_var: np.ndarray, training: bool, momentum: float = 0.9,
                     eps: float = 1e-5, slope: float = 0.2) -> Tensor:
    """``leaky_relu(batch_norm(x))`` in one op, with the same running-stat update."""
    C = x.shape[-1]
    if gamma.shape != (C,) or running_mean.shape != (C,):
        raise ShapeError(f"batch norm width {gamma.shape[0]} does not match input channels {C}")
    if not 0.0 < slope < 1.0:
        raise ValueError(f"leaky_relu slope must lie in (0, 1), got {slope}")
    flat = np.ascontiguousarray(x.data.reshape(-1, C))
    M = flat.shape[0]
    if training:
        if M < 2:
            raise ValueError("batch too small: training-mode batch norm needs at least 2 samples per channel")
        mu, var = kernels.channel_moments(flat)
        running_mean *= momentum
        running_mean += (1.0 - momentum) * mu
        running_var *= momentum
        running_var += (1.0 - momentum) * var
    else:
        mu, var = running_mean.astype(np.float64), running_var.astype(np.float64)
    inv_std = 1.0 / np.sqrt(var + eps)
    dt = x.dtype
    mu_d, inv_d = mu.astype(dt), inv_std.astype(dt)
    out = kernels.bn_leaky_forward(flat, mu_d, inv_d * gamma.data, beta.data, dt.type(slope))

    def backward(g):
        dx, dgamma, dbeta = kernels.bn_leaky_backward(
            np.ascontiguousarray(g.reshape(-1, C)), flat, mu_d, inv_d, gamma.data, beta.data,
            dt.type(slope), training)
        return dx.reshape(x.shape), dgamma.astype(dt), dbeta.astype(dt)

    return _make(out.reshape(x.shape), (x, gamma, beta), backward)


def dropout(x: Tensor, rate: float, rng: np.random.Generator) -> Tensor:
    """Inverted dropout: surviving entries are scaled by 1 / (1 - rate)."""
    if not 0.0 <= rate < 1.0:
        raise ValueError(f"dropout rate must lie in [0, 1), got {rate}")
    if rate == 0.0:
        return x
    mask = (rng.random(x.shape) >= rate).astype(x.dtype) / (1.0 - rate)
    return _make(x.data * mask, (x,), lambda g: (g * mask,))
