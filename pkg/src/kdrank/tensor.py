"""Dense float64 tensors with tape-based reverse-mode differentiation.

Every differentiable op that sees an input with ``requires_grad`` records a
node carrying a global sequence number.  ``backward`` collects the nodes
reachable from the loss and replays them in strictly decreasing sequence
order, i.e. the exact reverse of execution.  Leaf tensors accumulate into
``.grad`` across calls; intermediate gradients are overwritten per call.

Arrays are 1-D or 2-D in the public single-instance API; batched model code
additionally runs the same ops over a leading batch axis.
"""

from __future__ import annotations

import itertools
import threading
from contextlib import contextmanager
from typing import Callable, Sequence

import numpy as np

from ._kernels import KERNELS
from .errors import ContractError, DimensionError, EmptySequenceError

_seq = itertools.count()
_state = threading.local()


def is_grad_enabled() -> bool:
    return getattr(_state, "enabled", True)


@contextmanager
def no_grad():
    """Run the enclosed block without recording any operations."""
    prev = is_grad_enabled()
    _state.enabled = False
    try:
        yield
    finally:
        _state.enabled = prev


class _Node:
    __slots__ = ("seq", "parents", "backward", "op")

    def __init__(self, parents, backward, op):
        self.seq = next(_seq)
        self.parents = parents
        self.backward = backward
        self.op = op


class Tensor:
    __slots__ = ("data", "requires_grad", "_grad", "_node", "name", "__weakref__")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.array(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self._grad = np.zeros_like(self.data) if requires_grad else None
        self._node = None
        self.name = name

    @classmethod
    def _wrap(cls, data: np.ndarray, node: _Node | None) -> "Tensor":
        out = cls.__new__(cls)
        out.data = data
        out.requires_grad = node is not None
        out._grad = None
        out._node = node
        out.name = None
        return out

    # -- gradient buffer -----------------------------------------------------
    @property
    def grad(self):
        if self.requires_grad and self._grad is None:
            self._grad = np.zeros_like(self.data)
        return self._grad

    @grad.setter
    def grad(self, value):
        self._grad = value

    def zero_grad(self) -> None:
        if self.requires_grad:
            self._grad = np.zeros_like(self.data)

    # -- conveniences --------------------------------------------------------
    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def is_leaf(self) -> bool:
        return self._node is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else _raise_not_scalar(self)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    def __add__(self, other):
        return add(self, _as_tensor(other))

    def __sub__(self, other):
        return sub(self, _as_tensor(other))

    def __mul__(self, other):
        if np.isscalar(other):
            return scale(self, float(other))
        return hadamard(self, _as_tensor(other))

    __rmul__ = __mul__

    def __matmul__(self, other):
        return matmul(self, _as_tensor(other))

    def __neg__(self):
        return scale(self, -1.0)


def _raise_not_scalar(t):
    raise ContractError(f"item() needs a single-element tensor, got shape {t.shape}")


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def parameter(data, name: str | None = None) -> Tensor:
    return Tensor(data, requires_grad=True, name=name)


def _record(data: np.ndarray, parents: tuple, backward: Callable, op: str) -> Tensor:
    node = None
    if is_grad_enabled() and any(p.requires_grad for p in parents):
        node = _Node(parents, backward, op)
    return Tensor._wrap(data, node)


# ----------------------------------------------------------------------------
# backward
# ----------------------------------------------------------------------------


def backward(loss: Tensor) -> None:
    """Populate ``.grad`` of every tensor that ``loss`` depends on."""
    if loss.data.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return
    seed = np.ones_like(loss.data)
    if loss._node is None:
        loss.grad = loss.grad + seed
        return

    reached: list[Tensor] = []
    seen: set[int] = set()
    stack = [loss]
    while stack:
        t = stack.pop()
        if t._node is None or id(t) in seen:
            continue
        seen.add(id(t))
        reached.append(t)
        stack.extend(t._node.parents)
    reached.sort(key=lambda t: t._node.seq, reverse=True)

    pending: dict[int, np.ndarray] = {id(loss): seed}
    for t in reached:
        g = pending.pop(id(t), None)
        if g is None:
            continue
        t._grad = g
        node = t._node
        for p, pg in zip(node.parents, node.backward(g)):
            if pg is None or not p.requires_grad:
                continue
            if p._node is None:
                if p._grad is None:
                    p._grad = np.zeros_like(p.data)
                p._grad += pg
            else:
                k = id(p)
                pending[k] = pending[k] + pg if k in pending else pg


# ----------------------------------------------------------------------------
# linear algebra
# ----------------------------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product.

    Supported layouts: (m,k)@(k,n), (k,)@(k,n), (B,m,k)@(k,n) and
    (B,m,k)@(B,k,n).
    """
    A, Bm = a.data, b.data
    ok = (
        (A.ndim in (1, 2, 3) and Bm.ndim == 2 and A.shape[-1] == Bm.shape[0])
        or (A.ndim == 3 and Bm.ndim == 3 and A.shape[0] == Bm.shape[0] and A.shape[2] == Bm.shape[1])
    )
    if not ok:
        raise DimensionError(f"matmul: incompatible shapes {A.shape} and {Bm.shape}")
    out = A @ Bm

    def bw(g):
        ga = gb = None
        if Bm.ndim == 2:
            if a.requires_grad:
                ga = g @ Bm.T
            if b.requires_grad:
                k, n = Bm.shape
                gb = A.reshape(-1, k).T @ g.reshape(-1, n)
        else:
            if a.requires_grad:
                ga = g @ Bm.transpose(0, 2, 1)
            if b.requires_grad:
                gb = A.transpose(0, 2, 1) @ g
        return ga, gb

    return _record(out, (a, b), bw, "matmul")


def dot(a: Tensor, b: Tensor) -> Tensor:
    """Inner product of two equal-length vectors, returned as a 0-d tensor."""
    if a.ndim != 1 or a.shape != b.shape:
        raise DimensionError(f"dot: need equal-length vectors, got {a.shape} and {b.shape}")
    out = np.asarray(a.data @ b.data)
    return _record(out, (a, b), lambda g: (g * b.data, g * a.data), "dot")


def transpose(x: Tensor) -> Tensor:
    """Swap the last two axes."""
    out = np.swapaxes(x.data, -1, -2)
    return _record(out, (x,), lambda g: (np.swapaxes(g, -1, -2),), "transpose")


def reshape(x: Tensor, shape) -> Tensor:
    src = x.shape
    out = x.data.reshape(shape)
    return _record(out, (x,), lambda g: (g.reshape(src),), "reshape")


# ----------------------------------------------------------------------------
# pointwise
# ----------------------------------------------------------------------------


def _same_shape(op, a, b):
    if a.shape != b.shape:
        raise DimensionError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


def add(a: Tensor, b: Tensor) -> Tensor:
    _same_shape("add", a, b)
    return _record(a.data + b.data, (a, b), lambda g: (g, g), "add")


def sub(a: Tensor, b: Tensor) -> Tensor:
    _same_shape("sub", a, b)
    return _record(a.data - b.data, (a, b), lambda g: (g, -g), "sub")


def hadamard(a: Tensor, b: Tensor) -> Tensor:
    _same_shape("hadamard", a, b)
    A, B = a.data, b.data
    return _record(A * B, (a, b), lambda g: (g * B, g * A), "hadamard")


def relu(x: Tensor) -> Tensor:
    pos = x.data > 0.0
    return _record(np.where(pos, x.data, 0.0), (x,), lambda g: (np.where(pos, g, 0.0),), "relu")


def tanh(x: Tensor) -> Tensor:
    y = np.tanh(x.data)
    return _record(y, (x,), lambda g: (g * (1.0 - y * y),), "tanh")


def scale(x: Tensor, c: float) -> Tensor:
    return _record(x.data * c, (x,), lambda g: (g * c,), "scale")


def elementwise(op: str, a: Tensor, b: Tensor | None = None) -> Tensor:
    """Dispatch ``add``, ``sub``, ``hadamard`` or ``relu`` by name."""
    binary = {"add": add, "sub": sub, "hadamard": hadamard}
    if op in binary:
        if b is None:
            raise ContractError(f"elementwise {op} needs two operands")
        return binary[op](a, b)
    if op == "relu":
        return relu(a)
    raise ContractError(f"unknown elementwise op {op!r}")


def add_bias(x: Tensor, bias: Tensor) -> Tensor:
    """Add a vector along the last axis of ``x``."""
    if bias.ndim != 1 or bias.shape[0] != x.shape[-1]:
        raise DimensionError(f"add_bias: bias {bias.shape} does not fit {x.shape}")
    n = bias.shape[0]
    return _record(x.data + bias.data, (x, bias), lambda g: (g, g.reshape(-1, n).sum(axis=0)), "add_bias")


# ----------------------------------------------------------------------------
# reductions, shape plumbing
# ----------------------------------------------------------------------------


def sum_all(x: Tensor) -> Tensor:
    src = x.shape
    return _record(np.asarray(x.data.sum()), (x,), lambda g: (np.broadcast_to(g, src).copy(),), "sum")


def mean_all(x: Tensor) -> Tensor:
    n = x.data.size
    return scale(sum_all(x), 1.0 / n)


def concat(parts: Sequence[Tensor], axis: int = -1) -> Tensor:
    if not parts:
        raise ContractError("concat needs at least one part")
    nd = parts[0].ndim
    ax = axis % nd
    for p in parts[1:]:
        if p.ndim != nd or any(p.shape[i] != parts[0].shape[i] for i in range(nd) if i != ax):
            raise DimensionError(
                "concat: incompatible shapes " + ", ".join(str(q.shape) for q in parts) + f" on axis {axis}"
            )
    out = np.concatenate([p.data for p in parts], axis=ax)
    cuts = np.cumsum([p.shape[ax] for p in parts])[:-1]

    def bw(g):
        return tuple(np.split(g, cuts, axis=ax))

    return _record(out, tuple(parts), bw, "concat")


def select(x: Tensor, index: int, axis: int = 0) -> Tensor:
    """Take one slice along ``axis`` (the axis is dropped)."""
    src = x.shape
    ax = axis % x.ndim
    out = np.take(x.data, index, axis=ax)

    def bw(g):
        full = np.zeros(src)
        sl = [slice(None)] * len(src)
        sl[ax] = index
        full[tuple(sl)] = g
        return (full,)

    return _record(out, (x,), bw, "select")


def index_rows(x: Tensor, index) -> Tensor:
    """Gather ``x[index]`` along the first axis; repeated indices allowed."""
    idx = np.asarray(index, dtype=np.int64)
    n = x.shape[0]
    if idx.size and (idx.min() < 0 or idx.max() >= n):
        raise DimensionError(f"index_rows: index out of range for {n} rows")
    out = x.data[idx]

    def bw(g):
        flat = g.reshape((idx.size,) + x.shape[1:])
        return (KERNELS.scatter_add_rows(flat, idx.reshape(-1), n),)

    return _record(out, (x,), bw, "index_rows")


def embedding(table: Tensor, ids) -> Tensor:
    """Row lookup ``table[ids]`` for an integer array of any shape."""
    ids = np.asarray(ids, dtype=np.int64)
    return index_rows(table, ids)


def reverse_valid(x: Tensor, lengths) -> Tensor:
    """Reverse the first ``lengths[b]`` steps of each (B, L, d) sequence.

    Padding stays in place.  The map is an involution, so the backward pass
    applies the same permutation to the incoming gradient.
    """
    lengths = np.asarray(lengths, dtype=np.int64)
    B, L = x.shape[:2]
    t = np.arange(L)[None, :]
    perm = np.where(t < lengths[:, None], lengths[:, None] - 1 - t, t)
    rows = np.arange(B)[:, None]
    out = x.data[rows, perm]
    return _record(out, (x,), lambda g: (g[rows, perm],), "reverse_valid")


# ----------------------------------------------------------------------------
# softmax, normalization, pooling
# ----------------------------------------------------------------------------


def softmax_rows(x: Tensor, mask=None) -> Tensor:
    """Softmax over the last axis with per-row max subtraction.

    ``mask`` (broadcastable boolean, True = keep) sends excluded positions to
    exactly zero weight.
    """
    z = x.data
    if mask is not None:
        z = np.where(mask, z, -np.inf)
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=-1, keepdims=True)

    def bw(g):
        return (y * (g - (g * y).sum(axis=-1, keepdims=True)),)

    return _record(y, (x,), bw, "softmax")


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    X = x.data
    d = X.shape[-1]
    mu = X.mean(axis=-1, keepdims=True)
    xc = X - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + eps)
    xhat = xc * inv
    out = xhat * gamma.data + beta.data

    def bw(g):
        gx = gg = gb = None
        if gamma.requires_grad:
            gg = (g * xhat).reshape(-1, d).sum(axis=0)
        if beta.requires_grad:
            gb = g.reshape(-1, d).sum(axis=0)
        if x.requires_grad:
            gh = g * gamma.data
            gx = inv * (gh - gh.mean(axis=-1, keepdims=True) - xhat * (gh * xhat).mean(axis=-1, keepdims=True))
        return gx, gg, gb

    return _record(out, (x, gamma, beta), bw, "layer_norm")


def masked_pool(x: Tensor, lengths, kind: str) -> Tensor:
    """Column-wise max or mean over the first ``lengths[b]`` rows of (B, L, d).

    Padded rows are never read.  Max ties resolve to the lowest row, which is
    also where the gradient goes.
    """
    lengths = np.asarray(lengths, dtype=np.int64)
    B, L, d = x.shape
    if lengths.shape != (B,):
        raise DimensionError(f"masked_pool: {lengths.shape[0] if lengths.ndim else 0} lengths for batch {B}")
    if (lengths < 1).any():
        raise EmptySequenceError("pool over an empty sequence (valid_len = 0)")
    if (lengths > L).any():
        raise ContractError(f"pool: valid_len exceeds padded length {L}")
    if kind == "max":
        out, arg = KERNELS.max_pool(x.data, lengths)

        def bw(g):
            full = np.zeros((B, L, d))
            np.put_along_axis(full, arg[:, None, :], g[:, None, :], axis=1)
            return (full,)

    elif kind == "mean":
        valid = (np.arange(L)[None, :] < lengths[:, None])[:, :, None]
        denom = lengths[:, None].astype(np.float64)
        out = np.where(valid, x.data, 0.0).sum(axis=1) / denom

        def bw(g):
            return (np.where(valid, (g / denom)[:, None, :], 0.0),)

    else:
        raise ContractError(f"unknown pool kind {kind!r}")
    return _record(out, (x,), bw, f"{kind}_pool")


def pool(x: Tensor, kind: str, valid_len: int) -> Tensor:
    """Single-sequence pooling of an (m, d) matrix to a d-vector."""
    if x.ndim != 2:
        raise DimensionError(f"pool expects an (m, d) matrix, got {x.shape}")
    m, d = x.shape
    if valid_len < 1:
        raise EmptySequenceError("pool over an empty sequence (valid_len = 0)")
    if valid_len > m:
        raise ContractError(f"pool: valid_len {valid_len} exceeds {m} rows")
    return reshape(masked_pool(reshape(x, (1, m, d)), [valid_len], kind), (d,))


# ----------------------------------------------------------------------------
# recurrent kernel
# ----------------------------------------------------------------------------


def lstm(gx: Tensor, u: Tensor, lengths) -> Tensor:
    """Run one LSTM direction over pre-projected inputs (B, L, 4h).

    Outputs (B, L, h); steps past a sequence's length are zero and carry no
    gradient.
    """
    lengths = np.asarray(lengths, dtype=np.int64)
    if gx.ndim != 3 or u.ndim != 2 or gx.shape[2] != u.shape[1] or u.shape[1] != 4 * u.shape[0]:
        raise DimensionError(f"lstm: gates {gx.shape} incompatible with recurrent weights {u.shape}")
    h_all, c_all, gates = KERNELS.lstm_forward(gx.data, u.data, lengths)

    def bw(g):
        dgx, du = KERNELS.lstm_backward(g, u.data, c_all, gates, lengths)
        return dgx, du

    return _record(h_all, (gx, u), bw, "lstm")


# ----------------------------------------------------------------------------
# losses
# ----------------------------------------------------------------------------


def cross_entropy(scores: Tensor, targets) -> Tensor:
    """Mean over rows of ``-log softmax(scores[b])[targets[b]]``."""
    S = scores.data
    if S.ndim != 2:
        raise DimensionError(f"cross_entropy expects (B, K) scores, got {S.shape}")
    targets = np.asarray(targets, dtype=np.int64)
    B, K = S.shape
    if targets.shape != (B,):
        raise DimensionError(f"cross_entropy: {targets.shape} targets for {B} rows")
    if (targets < 0).any() or (targets >= K).any():
        raise ContractError(f"cross_entropy: target outside [0, {K})")
    z = S - S.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1))
    rows = np.arange(B)
    losses = lse - z[rows, targets]
    out = np.asarray(losses.mean())

    def bw(g):
        p = np.exp(z - lse[:, None])
        p[rows, targets] -= 1.0
        return (p * (g / B),)

    return _record(out, (scores,), bw, "cross_entropy")
