"""Dense float64 tensors with tape-based reverse-mode differentiation.

Every op that touches a tensor with ``requires_grad`` appends a record to the
active :class:`Tape`. :func:`backward` replays the tape in reverse execution
order, fills ``grad`` on the leaves and clears the tape.
"""

from __future__ import annotations

import threading
from contextlib import contextmanager
from typing import Callable, Iterator, Optional, Sequence

import numpy as np

DTYPE = np.float64


class DimensionError(ValueError):
    """Operand shapes are incompatible."""


class NumericalError(ArithmeticError):
    """An op produced NaN or Inf from finite inputs."""


class TapeError(RuntimeError):
    """Misuse of the gradient tape (non-scalar loss, stale tape, ...)."""


class Tensor:
    """Contiguous row-major float64 array that may participate in a tape."""

    __slots__ = ("data", "requires_grad", "grad", "name", "_tape", "_generation")

    def __init__(self, data, requires_grad: bool = False, name: Optional[str] = None):
        arr = np.array(data, dtype=DTYPE, copy=True, order="C")
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None
        self.name = name
        self._tape: Optional[Tape] = None
        self._generation = -1

    @classmethod
    def _wrap(cls, arr: np.ndarray, requires_grad: bool) -> "Tensor":
        t = cls.__new__(cls)
        arr = np.asarray(arr, dtype=DTYPE)
        t.data = arr if arr.flags.c_contiguous else arr.copy(order="C")
        t.requires_grad = requires_grad
        t.grad = None
        t.name = None
        t._tape = None
        t._generation = -1
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
        return self.data.copy()

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.size == 1 else float(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor._wrap(self.data.copy(), False)

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad}{tag})"

    # operator sugar
    def __add__(self, other):
        return add(self, _as_tensor(other))

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, _as_tensor(other))

    def __rsub__(self, other):
        return sub(_as_tensor(other), self)

    def __mul__(self, other):
        if isinstance(other, Tensor):
            return hadamard(self, other)
        return scale(self, float(other))

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


# ---------------------------------------------------------------------------
# tape

class _Record:
    __slots__ = ("op", "out", "inputs", "backward")

    def __init__(self, op, out, inputs, backward):
        self.op = op
        self.out = out
        self.inputs = inputs
        self.backward = backward


class Tape:
    """Ordered log of executed ops. Use as a context manager to make it active."""

    def __init__(self):
        self.records: list[_Record] = []
        self.generation = 0

    def __len__(self) -> int:
        return len(self.records)

    def record(self, op: str, out: Tensor, inputs: Sequence[Tensor], backward: Callable) -> None:
        out._tape = self
        out._generation = self.generation
        self.records.append(_Record(op, out, tuple(inputs), backward))

    def clear(self) -> None:
        self.records.clear()
        self.generation += 1

    def __enter__(self) -> "Tape":
        _state.stack.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _state.stack.pop()


class _State(threading.local):
    def __init__(self):
        self.stack: list[Tape] = [Tape()]
        self.enabled = True


_state = _State()


def current_tape() -> Tape:
    return _state.stack[-1]


@contextmanager
def no_grad() -> Iterator[None]:
    """Disable recording on this thread."""
    prev = _state.enabled
    _state.enabled = False
    try:
        yield
    finally:
        _state.enabled = prev


def _finish(op: str, arr: np.ndarray, inputs: Sequence[Tensor], backward: Callable) -> Tensor:
    if not np.all(np.isfinite(arr)):
        named = [t.name for t in inputs if t.name]
        where = f" (operands: {', '.join(named)})" if named else ""
        if all(np.all(np.isfinite(t.data)) for t in inputs):
            raise NumericalError(f"{op} produced non-finite values from finite inputs{where}")
        raise NumericalError(f"{op} received non-finite input{where}")
    needs = _state.enabled and any(t.requires_grad for t in inputs)
    out = Tensor._wrap(arr, needs)
    if needs:
        current_tape().record(op, out, inputs, backward)
    return out


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into ``grad`` of every reachable leaf, then clear the tape."""
    if loss.shape != ():
        raise TapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    tape = loss._tape
    if tape is None or loss._generation != tape.generation:
        raise TapeError("loss is not on a live tape; run the forward pass again before backward")

    grads: dict[int, np.ndarray] = {id(loss): np.ones((), dtype=DTYPE)}
    produced = {id(r.out) for r in tape.records}
    try:
        for rec in reversed(tape.records):
            g = grads.pop(id(rec.out), None)
            if g is None:
                continue
            in_grads = rec.backward(g)
            for t, gi in zip(rec.inputs, in_grads):
                if gi is None or not t.requires_grad:
                    continue
                if id(t) in produced:
                    prev = grads.get(id(t))
                    grads[id(t)] = gi if prev is None else prev + gi
                else:
                    t.grad = np.array(gi, dtype=DTYPE) if t.grad is None else t.grad + gi
    finally:
        tape.clear()


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


# ---------------------------------------------------------------------------
# elementwise

def add(x: Tensor, y: Tensor) -> Tensor:
    try:
        out = x.data + y.data
    except ValueError:
        raise DimensionError(f"add: cannot broadcast {x.shape} with {y.shape}") from None
    return _finish("add", out, (x, y),
                   lambda g: (_unbroadcast(g, x.shape), _unbroadcast(g, y.shape)))


def sub(x: Tensor, y: Tensor) -> Tensor:
    try:
        out = x.data - y.data
    except ValueError:
        raise DimensionError(f"sub: cannot broadcast {x.shape} with {y.shape}") from None
    return _finish("sub", out, (x, y),
                   lambda g: (_unbroadcast(g, x.shape), _unbroadcast(-g, y.shape)))


def hadamard(x: Tensor, y: Tensor) -> Tensor:
    try:
        out = x.data * y.data
    except ValueError:
        raise DimensionError(f"hadamard: cannot broadcast {x.shape} with {y.shape}") from None
    return _finish("hadamard", out, (x, y),
                   lambda g: (_unbroadcast(g * y.data, x.shape), _unbroadcast(g * x.data, y.shape)))


def scale(x: Tensor, c: float) -> Tensor:
    return _finish("scale", x.data * c, (x,), lambda g: (g * c,))


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return _finish("relu", np.where(mask, x.data, 0.0), (x,), lambda g: (g * mask,))


def abs_(x: Tensor) -> Tensor:
    sign = np.sign(x.data)
    return _finish("abs", np.abs(x.data), (x,), lambda g: (g * sign,))


def sum_all(x: Tensor) -> Tensor:
    return _finish("sum", np.asarray(x.data.sum()), (x,),
                   lambda g: (np.broadcast_to(g, x.shape).copy(),))


def mean_all(x: Tensor) -> Tensor:
    n = x.size
    return _finish("mean", np.asarray(x.data.mean()), (x,),
                   lambda g: (np.full(x.shape, g / n),))


# ---------------------------------------------------------------------------
# layout

def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    shape = tuple(int(s) for s in shape)
    try:
        out = x.data.reshape(shape)
    except ValueError:
        raise DimensionError(f"reshape: cannot view {x.shape} as {shape}") from None
    return _finish("reshape", out, (x,), lambda g: (g.reshape(x.shape),))


def transpose_axes(x: Tensor, perm: Sequence[int]) -> Tensor:
    perm = tuple(perm)
    if sorted(perm) != list(range(x.ndim)):
        raise DimensionError(f"transpose_axes: {perm} is not a permutation of {x.ndim} axes")
    inv = tuple(np.argsort(perm))
    return _finish("transpose", np.transpose(x.data, perm), (x,),
                   lambda g: (np.transpose(g, inv),))


def embedding_lookup(table: Tensor, idx) -> Tensor:
    idx = np.asarray(idx)
    if not np.issubdtype(idx.dtype, np.integer):
        raise TypeError("embedding_lookup: indices must be integers")
    V = table.shape[0]
    if idx.size and (idx.min() < 0 or idx.max() >= V):
        raise IndexError(f"embedding_lookup: index out of range [0, {V})")

    def bw(g):
        gt = np.zeros(table.shape, dtype=DTYPE)
        np.add.at(gt, idx.reshape(-1), g.reshape(-1, *table.shape[1:]))
        return (gt,)

    return _finish("embedding_lookup", table.data[idx], (table,), bw)


# ---------------------------------------------------------------------------
# contractions

def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Batched matrix product with broadcasting over leading axes."""
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul: shapes {a.shape} and {b.shape} are not aligned")
    try:
        out = np.matmul(a.data, b.data)
    except ValueError:
        raise DimensionError(f"matmul: batch axes of {a.shape} and {b.shape} do not broadcast") from None

    def bw(g):
        ga = _unbroadcast(np.matmul(g, np.swapaxes(b.data, -1, -2)), a.shape) if a.requires_grad else None
        if not b.requires_grad:
            gb = None
        elif b.ndim == 2:
            # shared right operand: fold every batch axis into the row axis
            K, P = b.shape
            gb = a.data.reshape(-1, K).T @ g.reshape(-1, P)
        else:
            gb = _unbroadcast(np.matmul(np.swapaxes(a.data, -1, -2), g), b.shape)
        return ga, gb

    return _finish("matmul", out, (a, b), bw)


NODE_BLOCK = 128


def contract_nodes_np(graph: np.ndarray, x: np.ndarray) -> np.ndarray:
    """out[b,k,t,c] = sum_i graph[(c),i,k] * x[b,i,t,c] on raw arrays."""
    B, N, T, C = x.shape
    n = graph.shape[-1]
    if graph.ndim == 2:
        return np.matmul(graph.T, x.reshape(B, N, T * C)).reshape(B, n, T, C)
    # per-channel graphs: channel-major node blocks small enough to stay in L2
    acc = np.zeros((C, n, B * T))
    for i0 in range(0, N, NODE_BLOCK):
        xb = np.ascontiguousarray(x[:, i0:i0 + NODE_BLOCK].transpose(3, 1, 0, 2)).reshape(C, -1, B * T)
        acc += np.matmul(np.swapaxes(graph[:, i0:i0 + NODE_BLOCK], 1, 2), xb)
    return np.ascontiguousarray(acc.reshape(C, n, B, T).transpose(2, 1, 3, 0))


def contract_nodes(graph: Tensor, x: Tensor) -> Tensor:
    """Collapse the node axis of ``x`` [B,N,T,C] onto the columns of ``graph``.

    ``graph`` is [N,n] (shared) or [C,N,n] (one graph per channel).
    """
    if x.ndim != 4:
        raise DimensionError(f"contract_nodes: x must be [B,N,T,C], got {x.shape}")
    if graph.ndim not in (2, 3):
        raise DimensionError(f"contract_nodes: graph must be [N,n] or [C,N,n], got {graph.shape}")
    if graph.shape[-2] != x.shape[1]:
        raise DimensionError(f"contract_nodes: node axis of graph {graph.shape} != x {x.shape}")
    if graph.ndim == 3 and graph.shape[0] != x.shape[3]:
        raise DimensionError(f"contract_nodes: channel axis of graph {graph.shape} != x {x.shape}")
    out = contract_nodes_np(graph.data, x.data)

    def bw(g):
        if graph.ndim == 2:
            gx = np.einsum("ik,bktc->bitc", graph.data, g)
            gg = np.einsum("bitc,bktc->ik", x.data, g)
        else:
            gx = np.einsum("cik,bktc->bitc", graph.data, g)
            gg = np.einsum("bitc,bktc->cik", x.data, g)
        return gg, gx

    return _finish("contract_nodes", out, (graph, x), bw)


# ---------------------------------------------------------------------------
# normalisation

def softmax_columns_np(z: np.ndarray) -> np.ndarray:
    e = np.exp(z - z.max(axis=-2, keepdims=True))
    return e / e.sum(axis=-2, keepdims=True)


def softmax_columns(z: Tensor) -> Tensor:
    """Softmax along axis -2, so every column of the trailing matrix sums to 1."""
    if z.ndim < 2:
        raise DimensionError(f"softmax_columns: need at least 2 axes, got {z.shape}")
    s = softmax_columns_np(z.data)

    def bw(g):
        return (s * (g - (g * s).sum(axis=-2, keepdims=True)),)

    return _finish("softmax_columns", s, (z,), bw)


LN_EPS = 1e-5


def layernorm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = LN_EPS) -> Tensor:
    C = x.shape[-1]
    if gain.shape != (C,) or bias.shape != (C,):
        raise DimensionError(f"layernorm: gain/bias must be ({C},), got {gain.shape}/{bias.shape}")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + eps)
    xhat = xc * inv
    out = xhat * gain.data + bias.data

    def bw(g):
        lead = tuple(range(g.ndim - 1))
        dxhat = g * gain.data
        dx = inv * (dxhat - dxhat.mean(axis=-1, keepdims=True)
                    - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True))
        return dx, (g * xhat).sum(axis=lead), g.sum(axis=lead)

    return _finish("layernorm", out, (x, gain, bias), bw)
