"""Dense float64 tensors with define-by-run reverse-mode differentiation.

Only the handful of operations needed by the GraphSAGE forecaster and the
edge-mask explainer are provided. A :class:`Tape` records every operation
whose inputs require gradients; :meth:`Tape.backward` walks the record in
reverse and returns a gradient for each grad-enabled leaf.

    >>> w = Tensor([[2.0]], requires_grad=True)
    >>> with Tape() as tape:
    ...     loss = tensor_sum(matmul(w, Tensor([[3.0]])))
    >>> float(tape.backward(loss)[w][0, 0])
    3.0
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np
import scipy.sparse as sp

__all__ = [
    "Tensor",
    "Tape",
    "Adam",
    "DimensionError",
    "matmul",
    "add",
    "sub",
    "mul",
    "elementwise",
    "relu",
    "sigmoid",
    "concat_cols",
    "scale",
    "shift",
    "add_row",
    "embed",
    "tensor_sum",
    "neighbor_mean",
    "mae_loss",
    "mse_loss",
    "set_debug",
]

_DEBUG = os.environ.get("PANELGRAPH_DEBUG", "") not in ("", "0")
_ACTIVE: list["Tape"] = []


def set_debug(flag: bool) -> None:
    """Toggle the post-op finiteness check."""
    global _DEBUG
    _DEBUG = bool(flag)


class DimensionError(ValueError):
    pass


class Tensor:
    """A float64 array, optionally tracked for gradients."""

    __slots__ = ("data", "requires_grad", "grad", "_is_leaf", "__weakref__")

    def __init__(self, data, requires_grad: bool = False, *, _leaf: bool = True):
        arr = np.array(data, dtype=np.float64)
        if not np.all(np.isfinite(arr)):
            raise ValueError("tensor data must be finite")
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._is_leaf = _leaf

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def is_leaf(self) -> bool:
        return self._is_leaf

    def numpy(self) -> np.ndarray:
        return self.data.copy()

    def item(self) -> float:
        if self.data.size != 1:
            raise DimensionError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy())

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


@dataclass
class _Node:
    out: Tensor
    inputs: tuple[Tensor, ...]
    vjp: Callable[[np.ndarray], Sequence[np.ndarray | None]]


@dataclass
class Tape:
    """Ordered record of differentiable operations.

    Use as a context manager; operations executed inside the ``with`` block
    whose inputs require gradients are appended in execution order, which is
    automatically a topological order.
    """

    nodes: list[_Node] = field(default_factory=list)
    leaves: dict[int, Tensor] = field(default_factory=dict)
    _consumed: bool = False

    def __enter__(self) -> "Tape":
        _ACTIVE.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _ACTIVE.remove(self)

    def watch(self, *tensors: Tensor) -> None:
        for t in tensors:
            if not t.requires_grad:
                raise ValueError("watch() requires grad-enabled tensors")
            if t.is_leaf:
                self.leaves.setdefault(id(t), t)

    def reset(self) -> None:
        self.nodes.clear()
        self.leaves.clear()
        self._consumed = False

    def _record(self, out: Tensor, inputs: tuple[Tensor, ...], vjp) -> None:
        for t in inputs:
            if t.requires_grad and t.is_leaf:
                self.leaves.setdefault(id(t), t)
        self.nodes.append(_Node(out, inputs, vjp))

    def backward(self, loss: Tensor, params: Iterable[Tensor] = ()) -> dict[Tensor, np.ndarray]:
        """Return ``{leaf: d loss / d leaf}`` for every grad-enabled leaf.

        Leaves that never influenced ``loss`` get zero gradients. The tape
        can be consumed once; call :meth:`reset` before reuse.
        """
        if self._consumed:
            raise RuntimeError("tape already consumed; call reset() first")
        if loss.data.size != 1:
            raise DimensionError(f"loss must be scalar, got shape {loss.shape}")
        for p in params:
            self.watch(p)
        on_tape = any(n.out is loss for n in self.nodes)
        if not on_tape and id(loss) not in self.leaves:
            raise RuntimeError("loss is not recorded on this tape")
        self._consumed = True

        adj: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
        for node in reversed(self.nodes):
            g = adj.pop(id(node.out), None)
            if g is None:
                continue
            for inp, gi in zip(node.inputs, node.vjp(g)):
                if gi is None or not inp.requires_grad:
                    continue
                key = id(inp)
                if key in adj:
                    adj[key] = adj[key] + gi
                else:
                    adj[key] = gi
        grads: dict[Tensor, np.ndarray] = {}
        for key, leaf in self.leaves.items():
            g = adj.get(key)
            g = np.zeros_like(leaf.data) if g is None else np.asarray(g, dtype=np.float64).reshape(leaf.shape)
            leaf.grad = g
            grads[leaf] = g
        return grads


def _make(data: np.ndarray, inputs: tuple[Tensor, ...], vjp) -> Tensor:
    if _DEBUG and not np.all(np.isfinite(data)):
        raise FloatingPointError("non-finite values produced by tensor op")
    track = any(t.requires_grad for t in inputs) and bool(_ACTIVE)
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.requires_grad = track
    out._is_leaf = not track
    if track:
        _ACTIVE[-1]._record(out, inputs, vjp)
    return out


def _same_shape(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape != b.shape:
        raise DimensionError(f"{op}: shapes {a.shape} and {b.shape} differ")


def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul: cannot multiply {a.shape} by {b.shape}")
    A, B = a.data, b.data
    need_a, need_b = a.requires_grad, b.requires_grad
    return _make(A @ B, (a, b), lambda g: (g @ B.T if need_a else None, A.T @ g if need_b else None))


def add(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _same_shape(a, b, "add")
    return _make(a.data + b.data, (a, b), lambda g: (g, g))


def sub(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _same_shape(a, b, "sub")
    return _make(a.data - b.data, (a, b), lambda g: (g, -g))


def mul(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _same_shape(a, b, "mul")
    A, B = a.data, b.data
    return _make(A * B, (a, b), lambda g: (g * B, g * A))


def elementwise(a: Tensor, b: Tensor, kind: str) -> Tensor:
    ops = {"add": add, "sub": sub, "mul": mul}
    if kind not in ops:
        raise ValueError(f"unknown elementwise kind {kind!r}")
    return ops[kind](a, b)


def relu(a: Tensor) -> Tensor:
    a = _as_tensor(a)
    on = a.data > 0
    return _make(np.where(on, a.data, 0.0), (a,), lambda g: (g * on,))


def sigmoid(a: Tensor) -> Tensor:
    a = _as_tensor(a)
    x = a.data
    # split by sign to avoid exp overflow
    s = np.empty_like(x)
    pos = x >= 0
    s[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    s[~pos] = ex / (1.0 + ex)
    return _make(s, (a,), lambda g: (g * s * (1.0 - s),))


def straight_through(a: Tensor, threshold=0.5) -> Tensor:
    """Forward: ``1`` where ``a >= threshold`` else ``0``. Backward: identity.

    ``threshold`` may be an array broadcastable to ``a``; uniform draws give
    a Bernoulli sample with a pass-through gradient.
    """
    a = _as_tensor(a)
    return _make((a.data >= threshold).astype(np.float64), (a,), lambda g: (g,))


def concat_cols(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[0] != b.shape[0]:
        raise DimensionError(f"concat_cols: row counts differ for {a.shape} and {b.shape}")
    k = a.shape[1]
    return _make(np.hstack([a.data, b.data]), (a, b), lambda g: (g[:, :k], g[:, k:]))


def scale(a: Tensor, c: float) -> Tensor:
    a = _as_tensor(a)
    c = float(c)
    return _make(a.data * c, (a,), lambda g: (g * c,))


def shift(a: Tensor, c: float) -> Tensor:
    """``a + c`` for a plain scalar ``c``."""
    a = _as_tensor(a)
    return _make(a.data + float(c), (a,), lambda g: (g,))


def add_row(a: Tensor, row: Tensor) -> Tensor:
    """Add a length-n vector to every row of an m x n matrix (bias term)."""
    a, row = _as_tensor(a), _as_tensor(row)
    if a.data.ndim != 2 or row.data.reshape(-1).shape[0] != a.shape[1]:
        raise DimensionError(f"add_row: cannot add {row.shape} to rows of {a.shape}")
    shape = row.shape
    return _make(a.data + row.data.reshape(1, -1), (a, row), lambda g: (g, g.sum(axis=0).reshape(shape)))


def embed(values: Tensor, index: Sequence[int], size: int, fill: float = 0.0) -> Tensor:
    """Place ``values`` at positions ``index`` of a length-``size`` vector filled with ``fill``."""
    values = _as_tensor(values)
    idx = np.asarray(index, dtype=np.int64)
    if values.data.reshape(-1).shape[0] != idx.shape[0]:
        raise DimensionError(f"embed: {values.shape} values for {idx.shape[0]} positions")
    if idx.size and (idx.min() < 0 or idx.max() >= size or np.unique(idx).size != idx.size):
        raise IndexError("embed: positions must be distinct and inside the output")
    out = np.full(size, float(fill))
    out[idx] = values.data.reshape(-1)
    shape = values.shape
    return _make(out, (values,), lambda g: (g[idx].reshape(shape),))


def tensor_sum(a: Tensor) -> Tensor:
    a = _as_tensor(a)
    shape = a.shape
    return _make(np.array(a.data.sum()), (a,), lambda g: (np.full(shape, float(g)),))


def _edges_of(adj) -> tuple[np.ndarray, np.ndarray, int]:
    return np.asarray(adj.src, dtype=np.int64), np.asarray(adj.dst, dtype=np.int64), int(adj.n_nodes)


def _batched(h: np.ndarray, n: int) -> tuple[np.ndarray, int]:
    rows, d = h.shape
    if rows % n:
        raise DimensionError(f"neighbor_mean: {rows} feature rows do not tile {n} graph nodes")
    b = rows // n
    # (b*n, d) -> (n, b*d) so one sparse product handles every stacked graph copy
    return h.reshape(b, n, d).transpose(1, 0, 2).reshape(n, b * d), b


def _unbatched(x: np.ndarray, n: int, b: int, d: int) -> np.ndarray:
    return x.reshape(n, b, d).transpose(1, 0, 2).reshape(b * n, d)


def neighbor_mean(h: Tensor, adj, edge_weight: Tensor | np.ndarray | None = None,
                  normalize: str = "weights") -> Tensor:
    """Mean of in-neighbour rows for every destination node.

    ``adj`` is any object exposing ``src``, ``dst`` and ``n_nodes`` (see
    :class:`panelgraph.graphbuild.BlockAdjacency`). ``h`` may stack several
    copies of the node set vertically (``B * n_nodes`` rows); each copy is
    aggregated over the same graph. Nodes without in-edges get a zero row.

    With ``edge_weight`` the aggregate is differentiable in the weights.
    ``normalize="weights"`` divides by the weight sum (weighted mean, zero
    when the weights sum to zero); ``normalize="degree"`` divides by the
    unweighted in-degree, so a weight scales its edge's share directly.
    """
    h = _as_tensor(h)
    src, dst, n = _edges_of(adj)
    if h.data.ndim != 2:
        raise DimensionError(f"neighbor_mean expects a matrix, got shape {h.shape}")
    if normalize not in ("weights", "degree"):
        raise ValueError(f"unknown normalization {normalize!r}")
    d = h.shape[1]
    H, b = _batched(h.data, n)

    if edge_weight is None:
        w = np.ones(src.shape[0])
        wt = None
    else:
        wt = edge_weight if isinstance(edge_weight, Tensor) else Tensor(edge_weight)
        w = wt.data.reshape(-1)
        if w.shape[0] != src.shape[0]:
            raise DimensionError(f"neighbor_mean: {w.shape[0]} edge weights for {src.shape[0]} edges")
    if normalize == "degree":
        S = np.bincount(dst, minlength=n).astype(np.float64)
    else:
        S = np.bincount(dst, weights=w, minlength=n)
    safe = np.where(S > 0, S, 1.0)
    coef = np.where(S[dst] > 0, w / safe[dst], 0.0)
    A = sp.csr_matrix((coef, (dst, src)), shape=(n, n))
    out_nb = A @ H
    out = _unbatched(out_nb, n, b, d)

    def vjp(g):
        G, _ = _batched(g, n)
        gh = _unbatched(A.T @ G, n, b, d) if h.requires_grad else None
        if wt is None:
            return (gh,)
        if normalize == "degree":
            diff = H[src]
        else:
            # d out[v] / d w_e = (h[src_e] - out[v]) / S_v for edges into v
            diff = H[src] - out_nb[dst]
        gw = np.where(S[dst] > 0, np.einsum("ij,ij->i", G[dst], diff) / safe[dst], 0.0)
        return gh, gw.reshape(wt.shape)

    inputs = (h,) if wt is None else (h, wt)
    return _make(out, inputs, vjp)


def _selection(pred: Tensor, target, rows) -> tuple[np.ndarray, np.ndarray, int]:
    tgt = target.data if isinstance(target, Tensor) else np.asarray(target, dtype=np.float64)
    if pred.shape != tgt.shape:
        raise DimensionError(f"loss: prediction {pred.shape} vs target {tgt.shape}")
    sel = np.ones(pred.shape, dtype=bool)
    if rows is not None:
        sel = np.zeros(pred.shape, dtype=bool)
        sel[np.asarray(rows, dtype=np.int64)] = True
    count = int(sel.sum())
    if count == 0:
        raise ValueError("loss over an empty selection")
    return tgt, sel, count


def mae_loss(pred: Tensor, target, rows: Sequence[int] | None = None) -> Tensor:
    """Mean absolute error, optionally restricted to a subset of rows."""
    pred = _as_tensor(pred)
    tgt, sel, count = _selection(pred, target, rows)
    diff = pred.data - tgt
    value = np.abs(diff[sel]).sum() / count
    return _make(np.array(value), (pred,), lambda g: (float(g) * np.sign(diff) * sel / count,))


def mse_loss(pred: Tensor, target, rows: Sequence[int] | None = None) -> Tensor:
    pred = _as_tensor(pred)
    tgt, sel, count = _selection(pred, target, rows)
    diff = pred.data - tgt
    value = (diff[sel] ** 2).sum() / count
    return _make(np.array(value), (pred,), lambda g: (float(g) * 2.0 * diff * sel / count,))


class Adam:
    """Adaptive-moment optimizer with bias correction.

    Moment buffers are keyed by parameter position, so the parameter list
    passed to the constructor must stay in a fixed order.
    """

    def __init__(self, params: Sequence[Tensor], lr: float = 1e-3, betas=(0.9, 0.999), eps: float = 1e-8):
        self.params = list(params)
        self.lr = float(lr)
        self.beta1, self.beta2 = map(float, betas)
        self.eps = float(eps)
        self.t = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    def step(self, grads: dict[Tensor, np.ndarray] | Sequence[np.ndarray]) -> None:
        if isinstance(grads, dict):
            glist = [grads.get(p, np.zeros_like(p.data)) for p in self.params]
        else:
            glist = list(grads)
        if len(glist) != len(self.params):
            raise DimensionError(f"{len(glist)} gradients for {len(self.params)} parameters")
        self.t += 1
        b1t = 1.0 - self.beta1**self.t
        b2t = 1.0 - self.beta2**self.t
        for i, (p, g) in enumerate(zip(self.params, glist)):
            g = np.asarray(g, dtype=np.float64)
            if g.shape != p.shape:
                raise DimensionError(f"gradient {g.shape} does not match parameter {p.shape}")
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * g * g
            p.data = p.data - self.lr * (self.m[i] / b1t) / (np.sqrt(self.v[i] / b2t) + self.eps)

    def state_dict(self) -> dict:
        return {"t": self.t, "lr": self.lr, "betas": (self.beta1, self.beta2), "eps": self.eps,
                "m": [a.copy() for a in self.m], "v": [a.copy() for a in self.v]}
