"""Reverse-mode automatic differentiation over dense float64 tensors.

Define-by-run: while a ``Graph`` is active (used as a context manager), every
op executed on tensors that require gradients is recorded on the graph's tape
in creation order. ``Graph.backward`` replays the tape in exact reverse
creation order and accumulates gradients into the ``grad`` slot of every
requiring leaf. Graphs are cheap and rebuilt for every forward pass, so the
same parameters can be differentiated at two different points in one training
iteration without stale-graph bugs.

Outside any graph, ops are plain numpy evaluation (eval mode): nothing is
recorded and outputs never require gradients.

The op set is intentionally small: matmul, add, mul, scale, relu, softmax,
log_softmax, layer_norm, dropout, embedding, concat, slice_axis, reduce_sum,
reduce_mean, transpose. That closure is enough for the recognizer and every
training objective in this package.

Thread safety: graph construction and backward are single-threaded per graph
instance. Distinct graphs over read-only parameters may run on separate
threads; tensors can be handed between threads whenever no backward pass is
pending on them.
"""

from __future__ import annotations

import numpy as np

__all__ = [
    "Tensor",
    "Graph",
    "GraphError",
    "ShapeError",
    "NonFiniteError",
    "NonDeterministicError",
    "matmul",
    "add",
    "mul",
    "scale",
    "relu",
    "softmax",
    "log_softmax",
    "layer_norm",
    "dropout",
    "embedding",
    "concat",
    "slice_axis",
    "reduce_sum",
    "reduce_mean",
    "transpose",
    "finite_diff_check",
]


class GraphError(RuntimeError):
    """Backward called before/without a forward pass, or with a bad seed."""


class ShapeError(ValueError):
    """Operand shapes inconsistent with an op signature."""


class NonFiniteError(FloatingPointError):
    """NaN or Inf encountered where finite values are required."""


class NonDeterministicError(RuntimeError):
    """A function expected to be deterministic returned differing results."""


class Tensor:
    """Dense n-dimensional float64 value with an optional gradient slot."""

    __slots__ = ("data", "requires_grad", "grad")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.ascontiguousarray(data, dtype=np.float64)
        if not np.all(np.isfinite(arr)):
            raise NonFiniteError("tensor initialized with non-finite values")
        self.data = arr
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None

    @classmethod
    def _wrap(cls, arr: np.ndarray, requires_grad: bool) -> "Tensor":
        # Internal constructor for op outputs; skips the finiteness scan.
        t = cls.__new__(cls)
        t.data = arr
        t.requires_grad = requires_grad
        t.grad = None
        return t

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() on tensor of shape {self.data.shape}")
        return float(self.data.reshape(()))

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"


_GRAPH_STACK: list["Graph"] = []


def _active_graph() -> "Graph | None":
    return _GRAPH_STACK[-1] if _GRAPH_STACK else None


class Graph:
    """Tape of op records in creation order, replayed in reverse by backward."""

    __slots__ = ("_nodes", "_produced", "_entered")

    def __init__(self):
        # each node: (op name, input tensors, output tensor, backward fn)
        self._nodes: list[tuple[str, tuple[Tensor, ...], Tensor, object]] = []
        self._produced: set[int] = set()
        self._entered = False

    def __enter__(self) -> "Graph":
        if self._entered:
            raise GraphError("graph context is not reentrant")
        self._entered = True
        _GRAPH_STACK.append(self)
        return self

    def __exit__(self, exc_type, exc, tb) -> None:
        popped = _GRAPH_STACK.pop()
        assert popped is self

    def _record(self, op: str, inputs: tuple[Tensor, ...], out: Tensor, backward_fn) -> None:
        self._nodes.append((op, inputs, out, backward_fn))
        self._produced.add(id(out))

    def __len__(self) -> int:
        return len(self._nodes)

    def backward(self, seed: Tensor) -> None:
        """Seed d(seed)/d(seed)=1 and accumulate grads into requiring leaves.

        ``seed`` must be a scalar tensor produced by ops recorded on this
        graph. Intermediate gradients are discarded when the call returns.
        """
        if not self._nodes or id(seed) not in self._produced:
            raise GraphError("backward before forward: seed was not produced on this graph")
        if seed.data.size != 1:
            raise GraphError(f"backward seed must be scalar, got shape {seed.data.shape}")

        acc: dict[int, np.ndarray] = {id(seed): np.ones_like(seed.data)}
        leaves: dict[int, Tensor] = {}
        for op, inputs, out, backward_fn in reversed(self._nodes):
            gout = acc.get(id(out))
            if gout is None:
                continue
            grads = backward_fn(gout)
            for inp, g in zip(inputs, grads):
                if g is None or not inp.requires_grad:
                    continue
                key = id(inp)
                if key in acc:
                    acc[key] = acc[key] + g
                else:
                    acc[key] = g
                if key not in self._produced:
                    leaves[key] = inp
        for key, leaf in leaves.items():
            g = acc[key]
            if leaf.grad is None:
                leaf.grad = np.array(g, dtype=np.float64, copy=True)
            else:
                leaf.grad = leaf.grad + g


def _make(op: str, data: np.ndarray, inputs: tuple[Tensor, ...], backward_fn) -> Tensor:
    g = _active_graph()
    req = g is not None and any(t.requires_grad for t in inputs)
    out = Tensor._wrap(data, requires_grad=req)
    if req:
        g._record(op, inputs, out, backward_fn)
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum a broadcast gradient back down to ``shape``."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


# ---------------------------------------------------------------------------
# ops


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product. 1-D operands are promoted (row vector / column vector)."""
    ad, bd = a.data, b.data
    a1 = ad.ndim == 1
    b1 = bd.ndim == 1
    am = ad[None, :] if a1 else ad
    bm = bd[:, None] if b1 else bd
    if am.ndim != 2 or bm.ndim != 2 or am.shape[1] != bm.shape[0]:
        raise ShapeError(f"matmul: incompatible shapes {ad.shape} @ {bd.shape}")
    out = am @ bm
    if a1:
        out = out[0]
    if b1:
        out = out[..., 0]

    def backward_fn(g):
        gm = g
        if a1:
            gm = gm[None, :] if gm.ndim == 1 else gm.reshape(1, -1)
        if b1:
            gm = gm[:, None] if gm.ndim == 1 else gm.reshape(-1, 1)
        ga = gb = None
        if a.requires_grad:
            ga = gm @ bm.T
            if a1:
                ga = ga[0]
        if b.requires_grad:
            gb = am.T @ gm
            if b1:
                gb = gb[:, 0]
        return ga, gb

    return _make("matmul", out, (a, b), backward_fn)


def add(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise sum with numpy broadcasting."""
    try:
        out = a.data + b.data
    except ValueError:
        raise ShapeError(f"add: incompatible shapes {a.data.shape} + {b.data.shape}") from None

    def backward_fn(g):
        ga = _unbroadcast(g, a.data.shape) if a.requires_grad else None
        gb = _unbroadcast(g, b.data.shape) if b.requires_grad else None
        return ga, gb

    return _make("add", out, (a, b), backward_fn)


def mul(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise product with numpy broadcasting."""
    try:
        out = a.data * b.data
    except ValueError:
        raise ShapeError(f"mul: incompatible shapes {a.data.shape} * {b.data.shape}") from None

    def backward_fn(g):
        ga = _unbroadcast(g * b.data, a.data.shape) if a.requires_grad else None
        gb = _unbroadcast(g * a.data, b.data.shape) if b.requires_grad else None
        return ga, gb

    return _make("mul", out, (a, b), backward_fn)


def scale(a: Tensor, c: float) -> Tensor:
    """Multiply by a python scalar constant."""
    c = float(c)
    out = a.data * c

    def backward_fn(g):
        return (g * c if a.requires_grad else None,)

    return _make("scale", out, (a,), backward_fn)


def relu(a: Tensor) -> Tensor:
    out = np.maximum(a.data, 0.0)

    def backward_fn(g):
        if not a.requires_grad:
            return (None,)
        return (g * (a.data > 0.0),)

    return _make("relu", out, (a,), backward_fn)


def softmax(a: Tensor) -> Tensor:
    """Softmax along the last axis, max-shifted for stability."""
    x = a.data
    m = x.max(axis=-1, keepdims=True)
    e = np.exp(x - m)
    out = e / e.sum(axis=-1, keepdims=True)

    def backward_fn(g):
        if not a.requires_grad:
            return (None,)
        dot = (g * out).sum(axis=-1, keepdims=True)
        return ((g - dot) * out,)

    return _make("softmax", out, (a,), backward_fn)


def log_softmax(a: Tensor) -> Tensor:
    """Log-softmax along the last axis."""
    x = a.data
    m = x.max(axis=-1, keepdims=True)
    shifted = x - m
    lse = np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
    out = shifted - lse

    def backward_fn(g):
        if not a.requires_grad:
            return (None,)
        return (g - np.exp(out) * g.sum(axis=-1, keepdims=True),)

    return _make("log_softmax", out, (a,), backward_fn)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize the last axis to zero mean / unit variance, then affine."""
    d = x.data.shape[-1]
    if gain.data.shape != (d,) or bias.data.shape != (d,):
        raise ShapeError(
            f"layer_norm: gain/bias shapes {gain.data.shape}/{bias.data.shape} "
            f"do not match feature dim {d}"
        )
    mu = x.data.mean(axis=-1, keepdims=True)
    var = x.data.var(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mu) * inv
    out = gain.data * xhat + bias.data

    def backward_fn(g):
        gx = gg = gb = None
        if gain.requires_grad:
            gg = (g * xhat).reshape(-1, d).sum(axis=0)
        if bias.requires_grad:
            gb = g.reshape(-1, d).sum(axis=0)
        if x.requires_grad:
            gy = g * gain.data
            m1 = gy.mean(axis=-1, keepdims=True)
            m2 = (gy * xhat).mean(axis=-1, keepdims=True)
            gx = (gy - m1 - xhat * m2) * inv
        return gx, gg, gb

    return _make("layer_norm", out, (x, gain, bias), backward_fn)


def dropout(x: Tensor, rate: float, rng: np.random.Generator) -> Tensor:
    """Train-mode inverted dropout; the mask is recorded for backward.

    Callers skip this op entirely in eval mode.
    """
    if not 0.0 <= rate < 1.0:
        raise ValueError(f"dropout rate must be in [0,1), got {rate}")
    if rate == 0.0:
        return x
    mask = (rng.random(x.data.shape) >= rate) / (1.0 - rate)
    out = x.data * mask

    def backward_fn(g):
        if not x.requires_grad:
            return (None,)
        return (g * mask,)

    return _make("dropout", out, (x,), backward_fn)


def embedding(table: Tensor, ids) -> Tensor:
    """Row lookup: ids (length L) -> L x dim slice of the table."""
    idx = np.asarray(ids, dtype=np.int64)
    if table.data.ndim != 2:
        raise ShapeError(f"embedding: table must be 2-D, got {table.data.shape}")
    if idx.size and (idx.min() < 0 or idx.max() >= table.data.shape[0]):
        raise IndexError(
            f"embedding: id out of range [0, {table.data.shape[0]}): {idx.tolist()}"
        )
    out = table.data[idx]

    def backward_fn(g):
        if not table.requires_grad:
            return (None,)
        gt = np.zeros_like(table.data)
        np.add.at(gt, idx, g)
        return (gt,)

    return _make("embedding", out, (table,), backward_fn)


def concat(tensors: list[Tensor], axis: int = 0) -> Tensor:
    if not tensors:
        raise ShapeError("concat: empty tensor list")
    try:
        out = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError:
        raise ShapeError(
            f"concat: incompatible shapes {[t.data.shape for t in tensors]} on axis {axis}"
        ) from None
    sizes = [t.data.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def backward_fn(g):
        grads = []
        for t, lo, hi in zip(tensors, offsets[:-1], offsets[1:]):
            if t.requires_grad:
                sl = [slice(None)] * g.ndim
                sl[axis] = slice(lo, hi)
                grads.append(g[tuple(sl)])
            else:
                grads.append(None)
        return tuple(grads)

    return _make("concat", out, tuple(tensors), backward_fn)


def slice_axis(x: Tensor, axis: int, start: int, stop: int) -> Tensor:
    """Contiguous slice [start, stop) along one axis."""
    n = x.data.shape[axis]
    if not (0 <= start < stop <= n):
        raise ShapeError(f"slice_axis: [{start}, {stop}) out of range for axis size {n}")
    sl = [slice(None)] * x.data.ndim
    sl[axis] = slice(start, stop)
    sl = tuple(sl)
    out = x.data[sl]

    def backward_fn(g):
        if not x.requires_grad:
            return (None,)
        gx = np.zeros_like(x.data)
        gx[sl] = g
        return (gx,)

    return _make("slice_axis", out, (x,), backward_fn)


def reduce_sum(x: Tensor) -> Tensor:
    """Full reduction to a scalar."""
    out = np.asarray(x.data.sum())

    def backward_fn(g):
        if not x.requires_grad:
            return (None,)
        return (np.broadcast_to(g, x.data.shape).copy(),)

    return _make("reduce_sum", out, (x,), backward_fn)


def reduce_mean(x: Tensor) -> Tensor:
    """Full mean reduction to a scalar."""
    n = x.data.size
    out = np.asarray(x.data.sum() / n)

    def backward_fn(g):
        if not x.requires_grad:
            return (None,)
        return (np.broadcast_to(g / n, x.data.shape).copy(),)

    return _make("reduce_mean", out, (x,), backward_fn)


def transpose(x: Tensor) -> Tensor:
    if x.data.ndim != 2:
        raise ShapeError(f"transpose: expected 2-D tensor, got {x.data.shape}")
    out = np.ascontiguousarray(x.data.T)

    def backward_fn(g):
        if not x.requires_grad:
            return (None,)
        return (np.ascontiguousarray(g.T),)

    return _make("transpose", out, (x,), backward_fn)


# ---------------------------------------------------------------------------
# oracle


def finite_diff_check(fn, point: Tensor, step: float = 1e-5) -> float:
    """Max relative error between analytic and central-difference gradients.

    ``fn`` maps a tensor to a scalar tensor and must be deterministic; this is
    verified by evaluating it twice (bitwise comparison). The analytic
    gradient comes from a fresh graph; the numeric one from central
    differences with the given step. Per-coordinate error is
    ``|analytic - numeric| / max(|analytic|, 1e-8)``.
    """
    if step <= 0:
        raise ValueError(f"step must be positive, got {step}")

    def eval_plain(arr: np.ndarray) -> float:
        out = fn(Tensor(arr))
        if out.data.size != 1:
            raise ShapeError(f"finite_diff_check: fn returned shape {out.data.shape}")
        return float(out.data.reshape(()))

    base = point.data.copy()
    v1 = eval_plain(base)
    v2 = eval_plain(base)
    if v1 != v2 or np.float64(v1).tobytes() != np.float64(v2).tobytes():
        raise NonDeterministicError("fn returned different values on repeated evaluation")

    probe = Tensor(base, requires_grad=True)
    with Graph() as g:
        out = fn(probe)
    if out.data.size != 1:
        raise ShapeError(f"finite_diff_check: fn returned shape {out.data.shape}")
    if id(out) in g._produced:
        g.backward(out)
        analytic = probe.grad if probe.grad is not None else np.zeros_like(base)
    else:
        # fn ignored its input entirely (constant function)
        analytic = np.zeros_like(base)

    flat = base.ravel()
    numeric = np.zeros_like(flat)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + step
        fp = eval_plain(base)
        flat[i] = orig - step
        fm = eval_plain(base)
        flat[i] = orig
        numeric[i] = (fp - fm) / (2.0 * step)
    numeric = numeric.reshape(base.shape)

    denom = np.maximum(np.abs(analytic), 1e-8)
    return float(np.max(np.abs(analytic - numeric) / denom))
