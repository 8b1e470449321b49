"""Dense tensors with reverse-mode differentiation on an explicit tape.

Values are float32 by default (float64 is supported for tighter gradient
checks); reductions and matrix products accumulate in float64. Every
operation validates that finite inputs produced finite outputs, so NaN/Inf
never propagates silently.

A Tensor is immutable. It participates in differentiation when it was
created by Tape.watch() or by an operation whose inputs were tracked; all
tracked tensors of one expression must live on the same tape. backward()
walks the tape in reverse creation order, which is a valid topological
order because nodes are append-only.
"""

from __future__ import annotations

from typing import Callable, Iterable, Optional, Sequence

import numpy as np

from .backend import kernels as K
from .errors import (
    DomainError,
    EmptyTensor,
    NonFiniteError,
    NonScalarLoss,
    ShapeMismatch,
    ZeroVector,
)

NORM_EPS = 1e-12  # below this, a vector has no usable direction


class Tensor:
    """Immutable dense array, optionally tracked on a Tape."""

    __slots__ = ("data", "tape", "node_id")

    def __init__(self, data, dtype=None, _tape=None, _node_id=None):
        arr = _contig(np.asarray(data, dtype=dtype or np.float32))
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float32)
        arr.flags.writeable = False
        object.__setattr__(self, "data", arr)
        object.__setattr__(self, "tape", _tape)
        object.__setattr__(self, "node_id", _node_id)

    def __setattr__(self, name, value):
        raise AttributeError("Tensor is immutable")

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self):
        return self.data.size

    @property
    def tracked(self) -> bool:
        return self.tape is not None

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeMismatch(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(()))

    def detach(self) -> "Tensor":
        """The same value with no tape attached (a stop-gradient boundary)."""
        return _wrap(self.data)

    def astype(self, dtype) -> "Tensor":
        return Tensor(self.data.astype(dtype))

    def __repr__(self):
        tag = f" tape@{self.node_id}" if self.tracked else ""
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype.name}{tag})"


def tensor(values, dtype=np.float32) -> Tensor:
    """Build an untracked Tensor from array-like values."""
    return Tensor(values, dtype=dtype)


def _contig(arr) -> np.ndarray:
    # ascontiguousarray would promote 0-d to 1-d; keep scalar shapes intact
    arr = np.asarray(arr)
    if arr.ndim == 0:
        return arr if arr.flags.owndata else arr.copy()
    return np.ascontiguousarray(arr)


def _wrap(arr, tape=None, node_id=None) -> Tensor:
    t = Tensor.__new__(Tensor)
    arr = _contig(arr)
    arr.flags.writeable = False
    object.__setattr__(t, "data", arr)
    object.__setattr__(t, "tape", tape)
    object.__setattr__(t, "node_id", node_id)
    return t


class _Node:
    __slots__ = ("kind", "inputs", "value", "grad", "backward_fn")

    def __init__(self, kind, inputs, value, backward_fn):
        self.kind = kind
        self.inputs = inputs
        self.value = value
        self.grad = None
        self.backward_fn = backward_fn


class Tape:
    """Append-only record of operations for reverse-mode differentiation."""

    def __init__(self):
        self._nodes: list[_Node] = []

    def __len__(self):
        return len(self._nodes)

    def watch(self, t: Tensor) -> Tensor:
        """Register a leaf parameter and return its tracked handle."""
        if t.tape is self:
            return t
        if t.tape is not None:
            raise ValueError("tensor is already tracked on a different tape")
        nid = self._append("leaf", (), t.data, None)
        return _wrap(t.data, self, nid)

    def _append(self, kind, inputs, value, backward_fn) -> int:
        self._nodes.append(_Node(kind, inputs, value, backward_fn))
        return len(self._nodes) - 1

    def _capture(self, t: Tensor) -> int:
        """Node id of t on this tape, registering constants on first use."""
        if t.tape is self:
            return t.node_id
        if t.tape is not None:
            raise ValueError("expression mixes tensors from different tapes")
        return self._append("const", (), t.data, None)

    def grad(self, t: Tensor) -> Tensor:
        """Gradient of the last backward() pass w.r.t. a tracked tensor."""
        if t.tape is not self:
            raise ValueError("tensor is not tracked on this tape")
        node = self._nodes[t.node_id]
        if node.grad is None:
            return _wrap(np.zeros_like(node.value))
        return _wrap(node.grad)

    def node_kinds(self):
        return [n.kind for n in self._nodes]


def backward(loss: Tensor) -> dict[int, Tensor]:
    """Reverse-accumulate gradients of a scalar loss over its tape.

    Returns a map from node id to gradient tensor. Watched leaves that the
    loss does not depend on get zero gradients.
    """
    if loss.data.shape != ():
        raise NonScalarLoss(f"loss must be a scalar, got shape {loss.data.shape}")
    if loss.tape is None:
        raise NonScalarLoss("loss is not attached to a tape; nothing to differentiate")
    tape = loss.tape
    nodes = tape._nodes
    for n in nodes:
        n.grad = None
    nodes[loss.node_id].grad = np.ones((), dtype=loss.dtype)
    for nid in range(loss.node_id, -1, -1):
        node = nodes[nid]
        if node.grad is None or node.backward_fn is None:
            continue
        for iid, g in zip(node.inputs, node.backward_fn(node.grad)):
            if g is None:
                continue
            tgt = nodes[iid]
            tgt.grad = g if tgt.grad is None else tgt.grad + g
    out = {}
    for nid, node in enumerate(nodes):
        if node.kind == "leaf" and node.grad is None:
            node.grad = np.zeros_like(node.value)
        if node.grad is not None:
            out[nid] = _wrap(node.grad)
    return out


# --- operation plumbing ---


def _tape_of(*tensors: Tensor) -> Optional[Tape]:
    tape = None
    for t in tensors:
        if t.tape is None:
            continue
        if tape is None:
            tape = t.tape
        elif tape is not t.tape:
            raise ValueError("expression mixes tensors from different tapes")
    return tape


def _finite(kind: str, arr: np.ndarray) -> None:
    if not np.isfinite(arr).all():
        raise NonFiniteError(f"{kind} produced non-finite values")


def _emit(kind: str, out: np.ndarray, parts: Sequence[tuple[Tensor, Callable]]) -> Tensor:
    """Finish an op: finite-check, and record a node if any input is tracked.

    parts pairs each differentiable input with a function mapping the output
    gradient to that input's gradient.
    """
    _finite(kind, out)
    tape = _tape_of(*(t for t, _ in parts))
    if tape is None:
        return _wrap(out)
    ids = tuple(tape._capture(t) for t, _ in parts)
    fns = tuple(fn for _, fn in parts)

    def backward_fn(g, fns=fns):
        return tuple(fn(g) for fn in fns)

    nid = tape._append(kind, ids, out, backward_fn)
    return _wrap(out, tape, nid)


def _binary_operands(kind: str, a: Tensor, b):
    """Normalize the second operand: equal-shape tensor, 0-d tensor, or number."""
    if isinstance(b, Tensor):
        if b.shape == a.shape or b.shape == () or a.shape == ():
            return b
        raise ShapeMismatch(f"{kind}: shapes {a.shape} and {b.shape} differ")
    return float(b)


def _pair(a: Tensor, b: Tensor):
    """Operand data promoted to a common dtype (float32 meets float64 -> float64)."""
    if a.dtype == b.dtype:
        return a.data, b.data, a.dtype
    dt = np.promote_types(a.dtype, b.dtype)
    return a.data.astype(dt), b.data.astype(dt), np.dtype(dt)


def _bcast_grad(g: np.ndarray, target_shape, dt) -> np.ndarray:
    """Reduce an output gradient onto a scalar-broadcast operand."""
    if g.shape == target_shape:
        return g.astype(dt, copy=False)
    return np.asarray(g.sum(dtype=np.float64), dtype=dt)


# --- elementwise and matrix primitives ---


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product of 2-D tensors, accumulated in float64."""
    if a.data.ndim != 2 or b.data.ndim != 2:
        raise ShapeMismatch(f"matmul needs 2-D operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ShapeMismatch(f"matmul inner dims differ: {a.shape} x {b.shape}")
    ad_, bd_, dt = _pair(a, b)
    out = (ad_.astype(np.float64) @ bd_.astype(np.float64)).astype(dt)

    def da(g, bd=bd_):
        return (g.astype(np.float64) @ bd.T.astype(np.float64)).astype(a.dtype)

    def db(g, ad=ad_):
        return (ad.T.astype(np.float64) @ g.astype(np.float64)).astype(b.dtype)

    return _emit("matmul", out, [(a, da), (b, db)])


def add(a: Tensor, b) -> Tensor:
    other = _binary_operands("add", a, b)
    if isinstance(other, Tensor):
        ad_, bd_, _ = _pair(a, other)
        out = ad_ + bd_
        return _emit("add", out, [
            (a, lambda g: _bcast_grad(g, a.shape, a.dtype)),
            (other, lambda g: _bcast_grad(g, other.shape, other.dtype)),
        ])
    out = a.data + a.dtype.type(other)
    return _emit("add", out, [(a, lambda g: g)])


def sub(a: Tensor, b) -> Tensor:
    other = _binary_operands("sub", a, b)
    if isinstance(other, Tensor):
        ad_, bd_, _ = _pair(a, other)
        out = ad_ - bd_
        return _emit("sub", out, [
            (a, lambda g: _bcast_grad(g, a.shape, a.dtype)),
            (other, lambda g: _bcast_grad(-g, other.shape, other.dtype)),
        ])
    out = a.data - a.dtype.type(other)
    return _emit("sub", out, [(a, lambda g: g)])


def mul(a: Tensor, b) -> Tensor:
    other = _binary_operands("mul", a, b)
    if isinstance(other, Tensor):
        ad_, bd_, _ = _pair(a, other)
        out = ad_ * bd_
        return _emit("mul", out, [
            (a, lambda g, od=bd_: _bcast_grad(g * od, a.shape, a.dtype)),
            (other, lambda g, ad2=ad_: _bcast_grad(g * ad2, other.shape, other.dtype)),
        ])
    c = a.dtype.type(other)
    out = a.data * c
    return _emit("mul", out, [(a, lambda g: g * c)])


def scale(a: Tensor, c: float) -> Tensor:
    """Multiply by a python constant (alias of the scalar form of mul)."""
    return mul(a, c)


def neg(a: Tensor) -> Tensor:
    return _emit("neg", -a.data, [(a, lambda g: -g)])


def exp(a: Tensor) -> Tensor:
    with np.errstate(over="ignore"):  # overflow becomes NonFiniteError in _emit
        out = np.exp(a.data)
    return _emit("exp", out, [(a, lambda g, o=out: g * o)])


def log(a: Tensor) -> Tensor:
    if np.any(a.data <= 0):
        raise DomainError("log requires strictly positive entries")
    out = np.log(a.data)
    return _emit("log", out, [(a, lambda g, ad=a.data: g / ad)])


def absolute(a: Tensor) -> Tensor:
    # subgradient 0 at the kink
    return _emit("abs", np.abs(a.data), [(a, lambda g, s=np.sign(a.data): g * s)])


def relu(x: Tensor) -> Tensor:
    out = K.relu_fwd(x.data)
    return _emit("relu", out, [(x, lambda g, xd=x.data: K.relu_bwd(xd, g))])


def leaky_relu(x: Tensor, slope: float) -> Tensor:
    if not 0.0 < slope < 1.0:
        raise DomainError(f"leaky_relu slope must lie in (0, 1), got {slope}")
    out = K.leaky_relu_fwd(x.data, slope)
    return _emit("leaky_relu", out, [(x, lambda g, xd=x.data: K.leaky_relu_bwd(xd, g, slope))])


def softplus(x: Tensor) -> Tensor:
    out = K.softplus_fwd(x.data)
    return _emit("softplus", out, [(x, lambda g, xd=x.data: K.softplus_bwd(xd, g))])


def reduce_sum(x: Tensor) -> Tensor:
    if x.data.size == 0:
        raise EmptyTensor("sum over an empty tensor")
    out = np.asarray(x.data.sum(dtype=np.float64), dtype=x.dtype)
    return _emit("sum", out, [(x, lambda g, sh=x.shape, dt=x.dtype: np.full(sh, g, dtype=dt))])


def reduce_mean(x: Tensor) -> Tensor:
    if x.data.size == 0:
        raise EmptyTensor("mean over an empty tensor")
    n = x.data.size
    out = np.asarray(x.data.sum(dtype=np.float64) / n, dtype=x.dtype)

    def bwd(g, sh=x.shape, dt=x.dtype):
        return np.full(sh, g / dt.type(n), dtype=dt)

    return _emit("mean", out, [(x, bwd)])


def reshape(x: Tensor, shape) -> Tensor:
    out = x.data.reshape(shape)
    return _emit("reshape", out, [(x, lambda g, sh=x.shape: g.reshape(sh))])


# --- row-structured primitives for batched fully connected nets ---


def add_bias(x: Tensor, b: Tensor) -> Tensor:
    """Add a length-n bias row to every row of an m-by-n matrix."""
    if x.data.ndim != 2 or b.data.ndim != 1 or x.shape[1] != b.shape[0]:
        raise ShapeMismatch(f"add_bias: shapes {x.shape} and {b.shape}")
    xd_, bd_, _ = _pair(x, b)
    out = xd_ + bd_[None, :]

    def db(g, dt=b.dtype):
        return g.sum(axis=0, dtype=np.float64).astype(dt)

    return _emit("add_bias", out, [(x, lambda g: g.astype(x.dtype, copy=False)), (b, db)])


def scale_cols(x: Tensor, s: Tensor) -> Tensor:
    """Multiply every row of an m-by-n matrix elementwise by a length-n row."""
    if x.data.ndim != 2 or s.data.ndim != 1 or x.shape[1] != s.shape[0]:
        raise ShapeMismatch(f"scale_cols: shapes {x.shape} and {s.shape}")
    xd_, sd_, _ = _pair(x, s)
    out = xd_ * sd_[None, :]

    def dx(g, sd=sd_):
        return (g * sd[None, :]).astype(x.dtype, copy=False)

    def ds(g, xd=xd_, dt=s.dtype):
        return (g * xd).sum(axis=0, dtype=np.float64).astype(dt)

    return _emit("scale_cols", out, [(x, dx), (s, ds)])


def concat_cols(a: Tensor, b: Tensor) -> Tensor:
    """Stack two matrices with equal row counts side by side."""
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[0] != b.shape[0]:
        raise ShapeMismatch(f"concat_cols: shapes {a.shape} and {b.shape}")
    ad_, bd_, _ = _pair(a, b)
    p = a.shape[1]
    out = np.concatenate([ad_, bd_], axis=1)
    return _emit("concat_cols", out, [
        (a, lambda g: np.ascontiguousarray(g[:, :p]).astype(a.dtype, copy=False)),
        (b, lambda g: np.ascontiguousarray(g[:, p:]).astype(b.dtype, copy=False)),
    ])


def slice_cols(x: Tensor, start: int, stop: int) -> Tensor:
    if x.data.ndim != 2 or not (0 <= start < stop <= x.shape[1]):
        raise ShapeMismatch(f"slice_cols: [{start}:{stop}] of shape {x.shape}")
    out = np.ascontiguousarray(x.data[:, start:stop])

    def dx(g, sh=x.shape, dt=x.dtype):
        full = np.zeros(sh, dtype=dt)
        full[:, start:stop] = g
        return full

    return _emit("slice_cols", out, [(x, dx)])


def slice_rows(x: Tensor, start: int, stop: int) -> Tensor:
    if x.data.ndim != 2 or not (0 <= start < stop <= x.shape[0]):
        raise ShapeMismatch(f"slice_rows: [{start}:{stop}] of shape {x.shape}")
    out = np.ascontiguousarray(x.data[start:stop, :])

    def dx(g, sh=x.shape, dt=x.dtype):
        full = np.zeros(sh, dtype=dt)
        full[start:stop, :] = g
        return full

    return _emit("slice_rows", out, [(x, dx)])


def rowsum(x: Tensor) -> Tensor:
    """Per-row sum of a matrix, accumulated in float64."""
    if x.data.ndim != 2:
        raise ShapeMismatch(f"rowsum needs a 2-D tensor, got {x.shape}")
    out = x.data.sum(axis=1, dtype=np.float64).astype(x.dtype)

    def dx(g, sh=x.shape, dt=x.dtype):
        return np.repeat(g[:, None], sh[1], axis=1).astype(dt)

    return _emit("rowsum", out, [(x, dx)])


# --- similarity and distance primitives ---


def _cosine_parts(a: np.ndarray, b: np.ndarray, what: str):
    na = np.linalg.norm(a.astype(np.float64), axis=-1)
    nb = np.linalg.norm(b.astype(np.float64), axis=-1)
    if np.any(na < NORM_EPS) or np.any(nb < NORM_EPS):
        side = "first" if np.any(na < NORM_EPS) else "second"
        raise ZeroVector(f"{what}: {side} operand has near-zero norm")
    dot = (a.astype(np.float64) * b.astype(np.float64)).sum(axis=-1)
    return dot, na, nb


def cosine_sim(a: Tensor, b: Tensor) -> Tensor:
    """Cosine of the angle between two 1-D vectors."""
    if a.data.ndim != 1 or b.data.ndim != 1 or a.shape != b.shape:
        raise ShapeMismatch(f"cosine_sim: shapes {a.shape} and {b.shape}")
    ad_, bd_, dt = _pair(a, b)
    dot, na, nb = _cosine_parts(ad_, bd_, "cosine_sim")
    val = dot / (na * nb)
    out = np.asarray(val, dtype=dt)

    def da(g, ad2=ad_, bd=bd_):
        a64, b64 = ad2.astype(np.float64), bd.astype(np.float64)
        return (np.float64(g) * (b64 / (na * nb) - val * a64 / (na * na))).astype(a.dtype)

    def db(g, ad2=ad_, bd=bd_):
        a64, b64 = ad2.astype(np.float64), bd.astype(np.float64)
        return (np.float64(g) * (a64 / (na * nb) - val * b64 / (nb * nb))).astype(b.dtype)

    return _emit("cosine_sim", out, [(a, da), (b, db)])


def row_cosine(a: Tensor, b: Tensor) -> Tensor:
    """Cosine similarity of corresponding rows of two m-by-n matrices."""
    if a.data.ndim != 2 or a.shape != b.shape:
        raise ShapeMismatch(f"row_cosine: shapes {a.shape} and {b.shape}")
    ad_, bd_, dt = _pair(a, b)
    dot, na, nb = _cosine_parts(ad_, bd_, "row_cosine")
    val = dot / (na * nb)
    out = val.astype(dt)

    def da(g, ad2=ad_, bd=bd_):
        a64, b64 = ad2.astype(np.float64), bd.astype(np.float64)
        coef = g.astype(np.float64)[:, None]
        return (coef * (b64 / (na * nb)[:, None] - (val / (na * na))[:, None] * a64)).astype(a.dtype)

    def db(g, ad2=ad_, bd=bd_):
        a64, b64 = ad2.astype(np.float64), bd.astype(np.float64)
        coef = g.astype(np.float64)[:, None]
        return (coef * (a64 / (na * nb)[:, None] - (val / (nb * nb))[:, None] * b64)).astype(b.dtype)

    return _emit("row_cosine", out, [(a, da), (b, db)])


def l1_dist(a: Tensor, b: Tensor) -> Tensor:
    """Manhattan distance between two 1-D vectors."""
    if a.data.ndim != 1 or a.shape != b.shape:
        raise ShapeMismatch(f"l1_dist: shapes {a.shape} and {b.shape}")
    ad_, bd_, dt = _pair(a, b)
    dist, sign = K.row_l1_fwd(ad_[None, :], bd_[None, :])
    out = np.asarray(dist[0], dtype=dt)
    s = sign[0]
    return _emit("l1_dist", out, [
        (a, lambda g: (g * s).astype(a.dtype)),
        (b, lambda g: (-g * s).astype(b.dtype)),
    ])


def row_l1(a: Tensor, b: Tensor) -> Tensor:
    """Manhattan distance of corresponding rows of two m-by-n matrices."""
    if a.data.ndim != 2 or a.shape != b.shape:
        raise ShapeMismatch(f"row_l1: shapes {a.shape} and {b.shape}")
    ad_, bd_, _ = _pair(a, b)
    dist, sign = K.row_l1_fwd(ad_, bd_)
    return _emit("row_l1", dist, [
        (a, lambda g: (g[:, None] * sign).astype(a.dtype)),
        (b, lambda g: (-g[:, None] * sign).astype(b.dtype)),
    ])


# --- verification oracle ---


def grad_check(f: Callable[[list[Tensor]], Tensor], params: Iterable[Tensor], eps: float = 1e-3) -> float:
    """Largest relative disagreement between backward() and central differences.

    f maps a list of parameter tensors to a scalar tensor and must be
    deterministic (freeze any randomness outside f). The analytic gradient
    runs at the parameters' own precision; the difference quotient
    (f(p+eps)-f(p-eps))/(2*eps) runs on float64 copies so the oracle is not
    drowned by float32 forward rounding. The relative error per coordinate
    uses the denominator max(1e-6, |analytic| + |numeric|).
    """
    params = list(params)
    tape = Tape()
    tracked = [tape.watch(p) for p in params]
    loss = f(tracked)
    grads = backward(loss)
    params64 = [Tensor(p.data, dtype=np.float64) for p in params]
    worst = 0.0
    for k, tr in enumerate(tracked):
        analytic = grads[tr.node_id].data.astype(np.float64).ravel()
        flat = params64[k].data.ravel()
        numeric = np.zeros_like(flat)
        for j in range(flat.size):
            bumped = flat.copy()
            bumped[j] = flat[j] + eps
            fp = f(_rebuild(params64, k, bumped)).item()
            bumped[j] = flat[j] - eps
            fm = f(_rebuild(params64, k, bumped)).item()
            numeric[j] = (fp - fm) / (2.0 * eps)
        denom = np.maximum(1e-6, np.abs(analytic) + np.abs(numeric))
        worst = max(worst, float(np.max(np.abs(analytic - numeric) / denom)))
    return worst


def _rebuild(params: list[Tensor], target: int, flat: np.ndarray) -> list[Tensor]:
    out = list(params)
    out[target] = Tensor(flat.reshape(params[target].shape), dtype=np.float64)
    return out
