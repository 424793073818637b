"""Dense tensors with reverse-mode automatic differentiation.

This module is the numeric core: dense tensors and their op set, sparse
CSR matrices with a differentiable sparse-dense product, and checkpoint
serialization (JSON manifest plus a flat little-endian float32 blob).

Design notes:

* Every operation builds the graph eagerly ("define by run"). A non-leaf
  tensor stores its parents plus one vector-Jacobian closure per parent.
* The closures are written in terms of the public ops, so running
  ``backward(..., create_graph=True)`` records the backward pass itself
  and the resulting gradients can be differentiated again (needed for
  gradient-of-gradient losses).
* Supported dtypes are float32 and float64. Reductions always accumulate
  in float64 regardless of the storage dtype.
* Broadcasting is deliberately narrow: exact shape match, a scalar, a
  single row ``(1, d)`` / ``(d,)`` against ``(n, d)``, or a single column
  ``(n, 1)`` against ``(n, d)``. Anything else raises.

Thread safety: graph construction is single-threaded; tensors with
``requires_grad=False`` are treated as immutable and may be shared across
threads.
"""

from __future__ import annotations

import itertools
import json
from contextlib import contextmanager
from pathlib import Path

import numpy as np
import scipy.sparse as sp

__all__ = [
    "Tensor",
    "ParamSet",
    "Tape",
    "CsrMatrix",
    "spmm",
    "DimensionError",
    "NumericDomainError",
    "ContractError",
    "no_grad",
    "is_grad_enabled",
    "backward",
    "elementwise",
    "save_checkpoint",
    "load_checkpoint",
    "manifest_path",
    "OP_NAMES",
    "add",
    "sub",
    "mul",
    "div",
    "neg",
    "matmul",
    "transpose",
    "relu",
    "leaky_relu",
    "sigmoid",
    "exp",
    "log",
    "sqrt",
    "maximum",
    "clip",
    "tsum",
    "mean",
    "reshape",
    "broadcast_to",
    "take_rows",
    "scatter_rows",
    "concat",
    "slice_axis",
    "pad_zeros",
    "sum_row_blocks",
    "repeat_rows",
    "stop_gradient",
]

FLOAT_DTYPES = (np.float32, np.float64)


class DimensionError(ValueError):
    """Operand shapes are incompatible for the requested op."""


class NumericDomainError(ArithmeticError):
    """An op was fed values outside its numeric domain (log(-1), 1/0, ...)."""


class ContractError(ValueError):
    """A documented precondition of the public API was violated."""


_grad_enabled = True
_node_counter = itertools.count()


def is_grad_enabled() -> bool:
    return _grad_enabled


@contextmanager
def no_grad():
    """Disable graph recording inside the block."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


@contextmanager
def _grad_mode(flag: bool):
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = flag
    try:
        yield
    finally:
        _grad_enabled = prev


class Tensor:
    """N-d array node. Leaves are created directly; results come from ops."""

    __slots__ = ("data", "requires_grad", "node_id", "_parents", "_vjps", "_op", "_recompute")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data)
        if dtype is not None:
            arr = arr.astype(dtype, copy=False)
        elif arr.dtype not in FLOAT_DTYPES:
            arr = arr.astype(np.float64)
        self.data = np.ascontiguousarray(arr)
        self.requires_grad = bool(requires_grad)
        self.node_id = next(_node_counter)
        self._parents = ()
        self._vjps = ()
        self._op = "leaf"
        self._recompute = None

    # -- basic introspection ------------------------------------------------

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        if self.data.size != 1:
            raise ContractError(f"item() on tensor of size {self.data.size}")
        return float(self.data.reshape(())[()])

    def numpy(self) -> np.ndarray:
        return np.array(self.data, copy=True)

    def detach(self) -> "Tensor":
        return stop_gradient(self)

    def __repr__(self):
        return f"Tensor(op={self._op!r}, shape={self.shape}, dtype={self.data.dtype}, grad={self.requires_grad})"

    # -- operator sugar -----------------------------------------------------

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

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    @property
    def T(self):
        return transpose(self)


def _make_node(data: np.ndarray, parents, vjps, op: str, recompute) -> Tensor:
    t = Tensor.__new__(Tensor)
    t.data = data
    t.node_id = next(_node_counter)
    if _grad_enabled and any(p.requires_grad for p in parents):
        t.requires_grad = True
        t._parents = tuple(parents)
        t._vjps = tuple(vjps)
        t._op = op
        t._recompute = recompute
    else:
        t.requires_grad = False
        t._parents = ()
        t._vjps = ()
        t._op = op
        t._recompute = None
    return t


def _coerce(x, like: Tensor | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else np.float64
    return Tensor(np.asarray(x, dtype=dtype))


def _check_same_dtype(a: Tensor, b: Tensor, op: str):
    if a.dtype != b.dtype:
        raise DimensionError(f"{op}: mixed dtypes {a.dtype} vs {b.dtype}; cast explicitly")


def _check_broadcast(sa: tuple, sb: tuple, op: str) -> tuple:
    """Allow exact match, scalar, single-row, or single-column broadcast."""
    if sa == sb:
        return sa
    try:
        out = np.broadcast_shapes(sa, sb)
    except ValueError:
        raise DimensionError(f"{op}: shapes {sa} and {sb} do not broadcast") from None
    for s in (sa, sb):
        if s == out:
            continue
        n = int(np.prod(s)) if s else 1
        if n == 1:
            continue  # scalar
        if len(out) == 2 and (s == (1, out[1]) or s == (out[1],) or s == (out[0], 1)):
            continue
        raise DimensionError(f"{op}: broadcast of {s} against {out} not supported (row/col/scalar only)")
    return out


def _unbroadcast(g: Tensor, target_shape: tuple) -> Tensor:
    """Reduce a gradient back to the shape of a broadcast operand."""
    if g.shape == target_shape:
        return g
    extra = g.ndim - len(target_shape)
    axes = list(range(extra))
    for i, dim in enumerate(target_shape):
        if dim == 1 and g.shape[extra + i] != 1:
            axes.append(extra + i)
    out = tsum(g, axis=tuple(axes), keepdims=True) if axes else g
    return reshape(out, target_shape)


def _check_finite(data: np.ndarray, op: str):
    if not np.isfinite(data).all():
        raise NumericDomainError(f"{op}: produced non-finite values")


# -- elementwise binary ops -------------------------------------------------


def add(a, b) -> Tensor:
    a = _coerce(a, like=b if isinstance(b, Tensor) else None)
    b = _coerce(b, like=a)
    _check_same_dtype(a, b, "add")
    _check_broadcast(a.shape, b.shape, "add")
    rec = lambda x, y: x + y
    return _make_node(
        rec(a.data, b.data),
        (a, b),
        (lambda g: _unbroadcast(g, a.shape), lambda g: _unbroadcast(g, b.shape)),
        "add",
        rec,
    )


def sub(a, b) -> Tensor:
    a = _coerce(a, like=b if isinstance(b, Tensor) else None)
    b = _coerce(b, like=a)
    _check_same_dtype(a, b, "sub")
    _check_broadcast(a.shape, b.shape, "sub")
    rec = lambda x, y: x - y
    return _make_node(
        rec(a.data, b.data),
        (a, b),
        (lambda g: _unbroadcast(g, a.shape), lambda g: _unbroadcast(neg(g), b.shape)),
        "sub",
        rec,
    )


def mul(a, b) -> Tensor:
    a = _coerce(a, like=b if isinstance(b, Tensor) else None)
    b = _coerce(b, like=a)
    _check_same_dtype(a, b, "mul")
    _check_broadcast(a.shape, b.shape, "mul")
    rec = lambda x, y: x * y
    return _make_node(
        rec(a.data, b.data),
        (a, b),
        (lambda g: _unbroadcast(mul(g, b), a.shape), lambda g: _unbroadcast(mul(g, a), b.shape)),
        "mul",
        rec,
    )


def div(a, b) -> Tensor:
    a = _coerce(a, like=b if isinstance(b, Tensor) else None)
    b = _coerce(b, like=a)
    _check_same_dtype(a, b, "div")
    _check_broadcast(a.shape, b.shape, "div")
    with np.errstate(divide="ignore", invalid="ignore"):
        data = a.data / b.data
    _check_finite(data, "div")
    rec = lambda x, y: x / y
    out = _make_node(
        data,
        (a, b),
        (
            lambda g: _unbroadcast(div(g, b), a.shape),
            lambda g: _unbroadcast(neg(div(mul(g, out), b)), b.shape),
        ),
        "div",
        rec,
    )
    return out


def maximum(a, b) -> Tensor:
    """Elementwise max; ties route their gradient to the first operand."""
    a = _coerce(a, like=b if isinstance(b, Tensor) else None)
    b = _coerce(b, like=a)
    _check_same_dtype(a, b, "maximum")
    _check_broadcast(a.shape, b.shape, "maximum")
    mask = (a.data >= b.data).astype(a.dtype)
    mask_t = Tensor(mask)
    rec = lambda x, y: np.maximum(x, y)
    return _make_node(
        rec(a.data, b.data),
        (a, b),
        (
            lambda g: _unbroadcast(mul(g, mask_t), a.shape),
            lambda g: _unbroadcast(mul(g, sub(1.0, mask_t)), b.shape),
        ),
        "maximum",
        rec,
    )


# -- elementwise unary ops ---------------------------------------------------


def neg(a) -> Tensor:
    a = _coerce(a)
    rec = lambda x: -x
    return _make_node(rec(a.data), (a,), (lambda g: neg(g),), "neg", rec)


def relu(a) -> Tensor:
    a = _coerce(a)
    mask = Tensor((a.data > 0).astype(a.dtype))
    rec = lambda x: np.maximum(x, 0)
    return _make_node(rec(a.data), (a,), (lambda g: mul(g, mask),), "relu", rec)


def leaky_relu(a, alpha: float = 0.01) -> Tensor:
    a = _coerce(a)
    slope = np.where(a.data > 0, a.dtype.type(1), a.dtype.type(alpha))
    slope_t = Tensor(slope)
    rec = lambda x: np.where(x > 0, x, x * np.asarray(alpha, dtype=x.dtype))
    return _make_node(rec(a.data), (a,), (lambda g: mul(g, slope_t),), "leaky_relu", rec)


def sigmoid(a) -> Tensor:
    a = _coerce(a)

    def rec(x):
        out = np.empty_like(x)
        pos = x >= 0
        out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
        ex = np.exp(x[~pos])
        out[~pos] = ex / (1.0 + ex)
        return out

    out = _make_node(rec(a.data), (a,), (), "sigmoid", rec)
    if out.requires_grad or (_grad_enabled and a.requires_grad):
        out._vjps = (lambda g: mul(g, mul(out, sub(1.0, out))),)
    return out


def exp(a) -> Tensor:
    a = _coerce(a)
    with np.errstate(over="ignore"):
        data = np.exp(a.data)
    _check_finite(data, "exp")
    out = _make_node(data, (a,), (), "exp", lambda x: np.exp(x))
    out._vjps = (lambda g: mul(g, out),)
    return out


def log(a) -> Tensor:
    a = _coerce(a)
    if np.any(a.data <= 0):
        raise NumericDomainError("log: nonpositive input")
    return _make_node(np.log(a.data), (a,), (lambda g: div(g, a),), "log", lambda x: np.log(x))


def sqrt(a) -> Tensor:
    a = _coerce(a)
    if np.any(a.data < 0):
        raise NumericDomainError("sqrt: negative input")
    out = _make_node(np.sqrt(a.data), (a,), (), "sqrt", lambda x: np.sqrt(x))
    out._vjps = (lambda g: div(mul(g, 0.5), out),)
    return out


def clip(a, lo: float, hi: float) -> Tensor:
    """Clamp values to [lo, hi]; gradient is 1 inside the interval (inclusive)."""
    a = _coerce(a)
    mask = Tensor(((a.data >= lo) & (a.data <= hi)).astype(a.dtype))
    rec = lambda x: np.clip(x, lo, hi)
    return _make_node(rec(a.data), (a,), (lambda g: mul(g, mask),), "clip", rec)


def stop_gradient(a) -> Tensor:
    a = _coerce(a)
    return Tensor(np.array(a.data, copy=True))


# -- linear algebra -----------------------------------------------------------


def matmul(a, b) -> Tensor:
    a = _coerce(a, like=b if isinstance(b, Tensor) else None)
    b = _coerce(b, like=a)
    _check_same_dtype(a, b, "matmul")
    if a.ndim != 2 or b.ndim != 2:
        raise DimensionError(f"matmul: expects 2-d operands, got {a.shape} @ {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul: inner dims differ, {a.shape} @ {b.shape}")
    rec = lambda x, y: x @ y
    return _make_node(
        rec(a.data, b.data),
        (a, b),
        (lambda g: matmul(g, transpose(b)), lambda g: matmul(transpose(a), g)),
        "matmul",
        rec,
    )


def transpose(a) -> Tensor:
    a = _coerce(a)
    if a.ndim != 2:
        raise DimensionError(f"transpose: expects 2-d, got {a.shape}")
    rec = lambda x: np.ascontiguousarray(x.T)
    return _make_node(rec(a.data), (a,), (lambda g: transpose(g),), "transpose", rec)


# -- shape ops ----------------------------------------------------------------


def reshape(a, shape) -> Tensor:
    a = _coerce(a)
    shape = tuple(int(s) for s in shape)
    old = a.shape
    rec = lambda x: np.ascontiguousarray(x.reshape(shape))
    return _make_node(rec(a.data), (a,), (lambda g: reshape(g, old),), "reshape", rec)


def broadcast_to(a, shape) -> Tensor:
    a = _coerce(a)
    shape = tuple(int(s) for s in shape)
    _check_broadcast(a.shape, shape, "broadcast_to")
    old = a.shape
    rec = lambda x: np.ascontiguousarray(np.broadcast_to(x, shape))
    return _make_node(rec(a.data), (a,), (lambda g: _unbroadcast(g, old),), "broadcast_to", rec)


def concat(tensors, axis: int = 0) -> Tensor:
    tensors = [_coerce(t) for t in tensors]
    if not tensors:
        raise ContractError("concat: empty input")
    for t in tensors[1:]:
        _check_same_dtype(tensors[0], t, "concat")
    if axis not in (0, 1):
        raise DimensionError("concat: axis must be 0 or 1")
    rec = lambda *xs: np.concatenate(xs, axis=axis)
    data = rec(*[t.data for t in tensors])
    offsets = np.cumsum([0] + [t.shape[axis] for t in tensors])

    def make_vjp(i):
        start, stop = int(offsets[i]), int(offsets[i + 1])
        return lambda g: slice_axis(g, axis, start, stop)

    return _make_node(data, tuple(tensors), tuple(make_vjp(i) for i in range(len(tensors))), "concat", rec)


def slice_axis(a, axis: int, start: int, stop: int) -> Tensor:
    a = _coerce(a)
    if axis not in (0, 1) or axis >= a.ndim:
        raise DimensionError(f"slice_axis: bad axis {axis} for shape {a.shape}")
    n = a.shape[axis]
    if not (0 <= start <= stop <= n):
        raise DimensionError(f"slice_axis: [{start}:{stop}] out of range for axis size {n}")
    before, after = start, n - stop
    if axis == 0:
        rec = lambda x: np.ascontiguousarray(x[start:stop])
    else:
        rec = lambda x: np.ascontiguousarray(x[:, start:stop])
    return _make_node(
        rec(a.data), (a,), (lambda g: pad_zeros(g, axis, before, after),), "slice_axis", rec
    )


def pad_zeros(a, axis: int, before: int, after: int) -> Tensor:
    a = _coerce(a)
    if axis not in (0, 1) or axis >= a.ndim:
        raise DimensionError(f"pad_zeros: bad axis {axis} for shape {a.shape}")
    widths = [(0, 0)] * a.ndim
    widths[axis] = (before, after)
    start, stop = before, before + a.shape[axis]
    rec = lambda x: np.pad(x, widths)
    return _make_node(rec(a.data), (a,), (lambda g: slice_axis(g, axis, start, stop),), "pad_zeros", rec)


# -- reductions -----------------------------------------------------------------


def tsum(a, axis=None, keepdims: bool = False) -> Tensor:
    """Sum with float64 accumulation regardless of storage dtype."""
    a = _coerce(a)
    if axis is not None and not isinstance(axis, tuple):
        axis = (int(axis),)
    dtype = a.dtype
    rec = lambda x: np.sum(x, axis=axis, keepdims=keepdims, dtype=np.float64).astype(dtype)
    in_shape = a.shape

    def vjp(g):
        if axis is None:
            gg = reshape(g, (1,) * len(in_shape)) if in_shape else g
        elif not keepdims:
            kshape = list(in_shape)
            for ax in axis:
                kshape[ax] = 1
            gg = reshape(g, kshape)
        else:
            gg = g
        return broadcast_to(gg, in_shape)

    return _make_node(rec(a.data), (a,), (vjp,), "sum", rec)


def mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = _coerce(a)
    if axis is None:
        count = a.size
    else:
        axes = axis if isinstance(axis, tuple) else (axis,)
        count = int(np.prod([a.shape[ax] for ax in axes]))
    return div(tsum(a, axis=axis, keepdims=keepdims), float(count))


def sum_row_blocks(a, block: int) -> Tensor:
    """Collapse consecutive groups of `block` rows by summation.

    (B*block, d) -> (B, d). Pairs with repeat_rows for segment-style math.
    """
    a = _coerce(a)
    if a.ndim != 2 or a.shape[0] % block != 0:
        raise DimensionError(f"sum_row_blocks: shape {a.shape} not divisible into blocks of {block}")
    nb = a.shape[0] // block
    dtype = a.dtype
    rec = lambda x: np.sum(x.reshape(nb, block, x.shape[1]), axis=1, dtype=np.float64).astype(dtype)
    return _make_node(rec(a.data), (a,), (lambda g: repeat_rows(g, block),), "sum_row_blocks", rec)


def repeat_rows(a, k: int) -> Tensor:
    """Repeat each row k times: (B, d) -> (B*k, d)."""
    a = _coerce(a)
    if a.ndim != 2:
        raise DimensionError(f"repeat_rows: expects 2-d, got {a.shape}")
    rec = lambda x: np.repeat(x, k, axis=0)
    return _make_node(rec(a.data), (a,), (lambda g: sum_row_blocks(g, k),), "repeat_rows", rec)


# -- gather / scatter ------------------------------------------------------------


def take_rows(a, indices) -> Tensor:
    """Row gather; duplicate indices are fine (gradients accumulate)."""
    a = _coerce(a)
    idx = np.asarray(indices, dtype=np.int64)
    if idx.ndim != 1:
        raise DimensionError("take_rows: indices must be 1-d")
    if a.ndim != 2:
        raise DimensionError(f"take_rows: expects 2-d source, got {a.shape}")
    if idx.size and (idx.min() < 0 or idx.max() >= a.shape[0]):
        raise DimensionError("take_rows: index out of range")
    n = a.shape[0]
    rec = lambda x: x[idx]
    return _make_node(rec(a.data), (a,), (lambda g: scatter_rows(g, idx, n),), "take_rows", rec)


def scatter_rows(a, indices, n_rows: int) -> Tensor:
    """Scatter-add rows of `a` into a zero matrix with `n_rows` rows."""
    a = _coerce(a)
    idx = np.asarray(indices, dtype=np.int64)
    if a.ndim != 2 or idx.ndim != 1 or idx.size != a.shape[0]:
        raise DimensionError("scatter_rows: need 2-d values and one index per row")
    if idx.size and (idx.min() < 0 or idx.max() >= n_rows):
        raise DimensionError("scatter_rows: index out of range")

    def rec(x):
        out = np.zeros((n_rows, x.shape[1]), dtype=x.dtype)
        np.add.at(out, idx, x)
        return out

    return _make_node(rec(a.data), (a,), (lambda g: take_rows(g, idx),), "scatter_rows", rec)


# -- name-based dispatcher ---------------------------------------------------------

_ELEMENTWISE = {
    "add": add,
    "mul": mul,
    "leaky_relu": leaky_relu,
    "relu": relu,
    "sigmoid": sigmoid,
    "log": log,
    "exp": exp,
}


def elementwise(op: str, *tensors, **kwargs) -> Tensor:
    """Dispatch an elementwise op by name."""
    try:
        fn = _ELEMENTWISE[op]
    except KeyError:
        raise ContractError(f"elementwise: unknown op {op!r}") from None
    return fn(*tensors, **kwargs)


# Names the gradient-check suite must cover, one entry per registered op.
OP_NAMES = [
    "add",
    "sub",
    "mul",
    "div",
    "neg",
    "matmul",
    "transpose",
    "relu",
    "leaky_relu",
    "sigmoid",
    "exp",
    "log",
    "sqrt",
    "maximum",
    "clip",
    "sum",
    "mean",
    "reshape",
    "broadcast_to",
    "concat",
    "slice_axis",
    "pad_zeros",
    "sum_row_blocks",
    "repeat_rows",
    "take_rows",
    "scatter_rows",
    "spmm",
]


# -- backward --------------------------------------------------------------------


def _reachable(root: Tensor) -> list[Tensor]:
    seen = {}
    stack = [root]
    while stack:
        t = stack.pop()
        if t.node_id in seen:
            continue
        seen[t.node_id] = t
        stack.extend(t._parents)
    return sorted(seen.values(), key=lambda t: t.node_id, reverse=True)


def backward(loss: Tensor, wrt, create_graph: bool = False):
    """Gradients of a scalar loss w.r.t. a ParamSet or sequence of tensors.

    Returns gradients in the same order/keys as `wrt`; tensors that do not
    participate in the graph get zeros. With create_graph=True the backward
    pass is recorded so the result is differentiable again.
    """
    if loss.size != 1:
        raise ContractError(f"backward: loss must be scalar, got shape {loss.shape}")
    if isinstance(wrt, ParamSet):
        targets = list(wrt.tensors())
        names = list(wrt.names())
    else:
        targets = list(wrt)
        names = None
    if not loss.requires_grad:
        zeros = [Tensor(np.zeros_like(t.data)) for t in targets]
        return ParamSet(zip(names, zeros)) if names is not None else zeros

    order = _reachable(loss)
    grads: dict[int, Tensor] = {loss.node_id: Tensor(np.ones_like(loss.data))}
    wanted = {t.node_id for t in targets}
    held: dict[int, Tensor] = {}

    with _grad_mode(create_graph):
        for node in order:
            g = grads.pop(node.node_id, None)
            if g is None:
                continue
            if node.node_id in wanted:
                held[node.node_id] = g
            for parent, vjp in zip(node._parents, node._vjps):
                if not parent.requires_grad:
                    continue
                pg = vjp(g)
                prev = grads.get(parent.node_id)
                grads[parent.node_id] = pg if prev is None else add(prev, pg)

    out = []
    for t in targets:
        g = held.get(t.node_id)
        if g is None:
            g = Tensor(np.zeros_like(t.data))
        out.append(g)
    return ParamSet(zip(names, out)) if names is not None else out


# -- parameter sets ----------------------------------------------------------------


class ParamSet:
    """Named tensors with stable insertion order; flatten/unflatten helpers."""

    def __init__(self, items=None):
        self._items: dict[str, Tensor] = {}
        if items is not None:
            for name, t in dict(items).items() if isinstance(items, dict) else items:
                self.add(name, t)

    def add(self, name: str, tensor: Tensor) -> Tensor:
        if name in self._items:
            raise ContractError(f"ParamSet: duplicate name {name!r}")
        self._items[name] = tensor
        return tensor

    def names(self):
        return list(self._items.keys())

    def tensors(self):
        return list(self._items.values())

    def items(self):
        return list(self._items.items())

    def __getitem__(self, name: str) -> Tensor:
        return self._items[name]

    def __contains__(self, name: str) -> bool:
        return name in self._items

    def __len__(self) -> int:
        return len(self._items)

    def __iter__(self):
        return iter(self._items.items())

    def subset(self, names) -> "ParamSet":
        return ParamSet((n, self._items[n]) for n in names)

    def merge(self, other: "ParamSet", prefix: str = "") -> "ParamSet":
        for n, t in other:
            self.add(prefix + n, t)
        return self

    @property
    def total_size(self) -> int:
        return sum(t.size for t in self._items.values())

    def flatten(self) -> np.ndarray:
        if not self._items:
            return np.zeros(0)
        return np.concatenate([t.data.reshape(-1) for t in self._items.values()])

    def unflatten(self, vec: np.ndarray) -> "ParamSet":
        vec = np.asarray(vec)
        if vec.size != self.total_size:
            raise DimensionError(f"unflatten: got {vec.size} values, expected {self.total_size}")
        out = ParamSet()
        pos = 0
        for name, t in self._items.items():
            chunk = vec[pos : pos + t.size].reshape(t.shape).astype(t.dtype)
            out.add(name, Tensor(chunk, requires_grad=t.requires_grad))
            pos += t.size
        return out

    def flat_tensor(self) -> Tensor:
        """Differentiable flatten into a (1, total) tensor."""
        parts = [reshape(t, (1, t.size)) for t in self._items.values()]
        return concat(parts, axis=1)


# -- tape view ----------------------------------------------------------------------


class Tape:
    """Topologically ordered view of the graph below a tensor.

    `replay` re-runs every recorded op from the leaf values and verifies the
    stored results bit for bit.
    """

    def __init__(self, root: Tensor):
        self.nodes = list(reversed(_reachable(root)))

    def __len__(self) -> int:
        return len(self.nodes)

    def ordering_is_topological(self) -> bool:
        pos = {t.node_id: i for i, t in enumerate(self.nodes)}
        return all(pos[p.node_id] < pos[t.node_id] for t in self.nodes for p in t._parents)

    def replay(self) -> bool:
        for t in self.nodes:
            if not t._parents or t._recompute is None:
                continue
            fresh = t._recompute(*[p.data for p in t._parents])
            if fresh.dtype != t.data.dtype or not np.array_equal(fresh, t.data):
                return False
        return True


# -- sparse matrices ---------------------------------------------------------------


class CsrMatrix:
    """Validated CSR matrix with a cached transpose.

    Storage is delegated to scipy; this wrapper pins down construction
    checks (sorted unique columns per row, monotone row pointers, finite
    float values) and keeps the object immutable afterwards. The adjacency
    blocks built from it are constants of the model, so spmm differentiates
    only through the dense operand.
    """

    def __init__(self, shape, indptr, indices, values):
        n_rows, n_cols = int(shape[0]), int(shape[1])
        indptr = np.asarray(indptr, dtype=np.int64)
        indices = np.asarray(indices, dtype=np.int64)
        values = np.asarray(values)
        if values.dtype not in FLOAT_DTYPES:
            raise DimensionError(f"CsrMatrix: values must be float32/float64, got {values.dtype}")
        if indptr.ndim != 1 or indptr.size != n_rows + 1:
            raise DimensionError("CsrMatrix: indptr must have n_rows+1 entries")
        if indptr[0] != 0 or indptr[-1] != indices.size or indices.size != values.size:
            raise DimensionError("CsrMatrix: indptr endpoints disagree with nnz")
        if np.any(np.diff(indptr) < 0):
            raise DimensionError("CsrMatrix: indptr must be nondecreasing")
        if indices.size:
            if indices.min() < 0 or indices.max() >= n_cols:
                raise DimensionError("CsrMatrix: column index out of range")
            row_of = np.repeat(np.arange(n_rows), np.diff(indptr))
            same_row = row_of[1:] == row_of[:-1]
            if np.any((np.diff(indices) <= 0) & same_row):
                raise DimensionError("CsrMatrix: columns within a row must be sorted unique")
        if not np.isfinite(values).all():
            raise DimensionError("CsrMatrix: non-finite values")
        self._mat = sp.csr_matrix((values, indices, indptr), shape=(n_rows, n_cols))
        self._t: CsrMatrix | None = None

    @classmethod
    def from_coo(cls, rows, cols, values, shape, dtype=np.float32) -> "CsrMatrix":
        """Build from triplets; duplicate entries are summed."""
        m = sp.coo_matrix(
            (np.asarray(values, dtype=dtype), (np.asarray(rows), np.asarray(cols))), shape=shape
        ).tocsr()
        m.sum_duplicates()
        m.sort_indices()
        return cls(m.shape, m.indptr, m.indices, m.data)

    @classmethod
    def _wrap(cls, mat: sp.csr_matrix) -> "CsrMatrix":
        obj = cls.__new__(cls)
        obj._mat = mat
        obj._t = None
        return obj

    @property
    def shape(self):
        return self._mat.shape

    @property
    def nnz(self) -> int:
        return int(self._mat.nnz)

    @property
    def dtype(self):
        return self._mat.dtype

    @property
    def indptr(self) -> np.ndarray:
        return self._mat.indptr

    @property
    def indices(self) -> np.ndarray:
        return self._mat.indices

    @property
    def values(self) -> np.ndarray:
        return self._mat.data

    def toarray(self) -> np.ndarray:
        return self._mat.toarray()

    def row_degrees(self) -> np.ndarray:
        """Stored-entry count per row."""
        return np.diff(self._mat.indptr)

    def transpose(self) -> "CsrMatrix":
        if self._t is None:
            t = self._mat.T.tocsr()
            t.sort_indices()
            self._t = CsrMatrix._wrap(t)
            self._t._t = self
        return self._t

    @property
    def T(self) -> "CsrMatrix":
        return self.transpose()

    def __repr__(self):
        return f"CsrMatrix(shape={self.shape}, nnz={self.nnz}, dtype={self.dtype})"


def spmm(a: CsrMatrix, b) -> Tensor:
    """Sparse @ dense. Differentiable in the dense operand only."""
    if not isinstance(a, CsrMatrix):
        raise DimensionError("spmm: first operand must be a CsrMatrix")
    if not isinstance(b, Tensor):
        b = Tensor(b)
    if b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"spmm: inner dims differ, {a.shape} @ {b.shape}")
    at = a.transpose()
    rec = lambda x: np.ascontiguousarray(a._mat @ x)
    return _make_node(rec(b.data), (b,), (lambda g: spmm(at, g),), "spmm", rec)


# -- checkpoints ---------------------------------------------------------------------

CHECKPOINT_FORMAT = "flat-f32-v1"


def manifest_path(blob_path) -> Path:
    return Path(str(blob_path) + ".json")


def save_checkpoint(path, params, meta: dict | None = None) -> Path:
    """Write tensors as one little-endian float32 blob plus a JSON manifest.

    `params` is a ParamSet or a name->array mapping. All tensors must be
    float32; the round trip is bit-exact.
    """
    if isinstance(params, ParamSet):
        items = [(n, t.data) for n, t in params.items()]
    else:
        items = [(n, np.asarray(a)) for n, a in dict(params).items()]
    entries = []
    chunks = []
    offset = 0
    for name, arr in items:
        if arr.dtype != np.float32:
            raise ContractError(f"checkpoint: tensor {name!r} is {arr.dtype}, expected float32")
        raw = np.ascontiguousarray(arr, dtype="<f4").tobytes()
        entries.append(
            {
                "name": name,
                "shape": list(arr.shape),
                "dtype": "float32",
                "offset": offset,
                "nbytes": len(raw),
            }
        )
        chunks.append(raw)
        offset += len(raw)
    manifest = {
        "format": CHECKPOINT_FORMAT,
        "byte_order": "little",
        "total_bytes": offset,
        "tensors": entries,
        "meta": meta or {},
    }
    path = Path(path)
    path.write_bytes(b"".join(chunks))
    manifest_path(path).write_text(json.dumps(manifest, indent=1, sort_keys=True))
    return path


def load_checkpoint(path):
    """Read a checkpoint; returns (ordered name->float32 array dict, meta)."""
    path = Path(path)
    mpath = manifest_path(path)
    if not mpath.exists() and path.suffix == ".json":
        mpath, path = path, Path(str(path)[: -len(".json")])
    manifest = json.loads(mpath.read_text())
    if manifest.get("format") != CHECKPOINT_FORMAT:
        raise ContractError(f"checkpoint: unknown format {manifest.get('format')!r}")
    blob = path.read_bytes()
    if len(blob) != manifest["total_bytes"]:
        raise ContractError("checkpoint: blob size disagrees with manifest")
    out = {}
    for e in manifest["tensors"]:
        n = e["nbytes"] // 4
        arr = np.frombuffer(blob, dtype="<f4", count=n, offset=e["offset"])
        out[e["name"]] = arr.reshape(e["shape"]).copy()
    return out, manifest.get("meta", {})
