"""Dense tensors with reverse-mode automatic differentiation.

Every operation records the node that produced it, and every backward rule
is itself written in terms of tensor operations.  Calling ``backward`` (or
``grad``) with ``create_graph=True`` therefore produces gradients that are
nodes of a fresh graph and can be differentiated again, which is what the
gradient-penalty loss needs.

Conventions baked into this module:

* dtype is float32 unless a tensor was created with float64; binary ops
  promote to the wider dtype.
* ``backward`` on the same graph twice without clearing ``.grad``
  accumulates, i.e. two calls leave exactly 2x the gradient in ``.grad``.
* ReLU's second derivative is taken to be 0 everywhere (almost-everywhere
  correct); the activation mask is a constant of the backward graph.
* min/max reductions route their gradient to the first attaining index in
  row-major order.
* every op validates that its output is finite and raises
  ``NonFiniteError`` otherwise.
"""

from __future__ import annotations

import math
from contextlib import contextmanager
from typing import Callable, Iterable, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "ShapeError",
    "NonFiniteError",
    "GraphError",
    "no_grad",
    "is_grad_enabled",
    "backward",
    "grad",
    "gradient_check",
    "elementwise",
    "reduce",
    "add",
    "sub",
    "mul",
    "div",
    "neg",
    "exp",
    "log",
    "sqrt",
    "relu",
    "clamp",
    "power",
    "matmul",
    "reshape",
    "transpose",
    "broadcast_to",
    "concat",
    "take",
    "pad_constant",
    "unfold2d",
    "registered_ops",
    "RngStream",
]

_FLOAT_DEFAULT = np.float32


class ShapeError(ValueError):
    """Incompatible operand shapes; carries the offending shapes."""

    def __init__(self, op: str, *shapes):
        self.op = op
        self.shapes = tuple(tuple(s) for s in shapes)
        super().__init__(f"{op}: incompatible shapes {self.shapes}")


class NonFiniteError(ArithmeticError):
    """An op produced NaN or infinity; carries the op tag."""

    def __init__(self, op: str):
        self.op = op
        super().__init__(f"{op}: produced non-finite values")


class GraphError(RuntimeError):
    """Misuse of the computation graph (e.g. backward on a non-scalar)."""


_grad_enabled = True


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


def is_grad_enabled() -> bool:
    return _grad_enabled


def _as_float_array(data, dtype=None) -> np.ndarray:
    arr = np.asarray(data)
    if dtype is not None:
        return arr.astype(dtype, copy=False)
    if arr.dtype in (np.float32, np.float64):
        return arr
    return arr.astype(_FLOAT_DEFAULT)


class Tensor:
    """A dense float array that doubles as a node of the autodiff graph.

    ``op`` and ``parents`` are set only on tensors produced by a recorded
    operation; leaf tensors have neither.  ``grad`` is populated by
    ``backward`` for tensors with ``requires_grad=True`` and accumulates
    across calls until reset to ``None``.
    """

    __slots__ = ("data", "requires_grad", "grad", "op", "parents", "_rule")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        self.data = _as_float_array(data, dtype)
        self.requires_grad = bool(requires_grad)
        self.grad: Tensor | None = None
        self.op: str | None = None
        self.parents: tuple[Tensor, ...] = ()
        self._rule: Callable | None = None

    # -- basic introspection ------------------------------------------------

    @property
    def shape(self) -> tuple[int, ...]:
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
        return float(self.data.reshape(-1)[0])

    def numpy(self) -> np.ndarray:
        return self.data

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor({self.data!r}{flag})"

    def __len__(self):
        return self.data.shape[0]

    # -- graph helpers ------------------------------------------------------

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False)

    def astype(self, dtype) -> "Tensor":
        return _cast(self, dtype)

    def backward(self, create_graph: bool = False):
        return backward(self, create_graph=create_graph)

    # -- operator sugar -----------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(_wrap(other, self.dtype), self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(_wrap(other, self.dtype), self)

    def __neg__(self):
        return neg(self)

    def __pow__(self, exponent):
        return power(self, exponent)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return _slice(self, key)

    def exp(self):
        return exp(self)

    def log(self):
        return log(self)

    def sqrt(self):
        return sqrt(self)

    def relu(self):
        return relu(self)

    def clamp(self, lo=None, hi=None):
        return clamp(self, lo, hi)

    def sum(self, axes=None, keepdims: bool = False):
        return reduce("sum", self, axes, keepdims)

    def mean(self, axes=None, keepdims: bool = False):
        return reduce("mean", self, axes, keepdims)

    def min(self, axes=None, keepdims: bool = False):
        return reduce("min", self, axes, keepdims)

    def max(self, axes=None, keepdims: bool = False):
        return reduce("max", self, axes, keepdims)

    def reshape(self, shape):
        return reshape(self, shape)

    def transpose(self, axes=None):
        return transpose(self, axes)

    @property
    def T(self):
        return transpose(self)

    def broadcast_to(self, shape):
        return broadcast_to(self, shape)


def _wrap(value, dtype) -> Tensor:
    if isinstance(value, Tensor):
        return value
    return Tensor(np.asarray(value, dtype=dtype))


def _result_dtype(*tensors: Tensor):
    return np.float64 if any(t.dtype == np.float64 for t in tensors) else np.float32


def _make_node(op: str, out_data: np.ndarray, parents: Sequence[Tensor], rule) -> Tensor:
    if not np.all(np.isfinite(out_data)):
        raise NonFiniteError(op)
    out = Tensor(out_data)
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out.op = op
        out.parents = tuple(parents)
        out._rule = rule
    return out


def _unbroadcast(g: Tensor, shape: tuple[int, ...]) -> Tensor:
    """Sum a gradient down to ``shape`` (the inverse of numpy broadcasting)."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axes=tuple(range(extra)))
    squashed = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if squashed:
        g = g.sum(axes=squashed, keepdims=True)
    if g.shape != shape:
        g = g.reshape(shape)
    return g


# ---------------------------------------------------------------------------
# op registry
# ---------------------------------------------------------------------------

# tag -> (arity, builder); used by the dispatch helpers and by the test
# suite to sweep gradient checks over everything that is registered.
_ELEMENTWISE: dict[str, Callable] = {}
_REDUCE: dict[str, Callable] = {}


def registered_ops() -> dict[str, tuple]:
    """Snapshot of registered op tags: tag -> ('elementwise'|'reduce'|'linalg', arity)."""
    table = {tag: ("elementwise", fn.__code__.co_argcount) for tag, fn in _ELEMENTWISE.items()}
    table.update({tag: ("reduce", 1) for tag in _REDUCE})
    table["matmul"] = ("linalg", 2)
    return table


def elementwise(op_tag: str, a: Tensor, b: Tensor | None = None) -> Tensor:
    """Dispatch an elementwise op by tag (add/sub/mul/div/exp/log/neg/relu/...)."""
    try:
        fn = _ELEMENTWISE[op_tag]
    except KeyError:
        raise ValueError(f"unknown elementwise op {op_tag!r}") from None
    return fn(a) if b is None else fn(a, b)


def reduce(op_tag: str, a: Tensor, axes=None, keepdims: bool = False) -> Tensor:
    """Dispatch a reduction (sum/mean/min/max) over the given axes."""
    try:
        fn = _REDUCE[op_tag]
    except KeyError:
        raise ValueError(f"unknown reduce op {op_tag!r}") from None
    return fn(a, axes, keepdims)


def _register(table: dict, tag: str):
    def deco(fn):
        table[tag] = fn
        return fn

    return deco


# ---------------------------------------------------------------------------
# elementwise ops
# ---------------------------------------------------------------------------


def _binary(op: str, a, b, fwd, rule_builder) -> Tensor:
    a = a if isinstance(a, Tensor) else Tensor(np.asarray(a, dtype=_FLOAT_DEFAULT))
    b = b if isinstance(b, Tensor) else _wrap(b, a.dtype)
    dtype = _result_dtype(a, b)
    try:
        with np.errstate(all="ignore"):
            out = fwd(a.data.astype(dtype, copy=False), b.data.astype(dtype, copy=False))
    except ValueError:
        raise ShapeError(op, a.shape, b.shape) from None
    return _make_node(op, out, (a, b), rule_builder(a, b))


@_register(_ELEMENTWISE, "add")
def add(a, b) -> Tensor:
    def rule(a, b):
        return lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape))

    return _binary("add", a, b, np.add, rule)


@_register(_ELEMENTWISE, "sub")
def sub(a, b) -> Tensor:
    def rule(a, b):
        return lambda g: (_unbroadcast(g, a.shape), _unbroadcast(neg(g), b.shape))

    return _binary("sub", a, b, np.subtract, rule)


@_register(_ELEMENTWISE, "mul")
def mul(a, b) -> Tensor:
    def rule(a, b):
        return lambda g: (_unbroadcast(g * b, a.shape), _unbroadcast(g * a, b.shape))

    return _binary("mul", a, b, np.multiply, rule)


@_register(_ELEMENTWISE, "div")
def div(a, b) -> Tensor:
    def rule(a, b):
        return lambda g: (
            _unbroadcast(g / b, a.shape),
            _unbroadcast(neg(g * a / (b * b)), b.shape),
        )

    return _binary("div", a, b, np.divide, rule)


def _unary(op: str, a, fwd, rule_builder) -> Tensor:
    a = a if isinstance(a, Tensor) else Tensor(np.asarray(a, dtype=_FLOAT_DEFAULT))
    with np.errstate(all="ignore"):
        out = fwd(a.data)
    return _make_node(op, out, (a,), rule_builder(a, out))


@_register(_ELEMENTWISE, "neg")
def neg(a) -> Tensor:
    return _unary("neg", a, np.negative, lambda a, out: lambda g: (neg(g),))


@_register(_ELEMENTWISE, "exp")
def exp(a) -> Tensor:
    def rule(a, out_data):
        def bw(g):
            return (g * exp(a),)

        return bw

    return _unary("exp", a, np.exp, rule)


@_register(_ELEMENTWISE, "log")
def log(a) -> Tensor:
    return _unary("log", a, np.log, lambda a, out: lambda g: (g / a,))


@_register(_ELEMENTWISE, "sqrt")
def sqrt(a) -> Tensor:
    def rule(a, out_data):
        def bw(g):
            return (g * 0.5 / sqrt(a),)

        return bw

    return _unary("sqrt", a, np.sqrt, rule)


@_register(_ELEMENTWISE, "relu")
def relu(a) -> Tensor:
    # second derivative defined as 0 everywhere: the mask is a constant
    def rule(a, out_data):
        mask = Tensor((a.data > 0).astype(a.dtype))
        return lambda g: (g * mask,)

    return _unary("relu", a, lambda x: np.maximum(x, 0), rule)


@_register(_ELEMENTWISE, "clamp")
def clamp(a, lo=None, hi=None) -> Tensor:
    """Clip to [lo, hi]; gradient passes only where the input was in range."""
    a = a if isinstance(a, Tensor) else Tensor(np.asarray(a, dtype=_FLOAT_DEFAULT))
    out = np.clip(a.data, lo, hi)

    inside = np.ones_like(a.data)
    if lo is not None:
        inside = inside * (a.data >= lo)
    if hi is not None:
        inside = inside * (a.data <= hi)
    mask = Tensor(inside.astype(a.dtype))
    return _make_node("clamp", out, (a,), lambda g: (g * mask,))


@_register(_ELEMENTWISE, "pow")
def power(a, exponent: float) -> Tensor:
    a = a if isinstance(a, Tensor) else Tensor(np.asarray(a, dtype=_FLOAT_DEFAULT))
    p = float(exponent)
    with np.errstate(all="ignore"):
        out = np.power(a.data, p)

    def bw(g):
        return (g * p * power(a, p - 1.0),) if p != 1.0 else (g,)

    return _make_node("pow", out, (a,), bw)


def _cast(a: Tensor, dtype) -> Tensor:
    dtype = np.dtype(dtype)
    if a.dtype == dtype:
        return a
    out = a.data.astype(dtype)
    return _make_node("cast", out, (a,), lambda g: (_cast(g, a.dtype),))


# ---------------------------------------------------------------------------
# matmul
# ---------------------------------------------------------------------------


def matmul(a, b) -> Tensor:
    """Strict 2-D matrix product [m,k] @ [k,n] -> [m,n]."""
    a = a if isinstance(a, Tensor) else Tensor(np.asarray(a, dtype=_FLOAT_DEFAULT))
    b = b if isinstance(b, Tensor) else _wrap(b, a.dtype)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError("matmul", a.shape, b.shape)
    dtype = _result_dtype(a, b)
    out = a.data.astype(dtype, copy=False) @ b.data.astype(dtype, copy=False)

    def bw(g):
        return (matmul(g, transpose(b)), matmul(transpose(a), g))

    return _make_node("matmul", out, (a, b), bw)


# ---------------------------------------------------------------------------
# reductions
# ---------------------------------------------------------------------------


def _norm_axes(axes, ndim: int) -> tuple[int, ...]:
    if axes is None:
        return tuple(range(ndim))
    if isinstance(axes, int):
        axes = (axes,)
    return tuple(sorted(ax % ndim for ax in axes))


def _check_nonempty(op: str, a: Tensor, axes: tuple[int, ...]):
    for ax in axes:
        if a.shape[ax] == 0:
            raise ShapeError(op, a.shape, ("axis", ax, "empty"))


def _keepdims_shape(shape, axes):
    return tuple(1 if i in axes else n for i, n in enumerate(shape))


def _restore(g: Tensor, shape, axes, keepdims: bool) -> Tensor:
    if not keepdims:
        g = g.reshape(_keepdims_shape(shape, axes))
    return broadcast_to(g, shape)


@_register(_REDUCE, "sum")
def _sum(a: Tensor, axes=None, keepdims: bool = False) -> Tensor:
    axes = _norm_axes(axes, a.ndim)
    _check_nonempty("sum", a, axes)
    out = np.sum(a.data, axis=axes, keepdims=keepdims)

    def bw(g):
        return (_restore(g, a.shape, axes, keepdims),)

    return _make_node("sum", out, (a,), bw)


@_register(_REDUCE, "mean")
def _mean(a: Tensor, axes=None, keepdims: bool = False) -> Tensor:
    axes = _norm_axes(axes, a.ndim)
    _check_nonempty("mean", a, axes)
    count = int(np.prod([a.shape[ax] for ax in axes])) if axes else 1
    out = np.mean(a.data, axis=axes, keepdims=keepdims)

    def bw(g):
        return (_restore(g, a.shape, axes, keepdims) * (1.0 / count),)

    return _make_node("mean", out, (a,), bw)


def _extreme(tag: str, np_fn, np_arg, a: Tensor, axes, keepdims: bool) -> Tensor:
    axes = _norm_axes(axes, a.ndim)
    _check_nonempty(tag, a, axes)
    out = np_fn(a.data, axis=axes, keepdims=keepdims)

    # route gradient to the first attaining index in row-major order
    kept = tuple(i for i in range(a.ndim) if i not in axes)
    moved = np.moveaxis(a.data, axes, range(len(kept), a.ndim))
    flat = moved.reshape(moved.shape[: len(kept)] + (-1,))
    winner = np_arg(flat, axis=-1)
    mask_flat = np.zeros_like(flat)
    np.put_along_axis(mask_flat, winner[..., None], 1.0, axis=-1)
    mask = np.moveaxis(mask_flat.reshape(moved.shape), range(len(kept), a.ndim), axes)
    mask_t = Tensor(mask.astype(a.dtype))

    def bw(g):
        return (_restore(g, a.shape, axes, keepdims) * mask_t,)

    return _make_node(tag, out, (a,), bw)


@_register(_REDUCE, "min")
def _min(a: Tensor, axes=None, keepdims: bool = False) -> Tensor:
    return _extreme("min", np.min, np.argmin, a, axes, keepdims)


@_register(_REDUCE, "max")
def _max(a: Tensor, axes=None, keepdims: bool = False) -> Tensor:
    return _extreme("max", np.max, np.argmax, a, axes, keepdims)


# ---------------------------------------------------------------------------
# shape ops
# ---------------------------------------------------------------------------


def reshape(a: Tensor, shape) -> Tensor:
    shape = tuple(shape) if isinstance(shape, Iterable) else (shape,)
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise ShapeError("reshape", a.shape, shape) from None

    def bw(g):
        return (reshape(g, a.shape),)

    return _make_node("reshape", out, (a,), bw)


def transpose(a: Tensor, axes=None) -> Tensor:
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))
    out = np.transpose(a.data, axes)

    def bw(g):
        return (transpose(g, inverse),)

    return _make_node("transpose", out, (a,), bw)


def broadcast_to(a: Tensor, shape) -> Tensor:
    shape = tuple(shape)
    if a.shape == shape:
        return a
    try:
        out = np.broadcast_to(a.data, shape).copy()
    except ValueError:
        raise ShapeError("broadcast", a.shape, shape) from None

    def bw(g):
        return (_unbroadcast(g, a.shape),)

    return _make_node("broadcast", out, (a,), bw)


def _slice(a: Tensor, key) -> Tensor:
    out = a.data[key]
    if np.isscalar(out) or out.ndim == 0:
        out = np.asarray(out)

    def bw(g):
        return (_embed(g, a.shape, key),)

    return _make_node("slice", out, (a,), bw)


def _embed(g: Tensor, shape, key) -> Tensor:
    """Place ``g`` into a zero tensor of ``shape`` at ``key`` (adjoint of slicing)."""
    out = np.zeros(shape, dtype=g.dtype)
    out[key] = g.data

    def bw(gg):
        return (_slice(gg, key),)

    return _make_node("embed", out, (g,), bw)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = list(tensors)
    dtype = _result_dtype(*tensors)
    out = np.concatenate([t.data.astype(dtype, copy=False) for t in tensors], axis=axis)
    offsets = np.cumsum([0] + [t.shape[axis] for t in tensors])

    def bw(g):
        grads = []
        for t, lo, hi in zip(tensors, offsets[:-1], offsets[1:]):
            key = tuple(
                slice(int(lo), int(hi)) if i == (axis % g.ndim) else slice(None)
                for i in range(g.ndim)
            )
            grads.append(_slice(g, key))
        return tuple(grads)

    return _make_node("concat", out, tensors, bw)


def take(a: Tensor, indices, axis: int = 0) -> Tensor:
    """Gather along ``axis`` with constant integer indices."""
    idx = np.asarray(indices, dtype=np.intp)
    out = np.take(a.data, idx, axis=axis)

    def bw(g):
        return (_scatter_add(g, idx, axis, a.shape),)

    return _make_node("take", out, (a,), bw)


def _scatter_add(g: Tensor, idx: np.ndarray, axis: int, shape) -> Tensor:
    out = np.zeros(shape, dtype=g.dtype)
    moved = np.moveaxis(out, axis, 0)
    np.add.at(moved, idx, np.moveaxis(g.data, axis, 0))

    def bw(gg):
        return (take(gg, idx, axis),)

    return _make_node("scatter_add", out, (g,), bw)


def pad_constant(a: Tensor, pad_width, value: float = 0.0) -> Tensor:
    pad_width = tuple((int(lo), int(hi)) for lo, hi in pad_width)
    out = np.pad(a.data, pad_width, mode="constant", constant_values=value)
    key = tuple(slice(lo, lo + n) for (lo, _), n in zip(pad_width, a.shape))

    def bw(g):
        return (_slice(g, key),)

    return _make_node("pad", out, (a,), bw)


def unfold2d(a: Tensor, kernel: tuple[int, int], stride: int = 1) -> Tensor:
    """Extract sliding patches from [B,C,H,W] into [B, C, kh, kw, oh, ow].

    Input is expected to be padded already.  This is linear, so it is
    exactly twice-differentiable; its adjoint is the overlapping
    scatter-add ``_fold2d``.
    """
    kh, kw = kernel
    b, c, h, w = a.shape
    oh = (h - kh) // stride + 1
    ow = (w - kw) // stride + 1
    if oh <= 0 or ow <= 0:
        raise ShapeError("unfold2d", a.shape, (kh, kw))
    out = np.empty((b, c, kh, kw, oh, ow), dtype=a.dtype)
    for i in range(kh):
        for j in range(kw):
            out[:, :, i, j] = a.data[:, :, i : i + stride * oh : stride, j : j + stride * ow : stride]

    def bw(g):
        return (_fold2d(g, (b, c, h, w), stride),)

    return _make_node("unfold2d", out, (a,), bw)


def _fold2d(g: Tensor, out_shape, stride: int) -> Tensor:
    b, c, h, w = out_shape
    _, _, kh, kw, oh, ow = g.shape
    out = np.zeros(out_shape, dtype=g.dtype)
    for i in range(kh):
        for j in range(kw):
            out[:, :, i : i + stride * oh : stride, j : j + stride * ow : stride] += g.data[:, :, i, j]

    def bw(gg):
        return (unfold2d(gg, (kh, kw), stride),)

    return _make_node("fold2d", out, (g,), bw)


# ---------------------------------------------------------------------------
# backward pass
# ---------------------------------------------------------------------------


def _topo_order(root: Tensor) -> list[Tensor]:
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
        for p in node.parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def _accumulate_into(table: dict[int, Tensor], node: Tensor, g: Tensor):
    prev = table.get(id(node))
    table[id(node)] = g if prev is None else prev + g


def _run_backward(root: Tensor, seed: Tensor, create_graph: bool):
    order = _topo_order(root)
    grads: dict[int, Tensor] = {id(root): seed}
    global _grad_enabled
    prev_mode = _grad_enabled
    _grad_enabled = create_graph
    try:
        for node in reversed(order):
            g = grads.get(id(node))
            if g is None or node._rule is None:
                continue
            parent_grads = node._rule(g)
            for parent, pg in zip(node.parents, parent_grads):
                if pg is None or not parent.requires_grad:
                    continue
                _accumulate_into(grads, parent, pg)
    finally:
        _grad_enabled = prev_mode
    return grads, order


def backward(root: Tensor, create_graph: bool = False) -> dict[Tensor, Tensor]:
    """Backpropagate from a scalar root; accumulate into ``.grad`` of leaves.

    Returns the gradients computed by this call as a table keyed by leaf
    tensor.  Repeated calls accumulate into ``.grad`` (two identical calls
    leave exactly twice the gradient).
    """
    if root.size != 1:
        raise GraphError(f"backward requires a scalar root, got shape {root.shape}")
    if not root.requires_grad:
        raise GraphError("backward on a tensor that does not require grad")
    seed = Tensor(np.ones_like(root.data))
    grads, order = _run_backward(root, seed, create_graph)

    table: dict[Tensor, Tensor] = {}
    for node in order:
        if node._rule is None and node.requires_grad and id(node) in grads:
            g = grads[id(node)]
            table[node] = g
            node.grad = g if node.grad is None else Tensor(node.grad.data + g.data)
    return table


def grad(
    output: Tensor,
    inputs: Sequence[Tensor],
    create_graph: bool = False,
    allow_unused: bool = False,
) -> list[Tensor]:
    """Functional gradients of a scalar output w.r.t. ``inputs``.

    Does not touch ``.grad``.  With ``create_graph=True`` the returned
    tensors are differentiable.
    """
    if output.size != 1:
        raise GraphError(f"grad requires a scalar output, got shape {output.shape}")
    seed = Tensor(np.ones_like(output.data))
    grads, _ = _run_backward(output, seed, create_graph)
    results = []
    for t in inputs:
        g = grads.get(id(t))
        if g is None:
            if not allow_unused:
                raise GraphError("an input does not participate in the output graph")
            g = Tensor(np.zeros_like(t.data))
        results.append(g)
    return results


def gradient_check(f: Callable[[Tensor], Tensor], x: Tensor, step: float = 1e-5) -> float:
    """Max relative error between analytic and central-difference gradients.

    Relative error per coordinate is |analytic - numeric| divided by
    (|analytic| + |numeric| + 1e-12).
    """
    x_eval = Tensor(x.data.copy(), requires_grad=True, dtype=x.dtype)
    (analytic,) = grad(f(x_eval), [x_eval])
    analytic = analytic.data

    numeric = np.zeros_like(x.data)
    for i in range(x.size):
        hi = _fd_perturb(f, x, i, +step)
        lo = _fd_perturb(f, x, i, -step)
        numeric.flat[i] = (hi - lo) / (2 * step)

    err = np.abs(analytic - numeric) / (np.abs(analytic) + np.abs(numeric) + 1e-12)
    return float(err.max()) if err.size else 0.0


def _fd_perturb(f, x: Tensor, index: int, step: float) -> float:
    probe = x.data.copy()
    probe.flat[index] += step
    with no_grad():
        return f(Tensor(probe, dtype=x.dtype)).item()


# ---------------------------------------------------------------------------
# random streams
# ---------------------------------------------------------------------------


class RngStream:
    """Counter-based random stream with a reproducible position.

    Uniform and Gaussian draws are deterministic functions of
    (seed, position): raw 64-bit Philox words are mapped to uniforms, and
    Gaussians come from a Box-Muller transform of uniform pairs.  The same
    (seed, position) pair replays the identical values in any process.
    """

    def __init__(self, seed: int, position: int = 0):
        self.seed = int(seed)
        self.position = 0
        self._bits = np.random.Philox(key=self.seed)
        if position:
            self.skip_to(position)

    def skip_to(self, position: int):
        """Jump the stream to an absolute draw position by replaying raw words."""
        if position < self.position:
            self._bits = np.random.Philox(key=self.seed)
            self.position = 0
        delta = position - self.position
        while delta > 0:
            chunk = min(delta, 1 << 20)
            self._bits.random_raw(chunk)
            delta -= chunk
        self.position = position
        return self

    def _raw(self, n: int) -> np.ndarray:
        words = np.atleast_1d(self._bits.random_raw(n))
        self.position += n
        return words

    def uniform(self, shape=(), dtype=np.float64) -> np.ndarray:
        """Uniform draws in [0, 1)."""
        n = int(np.prod(shape)) if shape else 1
        u = (self._raw(n) >> np.uint64(11)) * (2.0 ** -53)
        out = u.reshape(shape) if shape else u[0]
        return np.asarray(out, dtype=dtype)

    def normal(self, shape=(), dtype=np.float64) -> np.ndarray:
        """Standard normal draws via Box-Muller over the uniform stream."""
        n = int(np.prod(shape)) if shape else 1
        pairs = (n + 1) // 2
        raw = self._raw(2 * pairs)
        u1 = ((raw[:pairs] >> np.uint64(11)) + np.uint64(1)) * (2.0 ** -53)  # (0, 1]
        u2 = (raw[pairs:] >> np.uint64(11)) * (2.0 ** -53)  # [0, 1)
        radius = np.sqrt(-2.0 * np.log(u1))
        angle = 2.0 * math.pi * u2
        z = np.concatenate([radius * np.cos(angle), radius * np.sin(angle)])[:n]
        out = z.reshape(shape) if shape else z[0]
        return np.asarray(out, dtype=dtype)

    def integers(self, upper: int, shape=()) -> np.ndarray:
        """Uniform integers in [0, upper) by rejection-free modular mapping."""
        n = int(np.prod(shape)) if shape else 1
        raw = self._raw(n)
        vals = (raw % np.uint64(upper)).astype(np.int64)
        return vals.reshape(shape) if shape else int(vals[0])

    def permutation(self, n: int) -> np.ndarray:
        """Deterministic Fisher-Yates shuffle of range(n)."""
        order = np.arange(n)
        if n <= 1:
            return order
        draws = self._raw(n - 1)
        for i in range(n - 1, 0, -1):
            j = int(draws[n - 1 - i] % np.uint64(i + 1))
            order[i], order[j] = order[j], order[i]
        return order

    def child(self, tag: int) -> "RngStream":
        """Derive an independent stream (distinct key) from this seed."""
        return RngStream(seed=(self.seed * 0x9E3779B97F4A7C15 + tag + 1) % (2**63))
