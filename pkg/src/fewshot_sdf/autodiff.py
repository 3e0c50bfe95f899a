"""Reverse-mode differentiation over float64 numpy arrays.

Every operation records a node whose backward rule is itself written with the
same differentiable operations. Running :func:`grad` with
``create_graph=True`` therefore records the backward pass as new nodes, so the
returned gradients can be differentiated again. That is what the outer
meta-learning step needs when it back-propagates through inner SGD steps.

Node ids come from a global counter, so a node's inputs always have smaller ids
than the node itself and sorting by id gives a valid reverse topological order.
"""

from __future__ import annotations

import itertools
import threading
import weakref
from contextlib import contextmanager
from typing import Callable, Iterable, Iterator, Mapping, Sequence

import numpy as np

__all__ = [
    "NumericalError",
    "Tensor",
    "ParamSet",
    "no_grad",
    "grad_mode",
    "is_grad_enabled",
    "tensor",
    "elementwise",
    "reduce",
    "add",
    "sub",
    "mul",
    "scale",
    "neg",
    "absolute",
    "relu",
    "tanh",
    "matmul",
    "transpose",
    "reshape",
    "tsum",
    "mean",
    "concat",
    "take",
    "scatter_sum",
    "im2col",
    "col2im",
    "conv3d",
    "conv_output_size",
    "grad",
    "finite_diff_check",
    "finite_diff_errors",
]


class NumericalError(FloatingPointError):
    """A gradient or forward value turned non-finite."""

    def __init__(self, message: str, node_id: int | None = None):
        super().__init__(message)
        self.node_id = node_id


_ids = itertools.count()
_state = threading.local()


def is_grad_enabled() -> bool:
    return getattr(_state, "enabled", True)


@contextmanager
def grad_mode(enabled: bool) -> Iterator[None]:
    prev = is_grad_enabled()
    _state.enabled = bool(enabled)
    try:
        yield
    finally:
        _state.enabled = prev


def no_grad():
    return grad_mode(False)


class Tensor:
    """A float64 array plus the record of how it was computed."""

    __slots__ = ("data", "requires_grad", "parents", "backward_fn", "op", "id", "__weakref__")
    __array_priority__ = 100.0

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.parents: tuple[Tensor, ...] = ()
        self.backward_fn: Callable | None = None
        self.op = "leaf"
        self.id = next(_ids)

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
    def T(self) -> "Tensor":
        return transpose(self)

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, op={self.op}, id={self.id}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, float(other))
        return mul(self, other)

    def __rmul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, float(other))
        return mul(other, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)

    def __getitem__(self, key):
        return getitem(self, key)

    def sum(self, axis=None, keepdims: bool = False) -> "Tensor":
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims: bool = False) -> "Tensor":
        return mean(self, axis, keepdims)

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def relu(self) -> "Tensor":
        return relu(self)

    def tanh(self) -> "Tensor":
        return tanh(self)

    def abs(self) -> "Tensor":
        return absolute(self)


def tensor(x, requires_grad: bool = False) -> Tensor:
    return Tensor(x, requires_grad=requires_grad)


def _t(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _record(data: np.ndarray, parents: Sequence[Tensor], backward: Callable, op: str) -> Tensor:
    out = Tensor(data)
    if is_grad_enabled() and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out.parents = tuple(parents)
        out.backward_fn = backward
        out.op = op
    return out


def _broadcast_shape(a: Tensor, b: Tensor, op: str) -> tuple[int, ...]:
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ValueError(f"{op}: shapes {a.shape} and {b.shape} are not broadcastable") from None


def _unbroadcast(g: Tensor, shape: tuple[int, ...]) -> Tensor:
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    axes = list(range(extra))
    for i, n in enumerate(shape):
        if n == 1 and g.shape[extra + i] != 1:
            axes.append(extra + i)
    out = tsum(g, axis=tuple(axes), keepdims=True) if axes else g
    return reshape(out, shape)


# -- elementwise ----------------------------------------------------------------


def add(a, b) -> Tensor:
    a, b = _t(a), _t(b)
    _broadcast_shape(a, b, "add")
    return _record(
        a.data + b.data,
        (a, b),
        lambda g, need: (
            _unbroadcast(g, a.shape) if need[0] else None,
            _unbroadcast(g, b.shape) if need[1] else None,
        ),
        "add",
    )


def sub(a, b) -> Tensor:
    a, b = _t(a), _t(b)
    _broadcast_shape(a, b, "sub")
    return _record(
        a.data - b.data,
        (a, b),
        lambda g, need: (
            _unbroadcast(g, a.shape) if need[0] else None,
            _unbroadcast(neg(g), b.shape) if need[1] else None,
        ),
        "sub",
    )


def mul(a, b) -> Tensor:
    a, b = _t(a), _t(b)
    _broadcast_shape(a, b, "mul")
    return _record(
        a.data * b.data,
        (a, b),
        lambda g, need: (
            _unbroadcast(mul(g, b), a.shape) if need[0] else None,
            _unbroadcast(mul(g, a), b.shape) if need[1] else None,
        ),
        "mul",
    )


def scale(a, c: float) -> Tensor:
    a = _t(a)
    c = float(c)
    return _record(a.data * c, (a,), lambda g, need: (scale(g, c),), "scale")


def neg(a) -> Tensor:
    return scale(a, -1.0)


def absolute(a) -> Tensor:
    a = _t(a)
    sign = Tensor(np.sign(a.data))
    return _record(np.abs(a.data), (a,), lambda g, need: (mul(g, sign),), "abs")


def relu(a) -> Tensor:
    # derivative at exactly 0 is taken as 0
    a = _t(a)
    mask = Tensor((a.data > 0.0).astype(np.float64))
    return _record(a.data * mask.data, (a,), lambda g, need: (mul(g, mask),), "relu")


def tanh(a) -> Tensor:
    a = _t(a)
    out = _record(np.tanh(a.data), (a,), None, "tanh")
    if out.requires_grad:
        # 1 - y^2 built from the output node so it stays differentiable; a weak
        # reference avoids a node -> closure -> node cycle that would pin the graph
        ref = weakref.ref(out)

        def backward(g, need):
            y = ref()
            return (mul(g, sub(1.0, mul(y, y))),)

        out.backward_fn = backward
    return out


_ELEMENTWISE = {
    "add": add,
    "sub": sub,
    "mul": mul,
    "abs": absolute,
    "relu": relu,
    "tanh": tanh,
}


def elementwise(op: str, a, b=None) -> Tensor:
    """Dispatch by name; ``scale`` expects a python scalar as ``b``."""
    if op == "scale":
        return scale(a, b)
    fn = _ELEMENTWISE.get(op)
    if fn is None:
        raise ValueError(f"unknown elementwise op {op!r}")
    if op in ("add", "sub", "mul"):
        if b is None:
            raise ValueError(f"{op} needs two operands")
        return fn(a, b)
    return fn(a)


# -- shape and linear algebra -----------------------------------------------------


def matmul(a, b) -> Tensor:
    a, b = _t(a), _t(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ValueError(f"matmul: cannot multiply {a.shape} by {b.shape}")
    return _record(
        a.data @ b.data,
        (a, b),
        lambda g, need: (
            matmul(g, transpose(b)) if need[0] else None,
            matmul(transpose(a), g) if need[1] else None,
        ),
        "matmul",
    )


def transpose(a) -> Tensor:
    a = _t(a)
    if a.ndim != 2:
        raise ValueError(f"transpose expects a matrix, got shape {a.shape}")
    return _record(a.data.T, (a,), lambda g, need: (transpose(g),), "transpose")


def reshape(a, shape) -> Tensor:
    a = _t(a)
    shape = tuple(int(s) for s in shape)
    data = a.data.reshape(shape)
    return _record(data, (a,), lambda g, need: (reshape(g, a.shape),), "reshape")


def _expand(a: Tensor, shape: tuple[int, ...]) -> Tensor:
    return _record(
        np.broadcast_to(a.data, shape),
        (a,),
        lambda g, need: (_unbroadcast(g, a.shape),),
        "expand",
    )


def _norm_axes(axis, ndim: int) -> tuple[int, ...]:
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    out = []
    for ax in axis:
        if not -ndim <= ax < ndim:
            raise ValueError(f"axis {ax} out of range for {ndim}-d array")
        out.append(ax % ndim)
    return tuple(sorted(set(out)))


def tsum(a, axis=None, keepdims: bool = False) -> Tensor:
    a = _t(a)
    axes = _norm_axes(axis, a.ndim)
    if any(a.shape[ax] == 0 for ax in axes) or (a.size == 0):
        raise ValueError(f"sum over an empty reduction (shape {a.shape})")
    kept = tuple(1 if i in axes else n for i, n in enumerate(a.shape))

    def backward(g, need):
        return (_expand(reshape(g, kept), a.shape),)

    return _record(a.data.sum(axis=axes, keepdims=keepdims), (a,), backward, "sum")


def mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = _t(a)
    axes = _norm_axes(axis, a.ndim)
    count = int(np.prod([a.shape[ax] for ax in axes])) if axes else 1
    if count == 0 or a.size == 0:
        raise ValueError(f"mean over an empty reduction (shape {a.shape})")
    return scale(tsum(a, axes, keepdims), 1.0 / count)


def reduce(op: str, a, axes=None) -> Tensor:
    if op == "sum":
        return tsum(a, axes)
    if op == "mean":
        return mean(a, axes)
    raise ValueError(f"unknown reduction {op!r}")


def getitem(a, key) -> Tensor:
    a = _t(a)
    return _record(a.data[key], (a,), lambda g, need: (_index_add(g, key, a.shape),), "getitem")


def _index_add(g: Tensor, key, shape: tuple[int, ...]) -> Tensor:
    out = np.zeros(shape)
    np.add.at(out, key, g.data)
    return _record(out, (g,), lambda h, need: (getitem(h, key),), "index_add")


def concat(items: Sequence[Tensor], axis: int = -1) -> Tensor:
    items = [_t(x) for x in items]
    if not items:
        raise ValueError("concat of an empty list")
    ndim = items[0].ndim
    axis = axis % ndim
    bounds = np.cumsum([0] + [x.shape[axis] for x in items])

    def backward(g, need):
        out = []
        for i in range(len(items)):
            if not need[i]:
                out.append(None)
                continue
            key = [slice(None)] * ndim
            key[axis] = slice(int(bounds[i]), int(bounds[i + 1]))
            out.append(getitem(g, tuple(key)))
        return tuple(out)

    return _record(np.concatenate([x.data for x in items], axis=axis), items, backward, "concat")


def take(a, idx: np.ndarray) -> Tensor:
    """Gather along the last axis: ``a[..., idx]``."""
    a = _t(a)
    idx = np.asarray(idx, dtype=np.int64)
    size = a.shape[-1]
    return _record(
        np.take(a.data, idx, axis=-1),
        (a,),
        lambda g, need: (scatter_sum(g, idx, size),),
        "take",
    )


def scatter_sum(g, idx: np.ndarray, size: int) -> Tensor:
    """Adjoint of :func:`take`: sums ``g[..., j]`` into slot ``idx[j]``."""
    g = _t(g)
    idx = np.asarray(idx, dtype=np.int64)
    lead = g.shape[: g.ndim - idx.ndim]
    rows = int(np.prod(lead)) if lead else 1
    flat_g = g.data.reshape(rows, idx.size)
    offsets = (np.arange(rows, dtype=np.int64)[:, None] * size + idx.reshape(1, -1)).ravel()
    data = np.bincount(offsets, weights=flat_g.ravel(), minlength=rows * size).reshape(lead + (size,))
    return _record(data, (g,), lambda h, need: (take(h, idx),), "scatter_sum")


# -- convolution ---------------------------------------------------------------------


def conv_output_size(n: int, k: int, stride: int, padding: int) -> int:
    span = n + 2 * padding - k
    if span < 0:
        raise ValueError(f"kernel {k} larger than padded input {n + 2 * padding}")
    return span // stride + 1


def _im2col_np(x: np.ndarray, k: int, stride: int, pad: int) -> np.ndarray:
    c, d, h, w = x.shape
    do, ho, wo = (conv_output_size(n, k, stride, pad) for n in (d, h, w))
    xp = np.pad(x, ((0, 0), (pad, pad), (pad, pad), (pad, pad))) if pad else x
    cols = np.empty((c, k, k, k, do, ho, wo))
    for a in range(k):
        for b in range(k):
            for e in range(k):
                cols[:, a, b, e] = xp[
                    :,
                    a : a + stride * (do - 1) + 1 : stride,
                    b : b + stride * (ho - 1) + 1 : stride,
                    e : e + stride * (wo - 1) + 1 : stride,
                ]
    return cols.reshape(c * k**3, do * ho * wo)


def _col2im_np(cols: np.ndarray, shape, k: int, stride: int, pad: int) -> np.ndarray:
    c, d, h, w = shape
    do, ho, wo = (conv_output_size(n, k, stride, pad) for n in (d, h, w))
    cols = cols.reshape(c, k, k, k, do, ho, wo)
    xp = np.zeros((c, d + 2 * pad, h + 2 * pad, w + 2 * pad))
    for a in range(k):
        for b in range(k):
            for e in range(k):
                xp[
                    :,
                    a : a + stride * (do - 1) + 1 : stride,
                    b : b + stride * (ho - 1) + 1 : stride,
                    e : e + stride * (wo - 1) + 1 : stride,
                ] += cols[:, a, b, e]
    if pad:
        xp = xp[:, pad:-pad, pad:-pad, pad:-pad]
    return np.ascontiguousarray(xp)


def im2col(x, k: int, stride: int, pad: int) -> Tensor:
    x = _t(x)
    shape = x.shape
    return _record(
        _im2col_np(x.data, k, stride, pad),
        (x,),
        lambda g, need: (col2im(g, shape, k, stride, pad),),
        "im2col",
    )


def col2im(cols, shape, k: int, stride: int, pad: int) -> Tensor:
    cols = _t(cols)
    return _record(
        _col2im_np(cols.data, shape, k, stride, pad),
        (cols,),
        lambda g, need: (im2col(g, k, stride, pad),),
        "col2im",
    )


def conv3d(x, kernels, bias=None, stride: int = 1, padding: int = 0) -> Tensor:
    """Cross-correlation of a ``C_in x D x H x W`` volume with ``C_out x C_in x k x k x k`` kernels.

    Output sizes use floor division, ``(D + 2*padding - k) // stride + 1``.
    """
    x, kernels = _t(x), _t(kernels)
    if x.ndim != 4 or kernels.ndim != 5:
        raise ValueError(f"conv3d expects a 4-d input and 5-d kernels, got {x.shape} and {kernels.shape}")
    c_out, c_in, k, k2, k3 = kernels.shape
    if not k == k2 == k3:
        raise ValueError(f"conv3d needs cubic kernels, got {kernels.shape}")
    if k % 2 == 0:
        raise ValueError(f"conv3d kernel size must be odd, got {k}")
    if x.shape[0] != c_in:
        raise ValueError(f"conv3d: input has {x.shape[0]} channels, kernels expect {c_in}")
    if stride < 1:
        raise ValueError("stride must be >= 1")
    dims = tuple(conv_output_size(n, k, stride, padding) for n in x.shape[1:])
    cols = im2col(x, k, stride, padding)
    out = matmul(reshape(kernels, (c_out, c_in * k**3)), cols)
    if bias is not None:
        out = add(out, reshape(_t(bias), (c_out, 1)))
    return reshape(out, (c_out,) + dims)


# -- parameter collections ------------------------------------------------------------


class ParamSet:
    """Ordered, uniquely named collection of tensors."""

    def __init__(self, items: Mapping[str, object] | Iterable[tuple[str, object]] = (), requires_grad: bool = False):
        self._items: dict[str, Tensor] = {}
        pairs = items.items() if isinstance(items, Mapping) else items
        for name, value in pairs:
            if name in self._items:
                raise ValueError(f"duplicate parameter name {name!r}")
            if isinstance(value, Tensor):
                t = value
            else:
                t = Tensor(value, requires_grad=requires_grad)
            self._items[name] = t

    def __getitem__(self, name: str) -> Tensor:
        return self._items[name]

    def __contains__(self, name: str) -> bool:
        return name in self._items

    def __iter__(self):
        return iter(self._items)

    def __len__(self) -> int:
        return len(self._items)

    def names(self) -> list[str]:
        return list(self._items)

    def tensors(self) -> list[Tensor]:
        return list(self._items.values())

    def items(self):
        return self._items.items()

    def arrays(self) -> dict[str, np.ndarray]:
        return {k: v.data for k, v in self._items.items()}

    def shapes(self) -> dict[str, tuple[int, ...]]:
        return {k: v.shape for k, v in self._items.items()}

    def numel(self) -> int:
        return sum(v.size for v in self._items.values())

    def flatten(self) -> np.ndarray:
        if not self._items:
            return np.zeros(0)
        return np.concatenate([v.data.ravel() for v in self._items.values()])

    def unflatten(self, vec: np.ndarray, requires_grad: bool = False) -> "ParamSet":
        vec = np.asarray(vec, dtype=np.float64)
        if vec.size != self.numel():
            raise ValueError(f"vector of length {vec.size} does not match {self.numel()} parameters")
        out, pos = [], 0
        for name, t in self._items.items():
            out.append((name, vec[pos : pos + t.size].reshape(t.shape).copy()))
            pos += t.size
        return ParamSet(out, requires_grad=requires_grad)

    def map(self, fn: Callable[[Tensor], object]) -> "ParamSet":
        return ParamSet([(k, fn(v)) for k, v in self._items.items()])

    def zip_map(self, other: "ParamSet", fn: Callable[[Tensor, Tensor], object]) -> "ParamSet":
        if self.names() != other.names():
            raise ValueError("parameter sets have different layouts")
        return ParamSet([(k, fn(v, other[k])) for k, v in self._items.items()])

    def detached(self, requires_grad: bool = False) -> "ParamSet":
        return ParamSet([(k, Tensor(v.data.copy(), requires_grad=requires_grad)) for k, v in self._items.items()])

    def copy_arrays(self) -> dict[str, np.ndarray]:
        return {k: v.data.copy() for k, v in self._items.items()}


# -- backward pass ----------------------------------------------------------------------


def grad(loss: Tensor, wrt, create_graph: bool = False):
    """Gradients of a scalar ``loss`` with respect to ``wrt``.

    ``wrt`` may be a :class:`ParamSet` (a ParamSet is returned) or a sequence of
    tensors (a list is returned). Tensors that the loss does not depend on get
    zero gradients. With ``create_graph`` the backward computation is recorded,
    so the returned gradients are differentiable nodes.
    """
    if not isinstance(loss, Tensor):
        raise TypeError("loss must be a Tensor")
    if loss.size != 1:
        raise ValueError(f"grad needs a scalar loss, got shape {loss.shape}")
    as_paramset = isinstance(wrt, ParamSet)
    targets = wrt.tensors() if as_paramset else list(wrt)
    want = {t.id for t in targets}

    # every node reachable from the loss through recorded edges
    nodes: dict[int, Tensor] = {}
    stack = [loss]
    while stack:
        t = stack.pop()
        if t.id in nodes or not t.requires_grad:
            continue
        nodes[t.id] = t
        stack.extend(t.parents)

    # keep only nodes with a path down to one of the targets
    live: set[int] = set()
    for nid in sorted(nodes):
        node = nodes[nid]
        if nid in want or any(p.id in live for p in node.parents):
            live.add(nid)

    found: dict[int, Tensor] = {}
    if loss.id in live:
        grads: dict[int, Tensor] = {loss.id: Tensor(np.ones_like(loss.data))}
        with grad_mode(create_graph):
            for nid in sorted(live, reverse=True):
                g = grads.pop(nid, None)
                if g is None:
                    continue
                node = nodes[nid]
                if nid in want:
                    found[nid] = g
                if node.backward_fn is None:
                    continue
                need = tuple(p.id in live for p in node.parents)
                for parent, pg in zip(node.parents, node.backward_fn(g, need)):
                    if pg is None or parent.id not in live:
                        continue
                    if not np.all(np.isfinite(pg.data)):
                        raise NumericalError(
                            f"non-finite gradient flowing out of node {nid} ({node.op})", node_id=nid
                        )
                    prev = grads.get(parent.id)
                    grads[parent.id] = pg if prev is None else add(prev, pg)

    out = [found.get(t.id, Tensor(np.zeros_like(t.data))) for t in targets]
    if as_paramset:
        return ParamSet(zip(wrt.names(), out))
    return out


def finite_diff_errors(
    f: Callable[[ParamSet], object],
    p: ParamSet,
    step: float = 1e-5,
    floor: float = 1e-3,
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Analytic gradient, central-difference gradient and per-coordinate relative error.

    The error for coordinate i is ``|a_i - n_i| / max(|a_i|, |n_i|, floor)``.
    """
    if step <= 0:
        raise ValueError("step must be positive")
    leaves = p.detached(requires_grad=True)
    loss = f(leaves)
    if not isinstance(loss, Tensor) or not loss.requires_grad:
        analytic = np.zeros(p.numel())
    else:
        analytic = grad(loss, leaves).flatten()

    base = p.flatten()
    numeric = np.empty_like(base)

    def value(vec):
        # leaves stay differentiable so losses that take inner gradients still work
        v = f(p.unflatten(vec, requires_grad=True))
        return float(v.data.reshape(-1)[0]) if isinstance(v, Tensor) else float(v)

    for i in range(base.size):
        hi = base.copy()
        lo = base.copy()
        hi[i] += step
        lo[i] -= step
        numeric[i] = (value(hi) - value(lo)) / (2.0 * step)
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return analytic, numeric, np.abs(analytic - numeric) / denom


def finite_diff_check(f: Callable[[ParamSet], object], p: ParamSet, step: float = 1e-5, floor: float = 1e-3) -> float:
    """Largest per-coordinate relative error between :func:`grad` and central differences."""
    _, _, err = finite_diff_errors(f, p, step, floor)
    return float(err.max()) if err.size else 0.0
