"""Minimal reverse-mode differentiation over float64 numpy arrays.

Every primitive returns a new :class:`Tensor`. While taping is active and at
least one input is tracked, the output remembers its parents and a
vector-Jacobian closure, so :func:`backward` can walk the recorded graph.
"""
from __future__ import annotations

import contextlib
import threading
from dataclasses import dataclass, field
from typing import Callable, Iterator, Mapping

import numpy as np

LEAKY_SLOPE = 0.2


class GradError(Exception):
    """Base class for engine errors."""


class ShapeError(GradError, ValueError):
    pass


class DomainError(GradError, ValueError):
    pass


class NonFiniteError(GradError, FloatingPointError):
    pass


class GraphError(GradError, RuntimeError):
    pass


_state = threading.local()


def taping() -> bool:
    return getattr(_state, "enabled", True)


@contextlib.contextmanager
def no_grad() -> Iterator[None]:
    """Disable graph recording inside the block (thread local)."""
    prev = taping()
    _state.enabled = False
    try:
        yield
    finally:
        _state.enabled = prev


class Tensor:
    """Dense float64 array that doubles as a tape node.

    Leaves created with ``requires_grad=True`` are trainable parameters; the
    ``name`` is the key they are reported under by :func:`backward`.
    """

    __slots__ = ("data", "requires_grad", "name", "op", "parents", "_vjp")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.array(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.name = name
        self.op = "leaf"
        self.parents: tuple[Tensor, ...] = ()
        self._vjp: Callable | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def item(self) -> float:
        return float(self.data)

    def numpy(self) -> np.ndarray:
        return self.data.copy()

    def detach(self) -> Tensor:
        return Tensor(self.data)

    def __repr__(self) -> str:
        label = f", name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, op={self.op!r}{label})"

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
            return scale(self, other)
        return mul(self, other)

    def __rmul__(self, other):
        return self.__mul__(other)

    def __truediv__(self, other):
        return div(self, other)

    def __matmul__(self, other):
        return matmul(self, other)

    def __neg__(self):
        return scale(self, -1.0)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _record(op: str, value: np.ndarray, parents: tuple[Tensor, ...], vjp: Callable) -> Tensor:
    if not np.isfinite(value).all():
        raise NonFiniteError(f"{op}: produced non-finite values")
    out = Tensor.__new__(Tensor)
    out.data = value
    out.name = None
    out.op = op
    if taping() and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out.parents = parents
        out._vjp = vjp
    else:
        out.requires_grad = False
        out.parents = ()
        out._vjp = None
    return out


# -- broadcasting -----------------------------------------------------------
# Binary ops accept equal shapes, a 0-d scalar on either side, or a row
# vector [C] against a batch [B, C].

def _broadcast_shape(op: str, a: tuple, b: tuple) -> tuple:
    if a == b or b == ():
        return a
    if a == ():
        return b
    if len(a) == 2 and b == (a[1],):
        return a
    if len(b) == 2 and a == (b[1],):
        return b
    raise ShapeError(f"{op}: incompatible shapes {a} and {b}")


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    if shape == ():
        return np.asarray(g.sum())
    return g.sum(axis=0)


# -- elementwise binary -----------------------------------------------------

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("add", a.shape, b.shape)
    sa, sb = a.shape, b.shape
    return _record("add", a.data + b.data, (a, b),
                   lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("sub", a.shape, b.shape)
    sa, sb = a.shape, b.shape
    return _record("sub", a.data - b.data, (a, b),
                   lambda g: (_unbroadcast(g, sa), -_unbroadcast(g, sb)))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("mul", a.shape, b.shape)
    ad, bd = a.data, b.data
    return _record("mul", ad * bd, (a, b),
                   lambda g: (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)))


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("div", a.shape, b.shape)
    ad, bd = a.data, b.data
    if not np.all(bd != 0.0):
        raise DomainError("div: division by zero")
    out = ad / bd
    return _record("div", out, (a, b),
                   lambda g: (_unbroadcast(g / bd, ad.shape), _unbroadcast(-g * out / bd, bd.shape)))


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2:
        raise ShapeError(f"matmul: expected 2-d operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: inner dimensions differ ({a.shape[1]} vs {b.shape[0]})")
    ad, bd = a.data, b.data
    return _record("matmul", ad @ bd, (a, b), lambda g: (g @ bd.T, ad.T @ g))


# -- elementwise unary ------------------------------------------------------

def scale(x, c: float) -> Tensor:
    x = as_tensor(x)
    c = float(c)
    return _record("scale", x.data * c, (x,), lambda g: (g * c,))


def leaky_relu(x, alpha: float = LEAKY_SLOPE) -> Tensor:
    x = as_tensor(x)
    slope = np.where(x.data > 0, 1.0, alpha)
    return _record("leaky_relu", x.data * slope, (x,), lambda g: (g * slope,))


def relu(x) -> Tensor:
    return leaky_relu(x, 0.0)


def tanh(x) -> Tensor:
    x = as_tensor(x)
    out = np.tanh(x.data)
    return _record("tanh", out, (x,), lambda g: (g * (1.0 - out * out),))


def square(x) -> Tensor:
    x = as_tensor(x)
    xd = x.data
    return _record("square", xd * xd, (x,), lambda g: (2.0 * g * xd,))


def absolute(x) -> Tensor:
    """|x| with subgradient 0 at 0."""
    x = as_tensor(x)
    sign = np.sign(x.data)
    return _record("abs", np.abs(x.data), (x,), lambda g: (g * sign,))


def sqrt(x) -> Tensor:
    x = as_tensor(x)
    if np.any(x.data < 0):
        raise DomainError(f"sqrt: negative input (min {x.data.min():.3g})")
    out = np.sqrt(x.data)
    return _record("sqrt", out, (x,), lambda g: (g * 0.5 / out,))


# -- reductions and layout --------------------------------------------------

def sum_(x, axis: int | None = None) -> Tensor:
    x = as_tensor(x)
    shape = x.shape
    if axis is None:
        return _record("sum", np.asarray(x.data.sum()), (x,),
                       lambda g: (np.broadcast_to(g, shape),))
    if x.ndim != 2 or axis not in (0, 1):
        raise ShapeError(f"sum: axis {axis} unsupported for shape {shape}")
    if axis == 0:
        return _record("sum", x.data.sum(axis=0), (x,),
                       lambda g: (np.broadcast_to(g, shape),))
    return _record("sum", x.data.sum(axis=1), (x,),
                   lambda g: (np.broadcast_to(g[:, None], shape),))


def mean0(x) -> Tensor:
    """Mean over the leading (batch) axis."""
    x = as_tensor(x)
    if x.ndim == 0 or x.shape[0] == 0:
        raise ShapeError(f"mean0: empty batch axis in shape {x.shape}")
    shape, n = x.shape, x.shape[0]
    return _record("mean0", x.data.mean(axis=0), (x,),
                   lambda g: (np.broadcast_to(g / n, shape),))


def var0(x) -> Tensor:
    """Biased (population) variance over the leading axis."""
    x = as_tensor(x)
    if x.ndim == 0 or x.shape[0] == 0:
        raise ShapeError(f"var0: empty batch axis in shape {x.shape}")
    n = x.shape[0]
    centered = x.data - x.data.mean(axis=0)
    return _record("var0", (centered * centered).mean(axis=0), (x,),
                   lambda g: (g * centered * (2.0 / n),))


def broadcast_row(v, rows: int) -> Tensor:
    v = as_tensor(v)
    if v.ndim != 1:
        raise ShapeError(f"broadcast_row: expected a row vector, got {v.shape}")
    return _record("broadcast_row", np.broadcast_to(v.data, (rows, v.shape[0])).copy(), (v,),
                   lambda g: (g.sum(axis=0),))


def take_rows(table, ids) -> Tensor:
    """Gather ``table[ids]``; gradient scatters back with accumulation."""
    table = as_tensor(table)
    ids = np.asarray(ids, dtype=np.int64)
    if table.ndim != 2:
        raise ShapeError(f"take_rows: expected a 2-d table, got {table.shape}")
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise IndexError(f"take_rows: row id out of range for {table.shape[0]} rows")
    shape = table.shape

    def vjp(g):
        out = np.zeros(shape)
        np.add.at(out, ids, g)
        return (out,)

    return _record("take_rows", table.data[ids], (table,), vjp)


def concat_rows(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[1]:
        raise ShapeError(f"concat_rows: incompatible shapes {a.shape} and {b.shape}")
    k = a.shape[0]
    return _record("concat_rows", np.concatenate([a.data, b.data]), (a, b),
                   lambda g: (g[:k], g[k:]))


PRIMITIVES: dict[str, Callable[..., Tensor]] = {
    "add": add,
    "sub": sub,
    "mul": mul,
    "div": div,
    "matmul": matmul,
    "scale": scale,
    "leaky_relu": leaky_relu,
    "tanh": tanh,
    "square": square,
    "abs": absolute,
    "sqrt": sqrt,
    "sum": sum_,
    "mean0": mean0,
    "var0": var0,
    "broadcast_row": broadcast_row,
    "take_rows": take_rows,
    "concat_rows": concat_rows,
}


def apply_primitive(op: str, *inputs, **kwargs) -> Tensor:
    try:
        fn = PRIMITIVES[op]
    except KeyError:
        raise GradError(f"unknown primitive {op!r}") from None
    return fn(*inputs, **kwargs)


# -- reverse pass -----------------------------------------------------------

def _topological(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    state: dict[int, int] = {}  # 1 = on stack, 2 = done
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        key = id(node)
        if expanded:
            state[key] = 2
            order.append(node)
            continue
        mark = state.get(key)
        if mark == 2:
            continue
        if mark == 1:
            raise GraphError(f"cycle detected at node {node!r}")
        state[key] = 1
        stack.append((node, True))
        for p in node.parents:
            pmark = state.get(id(p))
            if pmark == 1:
                raise GraphError(f"cycle detected at node {p!r}")
            if pmark is None:
                stack.append((p, False))
    return order


def backward(loss: Tensor, params: Mapping[str, Tensor] | None = None) -> dict[str, np.ndarray]:
    """Gradients of a scalar ``loss`` with respect to ``params``.

    Parameters not reachable from ``loss`` receive zeros. Without ``params``
    every named trainable leaf in the graph is reported. The recorded graph
    is released afterwards, so a loss can only be differentiated once.
    """
    if loss.shape != ():
        raise ShapeError(f"backward: loss must be a scalar, got shape {loss.shape}")
    order = _topological(loss)
    adjoint: dict[int, np.ndarray] = {id(loss): np.ones(())}
    leaves: dict[int, np.ndarray] = {}
    for node in reversed(order):
        g = adjoint.pop(id(node), None)
        if g is None:
            continue
        if not node.parents:
            if node.requires_grad:
                leaves[id(node)] = g
            continue
        for parent, pg in zip(node.parents, node._vjp(g)):
            if not parent.requires_grad:
                continue
            key = id(parent)
            prev = adjoint.get(key)
            adjoint[key] = pg if prev is None else prev + pg
    for node in order:
        if node.parents:
            node.parents = ()
            node._vjp = None

    if params is None:
        params = {n.name: n for n in order if not n.parents and n.requires_grad and n.name}
    out = {}
    for name, p in params.items():
        g = leaves.get(id(p))
        out[name] = np.zeros_like(p.data) if g is None else np.array(g, dtype=np.float64).reshape(p.shape)
    return out


def finite_difference_gradient(f: Callable[[dict[str, np.ndarray]], float],
                               params: Mapping[str, np.ndarray],
                               h: float = 1e-5) -> dict[str, np.ndarray]:
    """Central-difference gradient of ``f`` at ``params``.

    Unreliable at kinks (|x| at 0 yields 0 by symmetry).
    """
    if h <= 0:
        raise ValueError("h must be positive")
    point = {k: np.array(v, dtype=np.float64) for k, v in params.items()}
    grads = {}
    for name, arr in point.items():
        g = np.zeros_like(arr)
        flat, gflat = arr.reshape(-1), g.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            fp = float(f(point))
            flat[i] = orig - h
            fm = float(f(point))
            flat[i] = orig
            if not (np.isfinite(fp) and np.isfinite(fm)):
                raise NonFiniteError(f"finite difference: f non-finite at {name}[{i}]")
            gflat[i] = (fp - fm) / (2.0 * h)
        grads[name] = g
    return grads


# -- optimizer --------------------------------------------------------------

@dataclass
class AdamState:
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def adam_step(params: Mapping[str, Tensor], grads: Mapping[str, np.ndarray],
              state: AdamState, lr: float) -> tuple[Mapping[str, Tensor], AdamState]:
    """One bias-corrected Adam update; parameter data is replaced in place."""
    if lr <= 0:
        raise ValueError("lr must be positive")
    for name, p in params.items():
        g = grads[name]
        if g.shape != p.shape:
            raise ShapeError(f"adam_step: gradient for {name} has shape {g.shape}, expected {p.shape}")
        if not np.isfinite(g).all():
            raise NonFiniteError(f"adam_step: non-finite gradient for parameter {name!r}")
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** state.t
    c2 = 1.0 - b2 ** state.t
    for name, p in params.items():
        g = grads[name]
        m = state.m.get(name)
        if m is None:
            m = np.zeros_like(p.data)
            v = np.zeros_like(p.data)
        else:
            v = state.v[name]
        m = b1 * m + (1.0 - b1) * g
        v = b2 * v + (1.0 - b2) * (g * g)
        state.m[name], state.v[name] = m, v
        p.data = p.data - lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
    return params, state
