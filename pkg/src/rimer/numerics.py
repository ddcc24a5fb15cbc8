"""Dense tensors with tape-based reverse-mode differentiation.

Ops are only recorded while a :class:`Tape` is active and at least one
input requires a gradient, so inference code pays no bookkeeping cost.

Broadcasting is deliberately restricted: binary elementwise ops accept
exactly matching shapes or a single-element operand.  Anything else needs
an explicit :func:`broadcast_to` or :func:`reshape`.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np

from .errors import ContractError, DimensionError, NonFiniteError

_FLOAT_DTYPES = (np.dtype(np.float32), np.dtype(np.float64))
_ACTIVE_TAPES: list["Tape"] = []


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "name")
    __array_priority__ = 100.0

    def __init__(self, data, requires_grad: bool = False, dtype=None, name: str | None = None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype not in _FLOAT_DTYPES:
            arr = arr.astype(np.float64)
        self.data = arr
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self) -> np.dtype:
        return self.data.dtype

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ContractError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self):
        tag = f", name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{tag}, requires_grad={self.requires_grad})"

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

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return getitem(self, index)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis=axis, keepdims=keepdims)


def as_tensor(x, like: Tensor | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else None
    return Tensor(np.asarray(x, dtype=dtype))


# -- tape ---------------------------------------------------------------------


@dataclass(eq=False)
class Node:
    op: str
    inputs: tuple[Tensor, ...]
    output: Tensor
    vjp: Callable[[np.ndarray], Sequence[np.ndarray | None]]


@dataclass(eq=False)
class Tape:
    """Ordered record of differentiable ops.

    Use as a context manager; ops executed inside are appended in execution
    order, which is a valid topological order by construction.
    """

    nodes: list[Node] = field(default_factory=list)
    leaves: dict[int, Tensor] = field(default_factory=dict)
    _outputs: set[int] = field(default_factory=set)

    def __enter__(self) -> "Tape":
        _ACTIVE_TAPES.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _ACTIVE_TAPES.remove(self)

    def record(self, op: str, inputs: Sequence[Tensor], output: Tensor, vjp) -> None:
        for t in inputs:
            if t.requires_grad and id(t) not in self._outputs:
                self.leaves.setdefault(id(t), t)
        output.requires_grad = True
        self.nodes.append(Node(op, tuple(inputs), output, vjp))
        self._outputs.add(id(output))

    def backward(self, loss: Tensor) -> dict[int, np.ndarray]:
        return backward(self, loss)


def active_tape() -> Tape | None:
    return _ACTIVE_TAPES[-1] if _ACTIVE_TAPES else None


def _record(op: str, inputs: Sequence[Tensor], out_data: np.ndarray, vjp) -> Tensor:
    out = Tensor(out_data)
    tape = active_tape()
    if tape is not None and any(t.requires_grad for t in inputs):
        tape.record(op, inputs, out, vjp)
    return out


def backward(tape: Tape, loss: Tensor) -> dict[int, np.ndarray]:
    """Accumulate dloss/dleaf into ``leaf.grad`` for every leaf on ``tape``.

    Returns a mapping ``id(leaf) -> grad`` of the gradients contributed by
    this call.  Calling twice without resetting accumulates.
    """
    if loss.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    if id(loss) not in tape._outputs:
        raise ContractError("loss was not produced on this tape")
    pending: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    contributed: dict[int, np.ndarray] = {}
    for node in reversed(tape.nodes):
        g = pending.pop(id(node.output), None)
        if g is None:
            continue
        in_grads = node.vjp(g)
        for inp, gi in zip(node.inputs, in_grads):
            if gi is None or not inp.requires_grad:
                continue
            key = id(inp)
            if key in tape._outputs:
                if key in pending:
                    pending[key] = pending[key] + gi
                else:
                    pending[key] = gi
            else:
                contributed[key] = contributed[key] + gi if key in contributed else gi
    for key, g in contributed.items():
        leaf = tape.leaves[key]
        g = np.asarray(g, dtype=leaf.dtype).reshape(leaf.shape)
        leaf.grad = g.copy() if leaf.grad is None else leaf.grad + g
    return contributed


# -- elementwise --------------------------------------------------------------


def _broadcast_pair(a: Tensor, b: Tensor) -> tuple[np.ndarray, np.ndarray, tuple[int, ...]]:
    if a.shape == b.shape:
        return a.data, b.data, a.shape
    if b.size == 1:
        return a.data, b.data.reshape(()), a.shape
    if a.size == 1:
        return a.data.reshape(()), b.data, b.shape
    raise DimensionError(f"shapes {a.shape} and {b.shape} are not broadcast-compatible (exact or scalar only)")


def _fit(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    return np.asarray(g.sum()).reshape(shape)


def _sigmoid(x):
    return np.exp(-np.logaddexp(0.0, -x))


def _exp(x):
    with np.errstate(over="ignore"):
        out = np.exp(x)
    if not np.all(np.isfinite(out)):
        raise NonFiniteError("exp overflow")
    return out


# name -> forward(x) for unary ops
UNARY_FORWARD: dict[str, Callable] = {
    "relu": lambda x: np.maximum(x, 0.0),
    "sigmoid": _sigmoid,
    "exp": _exp,
    "neg": np.negative,
    "sqrt": np.sqrt,
    "square": np.square,
    "tanh": np.tanh,
}

# name -> vjp(g, x, out).  relu'(0) is 0.
BACKWARD_RULES: dict[str, Callable] = {
    "relu": lambda g, x, out: g * (x > 0),
    "sigmoid": lambda g, x, out: g * out * (1.0 - out),
    "exp": lambda g, x, out: g * out,
    "neg": lambda g, x, out: -g,
    "sqrt": lambda g, x, out: g * 0.5 / out,
    "square": lambda g, x, out: g * 2.0 * x,
    "tanh": lambda g, x, out: g * (1.0 - out * out),
    "add": lambda g, a, b, out: (g, g),
    "sub": lambda g, a, b, out: (g, -g),
    "mul": lambda g, a, b, out: (g * b, g * a),
    "div": lambda g, a, b, out: (g / b, -g * a / (b * b)),
}

BINARY_FORWARD: dict[str, Callable] = {
    "add": np.add,
    "sub": np.subtract,
    "mul": np.multiply,
    "div": np.divide,
}


def _unary(op: str, a: Tensor) -> Tensor:
    x = a.data
    out = np.asarray(UNARY_FORWARD[op](x), dtype=x.dtype)

    def vjp(g):
        return (BACKWARD_RULES[op](g, x, out),)

    return _record(op, (a,), out, vjp)


def _binary(op: str, a, b) -> Tensor:
    if not isinstance(a, Tensor):
        a = as_tensor(a, like=b)
    if not isinstance(b, Tensor):
        b = as_tensor(b, like=a)
    ad, bd, _ = _broadcast_pair(a, b)
    out = np.asarray(BINARY_FORWARD[op](ad, bd))

    def vjp(g):
        ga, gb = BACKWARD_RULES[op](g, ad, bd, out)
        return (
            _fit(np.broadcast_to(ga, g.shape), a.shape) if a.requires_grad else None,
            _fit(np.broadcast_to(gb, g.shape), b.shape) if b.requires_grad else None,
        )

    return _record(op, (a, b), out, vjp)


def elementwise(op: str, a, b=None, *, factor: float | None = None) -> Tensor:
    """Dispatch by name: add, sub, mul, div, relu, sigmoid, exp, neg, sqrt, square, tanh, scale."""
    if op == "scale":
        if factor is None:
            raise ContractError("scale needs a factor")
        return scale(a, factor)
    if op in BINARY_FORWARD:
        if b is None:
            raise ContractError(f"{op} needs two operands")
        return _binary(op, a, b)
    if op in UNARY_FORWARD:
        return _unary(op, as_tensor(a))
    raise ContractError(f"unknown elementwise op {op!r}")


def add(a, b) -> Tensor:
    return _binary("add", a, b)


def sub(a, b) -> Tensor:
    return _binary("sub", a, b)


def mul(a, b) -> Tensor:
    return _binary("mul", a, b)


def div(a, b) -> Tensor:
    return _binary("div", a, b)


def relu(a: Tensor) -> Tensor:
    return _unary("relu", a)


def sigmoid(a: Tensor) -> Tensor:
    return _unary("sigmoid", a)


def exp(a: Tensor) -> Tensor:
    return _unary("exp", a)


def neg(a: Tensor) -> Tensor:
    return _unary("neg", a)


def sqrt(a: Tensor) -> Tensor:
    return _unary("sqrt", a)


def square(a: Tensor) -> Tensor:
    return _unary("square", a)


def tanh(a: Tensor) -> Tensor:
    return _unary("tanh", a)


def scale(a: Tensor, factor: float) -> Tensor:
    c = np.asarray(factor, dtype=a.dtype)
    return _record("scale", (a,), a.data * c, lambda g: (g * c,))


# -- linear algebra and shape ops ---------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """``a @ b`` for ``a: (..., m, k)`` and ``b: (k, n)`` or ``b: (..., k, n)`` with equal leading dims."""
    if a.ndim < 2 or b.ndim < 2:
        raise DimensionError(f"matmul needs >=2-d operands, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul inner dimensions differ: {a.shape} @ {b.shape}")
    if b.ndim > 2 and a.shape[:-2] != b.shape[:-2]:
        raise DimensionError(f"matmul batch dimensions differ: {a.shape} @ {b.shape}")
    ad, bd = a.data, b.data
    out = ad @ bd

    def vjp(g):
        ga = g @ np.swapaxes(bd, -1, -2) if a.requires_grad else None
        gb = None
        if b.requires_grad:
            if bd.ndim == 2 and ad.ndim > 2:
                gb = ad.reshape(-1, ad.shape[-1]).T @ g.reshape(-1, g.shape[-1])
            else:
                gb = np.swapaxes(ad, -1, -2) @ g
        return ga, gb

    return _record("matmul", (a, b), out, vjp)


def tsum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = np.asarray(a.data.sum(axis=axis, keepdims=keepdims))
    shape = a.shape

    def vjp(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape),)

    return _record("sum", (a,), out, vjp)


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    count = a.size if axis is None else int(np.prod([a.shape[i] for i in np.atleast_1d(axis)]))
    return scale(tsum(a, axis=axis, keepdims=keepdims), 1.0 / count)


def reshape(a: Tensor, shape) -> Tensor:
    old = a.shape
    return _record("reshape", (a,), a.data.reshape(shape), lambda g: (g.reshape(old),))


def transpose(a: Tensor, axes=None) -> Tensor:
    axes = tuple(reversed(range(a.ndim))) if axes is None else tuple(axes)
    inverse = tuple(np.argsort(axes))
    return _record("transpose", (a,), np.transpose(a.data, axes), lambda g: (np.transpose(g, inverse),))


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    extra = g.ndim - len(shape)
    if extra:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def broadcast_to(a: Tensor, shape) -> Tensor:
    shape = tuple(shape)
    try:
        out = np.broadcast_to(a.data, shape)
    except ValueError as exc:
        raise DimensionError(f"cannot broadcast {a.shape} to {shape}") from exc
    old = a.shape
    return _record("broadcast_to", (a,), out, lambda g: (_unbroadcast(g, old),))


def getitem(a: Tensor, index) -> Tensor:
    shape, dtype = a.shape, a.dtype

    basic = all(isinstance(i, (int, slice, type(None), type(Ellipsis))) for i in (index if isinstance(index, tuple) else (index,)))

    def vjp(g):
        full = np.zeros(shape, dtype=dtype)
        if basic:
            full[index] = g
        else:
            np.add.at(full, index, g)
        return (full,)

    return _record("getitem", (a,), np.asarray(a.data[index]), vjp)


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = tuple(tensors)
    out = np.stack([t.data for t in tensors], axis=axis)

    def vjp(g):
        return tuple(np.take(g, i, axis=axis) for i in range(len(tensors)))

    return _record("stack", tensors, out, vjp)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = tuple(tensors)
    out = np.concatenate([t.data for t in tensors], axis=axis)
    splits = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def vjp(g):
        return tuple(np.split(g, splits, axis=axis))

    return _record("concat", tensors, out, vjp)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize over the last axis, then apply per-feature gain and bias."""
    d = x.shape[-1]
    if gain.shape != (d,) or bias.shape != (d,):
        raise DimensionError(f"layer_norm gain/bias must have shape ({d},)")
    xd = x.data
    mu = xd.mean(axis=-1, keepdims=True)
    xc = xd - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + eps)
    xhat = xc * inv
    out = xhat * gain.data + bias.data

    def vjp(g):
        gx = None
        if x.requires_grad:
            gh = g * gain.data
            gx = inv * (gh - gh.mean(axis=-1, keepdims=True) - xhat * (gh * xhat).mean(axis=-1, keepdims=True))
        lead = tuple(range(g.ndim - 1))
        return gx, (g * xhat).sum(axis=lead), g.sum(axis=lead)

    return _record("layer_norm", (x, gain, bias), out, vjp)


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """``x @ weight (+ bias)`` over the last axis of ``x`` of any rank."""
    lead = x.shape[:-1]
    flat = x if x.ndim == 2 else reshape(x, (-1, x.shape[-1]))
    y = matmul(flat, weight)
    if bias is not None:
        y = add(y, broadcast_to(bias, y.shape))
    return y if x.ndim == 2 else reshape(y, lead + (weight.shape[-1],))


def mse(pred: Tensor, target) -> Tensor:
    diff = sub(pred, as_tensor(target, like=pred))
    return mean(square(diff))


def custom(op: str, inputs: Sequence[Tensor], out: np.ndarray, vjp) -> Tensor:
    """Record an op whose forward was computed outside the tape."""
    return _record(op, tuple(inputs), out, vjp)


# -- gradient checking --------------------------------------------------------


@dataclass
class GradcheckReport:
    max_rel_err: float
    per_param: dict[str, float]
    worst_param: str | None
    n_coords: int

    def passed(self, tol: float) -> bool:
        return self.max_rel_err < tol


def _named(params) -> list[tuple[str, Tensor]]:
    if isinstance(params, Mapping):
        return list(params.items())
    return [(p.name or f"param{i}", p) for i, p in enumerate(params)]


def gradcheck(f: Callable[[], Tensor], params: Mapping[str, Tensor] | Iterable[Tensor], eps: float = 1e-5) -> GradcheckReport:
    """Compare tape gradients of ``f()`` against central differences.

    ``f`` takes no arguments and closes over ``params``; each coordinate is
    perturbed in place.  Relative error is ``|a-n| / max(|a|, |n|, 1e-8)``.
    """
    named = _named(params)
    for name, p in named:
        if p.dtype != np.float64:
            raise ContractError(f"gradcheck needs float64 parameters; {name} is {p.dtype}")
        p.requires_grad = True
        p.grad = None
    with Tape() as tape:
        loss = f()
    if not np.all(np.isfinite(loss.data)):
        raise NonFiniteError("gradcheck objective is not finite")
    backward(tape, loss)
    analytic = {name: (p.grad if p.grad is not None else np.zeros_like(p.data)) for name, p in named}

    def value() -> float:
        v = float(np.asarray(f().data).reshape(-1)[0])
        if not np.isfinite(v):
            raise NonFiniteError("gradcheck objective is not finite")
        return v

    per_param: dict[str, float] = {}
    n_coords = 0
    for name, p in named:
        flat = p.data.reshape(-1)
        if not np.shares_memory(flat, p.data):
            raise ContractError(f"parameter {name} is not contiguous")
        a_flat = analytic[name].reshape(-1)
        worst = 0.0
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            fp = value()
            flat[i] = orig - eps
            fm = value()
            flat[i] = orig
            num = (fp - fm) / (2.0 * eps)
            a = float(a_flat[i])
            err = abs(a - num) / max(abs(a), abs(num), 1e-8)
            worst = max(worst, err)
        n_coords += flat.size
        per_param[name] = worst
    worst_name = max(per_param, key=per_param.get) if per_param else None
    return GradcheckReport(
        max_rel_err=per_param[worst_name] if worst_name else 0.0,
        per_param=per_param,
        worst_param=worst_name,
        n_coords=n_coords,
    )
