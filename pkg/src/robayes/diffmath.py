"""Reverse-mode automatic differentiation on a flat tape.

Tensors are float64 ``numpy`` arrays. Every differentiable value is a
:class:`Var` that records its producing operation on a :class:`Tape`; the
tape is append-only, so parents always precede children and the backward
pass simply walks node indices in decreasing order.

Elementwise operations broadcast only over leading batch axes: the shapes
must be equal, one operand must be a scalar, or one shape must be a suffix
of the other. Anything else raises :class:`ShapeError`.
"""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

LOG_FLOOR = 1e-30

Tensor = np.ndarray


class ShapeError(ValueError):
    """Operand shapes are incompatible for the requested operation."""


class ContractError(ValueError):
    """A documented precondition was violated."""


def as_tensor(value) -> Tensor:
    return np.asarray(value, dtype=np.float64)


class _Node:
    __slots__ = ("kind", "parents", "vjp", "shape")

    def __init__(self, kind: str, parents: tuple[int, ...], vjp: Callable | None, shape: tuple):
        self.kind = kind
        self.parents = parents
        self.shape = shape
        # vjp maps the output cotangent to one cotangent per parent
        self.vjp = vjp


class Tape:
    """Append-only record of operations for one backward pass.

    A tape is not thread-safe. Build one per objective evaluation and drop
    it once gradients are extracted.
    """

    def __init__(self):
        self.nodes: list[_Node] = []

    def __len__(self):
        return len(self.nodes)

    def var(self, value) -> "Var":
        """Register a leaf (an input we may want the gradient of)."""
        return self._push(as_tensor(value).copy(), "leaf", (), None)

    def _push(self, value: Tensor, kind: str, parents: tuple[int, ...], vjp) -> "Var":
        self.nodes.append(_Node(kind, parents, vjp, value.shape))
        value.flags.writeable = False
        return Var(value, len(self.nodes) - 1, self)

    def backward(self, root: "Var") -> dict[int, Tensor]:
        """Gradient of the scalar ``root`` with respect to every node.

        Returns a map from node id to gradient. Nodes that do not influence
        ``root`` get an all-zero gradient of their own shape.
        """
        if root.tape is not self:
            raise ContractError("root belongs to a different tape")
        if root.value.size != 1:
            raise ContractError(f"backward needs a scalar root, got shape {root.value.shape}")
        grads: list[Tensor | None] = [None] * len(self.nodes)
        grads[root.node] = np.ones_like(root.value)
        for i in range(root.node, -1, -1):
            g = grads[i]
            node = self.nodes[i]
            if g is None or node.vjp is None:
                continue
            for parent, pg in zip(node.parents, node.vjp(g)):
                if pg is None:
                    continue
                if grads[parent] is None:
                    grads[parent] = pg
                else:
                    grads[parent] = grads[parent] + pg
        return {
            i: np.zeros(node.shape) if g is None else g
            for i, (node, g) in enumerate(zip(self.nodes, grads))
        }

    def gradients(self, root: "Var", wrt: Sequence["Var"]) -> list[Tensor]:
        """Gradients of ``root`` with respect to the listed variables."""
        table = self.backward(root)
        return [table[v.node] for v in wrt]


class Var:
    """An immutable value recorded on a tape."""

    __slots__ = ("value", "node", "tape")
    # make numpy defer mixed ndarray/Var arithmetic to the Var operators
    __array_ufunc__ = None

    def __init__(self, value: Tensor, node: int, tape: Tape):
        self.value = value
        self.node = node
        self.tape = tape

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    @property
    def ndim(self) -> int:
        return self.value.ndim

    def item(self) -> float:
        return float(self.value.reshape(-1)[0]) if self.value.size == 1 else float("nan")

    def __repr__(self):
        return f"Var(node={self.node}, shape={self.value.shape})"

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
        if isinstance(other, Var):
            return mul(self, power(other, -1.0))
        return mul(self, 1.0 / as_tensor(other))

    def __neg__(self):
        return neg(self)

    def __pow__(self, p):
        return power(self, p)

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)

    def __getitem__(self, index):
        return take(self, index)


# ---------------------------------------------------------------------------
# helpers


def _tape_of(*xs) -> Tape:
    tape = None
    for x in xs:
        if isinstance(x, Var):
            if tape is None:
                tape = x.tape
            elif x.tape is not tape:
                raise ContractError("operands live on different tapes")
    if tape is None:
        raise ContractError("at least one operand must be a Var")
    return tape


def _val(x) -> Tensor:
    return x.value if isinstance(x, Var) else as_tensor(x)


def _record(kind: str, value: Tensor, inputs: Sequence, vjps: Sequence[Callable]) -> Var:
    """Append a node whose parents are the Var entries of ``inputs``."""
    tape = _tape_of(*inputs)
    parents = []
    fns = []
    for x, fn in zip(inputs, vjps):
        if isinstance(x, Var):
            parents.append(x.node)
            fns.append(fn)

    def vjp(g):
        return [fn(g) for fn in fns]

    return tape._push(np.asarray(value, dtype=np.float64), kind, tuple(parents), vjp)


def _check_elementwise(a: tuple, b: tuple, op: str) -> None:
    if a == b or a == () or b == ():
        return
    short, long_ = (a, b) if len(a) < len(b) else (b, a)
    if len(short) < len(long_) and long_[len(long_) - len(short):] == short:
        return
    raise ShapeError(f"{op}: incompatible shapes {a} and {b}")


def _reduce_to(g: Tensor, shape: tuple) -> Tensor:
    """Sum a broadcast gradient back down to ``shape``."""
    if g.shape == shape:
        return g
    if shape == ():
        return np.asarray(g.sum())
    lead = g.ndim - len(shape)
    if lead > 0:
        g = g.sum(axis=tuple(range(lead)))
    if g.shape != shape:
        # matmul operands may also broadcast size-1 batch axes
        axes = tuple(i for i, (gs, s) in enumerate(zip(g.shape, shape)) if s == 1 and gs != 1)
        g = g.sum(axis=axes, keepdims=True)
    return g


# ---------------------------------------------------------------------------
# forward operations


def add(a, b) -> Var:
    av, bv = _val(a), _val(b)
    _check_elementwise(av.shape, bv.shape, "add")
    return _record(
        "add",
        av + bv,
        (a, b),
        (lambda g: _reduce_to(g, av.shape), lambda g: _reduce_to(g, bv.shape)),
    )


def sub(a, b) -> Var:
    av, bv = _val(a), _val(b)
    _check_elementwise(av.shape, bv.shape, "sub")
    return _record(
        "sub",
        av - bv,
        (a, b),
        (lambda g: _reduce_to(g, av.shape), lambda g: -_reduce_to(g, bv.shape)),
    )


def mul(a, b) -> Var:
    av, bv = _val(a), _val(b)
    _check_elementwise(av.shape, bv.shape, "mul")
    return _record(
        "mul",
        av * bv,
        (a, b),
        (lambda g: _reduce_to(g * bv, av.shape), lambda g: _reduce_to(g * av, bv.shape)),
    )


def neg(x) -> Var:
    return _record("neg", -_val(x), (x,), (lambda g: -g,))


def power(x, p: float) -> Var:
    """``x ** p`` for a real constant exponent."""
    xv = _val(x)
    p = float(p)
    out = xv**p
    return _record("pow", out, (x,), (lambda g: g * p * xv ** (p - 1.0),))


def exp(x) -> Var:
    out = np.exp(_val(x))
    return _record("exp", out, (x,), (lambda g: g * out,))


def log(x) -> Var:
    """``log(max(x, 1e-30))``; never errors, zero gradient below the floor."""
    xv = _val(x)
    clipped = np.maximum(xv, LOG_FLOOR)
    live = xv >= LOG_FLOOR
    return _record("log", np.log(clipped), (x,), (lambda g: np.where(live, g / clipped, 0.0),))


def softplus(x) -> Var:
    xv = _val(x)
    sig = 0.5 * (1.0 + np.tanh(0.5 * xv))
    return _record("softplus", np.logaddexp(0.0, xv), (x,), (lambda g: g * sig,))


def elu(x, alpha: float = 1.0) -> Var:
    xv = _val(x)
    pos = xv > 0
    em1 = np.expm1(np.minimum(xv, 0.0))
    out = np.where(pos, xv, alpha * em1)
    return _record("elu", out, (x,), (lambda g: g * np.where(pos, 1.0, alpha * (em1 + 1.0)),))


def _axis_tuple(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(a % ndim for a in axis)


def sum(x, axis=None, keepdims: bool = False) -> Var:  # noqa: A001
    xv = _val(x)
    axes = _axis_tuple(axis, xv.ndim)
    out = xv.sum(axis=axes, keepdims=keepdims)

    def vjp(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return np.broadcast_to(g, xv.shape).copy()

    return _record("sum", out, (x,), (vjp,))


def mean(x, axis=None, keepdims: bool = False) -> Var:
    xv = _val(x)
    axes = _axis_tuple(axis, xv.ndim)
    count = int(np.prod([xv.shape[a] for a in axes])) if axes else 1
    return sum(x, axis=axes, keepdims=keepdims) * (1.0 / count)


def logsumexp(x, axis=None) -> Var:
    """Shift-stable ``log(sum(exp(x)))`` along ``axis``."""
    xv = _val(x)
    axes = _axis_tuple(axis, xv.ndim)
    shift = np.max(xv, axis=axes, keepdims=True)
    shift = np.where(np.isfinite(shift), shift, 0.0)
    e = np.exp(xv - shift)
    s = e.sum(axis=axes, keepdims=True)
    with np.errstate(divide="ignore", invalid="ignore"):
        out_keep = np.log(s) + shift
        # an all -inf slice has no mass to route gradient to
        soft = np.where(s > 0, e / np.where(s > 0, s, 1.0), 0.0)
    out = np.squeeze(out_keep, axis=axes)

    def vjp(g):
        return np.expand_dims(g, axes) * soft

    return _record("logsumexp", out, (x,), (vjp,))


def _swap(a: Tensor) -> Tensor:
    return np.swapaxes(a, -1, -2)


def matmul(a, b) -> Var:
    """Matrix product over the last two axes, batched over leading axes."""
    av, bv = _val(a), _val(b)
    if av.ndim < 2 or bv.ndim < 2 or av.shape[-1] != bv.shape[-2]:
        raise ShapeError(f"matmul: incompatible shapes {av.shape} and {bv.shape}")
    la, lb = av.shape[:-2], bv.shape[:-2]
    if la and lb:
        _check_elementwise(la, lb, "matmul batch")
    return _record(
        "matmul",
        av @ bv,
        (a, b),
        (
            lambda g: _reduce_to(g @ _swap(bv), av.shape),
            lambda g: _reduce_to(_swap(av) @ g, bv.shape),
        ),
    )


def affine(x, w, b) -> Var:
    """Dense layer ``x @ w + b`` with the bias shared across rows.

    Shapes: ``x (..., n, i)``, ``w (..., i, o)``, ``b (..., o)``; leading
    batch axes of ``w``/``b`` index independent parameter draws.
    """
    xv, wv, bv = _val(x), _val(w), _val(b)
    if xv.ndim < 2 or wv.ndim < 2 or xv.shape[-1] != wv.shape[-2]:
        raise ShapeError(f"affine: incompatible shapes {xv.shape} and {wv.shape}")
    if bv.shape[-1:] != wv.shape[-1:] or bv.shape[:-1] != wv.shape[:-2]:
        raise ShapeError(f"affine: bias shape {bv.shape} does not match weights {wv.shape}")
    out = xv @ wv + bv[..., None, :]
    return _record(
        "affine",
        out,
        (x, w, b),
        (
            lambda g: _reduce_to(g @ _swap(wv), xv.shape),
            lambda g: _reduce_to(_swap(xv) @ g, wv.shape),
            lambda g: _reduce_to(g.sum(axis=-2), bv.shape),
        ),
    )


def take(x, index) -> Var:
    """Basic or advanced indexing, ``x[index]``."""
    xv = _val(x)

    def vjp(g):
        out = np.zeros_like(xv)
        np.add.at(out, index, g)
        return out

    return _record("take", xv[index], (x,), (vjp,))


def reshape(x, shape) -> Var:
    xv = _val(x)
    return _record("reshape", xv.reshape(shape), (x,), (lambda g: g.reshape(xv.shape),))


def where(mask, a, b) -> Var:
    """Select ``a`` where ``mask`` holds, else ``b``; mask is a constant."""
    mask = np.asarray(mask, dtype=bool)
    av, bv = _val(a), _val(b)
    out = np.where(mask, av, bv)
    return _record(
        "where",
        out,
        (a, b),
        (
            lambda g: _reduce_to(np.where(mask, g, 0.0), av.shape),
            lambda g: _reduce_to(np.where(mask, 0.0, g), bv.shape),
        ),
    )


def square(x) -> Var:
    xv = _val(x)
    return _record("square", xv * xv, (x,), (lambda g: 2.0 * g * xv,))


def constant(tape: Tape, value) -> Var:
    """Record a value whose gradient is never needed."""
    return tape._push(as_tensor(value).copy(), "const", (), None)


def backward(tape: Tape, root: Var) -> dict[int, Tensor]:
    """Function form of :meth:`Tape.backward`."""
    return tape.backward(root)
