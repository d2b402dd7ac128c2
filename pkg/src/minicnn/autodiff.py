"""Define-by-run reverse-mode differentiation.

A :class:`Tape` records every operation applied to its :class:`Node` values.
Forward values are computed eagerly when an op is recorded; :meth:`Tape.backward`
walks the recording in reverse and accumulates gradients into the leaves.

New differentiable ops are added with :func:`register_op`::

    @register_op("square")
    class Square:
        @staticmethod
        def forward(ctx, x):
            ctx["x"] = x
            return x * x

        @staticmethod
        def backward(ctx, g):
            return (2.0 * ctx["x"] * g,)
"""
from __future__ import annotations

import itertools
import weakref
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from . import tensor as T
from .errors import BudgetExceededError, NonScalarLossError, ShapeError, UnknownOpError


@dataclass(frozen=True)
class Op:
    tag: str
    forward: Callable
    backward: Callable


OPS: dict[str, Op] = {}


def register_op(tag: str):
    def deco(cls):
        OPS[tag] = Op(tag, cls.forward, cls.backward)
        return cls

    return deco


_ids = itertools.count()


class Node:
    """One value on a tape: either a leaf or the output of a recorded op."""

    __slots__ = ("_tape", "id", "op", "inputs", "value", "ctx", "name", "grad", "requires_grad")

    def __init__(self, tape, op, inputs, value, ctx=None, name=None, requires_grad=True):
        # Weak, so a finished tape is freed by refcounting instead of lingering
        # as a reference cycle full of large arrays until the cyclic GC runs.
        self._tape = weakref.ref(tape)
        self.id = next(_ids)
        self.op = op
        self.inputs = inputs
        self.value = value
        self.ctx = ctx if ctx is not None else {}
        self.name = name
        self.grad = None
        self.requires_grad = requires_grad

    @property
    def tape(self) -> "Tape":
        tape = self._tape()
        if tape is None:
            raise ValueError(f"the tape of {self!r} no longer exists; keep a reference to it to record more ops")
        return tape

    @property
    def shape(self):
        return self.value.shape

    @property
    def is_leaf(self):
        return self.op == "leaf"

    def __repr__(self):
        label = self.name or self.op
        return f"Node({label}, id={self.id}, shape={self.value.shape})"

    def __add__(self, other):
        return self.tape.record("add", [self, other])

    def __sub__(self, other):
        return self.tape.record("sub", [self, other])

    def __mul__(self, other):
        if isinstance(other, Node):
            return self.tape.record("mul", [self, other])
        return self.tape.record("scale", [self], c=float(other))

    __rmul__ = __mul__

    def __neg__(self):
        return self.tape.record("scale", [self], c=-1.0)

    def __matmul__(self, other):
        return self.tape.record("matmul", [self, other])

    def sum(self, axes=None):
        return self.tape.record("sum", [self], axes=axes)

    def mean(self, axes=None):
        return self.tape.record("mean", [self], axes=axes)


class Tape:
    def __init__(self):
        self.leaves: list[Node] = []
        self.nodes: list[Node] = []

    def __len__(self):
        return len(self.nodes)

    def leaf(self, value, name: str | None = None, requires_grad: bool = True) -> Node:
        """A constant input. With ``requires_grad=False`` ops may skip its gradient."""
        node = Node(self, "leaf", (), T.as_tensor(value), name=name, requires_grad=requires_grad)
        self.leaves.append(node)
        return node

    def record(self, op: str, inputs, **attrs) -> Node:
        try:
            spec = OPS[op]
        except KeyError:
            raise UnknownOpError(f"unknown op {op!r}") from None
        for inp in inputs:
            if not isinstance(inp, Node) or inp.tape is not self:
                raise ValueError(f"input {inp!r} to {op!r} is not on this tape")
        ctx = dict(attrs)
        value = spec.forward(ctx, *[inp.value for inp in inputs], **attrs)
        ctx["needs_grad"] = tuple(inp.requires_grad for inp in inputs)
        node = Node(self, op, tuple(inputs), value, ctx, requires_grad=any(ctx["needs_grad"]))
        self.nodes.append(node)
        return node

    def clear(self):
        self.leaves.clear()
        self.nodes.clear()

    def backward(self, loss: Node) -> dict[int, np.ndarray]:
        """Accumulate d(loss)/d(leaf) for every leaf; returns ``{leaf.id: grad}``.

        Leaves the loss does not depend on receive zeros.
        """
        if loss.value.shape != (1,):
            raise NonScalarLossError(f"loss must have shape (1,), got {loss.value.shape}")
        grads = {loss.id: np.ones(1)}
        for node in reversed(self.nodes):
            if node.id > loss.id:
                continue
            g = grads.pop(node.id, None)
            if g is None or not node.requires_grad:
                continue
            in_grads = OPS[node.op].backward(node.ctx, g)
            for inp, gi in zip(node.inputs, in_grads):
                if gi is None:
                    continue
                if inp.id in grads:
                    grads[inp.id] = grads[inp.id] + gi
                else:
                    grads[inp.id] = gi
        out = {}
        for leaf in self.leaves:
            g = grads.get(leaf.id)
            if g is None:
                g = np.zeros_like(leaf.value)
            leaf.grad = g
            out[leaf.id] = g
        return out

    def named_grads(self) -> dict[str, np.ndarray]:
        """Gradients of named leaves after :meth:`backward`."""
        return {leaf.name: leaf.grad for leaf in self.leaves if leaf.name is not None}


def _unbroadcast(g, shape, axis):
    if g.shape == shape:
        return g
    keep = axis % g.ndim
    return g.sum(axis=tuple(i for i in range(g.ndim) if i != keep))


@register_op("add")
class Add:
    @staticmethod
    def forward(ctx, a, b, axis=None):
        ctx["shapes"] = (a.shape, b.shape)
        return T.elementwise("add", a, b, axis=axis)

    @staticmethod
    def backward(ctx, g):
        return g, _unbroadcast(g, ctx["shapes"][1], ctx.get("axis"))


@register_op("sub")
class Sub:
    @staticmethod
    def forward(ctx, a, b, axis=None):
        ctx["shapes"] = (a.shape, b.shape)
        return T.elementwise("sub", a, b, axis=axis)

    @staticmethod
    def backward(ctx, g):
        return g, -_unbroadcast(g, ctx["shapes"][1], ctx.get("axis"))


@register_op("mul")
class Mul:
    @staticmethod
    def forward(ctx, a, b, axis=None):
        ctx["a"], ctx["b"] = a, b
        return T.elementwise("mul", a, b, axis=axis)

    @staticmethod
    def backward(ctx, g):
        a, b, axis = ctx["a"], ctx["b"], ctx.get("axis")
        if a.shape == b.shape:
            return g * b, g * a
        view = [1] * a.ndim
        view[axis] = b.shape[0]
        return g * b.reshape(view), _unbroadcast(g * a, b.shape, axis)


@register_op("scale")
class Scale:
    @staticmethod
    def forward(ctx, x, c):
        return x * c

    @staticmethod
    def backward(ctx, g):
        return (g * ctx["c"],)


@register_op("matmul")
class MatMul:
    @staticmethod
    def forward(ctx, a, b):
        ctx["a"], ctx["b"] = a, b
        return T.matmul(a, b)

    @staticmethod
    def backward(ctx, g):
        return g @ ctx["b"].T, ctx["a"].T @ g


def _expand_reduced(g, shape, axes):
    axes = T._normalize_axes(axes, len(shape))
    kept = [1 if i in axes else n for i, n in enumerate(shape)]
    return np.broadcast_to(g.reshape(kept), shape)


@register_op("sum")
class Sum:
    @staticmethod
    def forward(ctx, x, axes=None):
        ctx["shape"] = x.shape
        return T.reduce("sum", x, axes)

    @staticmethod
    def backward(ctx, g):
        return (np.array(_expand_reduced(g, ctx["shape"], ctx.get("axes"))),)


@register_op("mean")
class Mean:
    @staticmethod
    def forward(ctx, x, axes=None):
        ctx["shape"] = x.shape
        out = T.reduce("mean", x, axes)
        ctx["count"] = x.size // out.size
        return out

    @staticmethod
    def backward(ctx, g):
        return (np.array(_expand_reduced(g, ctx["shape"], ctx.get("axes"))) / ctx["count"],)


@register_op("reshape")
class Reshape:
    @staticmethod
    def forward(ctx, x, shape):
        ctx["in_shape"] = x.shape
        return x.reshape(shape)

    @staticmethod
    def backward(ctx, g):
        return (g.reshape(ctx["in_shape"]),)


# ---------------------------------------------------------------------------
# Finite-difference gradient checking
# ---------------------------------------------------------------------------

GRADCHECK_THRESHOLD = 1e-4
GRADCHECK_BUDGET = 20_000
# Near cbrt(machine eps): balances truncation against rounding in central differences.
GRADCHECK_EPS = 1e-5


def relative_error(a, n):
    return np.abs(a - n) / np.maximum(np.maximum(np.abs(a), np.abs(n)), 1e-8)


@dataclass
class ParamCheck:
    name: str
    max_rel_err: float
    checked: int
    masked: int
    threshold: float = GRADCHECK_THRESHOLD

    @property
    def passed(self) -> bool:
        return self.max_rel_err < self.threshold

    def line(self) -> str:
        verdict = "PASS" if self.passed else "FAIL"
        return f"PARAM {self.name} {self.max_rel_err:.3e} {verdict}"


@dataclass
class GradcheckReport:
    params: list[ParamCheck] = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return all(p.passed for p in self.params)

    def __getitem__(self, name) -> ParamCheck:
        for p in self.params:
            if p.name == name:
                return p
        raise KeyError(name)

    def lines(self) -> list[str]:
        return [p.line() for p in self.params]

    def table(self) -> str:
        width = max([len(p.name) for p in self.params] + [9])
        rows = [f"{'parameter':<{width}}  {'max_rel_err':>11}  {'checked':>7}  {'masked':>6}  result"]
        for p in self.params:
            verdict = "PASS" if p.passed else "FAIL"
            rows.append(
                f"{p.name:<{width}}  {p.max_rel_err:>11.3e}  {p.checked:>7d}  {p.masked:>6d}  {verdict}"
            )
        rows.append(f"overall: {'PASS' if self.passed else 'FAIL'}")
        return "\n".join(rows)


def kink_signature(tape: Tape):
    """Branch decisions taken by piecewise ops (ReLU masks, max-pool argmaxes)."""
    sig = []
    for node in tape.nodes:
        marker = node.ctx.get("kink")
        if marker is not None:
            sig.append(marker)
    return sig


def _same_branches(a, b):
    return len(a) == len(b) and all(np.array_equal(x, y) for x, y in zip(a, b))


def check_gradients(
    loss_fn,
    arrays: dict[str, np.ndarray],
    eps: float = GRADCHECK_EPS,
    threshold: float = GRADCHECK_THRESHOLD,
    budget: int = GRADCHECK_BUDGET,
) -> GradcheckReport:
    """Compare backprop gradients against central differences.

    ``loss_fn(tape, leaves)`` must build a scalar loss on ``tape`` from the
    leaves (a dict mirroring ``arrays``) deterministically. Elements whose
    ±eps evaluations take a different branch of any piecewise op than the
    unperturbed evaluation straddle a kink and are left out of the comparison.
    """
    total = sum(int(np.size(v)) for v in arrays.values())
    if total > budget:
        raise BudgetExceededError(f"{total} checked values exceed budget of {budget}")
    arrays = {k: T.as_tensor(v, copy=True) for k, v in arrays.items()}

    def evaluate(values):
        tape = Tape()
        leaves = {k: tape.leaf(v, name=k) for k, v in values.items()}
        loss = loss_fn(tape, leaves)
        return tape, leaves, loss

    tape, leaves, loss = evaluate(arrays)
    tape.backward(loss)
    base_sig = kink_signature(tape)
    report = GradcheckReport()
    for name, value in arrays.items():
        analytic = leaves[name].grad
        worst = 0.0
        checked = masked = 0
        for idx in np.ndindex(value.shape):
            orig = value[idx]
            value[idx] = orig + eps
            tp, _, lp = evaluate(arrays)
            value[idx] = orig - eps
            tm, _, lm = evaluate(arrays)
            value[idx] = orig
            if not (
                _same_branches(kink_signature(tp), base_sig)
                and _same_branches(kink_signature(tm), base_sig)
            ):
                masked += 1
                continue
            numeric = (lp.value[0] - lm.value[0]) / (2 * eps)
            worst = max(worst, float(relative_error(analytic[idx], numeric)))
            checked += 1
        report.params.append(ParamCheck(name, worst, checked, masked, threshold))
    return report
