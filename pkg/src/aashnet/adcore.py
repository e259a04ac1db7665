"""Tape-based automatic differentiation.

A :class:`Tape` records a computation as a topologically ordered list of
nodes. Nodes are whole arrays, not scalars, so a matrix product is one
node. The recorded tape can be replayed at new input values, swept backward
for adjoints (reverse mode), swept forward with tangents (forward mode), or
both at once: replaying with dual numbers and then running the reverse
sweep over dual values gives Hessian-vector products exactly
(forward-over-reverse).

Usage::

    tape = Tape()
    x1, x2 = tape.input(6.0), tape.input(3.0)
    tape.set_output(x1 * x2 - cos(x1))
    reverse_grad(tape)          # [2.7206..., 6.0]
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Any, Callable, Sequence

import numpy as np
from scipy.special import expit

from .errors import NonFiniteError, ShapeError, UnsupportedPrimitiveError, ValidationError

__all__ = [
    "Dual", "Tape", "Var", "record", "reverse_grad", "forward_tangent", "hvp",
    "grad_and_hvp", "trace_table",
    "add", "sub", "mul", "div", "neg", "matmul", "cos", "sin", "tanh", "logistic",
    "sqrt", "square", "smooth_abs", "reduce_sum", "mean", "dot", "transpose",
]


# ---------------------------------------------------------------------------
# Dual numbers
# ---------------------------------------------------------------------------

class Dual:
    """Array-valued dual number ``val + dot * e`` with ``e**2 = 0``."""

    __slots__ = ("val", "dot")
    __array_ufunc__ = None  # make numpy defer to our reflected operators

    def __init__(self, val, dot):
        val = np.asarray(val, dtype=np.float64)
        dot = np.asarray(dot, dtype=np.float64)
        if dot.shape != val.shape:
            dot = np.broadcast_to(dot, val.shape).copy()
        self.val = val
        self.dot = dot

    def __repr__(self):
        return f"Dual({self.val!r}, {self.dot!r})"

    @property
    def shape(self):
        return self.val.shape

    @property
    def T(self):
        return Dual(self.val.T, self.dot.T)

    def __neg__(self):
        return Dual(-self.val, -self.dot)

    def __add__(self, other):
        if isinstance(other, Dual):
            return Dual(self.val + other.val, self.dot + other.dot)
        return Dual(self.val + other, self.dot)

    __radd__ = __add__

    def __sub__(self, other):
        if isinstance(other, Dual):
            return Dual(self.val - other.val, self.dot - other.dot)
        return Dual(self.val - other, self.dot)

    def __rsub__(self, other):
        return Dual(other - self.val, -self.dot)

    def __mul__(self, other):
        if isinstance(other, Dual):
            return Dual(self.val * other.val, self.dot * other.val + self.val * other.dot)
        return Dual(self.val * other, self.dot * other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, Dual):
            val = self.val / other.val
            return Dual(val, (self.dot - val * other.dot) / other.val)
        return Dual(self.val / other, self.dot / other)

    def __rtruediv__(self, other):
        val = other / self.val
        return Dual(val, -val * self.dot / self.val)

    def __matmul__(self, other):
        if isinstance(other, Dual):
            return Dual(self.val @ other.val, self.dot @ other.val + self.val @ other.dot)
        return Dual(self.val @ other, self.dot @ other)

    def __rmatmul__(self, other):
        return Dual(other @ self.val, other @ self.dot)


def _fn(plain, deriv):
    """Lift an elementwise function given its derivative ``deriv(x, fx)``."""

    def f(x):
        # out-of-domain values become nan here and are rejected by the tape
        with np.errstate(invalid="ignore", divide="ignore"):
            if isinstance(x, Dual):
                fx = plain(x.val)
                return Dual(fx, deriv(x.val, fx) * x.dot)
            return plain(x)

    return f


_cos = _fn(np.cos, lambda x, fx: -np.sin(x))
_sin = _fn(np.sin, lambda x, fx: np.cos(x))
_tanh = _fn(np.tanh, lambda x, fx: 1.0 - fx * fx)
_logistic = _fn(expit, lambda x, fx: fx * (1.0 - fx))
_sqrt = _fn(np.sqrt, lambda x, fx: 0.5 / fx)


def _sum_all(x):
    if isinstance(x, Dual):
        return Dual(np.sum(x.val), np.sum(x.dot))
    return np.sum(x)


def _mean_all(x):
    if isinstance(x, Dual):
        return Dual(np.mean(x.val), np.mean(x.dot))
    return np.mean(x)


def _outer(a, b):
    if isinstance(a, Dual) or isinstance(b, Dual):
        av, ad = (a.val, a.dot) if isinstance(a, Dual) else (a, None)
        bv, bd = (b.val, b.dot) if isinstance(b, Dual) else (b, None)
        dot = 0.0
        if ad is not None:
            dot = np.outer(ad, bv)
        if bd is not None:
            dot = dot + np.outer(av, bd)
        return Dual(np.outer(av, bv), dot)
    return np.outer(a, b)


def _broadcast(g, shape):
    # g is a scalar adjoint spread over an array of the given shape
    if isinstance(g, Dual):
        return Dual(np.broadcast_to(g.val, shape).copy(), np.broadcast_to(g.dot, shape).copy())
    return np.broadcast_to(g, shape).copy()


def _shape(x):
    return x.shape if isinstance(x, Dual) else np.shape(x)


def _unbroadcast(g, shape):
    """Reduce an adjoint back to the operand's shape (scalar broadcast only)."""
    if shape == () and _shape(g) != ():
        return _sum_all(g)
    return g


def _finite(x):
    if isinstance(x, Dual):
        return np.isfinite(x.val).all() and np.isfinite(x.dot).all()
    return np.isfinite(x).all()


# ---------------------------------------------------------------------------
# Primitives
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Primitive:
    name: str
    arity: int
    fwd: Callable
    vjp: Callable  # vjp(g, out, *args, **attrs) -> tuple of adjoint contributions


def _vjp_matmul(g, out, a, b):
    na, nb = len(_shape(a)), len(_shape(b))
    if na == 2 and nb == 2:
        return g @ b.T, a.T @ g
    if na == 2 and nb == 1:
        return _outer(g, b), a.T @ g
    if na == 1 and nb == 2:
        return b @ g, _outer(a, g)
    return g * b, g * a


PRIMITIVES = {
    p.name: p
    for p in [
        Primitive("add", 2, lambda a, b: a + b,
                  lambda g, out, a, b: (_unbroadcast(g, _shape(a)), _unbroadcast(g, _shape(b)))),
        Primitive("sub", 2, lambda a, b: a - b,
                  lambda g, out, a, b: (_unbroadcast(g, _shape(a)), _unbroadcast(-g, _shape(b)))),
        Primitive("mul", 2, lambda a, b: a * b,
                  lambda g, out, a, b: (_unbroadcast(g * b, _shape(a)), _unbroadcast(g * a, _shape(b)))),
        Primitive("div", 2, lambda a, b: a / b,
                  lambda g, out, a, b: (_unbroadcast(g / b, _shape(a)),
                                        _unbroadcast(-(g * out) / b, _shape(b)))),
        Primitive("neg", 1, lambda a: -a, lambda g, out, a: (-g,)),
        Primitive("matmul", 2, lambda a, b: a @ b, _vjp_matmul),
        Primitive("dot", 2, lambda a, b: a @ b, lambda g, out, a, b: (g * b, g * a)),
        Primitive("transpose", 1, lambda a: a.T, lambda g, out, a: (g.T,)),
        Primitive("cos", 1, _cos, lambda g, out, a: (-(g * _sin(a)),)),
        Primitive("sin", 1, _sin, lambda g, out, a: (g * _cos(a),)),
        Primitive("tanh", 1, _tanh, lambda g, out, a: (g * (1.0 - out * out),)),
        Primitive("logistic", 1, _logistic, lambda g, out, a: (g * (out * (1.0 - out)),)),
        Primitive("sqrt", 1, _sqrt, lambda g, out, a: ((0.5 * g) / out,)),
        Primitive("square", 1, lambda a: a * a, lambda g, out, a: (2.0 * (g * a),)),
        Primitive("smooth_abs", 1, lambda a, eps: _sqrt(a * a + eps),
                  lambda g, out, a, eps: (g * (a / out),)),
        Primitive("reduce_sum", 1, _sum_all, lambda g, out, a: (_broadcast(g, _shape(a)),)),
        Primitive("mean", 1, _mean_all,
                  lambda g, out, a: (_broadcast(g / max(int(np.prod(_shape(a))), 1), _shape(a)),)),
    ]
}

_ELEMENTWISE = {"add", "sub", "mul", "div"}


def _check_shapes(op, vals):
    if op in _ELEMENTWISE:
        sa, sb = _shape(vals[0]), _shape(vals[1])
        if sa != sb and sa != () and sb != ():
            raise ShapeError(f"{op}: shapes {sa} and {sb} differ (only scalar broadcasting is supported)")
    elif op == "dot":
        sa, sb = _shape(vals[0]), _shape(vals[1])
        if len(sa) != 1 or sa != sb:
            raise ShapeError(f"dot: expected equal-length vectors, got {sa} and {sb}")
    elif op == "matmul":
        sa, sb = _shape(vals[0]), _shape(vals[1])
        if not sa or not sb or len(sa) > 2 or len(sb) > 2 or sa[-1] != sb[0]:
            raise ShapeError(f"matmul: incompatible shapes {sa} and {sb}")


# ---------------------------------------------------------------------------
# Tape
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Node:
    kind: str  # "input" | "const" | "op"
    op: str | None
    args: tuple
    attrs: dict | None
    requires_grad: bool
    label: str


class Var:
    """Handle to a node on a tape; arithmetic on it records new nodes."""

    __slots__ = ("tape", "index")
    __array_ufunc__ = None

    def __init__(self, tape: "Tape", index: int):
        self.tape = tape
        self.index = index

    @property
    def value(self):
        return self.tape.values[self.index]

    @property
    def shape(self):
        return _shape(self.value)

    @property
    def T(self):
        return transpose(self)

    def __repr__(self):
        return f"Var(v{self.index + 1}, shape={self.shape})"

    def __add__(self, o):
        return add(self, o)

    def __radd__(self, o):
        return add(o, self)

    def __sub__(self, o):
        return sub(self, o)

    def __rsub__(self, o):
        return sub(o, self)

    def __mul__(self, o):
        return mul(self, o)

    def __rmul__(self, o):
        return mul(o, self)

    def __truediv__(self, o):
        return div(self, o)

    def __rtruediv__(self, o):
        return div(o, self)

    def __matmul__(self, o):
        return matmul(self, o)

    def __rmatmul__(self, o):
        return matmul(o, self)

    def __neg__(self):
        return neg(self)


class Tape:
    """Recorded evaluation trace.

    ``values`` holds the primal recorded at build time; replays through
    :meth:`evaluate` never mutate the tape, so a finished tape can be shared
    read-only between threads.
    """

    def __init__(self):
        self.nodes: list[Node] = []
        self.values: list[Any] = []
        self.inputs: list[int] = []
        self.output: int | None = None

    def __len__(self):
        return len(self.nodes)

    def _append(self, node, value):
        if not _finite(value):
            raise NonFiniteError(f"non-finite value at node v{len(self.nodes) + 1} ({node.op or node.kind})")
        self.nodes.append(node)
        self.values.append(value)
        return Var(self, len(self.nodes) - 1)

    def input(self, value, requires_grad: bool = True, label: str | None = None) -> Var:
        value = np.array(value, dtype=np.float64)
        label = label or f"x{len(self.inputs) + 1}"
        var = self._append(Node("input", None, (), None, requires_grad, label), value)
        self.inputs.append(var.index)
        return var

    def const(self, value) -> Var:
        value = np.array(value, dtype=np.float64)
        return self._append(Node("const", None, (), None, False, "const"), value)

    def _lift(self, x) -> int:
        if isinstance(x, Var):
            if x.tape is not self:
                raise ValidationError("operand belongs to a different tape")
            return x.index
        return self.const(x).index

    def apply(self, op: str, *operands, **attrs) -> Var:
        prim = PRIMITIVES.get(op)
        if prim is None:
            raise UnsupportedPrimitiveError(op)
        if len(operands) != prim.arity:
            raise ValidationError(f"{op} takes {prim.arity} operands, got {len(operands)}")
        args = tuple(self._lift(x) for x in operands)
        vals = [self.values[i] for i in args]
        _check_shapes(op, vals)
        value = prim.fwd(*vals, **attrs)
        rg = any(self.nodes[i].requires_grad for i in args)
        return self._append(Node("op", op, args, attrs or None, rg, op), value)

    def set_output(self, var: Var):
        if var.tape is not self:
            raise ValidationError("output belongs to a different tape")
        self.output = var.index

    # -- sweeps -------------------------------------------------------------

    def _check_inputs(self, at):
        if len(at) != len(self.inputs):
            raise ShapeError(f"expected {len(self.inputs)} inputs, got {len(at)}")
        out = []
        for k, (idx, x) in enumerate(zip(self.inputs, at)):
            ref = self.values[idx]
            if isinstance(x, Dual):
                if x.shape != ref.shape:
                    raise ShapeError(f"input {k}: shape {x.shape} != {ref.shape}")
                out.append(x)
                continue
            x = np.asarray(x, dtype=np.float64)
            if x.shape != ref.shape:
                raise ShapeError(f"input {k}: shape {x.shape} != {ref.shape}")
            out.append(x)
        return out

    def evaluate(self, at: Sequence | None = None) -> list:
        """Replay the tape; ``at`` may contain :class:`Dual` inputs."""
        if at is None:
            return list(self.values)
        at = self._check_inputs(at)
        given = dict(zip(self.inputs, at))
        vals: list[Any] = [None] * len(self.nodes)
        for i, node in enumerate(self.nodes):
            if node.kind == "input":
                vals[i] = given[i]
            elif node.kind == "const":
                vals[i] = self.values[i]
            else:
                args = [vals[j] for j in node.args]
                v = PRIMITIVES[node.op].fwd(*args, **(node.attrs or {}))
                if not _finite(v):
                    raise NonFiniteError(f"non-finite value at node v{i + 1} ({node.op})")
                vals[i] = v
        return vals

    def backward(self, vals: list) -> list:
        """Adjoints of the output with respect to every node (None = unused)."""
        if self.output is None:
            raise ValidationError("tape has no output")
        if _shape(vals[self.output]) != ():
            raise ShapeError("reverse sweep needs a single scalar output")
        adj: list[Any] = [None] * len(self.nodes)
        adj[self.output] = np.float64(1.0)
        for i in range(self.output, -1, -1):
            g = adj[i]
            node = self.nodes[i]
            if g is None or node.kind != "op" or not node.requires_grad:
                continue
            args = [vals[j] for j in node.args]
            contribs = PRIMITIVES[node.op].vjp(g, vals[i], *args, **(node.attrs or {}))
            for j, c in zip(node.args, contribs):
                if not self.nodes[j].requires_grad:
                    continue
                adj[j] = c if adj[j] is None else adj[j] + c
        return adj


def record(fn: Callable[..., Var], *inputs, requires_grad: Sequence[bool] | None = None) -> Tape:
    """Record ``fn`` applied to fresh input variables; its result becomes the output."""
    tape = Tape()
    flags = requires_grad or [True] * len(inputs)
    xs = [tape.input(x, requires_grad=f) for x, f in zip(inputs, flags)]
    out = fn(*xs)
    if not isinstance(out, Var):
        out = tape.const(out)
    tape.set_output(out)
    return tape


def _input_adjoints(tape, adj, vals):
    res = []
    for idx in tape.inputs:
        a = adj[idx]
        ref = vals[idx]
        shape = _shape(ref)
        if a is None:
            res.append(np.zeros(shape))
        else:
            res.append(a)
    return res


def reverse_grad(tape: Tape, at: Sequence | None = None) -> list[np.ndarray]:
    """Gradient of the scalar output with respect to each input."""
    vals = tape.evaluate(at)
    adj = tape.backward(vals)
    return [np.asarray(a, dtype=np.float64) for a in _input_adjoints(tape, adj, vals)]


def forward_tangent(tape: Tape, seed: Sequence, at: Sequence | None = None):
    """Directional derivative of the output along ``seed`` (one entry per input)."""
    if len(seed) != len(tape.inputs):
        raise ShapeError(f"seed has {len(seed)} entries, tape has {len(tape.inputs)} inputs")
    base = [tape.values[i] for i in tape.inputs] if at is None else at
    duals = [Dual(x, s) for x, s in zip(base, seed)]
    out = tape.evaluate(duals)[tape.output]
    return out.dot if isinstance(out, Dual) else np.zeros(_shape(out))


def grad_and_hvp(tape: Tape, at: Sequence, vec: Sequence):
    """Output value, gradient and Hessian-vector product in one dual sweep.

    ``vec`` has one entry per input; ``None`` means a zero direction for that
    input. The gradient returned is the primal part of the dual adjoints and
    is bitwise the same as :func:`reverse_grad` at ``at``.
    """
    if len(vec) != len(tape.inputs):
        raise ShapeError(f"direction has {len(vec)} entries, tape has {len(tape.inputs)} inputs")
    xs = []
    for x, d in zip(at, vec):
        if d is None:
            xs.append(x)
        else:
            if np.shape(d) != np.shape(x):
                raise ShapeError(f"direction shape {np.shape(d)} != input shape {np.shape(x)}")
            xs.append(Dual(x, d))
    vals = tape.evaluate(xs)
    adj = tape.backward(vals)
    grads, hv = [], []
    for a in _input_adjoints(tape, adj, vals):
        if isinstance(a, Dual):
            grads.append(a.val)
            hv.append(a.dot)
        else:
            a = np.asarray(a, dtype=np.float64)
            grads.append(a)
            hv.append(np.zeros_like(a))
    out = vals[tape.output]
    value = out.val if isinstance(out, Dual) else out
    return float(value), grads, hv


def hvp(tape: Tape, at: Sequence, vec: Sequence) -> list[np.ndarray]:
    """Hessian-vector product by forward-over-reverse differentiation."""
    return grad_and_hvp(tape, at, vec)[2]


def trace_table(tape: Tape, seed: Sequence) -> str:
    """Primal / tangent / adjoint of every node, one row per node."""
    at = [tape.values[i] for i in tape.inputs]
    tv = tape.evaluate([Dual(x, s) for x, s in zip(at, seed)])
    adj = tape.backward(tape.values)
    label_of = {}
    rows = [f"{'node':<6}{'definition':<22}{'primal':>14}{'tangent':>14}{'adjoint':>14}"]
    for i, node in enumerate(tape.nodes):
        name = f"v{i + 1}"
        label_of[i] = name
        if node.kind == "input":
            desc = node.label
        elif node.kind == "const":
            desc = "const"
        else:
            desc = f"{node.op}(" + ", ".join(label_of[j] for j in node.args) + ")"
        p = tape.values[i]
        t = tv[i].dot if isinstance(tv[i], Dual) else np.zeros(_shape(p))
        a = adj[i] if adj[i] is not None else np.zeros(_shape(p))
        rows.append(f"{name:<6}{desc:<22}{_fmt(p):>14}{_fmt(t):>14}{_fmt(a):>14}")
    return "\n".join(rows)


def _fmt(x):
    x = np.asarray(x)
    if x.shape == ():
        return f"{float(x):.4f}"
    return f"<{'x'.join(map(str, x.shape))}>"


# ---------------------------------------------------------------------------
# Recording helpers
# ---------------------------------------------------------------------------

def _tape_of(*xs) -> Tape:
    for x in xs:
        if isinstance(x, Var):
            return x.tape
    raise ValidationError("no tape variable among operands")


def _op(name):
    def f(*xs, **attrs):
        return _tape_of(*xs).apply(name, *xs, **attrs)

    f.__name__ = name
    f.__doc__ = f"Record a ``{name}`` node."
    return f


add = _op("add")
sub = _op("sub")
mul = _op("mul")
div = _op("div")
neg = _op("neg")
matmul = _op("matmul")
dot = _op("dot")
transpose = _op("transpose")
cos = _op("cos")
sin = _op("sin")
tanh = _op("tanh")
logistic = _op("logistic")
sqrt = _op("sqrt")
square = _op("square")
reduce_sum = _op("reduce_sum")
mean = _op("mean")


def smooth_abs(x: Var, eps: float) -> Var:
    """``sqrt(x**2 + eps)``, a differentiable stand-in for ``|x|``."""
    if not eps > 0:
        raise ValidationError("smooth_abs needs eps > 0")
    return _tape_of(x).apply("smooth_abs", x, eps=float(eps))

