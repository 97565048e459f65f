"""Reverse-mode differentiation tape with graph-mode adjoints.

Every node holds a float64 ndarray (0-d for scalars).  Nodes are appended in
evaluation order, so operand indices always precede the node that uses them.
`backward` walks the tape in reverse with plain numpy arithmetic and leaves
the tape untouched; `backward_as_graph` runs the same adjoint rules through
`Var` arithmetic, which records the adjoint computation as new nodes so the
returned gradients can themselves be differentiated.

Complex quantities are carried as real pairs by `ComplexVar`.
"""

from __future__ import annotations

from collections.abc import Sequence

import numpy as np

from .errors import NonFiniteValue, SingularMatrix

PIVOT_TOL = 1e-12

KINDS = (
    "const", "add", "sub", "mul", "div", "neg", "exp", "log", "sin", "cos",
    "tanh", "sqrt", "relu", "power", "matmul", "sum", "sum_to", "broadcast",
    "reshape", "swapaxes", "getitem", "scatter", "concat", "stack",
)


class TapeNode:
    __slots__ = ("kind", "operands", "value", "attrs")

    def __init__(self, kind, operands, value, attrs):
        self.kind = kind
        self.operands = operands
        self.value = value
        self.attrs = attrs

    def __repr__(self):
        return f"TapeNode({self.kind!r}, {self.operands}, shape={self.value.shape})"


class Tape:
    """Append-only list of `TapeNode`; single writer."""

    def __init__(self):
        self.nodes: list[TapeNode] = []

    def __len__(self):
        return len(self.nodes)

    def constant(self, value) -> Var:
        value = np.array(value, dtype=np.float64)
        return _append(self, "const", (), value, {})

    variable = constant

    def replay(self) -> list[np.ndarray]:
        """Recompute every node value from the recorded operations."""
        vals: list[np.ndarray] = []
        for node in self.nodes:
            if node.kind == "const":
                vals.append(node.value)
            else:
                args = [vals[i] for i in node.operands]
                vals.append(_evaluate(node.kind, args, node.attrs))
        return vals


# ---------------------------------------------------------------------------
# forward evaluation

def _np_sum_to(x, shape):
    shape = tuple(shape)
    if x.shape == shape:
        return x
    lead = x.ndim - len(shape)
    axes = tuple(range(lead)) + tuple(
        lead + i for i, s in enumerate(shape) if s == 1 and x.shape[lead + i] != 1
    )
    out = np.sum(x, axis=axes, keepdims=True)
    return out.reshape(shape)


def _np_scatter(g, index, shape):
    out = np.zeros(shape)
    if _is_advanced(index):
        np.add.at(out, index, g)
    else:
        out[index] += g
    return out


def _is_advanced(index):
    items = index if isinstance(index, tuple) else (index,)
    return any(isinstance(i, (np.ndarray, list)) for i in items)


_FORWARD = {
    "add": np.add,
    "sub": np.subtract,
    "mul": np.multiply,
    "div": np.divide,
    "neg": np.negative,
    "exp": np.exp,
    "log": np.log,
    "sin": np.sin,
    "cos": np.cos,
    "tanh": np.tanh,
    "sqrt": np.sqrt,
    "relu": lambda x: np.maximum(x, 0.0),
    "power": lambda x, exponent: np.power(x, exponent),
    "matmul": np.matmul,
    "sum": lambda x, axis, keepdims: np.sum(x, axis=axis, keepdims=keepdims),
    "sum_to": lambda x, shape: _np_sum_to(x, shape),
    "broadcast": lambda x, shape: np.broadcast_to(x, shape),
    "reshape": lambda x, shape: np.reshape(x, shape),
    "swapaxes": lambda x, axis1, axis2: np.swapaxes(x, axis1, axis2),
    "getitem": lambda x, index: x[index],
    "scatter": lambda g, index, shape: _np_scatter(g, index, shape),
    "concat": lambda *xs, axis: np.concatenate(xs, axis=axis),
    "stack": lambda *xs, axis: np.stack(xs, axis=axis),
}

# kinds that may legitimately produce inf/nan (and warn) on bad input
_GUARDED = frozenset({"div", "log", "sqrt", "power", "exp"})


def _evaluate(kind, args, attrs):
    fn = _FORWARD[kind]
    if kind in _GUARDED:
        with np.errstate(all="ignore"):
            return np.asarray(fn(*args, **attrs), dtype=np.float64)
    return np.asarray(fn(*args, **attrs), dtype=np.float64)


def _append(tape, kind, operands, value, attrs):
    if not np.isfinite(value).all():
        raise NonFiniteValue(f"{kind} produced a non-finite value")
    tape.nodes.append(TapeNode(kind, operands, value, attrs))
    return Var(tape, len(tape.nodes) - 1)


def record(tape: Tape, kind: str, operands, **attrs) -> Var:
    """Evaluate `kind` eagerly on the operand values and append the node."""
    if kind not in _FORWARD:
        raise ValueError(f"unknown node kind {kind!r}")
    idx = []
    for op in operands:
        i = op.index if isinstance(op, Var) else int(op)
        if isinstance(op, Var) and op.tape is not tape:
            raise ValueError("operand lives on a different tape")
        if not 0 <= i < len(tape.nodes):
            raise IndexError(f"operand index {i} out of range")
        idx.append(i)
    nodes = tape.nodes
    value = _evaluate(kind, [nodes[i].value for i in idx], attrs)
    return _append(tape, kind, tuple(idx), value, attrs)


# ---------------------------------------------------------------------------
# Var

def _lift(tape, x):
    if isinstance(x, Var):
        if x.tape is not tape:
            raise ValueError("mixing Vars from different tapes")
        return x
    return tape.constant(x)


def _binary(kind, a, b):
    if isinstance(a, ComplexVar) or isinstance(b, ComplexVar):
        return NotImplemented
    tape = a.tape if isinstance(a, Var) else b.tape
    return record(tape, kind, (_lift(tape, a), _lift(tape, b)))


class Var:
    """Reference to one node of a tape."""

    __slots__ = ("tape", "index")
    __array_ufunc__ = None  # make numpy defer to the reflected operators

    def __init__(self, tape: Tape, index: int):
        self.tape = tape
        self.index = index

    @property
    def value(self) -> np.ndarray:
        return self.tape.nodes[self.index].value

    @property
    def shape(self):
        return self.value.shape

    @property
    def ndim(self):
        return self.value.ndim

    def __len__(self):
        return self.shape[0]

    def __repr__(self):
        return f"Var(#{self.index}, value={self.value!r})"

    def __add__(self, o):
        return _binary("add", self, o)

    def __radd__(self, o):
        return _binary("add", o, self)

    def __sub__(self, o):
        return _binary("sub", self, o)

    def __rsub__(self, o):
        return _binary("sub", o, self)

    def __mul__(self, o):
        return _binary("mul", self, o)

    def __rmul__(self, o):
        return _binary("mul", o, self)

    def __truediv__(self, o):
        return _binary("div", self, o)

    def __rtruediv__(self, o):
        return _binary("div", o, self)

    def __neg__(self):
        return record(self.tape, "neg", (self,))

    def __pow__(self, exponent):
        if isinstance(exponent, Var):
            raise TypeError("only constant exponents are supported")
        return record(self.tape, "power", (self,), exponent=float(exponent))

    def __matmul__(self, o):
        return matmul(self, o)

    def __rmatmul__(self, o):
        return matmul(o, self)

    def __getitem__(self, index):
        return getitem(self, index)

    def sum(self, axis=None, keepdims=False):
        return vsum(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = shape[0]
        return reshape(self, shape)

    @property
    def mT(self):
        return swapaxes(self, -1, -2)


# ---------------------------------------------------------------------------
# dispatching elementary functions: Var -> recorded node, ndarray -> numpy

def value_of(x):
    return x.value if isinstance(x, Var) else np.asarray(x, dtype=np.float64)


def shape_of(x):
    return x.shape if isinstance(x, Var) else np.shape(x)


def _unary(kind, fn):
    def op(x):
        if isinstance(x, Var):
            return record(x.tape, kind, (x,))
        return fn(x)
    op.__name__ = kind
    return op


exp = _unary("exp", np.exp)
log = _unary("log", np.log)
sin = _unary("sin", np.sin)
cos = _unary("cos", np.cos)
tanh = _unary("tanh", np.tanh)
sqrt = _unary("sqrt", np.sqrt)
relu = _unary("relu", lambda x: np.maximum(x, 0.0))
hinge = relu


def matmul(a, b):
    if isinstance(a, Var) or isinstance(b, Var):
        if len(shape_of(a)) < 2 or len(shape_of(b)) < 2:
            raise ValueError("tape matmul needs operands with ndim >= 2")
        return _binary("matmul", a, b)
    return np.matmul(a, b)


def vsum(x, axis=None, keepdims=False):
    if isinstance(x, Var):
        return record(x.tape, "sum", (x,), axis=axis, keepdims=keepdims)
    return np.sum(x, axis=axis, keepdims=keepdims)


def sum_to(x, shape):
    shape = tuple(shape)
    if tuple(shape_of(x)) == shape:
        return x
    if isinstance(x, Var):
        return record(x.tape, "sum_to", (x,), shape=shape)
    return _np_sum_to(x, shape)


def broadcast_to(x, shape):
    shape = tuple(shape)
    if tuple(shape_of(x)) == shape:
        return x
    if isinstance(x, Var):
        return record(x.tape, "broadcast", (x,), shape=shape)
    return np.broadcast_to(x, shape)


def reshape(x, shape):
    shape = tuple(shape)
    if isinstance(x, Var):
        if x.shape == shape:
            return x
        return record(x.tape, "reshape", (x,), shape=shape)
    return np.reshape(x, shape)


def swapaxes(x, axis1, axis2):
    if isinstance(x, Var):
        return record(x.tape, "swapaxes", (x,), axis1=axis1, axis2=axis2)
    return np.swapaxes(x, axis1, axis2)


def getitem(x, index):
    if not isinstance(index, tuple):
        index = (index,)
    if isinstance(x, Var):
        return record(x.tape, "getitem", (x,), index=index)
    return np.asarray(x)[index]


def scatter(g, index, shape):
    """Adjoint of `getitem`: zeros of `shape` with `g` added at `index`."""
    if not isinstance(index, tuple):
        index = (index,)
    if isinstance(g, Var):
        return record(g.tape, "scatter", (g,), index=index, shape=tuple(shape))
    return _np_scatter(g, index, tuple(shape))


def _first_tape(xs):
    for x in xs:
        if isinstance(x, Var):
            return x.tape
    return None


def concat(xs, axis=0):
    tape = _first_tape(xs)
    if tape is None:
        return np.concatenate(xs, axis=axis)
    return record(tape, "concat", [_lift(tape, x) for x in xs], axis=axis)


def stack(xs, axis=0):
    tape = _first_tape(xs)
    if tape is None:
        return np.stack(xs, axis=axis)
    return record(tape, "stack", [_lift(tape, x) for x in xs], axis=axis)


def constant_like(x, value):
    """`value` on x's tape when x is a Var, else as an ndarray."""
    if isinstance(x, Var):
        return x.tape.constant(value)
    return np.asarray(value, dtype=np.float64)


def detach(x):
    return x.tape.constant(x.value) if isinstance(x, Var) else x


# ---------------------------------------------------------------------------
# adjoint rules, written once for both ndarray and Var arguments

def _vjp_matmul(g, ops, out, attrs):
    x, y = ops
    return (sum_to(g @ swapaxes(y, -1, -2), shape_of(x)),
            sum_to(swapaxes(x, -1, -2) @ g, shape_of(y)))


def _vjp_sum(g, ops, out, attrs):
    (x,) = ops
    xs = shape_of(x)
    axis = attrs["axis"]
    if not attrs["keepdims"]:
        if axis is None:
            kshape = (1,) * len(xs)
        else:
            axes = (axis,) if isinstance(axis, int) else tuple(axis)
            axes = {a % len(xs) for a in axes}
            kshape = tuple(1 if i in axes else s for i, s in enumerate(xs))
        g = reshape(g, kshape)
    return (broadcast_to(g, xs),)


def _vjp_concat(g, ops, out, attrs):
    axis = attrs["axis"] % len(shape_of(out))
    grads, start = [], 0
    for x in ops:
        n = shape_of(x)[axis]
        idx = (slice(None),) * axis + (slice(start, start + n),)
        grads.append(getitem(g, idx))
        start += n
    return tuple(grads)


def _vjp_stack(g, ops, out, attrs):
    axis = attrs["axis"] % len(shape_of(out))
    return tuple(getitem(g, (slice(None),) * axis + (i,)) for i in range(len(ops)))


def _vjp_relu(g, ops, out, attrs):
    mask = (value_of(ops[0]) > 0.0).astype(np.float64)
    return (g * constant_like(g, mask),)


def _vjp_power(g, ops, out, attrs):
    (x,) = ops
    p = attrs["exponent"]
    if isinstance(x, Var):
        return (g * (p * x ** (p - 1.0)),)
    return (g * (p * np.power(x, p - 1.0)),)


_VJP = {
    "add": lambda g, o, out, a: (sum_to(g, shape_of(o[0])), sum_to(g, shape_of(o[1]))),
    "sub": lambda g, o, out, a: (sum_to(g, shape_of(o[0])), sum_to(-g, shape_of(o[1]))),
    "mul": lambda g, o, out, a: (sum_to(g * o[1], shape_of(o[0])),
                                 sum_to(g * o[0], shape_of(o[1]))),
    "div": lambda g, o, out, a: (sum_to(g / o[1], shape_of(o[0])),
                                 sum_to(-(g * out) / o[1], shape_of(o[1]))),
    "neg": lambda g, o, out, a: (-g,),
    "exp": lambda g, o, out, a: (g * out,),
    "log": lambda g, o, out, a: (g / o[0],),
    "sin": lambda g, o, out, a: (g * cos(o[0]),),
    "cos": lambda g, o, out, a: (-(g * sin(o[0])),),
    "tanh": lambda g, o, out, a: (g * (1.0 - out * out),),
    "sqrt": lambda g, o, out, a: (g / (2.0 * out),),
    "relu": _vjp_relu,
    "power": _vjp_power,
    "matmul": _vjp_matmul,
    "sum": _vjp_sum,
    "sum_to": lambda g, o, out, a: (broadcast_to(g, shape_of(o[0])),),
    "broadcast": lambda g, o, out, a: (sum_to(g, shape_of(o[0])),),
    "reshape": lambda g, o, out, a: (reshape(g, shape_of(o[0])),),
    "swapaxes": lambda g, o, out, a: (swapaxes(g, a["axis1"], a["axis2"]),),
    "getitem": lambda g, o, out, a: (scatter(g, a["index"], shape_of(o[0])),),
    "scatter": lambda g, o, out, a: (getitem(g, a["index"]),),
    "concat": _vjp_concat,
    "stack": _vjp_stack,
}


# ---------------------------------------------------------------------------
# reverse sweeps

def _check_same_tape(output, wrt):
    tape = output.tape
    for w in wrt:
        if not isinstance(w, Var) or w.tape is not tape:
            raise ValueError("wrt entries must be Vars on the output's tape")
    return tape


def _relevant_nodes(tape, out_idx, wrt_idx):
    """Indices (descending) lying on some path wrt -> output."""
    if not wrt_idx:
        return []
    lo = min(wrt_idx)
    if out_idx < lo:
        return []
    nodes = tape.nodes
    wset = set(wrt_idx)
    dep = [False] * (out_idx + 1)
    for i in range(lo, out_idx + 1):
        if i in wset:
            dep[i] = True
        else:
            for o in nodes[i].operands:
                if dep[o]:
                    dep[i] = True
                    break
    if not dep[out_idx]:
        return []
    need = [False] * (out_idx + 1)
    need[out_idx] = True
    order = []
    for i in range(out_idx, lo - 1, -1):
        if need[i]:
            order.append(i)
            for o in nodes[i].operands:
                if dep[o]:
                    need[o] = True
    return order


def _sweep(tape, output, wrt, seed, graph):
    nodes = tape.nodes
    wrt_idx = [w.index for w in wrt]
    wset = set(wrt_idx)
    order = _relevant_nodes(tape, output.index, wrt_idx)
    results = {}
    if order:
        if seed is None:
            seed = np.ones_like(output.value)
        if graph:
            seed = _lift(tape, seed)
        else:
            seed = np.asarray(value_of(seed), dtype=np.float64)
        adj = {output.index: seed}
        relevant = set(order)
        for i in order:
            g = adj.pop(i, None)
            if g is None:
                continue
            if i in wset:
                results[i] = g
            node = nodes[i]
            if node.kind == "const":
                continue
            if graph:
                ops = [Var(tape, o) for o in node.operands]
                out = Var(tape, i)
            else:
                ops = [nodes[o].value for o in node.operands]
                out = node.value
            grads = _VJP[node.kind](g, ops, out, node.attrs)
            for o, go in zip(node.operands, grads):
                if o not in relevant:
                    continue
                prev = adj.get(o)
                adj[o] = go if prev is None else prev + go
    out = []
    for w in wrt:
        g = results.get(w.index)
        if g is None:
            g = tape.constant(np.zeros_like(w.value)) if graph else np.zeros_like(w.value)
        elif not graph:
            g = np.array(g, dtype=np.float64)
        out.append(g)
    return out


def backward(output: Var, wrt: Sequence[Var], seed=None) -> list[np.ndarray]:
    """Numeric gradients d(output)/d(wrt_i); the tape is not modified.

    For non-scalar outputs the result is the vector-Jacobian product with
    `seed` (default: all ones, i.e. the gradient of output.sum()).
    """
    tape = _check_same_tape(output, wrt)
    return _sweep(tape, output, list(wrt), seed, graph=False)


def backward_as_graph(output: Var, wrt: Sequence[Var], seed=None) -> list[Var]:
    """Like `backward`, but the gradients come back as Vars on the tape."""
    tape = _check_same_tape(output, wrt)
    return _sweep(tape, output, list(wrt), seed, graph=True)


# ---------------------------------------------------------------------------
# complex pairs

def _is_real(x):
    if isinstance(x, (Var, float, int)):
        return True
    return isinstance(x, np.ndarray) and not np.iscomplexobj(x)


class ComplexVar:
    """Complex array as a (re, im) pair of Vars or real ndarrays."""

    __slots__ = ("re", "im")
    __array_ufunc__ = None

    def __init__(self, re, im=None):
        if im is None:
            im = np.zeros(shape_of(re))
        self.re = re
        self.im = im

    @classmethod
    def of(cls, z) -> ComplexVar:
        if isinstance(z, ComplexVar):
            return z
        z = np.asarray(z)
        return cls(np.ascontiguousarray(z.real, dtype=np.float64),
                   np.ascontiguousarray(z.imag, dtype=np.float64))

    @property
    def value(self) -> np.ndarray:
        return value_of(self.re) + 1j * value_of(self.im)

    @property
    def shape(self):
        return tuple(shape_of(self.re))

    @property
    def ndim(self):
        return len(self.shape)

    @property
    def on_tape(self):
        return isinstance(self.re, Var) or isinstance(self.im, Var)

    def __repr__(self):
        return f"ComplexVar({self.value!r})"

    def __add__(self, o):
        if _is_real(o):
            return ComplexVar(self.re + o, self.im)
        o = ComplexVar.of(o)
        return ComplexVar(self.re + o.re, self.im + o.im)

    __radd__ = __add__

    def __sub__(self, o):
        if _is_real(o):
            return ComplexVar(self.re - o, self.im)
        o = ComplexVar.of(o)
        return ComplexVar(self.re - o.re, self.im - o.im)

    def __rsub__(self, o):
        return (-self) + o

    def __neg__(self):
        return ComplexVar(-self.re, -self.im)

    def __mul__(self, o):
        if _is_real(o):
            return ComplexVar(self.re * o, self.im * o)
        o = ComplexVar.of(o)
        return ComplexVar(self.re * o.re - self.im * o.im,
                          self.re * o.im + self.im * o.re)

    __rmul__ = __mul__

    def __truediv__(self, o):
        if _is_real(o):
            return ComplexVar(self.re / o, self.im / o)
        o = ComplexVar.of(o)
        den = o.re * o.re + o.im * o.im
        return ComplexVar((self.re * o.re + self.im * o.im) / den,
                          (self.im * o.re - self.re * o.im) / den)

    def __matmul__(self, o):
        if _is_real(o):
            return ComplexVar(matmul(self.re, o), matmul(self.im, o))
        o = ComplexVar.of(o)
        return ComplexVar(matmul(self.re, o.re) - matmul(self.im, o.im),
                          matmul(self.re, o.im) + matmul(self.im, o.re))

    def __rmatmul__(self, o):
        if _is_real(o):
            return ComplexVar(matmul(o, self.re), matmul(o, self.im))
        return ComplexVar.of(o) @ self

    def __getitem__(self, index):
        return ComplexVar(getitem(self.re, index), getitem(self.im, index))

    def conj(self) -> ComplexVar:
        return ComplexVar(self.re, -self.im)

    def abs2(self):
        """Elementwise squared magnitude (real)."""
        return self.re * self.re + self.im * self.im

    def sum(self, axis=None, keepdims=False):
        return ComplexVar(vsum(self.re, axis, keepdims), vsum(self.im, axis, keepdims))

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = shape[0]
        return ComplexVar(reshape(self.re, shape), reshape(self.im, shape))

    @property
    def mT(self) -> ComplexVar:
        return ComplexVar(swapaxes(self.re, -1, -2), swapaxes(self.im, -1, -2))

    @property
    def H(self) -> ComplexVar:
        """Conjugate transpose of the last two axes."""
        return ComplexVar(swapaxes(self.re, -1, -2), -swapaxes(self.im, -1, -2))


def cconcat(xs, axis=0) -> ComplexVar:
    return ComplexVar(concat([x.re for x in xs], axis), concat([x.im for x in xs], axis))


def cstack(xs, axis=0) -> ComplexVar:
    return ComplexVar(stack([x.re for x in xs], axis), stack([x.im for x in xs], axis))


def solve_on_tape(A, b) -> ComplexVar:
    """Solve A x = b by Gaussian elimination with partial pivoting.

    A has shape (..., n, n), b has shape (..., n) or (..., n, r); leading axes
    are independent systems.  Each elimination and back-substitution step is
    recorded (when the inputs are on a tape), so the solution is
    differentiable to any order.  Row swaps enter as constant permutation
    matrices chosen from the current values.
    """
    A = ComplexVar.of(A)
    b = ComplexVar.of(b)
    n = A.shape[-1]
    if A.shape[-2] != n:
        raise ValueError(f"A must be square, got {A.shape}")
    vector = b.ndim == A.ndim - 1
    if vector:
        b = b.reshape(b.shape + (1,))
    batch = A.shape[:-2]
    eye = np.eye(n)
    for k in range(n):
        mags = np.abs(A.value[..., k:, k])
        rel = np.argmax(mags, axis=-1)
        pivot = np.take_along_axis(mags, rel[..., None], axis=-1)[..., 0]
        if np.any(pivot < PIVOT_TOL):
            raise SingularMatrix(f"pivot magnitude {float(np.min(pivot)):.3e} at step {k}")
        p = rel + k
        if np.any(p != k):
            order = np.array(np.broadcast_to(np.arange(n), batch + (n,)))
            np.put_along_axis(order, p[..., None], k, axis=-1)
            order[..., k] = p
            perm = eye[order]
            A = perm @ A
            b = perm @ b
        if k == n - 1:
            break
        f = A[..., k + 1:, k] / A[..., k, k].reshape(batch + (1,))
        f = f.reshape(batch + (n - k - 1, 1))
        A = cconcat([A[..., :k + 1, :], A[..., k + 1:, :] - f * A[..., k:k + 1, :]], axis=-2)
        b = cconcat([b[..., :k + 1, :], b[..., k + 1:, :] - f * b[..., k:k + 1, :]], axis=-2)
    r = b.shape[-1]
    rows: list = [None] * n
    for k in range(n - 1, -1, -1):
        acc = b[..., k, :]
        if k < n - 1:
            tail = cstack(rows[k + 1:], axis=-2)
            acc = acc - (A[..., k:k + 1, k + 1:] @ tail).reshape(batch + (r,))
        rows[k] = acc / A[..., k, k].reshape(batch + (1,))
    x = cstack(rows, axis=-2)
    if vector:
        x = x.reshape(batch + (n,))
    return x
