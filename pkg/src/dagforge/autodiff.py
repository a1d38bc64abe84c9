"""Reverse-mode differentiation tape over float64 numpy arrays.

Every differentiable op in this module dispatches on its arguments: if none
of them is a ``Node``, the op computes with plain numpy and returns a plain
array (fast path, nothing recorded). If at least one argument lives on a
tape, the result is recorded as a new ``Node`` carrying a VJP closure, and
``grad`` later replays the records in reverse topological order.

The tape is rebuilt for every training step (define-by-run); there is no
graph caching. All values are float64 throughout: the balance residual mixes
likelihood sums over a hundred observations and must not lose precision.
"""

from __future__ import annotations

import math

import numpy as np

# Sentinel for log-probability zero: most-negative finite float64. Using a
# finite value instead of -inf keeps downstream arithmetic NaN-free; the
# gradient at sentinel entries is hard-zeroed by the ops that emit them.
LOG_SENTINEL = float(np.finfo(np.float64).min)

LOG_2PI = math.log(2.0 * math.pi)


def as_f64(x) -> np.ndarray:
    """Coerce to a float64 ndarray (no copy when already float64)."""
    return np.asarray(x, dtype=np.float64)


class Node:
    """One record on a tape: an output value plus how to push gradients back.

    ``parents`` are the Node inputs of the op (plain-array inputs are
    constants and do not appear). ``vjp`` maps the output cotangent to a
    tuple of cotangents aligned with ``parents``. ``fwd`` recomputes the
    value from the parent values, which is what makes tape replay possible.
    """

    __slots__ = ("tape", "index", "value", "parents", "vjp", "fwd", "op")

    def __init__(self, tape, value, parents, vjp, fwd, op):
        self.tape = tape
        self.value = value
        self.parents = parents
        self.vjp = vjp
        self.fwd = fwd
        self.op = op
        self.index = tape._register(self)

    @property
    def shape(self):
        return self.value.shape

    # Arithmetic sugar; reflected variants let plain arrays mix in freely.
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)

    def __pow__(self, exponent):
        return power(self, exponent)

    def __repr__(self):
        return f"Node(op={self.op!r}, shape={self.value.shape}, index={self.index})"


class Tape:
    """Append-only record of operations, indexed in topological order."""

    def __init__(self):
        self.nodes: list[Node] = []

    def _register(self, node: Node) -> int:
        index = len(self.nodes)
        self.nodes.append(node)
        return index

    def leaf(self, value) -> Node:
        """Wrap an input array as a differentiable leaf on this tape."""
        value = as_f64(value)
        return Node(self, value, (), None, None, "leaf")

    def replay(self) -> None:
        """Recompute every non-leaf value in place from its parents.

        Replaying with unchanged leaves must reproduce the recorded values
        bit-for-bit; tests rely on this to pin down tape determinism.
        """
        for node in self.nodes:
            if node.fwd is not None:
                node.value = node.fwd(*(p.value for p in node.parents))


def value_of(x) -> np.ndarray:
    """The plain float64 array behind ``x`` (Node or array-like)."""
    if isinstance(x, Node):
        return x.value
    return as_f64(x)


def detach(x):
    """Evaluate ``x`` as a constant: gradients will not flow through it."""
    return value_of(x)


def _tape_of(*args) -> Tape | None:
    for a in args:
        if isinstance(a, Node):
            return a.tape
    return None


def _record(tape, value, node_args, vjps, fwd, op):
    """Record ``value`` on ``tape`` with per-parent VJPs.

    ``node_args`` and ``vjps`` are aligned; entries whose argument is not a
    Node are dropped (constants need no gradient).
    """
    parents = tuple(a for a in node_args if isinstance(a, Node))
    keep = [i for i, a in enumerate(node_args) if isinstance(a, Node)]
    kept_vjps = [vjps[i] for i in keep]

    def vjp(g):
        return tuple(fn(g) for fn in kept_vjps)

    return Node(tape, value, parents, vjp, fwd, op)


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum ``g`` down to ``shape``, undoing numpy broadcasting."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


# ---------------------------------------------------------------------------
# Elementwise arithmetic
# ---------------------------------------------------------------------------


def add(a, b):
    av, bv = value_of(a), value_of(b)
    out = av + bv
    tape = _tape_of(a, b)
    if tape is None:
        return out
    return _record(
        tape, out, (a, b),
        (lambda g: _unbroadcast(g, av.shape), lambda g: _unbroadcast(g, bv.shape)),
        _fwd_binary(a, b, np.add),
        "add",
    )


def _fwd_binary(a, b, fn):
    """Forward closure for a binary op where either side may be constant."""
    if isinstance(a, Node) and isinstance(b, Node):
        return lambda x, y: fn(x, y)
    if isinstance(a, Node):
        bc = value_of(b)
        return lambda x: fn(x, bc)
    ac = value_of(a)
    return lambda y: fn(ac, y)


def sub(a, b):
    av, bv = value_of(a), value_of(b)
    out = av - bv
    tape = _tape_of(a, b)
    if tape is None:
        return out
    return _record(
        tape, out, (a, b),
        (lambda g: _unbroadcast(g, av.shape), lambda g: _unbroadcast(-g, bv.shape)),
        _fwd_binary(a, b, np.subtract),
        "sub",
    )


def mul(a, b):
    av, bv = value_of(a), value_of(b)
    out = av * bv
    tape = _tape_of(a, b)
    if tape is None:
        return out
    return _record(
        tape, out, (a, b),
        (lambda g: _unbroadcast(g * bv, av.shape), lambda g: _unbroadcast(g * av, bv.shape)),
        _fwd_binary(a, b, np.multiply),
        "mul",
    )


def div(a, b):
    av, bv = value_of(a), value_of(b)
    out = av / bv
    tape = _tape_of(a, b)
    if tape is None:
        return out
    return _record(
        tape, out, (a, b),
        (
            lambda g: _unbroadcast(g / bv, av.shape),
            lambda g: _unbroadcast(-g * av / (bv * bv), bv.shape),
        ),
        _fwd_binary(a, b, np.divide),
        "div",
    )


def power(a, exponent: float):
    av = value_of(a)
    out = av ** exponent
    tape = _tape_of(a)
    if tape is None:
        return out
    return _record(
        tape, out, (a,),
        (lambda g: g * exponent * av ** (exponent - 1.0),),
        lambda x: x ** exponent,
        "power",
    )


def exp(a):
    av = value_of(a)
    out = np.exp(av)
    tape = _tape_of(a)
    if tape is None:
        return out
    return _record(tape, out, (a,), (lambda g: g * out,), np.exp, "exp")


def log(a):
    av = value_of(a)
    out = np.log(av)
    tape = _tape_of(a)
    if tape is None:
        return out
    return _record(tape, out, (a,), (lambda g: g / av,), np.log, "log")


def sqrt(a):
    av = value_of(a)
    out = np.sqrt(av)
    tape = _tape_of(a)
    if tape is None:
        return out
    return _record(tape, out, (a,), (lambda g: g * 0.5 / out,), np.sqrt, "sqrt")


def square(a):
    return mul(a, a)


def relu(a):
    av = value_of(a)
    out = np.maximum(av, 0.0)
    tape = _tape_of(a)
    if tape is None:
        return out
    gate = (av > 0.0).astype(np.float64)
    return _record(
        tape, out, (a,), (lambda g: g * gate,),
        lambda x: np.maximum(x, 0.0), "relu",
    )


def step_positive(a) -> np.ndarray:
    """Indicator of positivity, 1.0 where x > 0 else 0.0.

    Piecewise constant, so it is returned as a plain array (zero gradient
    almost everywhere); used to express ReLU backprop as a forward op.
    """
    return (value_of(a) > 0.0).astype(np.float64)


def sigmoid(a):
    av = value_of(a)
    out = _sigmoid_values(av)
    tape = _tape_of(a)
    if tape is None:
        return out
    return _record(
        tape, out, (a,), (lambda g: g * out * (1.0 - out),),
        _sigmoid_values, "sigmoid",
    )


def _sigmoid_values(x: np.ndarray) -> np.ndarray:
    # Stable in both tails.
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def softplus(a):
    av = value_of(a)
    out = _softplus_values(av)
    tape = _tape_of(a)
    if tape is None:
        return out
    sig = _sigmoid_values(av)
    return _record(
        tape, out, (a,), (lambda g: g * sig,),
        _softplus_values, "softplus",
    )


def tanh(a):
    av = value_of(a)
    out = np.tanh(av)
    tape = _tape_of(a)
    if tape is None:
        return out
    return _record(
        tape, out, (a,), (lambda g: g * (1.0 - out * out),),
        np.tanh, "tanh",
    )


def _softplus_values(x: np.ndarray) -> np.ndarray:
    return np.logaddexp(0.0, x)


# ---------------------------------------------------------------------------
# Shape and reduction ops
# ---------------------------------------------------------------------------


def sum_(a, axis=None, keepdims: bool = False):
    av = value_of(a)
    out = av.sum(axis=axis, keepdims=keepdims)
    tape = _tape_of(a)
    if tape is None:
        return out

    def backward(g):
        g = np.asarray(g)
        if axis is None:
            return np.broadcast_to(g, av.shape).copy() if g.ndim == 0 else np.full(av.shape, g)
        if not keepdims:
            axes = axis if isinstance(axis, tuple) else (axis,)
            for ax in sorted(a_ % av.ndim for a_ in axes):
                g = np.expand_dims(g, ax)
        return np.broadcast_to(g, av.shape)

    return _record(
        tape, np.asarray(out, dtype=np.float64), (a,), (backward,),
        lambda x: np.asarray(x.sum(axis=axis, keepdims=keepdims), dtype=np.float64),
        "sum",
    )


def mean_(a, axis=None, keepdims: bool = False):
    av = value_of(a)
    if axis is None:
        count = av.size
    else:
        axes = axis if isinstance(axis, tuple) else (axis,)
        count = 1
        for ax in axes:
            count *= av.shape[ax]
    return div(sum_(a, axis=axis, keepdims=keepdims), float(count))


def reshape(a, shape):
    av = value_of(a)
    out = av.reshape(shape)
    tape = _tape_of(a)
    if tape is None:
        return out
    return _record(
        tape, out, (a,), (lambda g: g.reshape(av.shape),),
        lambda x: x.reshape(shape), "reshape",
    )


def swapaxes(a, axis1: int, axis2: int):
    av = value_of(a)
    out = np.swapaxes(av, axis1, axis2)
    tape = _tape_of(a)
    if tape is None:
        return out
    return _record(
        tape, out, (a,), (lambda g: np.swapaxes(g, axis1, axis2),),
        lambda x: np.swapaxes(x, axis1, axis2), "swapaxes",
    )


def concat(parts, axis: int = -1):
    values = [value_of(p) for p in parts]
    out = np.concatenate(values, axis=axis)
    tape = _tape_of(*parts)
    if tape is None:
        return out
    sizes = [v.shape[axis] for v in values]
    offsets = np.cumsum([0] + sizes)

    def make_vjp(k):
        lo, hi = offsets[k], offsets[k + 1]

        def backward(g):
            index = [slice(None)] * g.ndim
            index[axis] = slice(lo, hi)
            return g[tuple(index)]

        return backward

    return _record(
        tape, out, tuple(parts), tuple(make_vjp(k) for k in range(len(parts))),
        lambda *xs: np.concatenate(_fill_constants(xs, parts, values), axis=axis),
        "concat",
    )


def _fill_constants(node_values, args, all_values):
    """Interleave replayed node values with the recorded constant operands."""
    result = []
    it = iter(node_values)
    for arg, const in zip(args, all_values):
        result.append(next(it) if isinstance(arg, Node) else const)
    return result


def _mm(x: np.ndarray, y: np.ndarray) -> np.ndarray:
    """Matmul that flattens leading batch axes when the right side is a
    plain matrix, turning many tiny gemms into one large one."""
    if y.ndim == 2 and x.ndim > 2 and x.shape[-1] > 0:
        return (x.reshape(-1, x.shape[-1]) @ y).reshape(x.shape[:-1] + (y.shape[1],))
    return x @ y


def matmul(a, b):
    av, bv = value_of(a), value_of(b)
    out = _mm(av, bv)
    tape = _tape_of(a, b)
    if tape is None:
        return out

    def grad_a(g):
        if bv.ndim == 2 and g.ndim > 2:
            return (g.reshape(-1, g.shape[-1]) @ bv.T).reshape(av.shape)
        return _unbroadcast(g @ np.swapaxes(bv, -1, -2), av.shape)

    def grad_b(g):
        if bv.ndim == 2 and av.ndim > 2:
            # Contract all batch axes at once instead of summing a batched
            # outer-product temporary.
            axes = tuple(range(av.ndim - 1))
            return np.tensordot(av, g, axes=(axes, axes))
        return _unbroadcast(np.swapaxes(av, -1, -2) @ g, bv.shape)

    return _record(
        tape, out, (a, b), (grad_a, grad_b),
        _fwd_binary(a, b, _mm), "matmul",
    )


def getitem(a, index):
    """Basic or integer-array indexing with scatter-add backward."""
    av = value_of(a)
    out = av[index]
    tape = _tape_of(a)
    if tape is None:
        return out

    def backward(g):
        z = np.zeros_like(av)
        np.add.at(z, index, g)
        return z

    return _record(
        tape, np.asarray(out, dtype=np.float64), (a,), (backward,),
        lambda x: np.asarray(x[index], dtype=np.float64), "getitem",
    )


def solve_triangular_lower(L, b):
    """Solve L z = b for lower-triangular L (2-d), differentiable in both."""
    Lv, bv = value_of(L), value_of(b)
    z = np.linalg.solve(Lv, bv)
    tape = _tape_of(L, b)
    if tape is None:
        return z

    def grad_L(g):
        gb = np.linalg.solve(Lv.T, g)
        full = -np.outer(gb, z) if z.ndim == 1 else -gb @ z.T
        return np.tril(full)

    def grad_b(g):
        return np.linalg.solve(Lv.T, g)

    return _record(
        tape, z, (L, b), (grad_L, grad_b),
        _fwd_binary(L, b, lambda lv, rv: np.linalg.solve(lv, rv)),
        "solve_tril",
    )


def stack_scalars(parts):
    """Stack scalar nodes/values into a 1-d vector."""
    values = [np.asarray(value_of(p), dtype=np.float64).reshape(()) for p in parts]
    out = np.stack(values)
    tape = _tape_of(*parts)
    if tape is None:
        return out

    def make_vjp(k):
        return lambda g: np.asarray(g[k], dtype=np.float64)

    return _record(
        tape, out, tuple(parts), tuple(make_vjp(k) for k in range(len(parts))),
        lambda *xs: np.stack([np.asarray(x, dtype=np.float64).reshape(())
                              for x in _fill_constants(xs, parts, values)]),
        "stack_scalars",
    )


# ---------------------------------------------------------------------------
# Probability primitives
# ---------------------------------------------------------------------------


def masked_log_softmax(logits, mask):
    """Log-softmax over the entries of ``mask`` that are True.

    Works on the last axis (leading axes are batch). Masked entries come out
    as ``LOG_SENTINEL`` so their probability is exactly zero, and gradients
    at those entries are hard-zeroed rather than propagated through -inf
    arithmetic. Raises if any row has no valid entry.
    """
    lv = value_of(logits)
    m = np.asarray(mask, dtype=bool)
    m = np.broadcast_to(m, lv.shape)
    if not m.any(axis=-1).all():
        raise ValueError("no valid action: mask has a row with no True entry")

    neg = np.where(m, lv, -np.inf)
    top = neg.max(axis=-1, keepdims=True)
    shifted = np.where(m, lv - top, -np.inf)
    logz = np.log(np.exp(shifted, where=m, out=np.zeros_like(lv)).sum(axis=-1, keepdims=True))
    out = np.where(m, lv - top - logz, LOG_SENTINEL)

    tape = _tape_of(logits)
    if tape is None:
        return out

    probs = np.where(m, np.exp(out), 0.0)

    def backward(g):
        g = np.where(m, g, 0.0)
        return g - probs * g.sum(axis=-1, keepdims=True)

    def forward(x):
        neg2 = np.where(m, x, -np.inf)
        t2 = neg2.max(axis=-1, keepdims=True)
        sh2 = np.where(m, x - t2, -np.inf)
        lz2 = np.log(np.exp(sh2, where=m, out=np.zeros_like(x)).sum(axis=-1, keepdims=True))
        return np.where(m, x - t2 - lz2, LOG_SENTINEL)

    return _record(tape, out, (logits,), (backward,), forward, "masked_log_softmax")


def gaussian_diag_log_density(x, mean, var):
    """Log density of a diagonal-covariance Normal, summed over coordinates."""
    var_values = value_of(var)
    if np.any(var_values <= 0.0):
        raise ValueError("gaussian_diag_log_density: variance must be positive")
    diff = sub(x, mean)
    quad = div(mul(diff, diff), mul(var, 2.0))
    return sum_(sub(mul(add(log(var), LOG_2PI), -0.5), quad))


def gaussian_full_log_density(x, mean, scale_tril):
    """Log density of a full-covariance Normal given a lower-triangular factor.

    The covariance is ``scale_tril @ scale_tril.T``; the factor must have a
    strictly positive diagonal.
    """
    Lv = value_of(scale_tril)
    if Lv.ndim != 2 or Lv.shape[0] != Lv.shape[1]:
        raise ValueError("scale factor must be a square matrix")
    diag_index = np.arange(Lv.shape[0])
    if np.any(Lv[diag_index, diag_index] <= 0.0):
        raise ValueError("scale factor must have a strictly positive diagonal")
    k = Lv.shape[0]
    if k == 0:
        return 0.0 if _tape_of(x, mean, scale_tril) is None else sum_(mul(x, 0.0))
    z = solve_triangular_lower(scale_tril, sub(x, mean))
    log_diag = log(getitem(scale_tril, (diag_index, diag_index)))
    return sub(
        mul(sum_(log_diag), -1.0),
        add(0.5 * k * LOG_2PI, mul(sum_(mul(z, z)), 0.5)),
    )


def huber(residual, delta: float):
    """Huber value: quadratic inside ``delta``, linear outside, C1 everywhere."""
    if delta <= 0.0:
        raise ValueError("huber: delta must be positive")
    rv = value_of(residual)
    absr = np.abs(rv)
    small = absr <= delta
    out = np.where(small, 0.5 * rv * rv, delta * (absr - 0.5 * delta))
    tape = _tape_of(residual)
    if tape is None:
        return out
    slope = np.where(small, rv, delta * np.sign(rv))

    def forward(x):
        a = np.abs(x)
        s = a <= delta
        return np.where(s, 0.5 * x * x, delta * (a - 0.5 * delta))

    return _record(tape, out, (residual,), (lambda g: g * slope,), forward, "huber")


# ---------------------------------------------------------------------------
# Gradient driver
# ---------------------------------------------------------------------------


def grad(tape: Tape, output: Node, inputs) -> list[np.ndarray]:
    """d(output)/d(input) for each input node, by reverse sweep of the tape.

    ``output`` must be a scalar node. Inputs with no path to the output get
    exact zeros. Each tape node is visited at most once, in reverse
    topological (= recording) order.
    """
    if not isinstance(output, Node):
        raise ValueError("grad: output must be a Node on the tape")
    if output.value.ndim != 0 and output.value.size != 1:
        raise ValueError("grad: output node must be scalar")

    wanted = {inp.index for inp in inputs if isinstance(inp, Node)}
    adjoint: dict[int, np.ndarray] = {
        output.index: np.ones_like(output.value)
    }
    for node in reversed(tape.nodes[: output.index + 1]):
        g = adjoint.get(node.index)
        if g is None or node.vjp is None:
            continue
        if node.index not in wanted:
            del adjoint[node.index]  # free intermediates once propagated
        for parent, pg in zip(node.parents, node.vjp(g)):
            pg = np.asarray(pg, dtype=np.float64).reshape(parent.value.shape)
            slot = adjoint.get(parent.index)
            adjoint[parent.index] = pg if slot is None else slot + pg
    return [
        adjoint.get(inp.index, np.zeros_like(inp.value)) if isinstance(inp, Node)
        else np.zeros_like(as_f64(inp))
        for inp in inputs
    ]


def check_finite(arrays, context: str) -> None:
    """Raise if any array contains NaN or Inf; used after optimizer steps."""
    for name, arr in arrays.items() if isinstance(arrays, dict) else enumerate(arrays):
        if not np.all(np.isfinite(arr)):
            raise FloatingPointError(f"{context}: non-finite values in {name}")
