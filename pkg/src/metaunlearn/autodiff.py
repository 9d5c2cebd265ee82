"""Tape-based reverse-mode automatic differentiation over dense float64 arrays.

Supports gradients of scalars and gradients of expressions that contain
gradients (double backward / Hessian-vector products). Every backward rule is
expressed in terms of the primitives below, so when a tape is recorded with
``higher_order=True`` the backward pass itself is recorded and can be
differentiated again.

Single-threaded per tape: a ``Tape`` must not be shared across concurrent
contexts. ``Value`` objects detached from tapes are immutable constants and
safe to share read-only.
"""

from __future__ import annotations

import numpy as np

__all__ = [
    "NumericsError",
    "Value",
    "Tape",
    "record",
    "grad",
    "hvp",
    "fd_check",
    "FdReport",
    "no_recording",
    "add",
    "sub",
    "neg",
    "mul",
    "div",
    "matmul",
    "transpose",
    "reshape",
    "broadcast_to",
    "sum_all",
    "sum_axes",
    "mean_all",
    "square",
    "sqrt",
    "exp",
    "sin",
    "cos",
    "sigmoid",
    "silu",
    "relu",
    "softmax",
    "concat",
    "take",
    "stop_gradient",
]


class NumericsError(RuntimeError):
    """Raised when an operation produces non-finite values or a linear solve fails."""


# ---------------------------------------------------------------------------
# Value and tape machinery
# ---------------------------------------------------------------------------


class Value:
    """A float64 array participating in (at most) one active computation tape.

    All entries are finite by construction; any primitive that would produce
    NaN/Inf raises :class:`NumericsError` instead.
    """

    __slots__ = ("data", "_tape", "_nid")

    def __init__(self, data):
        arr = np.asarray(data, dtype=np.float64)
        if not np.isfinite(arr).all():
            raise NumericsError("Value initialized with non-finite entries")
        self.data = arr
        self._tape = None
        self._nid = -1

    @property
    def shape(self):
        return self.data.shape

    def item(self) -> float:
        return float(self.data)

    def __repr__(self):
        return f"Value(shape={self.data.shape}, tracked={self._tape is not None})"

    # Refuse silent mixing with numpy ufuncs; only module primitives are differentiable.
    def __array_ufunc__(self, ufunc, method, *args, **kwargs):
        raise TypeError(
            f"unsupported primitive for Value: numpy.{ufunc.__name__}; "
            "use the operations exported by metaunlearn.autodiff"
        )

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

    def __getitem__(self, key):
        return take(self, key)


class _Node:
    __slots__ = ("value", "parents", "vjp", "fwd")

    def __init__(self, value, parents, vjp, fwd):
        self.value = value
        self.parents = parents  # tuple of node ids
        self.vjp = vjp  # callable(Value) -> tuple[Value | None, ...], or None for leaves
        self.fwd = fwd  # callable(*parent arrays) -> array, or None for leaves


class Tape:
    """Ordered record of primitive operations, in topological order.

    With ``higher_order=True`` the operations executed during a backward pass
    are themselves recorded, which is what makes grad-of-grad and
    Hessian-vector products possible.
    """

    def __init__(self, higher_order: bool = False):
        self.higher_order = higher_order
        self._nodes: list[_Node] = []

    def __len__(self):
        return len(self._nodes)

    def __enter__(self):
        _push_tape(self)
        return self

    def __exit__(self, exc_type, exc, tb):
        _pop_tape(self)
        return False

    def _leaf(self, v: Value) -> int:
        v._tape = self
        v._nid = len(self._nodes)
        self._nodes.append(_Node(v, (), None, None))
        return v._nid

    def _ensure_on_tape(self, v: Value) -> int:
        if v._tape is not self:
            return self._leaf(v)
        return v._nid

    def replay(self, output: Value) -> np.ndarray:
        """Re-execute the recorded operations and return the recomputed output.

        Bit-for-bit identical to the original evaluation under the same
        rounding mode (the recomputation runs the same numpy kernels in the
        same order).
        """
        if output._tape is not self:
            raise ValueError("output does not belong to this tape")
        results: list[np.ndarray] = []
        for node in self._nodes[: output._nid + 1]:
            if node.fwd is None:
                results.append(node.value.data)
            else:
                results.append(node.fwd(*(results[p] for p in node.parents)))
        return results[output._nid]


_TAPE_STACK: list[Tape] = []


def _push_tape(tape: Tape) -> None:
    _TAPE_STACK.append(tape)


def _pop_tape(tape: Tape) -> None:
    popped = _TAPE_STACK.pop()
    if popped is not tape:  # pragma: no cover - misuse guard
        raise RuntimeError("tape context exited out of order")


def _active_tape() -> Tape | None:
    return _TAPE_STACK[-1] if _TAPE_STACK else None


class no_recording:
    """Context manager that hides all active tapes (eager evaluation)."""

    def __enter__(self):
        global _TAPE_STACK
        self._saved = _TAPE_STACK
        _TAPE_STACK = []
        return self

    def __exit__(self, exc_type, exc, tb):
        global _TAPE_STACK
        _TAPE_STACK = self._saved
        return False


def _as_value(x) -> Value:
    return x if isinstance(x, Value) else Value(x)


def _make(name: str, inputs: tuple[Value, ...], vjp, fwd) -> Value:
    """Evaluate a primitive's forward closure, check finiteness, and record it.

    The same closure later serves tape replay, so replays run the identical
    numpy kernels. IEEE exceptions are masked during evaluation; non-finite
    results raise instead of propagating.
    """
    with np.errstate(all="ignore"):
        out_data = fwd(*(v.data for v in inputs))
    if not np.isfinite(out_data).all():
        raise NumericsError(f"primitive '{name}' produced non-finite values")
    out = Value.__new__(Value)
    out.data = out_data
    out._tape = None
    out._nid = -1
    tape = _active_tape()
    if tape is not None:
        parent_ids = tuple(tape._ensure_on_tape(v) for v in inputs)
        out._tape = tape
        out._nid = len(tape._nodes)
        tape._nodes.append(_Node(out, parent_ids, vjp, fwd))
    return out


# ---------------------------------------------------------------------------
# Primitives
# ---------------------------------------------------------------------------


def _unbroadcast(g: Value, shape: tuple[int, ...]) -> Value:
    """Reduce a broadcasted cotangent back to ``shape`` (sum over expanded axes)."""
    if g.data.shape == shape:
        return g
    extra = g.data.ndim - len(shape)
    if extra > 0:
        g = sum_axes(g, tuple(range(extra)), keepdims=False)
    axes = tuple(i for i, (gs, ss) in enumerate(zip(g.data.shape, shape)) if ss == 1 and gs != 1)
    if axes:
        g = sum_axes(g, axes, keepdims=True)
    if g.data.shape != shape:
        g = reshape(g, shape)
    return g


def add(a, b) -> Value:
    a, b = _as_value(a), _as_value(b)
    sa, sb = a.data.shape, b.data.shape

    def vjp(g):
        return _unbroadcast(g, sa), _unbroadcast(g, sb)

    return _make("add", (a, b), vjp, lambda x, y: x + y)


def sub(a, b) -> Value:
    a, b = _as_value(a), _as_value(b)
    sa, sb = a.data.shape, b.data.shape

    def vjp(g):
        return _unbroadcast(g, sa), _unbroadcast(neg(g), sb)

    return _make("sub", (a, b), vjp, lambda x, y: x - y)


def neg(a) -> Value:
    a = _as_value(a)
    return _make("neg", (a,), lambda g: (neg(g),), lambda x: -x)


def mul(a, b) -> Value:
    a, b = _as_value(a), _as_value(b)
    sa, sb = a.data.shape, b.data.shape

    def vjp(g):
        return _unbroadcast(mul(g, b), sa), _unbroadcast(mul(g, a), sb)

    return _make("mul", (a, b), vjp, lambda x, y: x * y)


def div(a, b) -> Value:
    a, b = _as_value(a), _as_value(b)
    sa, sb = a.data.shape, b.data.shape
    out = _make("div", (a, b), None, lambda x, y: x / y)

    def vjp(g):
        return (
            _unbroadcast(div(g, b), sa),
            _unbroadcast(neg(mul(g, div(out, b))), sb),
        )

    _attach_vjp(out, vjp)
    return out


def _attach_vjp(v: Value, vjp) -> None:
    # Late binding for rules that reuse the forward output (div, sqrt, ...).
    if v._tape is not None:
        v._tape._nodes[v._nid].vjp = vjp


def matmul(a, b) -> Value:
    a, b = _as_value(a), _as_value(b)
    if a.data.ndim != 2 or b.data.ndim != 2:
        raise TypeError("matmul supports 2-D operands only")

    def vjp(g):
        return matmul(g, transpose(b)), matmul(transpose(a), g)

    return _make("matmul", (a, b), vjp, lambda x, y: x @ y)


def transpose(a) -> Value:
    a = _as_value(a)
    if a.data.ndim != 2:
        raise TypeError("transpose supports 2-D operands only")
    return _make("transpose", (a,), lambda g: (transpose(g),), lambda x: x.T.copy())


def reshape(a, shape) -> Value:
    a = _as_value(a)
    shape = tuple(shape)
    orig = a.data.shape
    return _make("reshape", (a,), lambda g: (reshape(g, orig),), lambda x: x.reshape(shape).copy())


def broadcast_to(a, shape) -> Value:
    a = _as_value(a)
    shape = tuple(shape)
    orig = a.data.shape
    return _make("broadcast_to", (a,), lambda g: (_unbroadcast(g, orig),), lambda x: np.broadcast_to(x, shape).copy())


def sum_all(a) -> Value:
    a = _as_value(a)
    shape = a.data.shape
    return _make("sum_all", (a,), lambda g: (broadcast_to(g, shape),), lambda x: np.asarray(x.sum()))


def sum_axes(a, axes, keepdims: bool = False) -> Value:
    a = _as_value(a)
    axes = (axes,) if isinstance(axes, int) else tuple(axes)
    axes = tuple(ax % a.data.ndim for ax in axes)
    shape = a.data.shape
    kept = tuple(1 if i in axes else s for i, s in enumerate(shape))

    def vjp(g):
        if not keepdims:
            g = reshape(g, kept)
        return (broadcast_to(g, shape),)

    return _make("sum_axes", (a,), vjp, lambda x: x.sum(axis=axes, keepdims=keepdims))


def mean_all(a) -> Value:
    a = _as_value(a)
    return mul(sum_all(a), 1.0 / a.data.size)


def square(a) -> Value:
    a = _as_value(a)
    return _make("square", (a,), lambda g: (mul(g, mul(a, 2.0)),), lambda x: x * x)


def sqrt(a) -> Value:
    a = _as_value(a)
    out = _make("sqrt", (a,), None, np.sqrt)
    _attach_vjp(out, lambda g: (div(g, mul(out, 2.0)),))
    return out


def exp(a) -> Value:
    a = _as_value(a)
    out = _make("exp", (a,), None, np.exp)
    _attach_vjp(out, lambda g: (mul(g, out),))
    return out


def sin(a) -> Value:
    a = _as_value(a)
    return _make("sin", (a,), lambda g: (mul(g, cos(a)),), np.sin)


def cos(a) -> Value:
    a = _as_value(a)
    return _make("cos", (a,), lambda g: (neg(mul(g, sin(a))),), np.cos)


def _sigmoid_np(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def sigmoid(a) -> Value:
    a = _as_value(a)
    out = _make("sigmoid", (a,), None, _sigmoid_np)
    _attach_vjp(out, lambda g: (mul(g, mul(out, sub(1.0, out))),))
    return out


def silu(a) -> Value:
    a = _as_value(a)
    return mul(a, sigmoid(a))


def relu(a) -> Value:
    a = _as_value(a)
    mask = Value((a.data > 0).astype(np.float64))
    return _make("relu", (a,), lambda g: (mul(g, mask),), lambda x: np.maximum(x, 0.0))


def _softmax_np(x: np.ndarray, axis: int) -> np.ndarray:
    shifted = x - x.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=axis, keepdims=True)


def softmax(a, axis: int = -1) -> Value:
    a = _as_value(a)
    out = _make("softmax", (a,), None, lambda x: _softmax_np(x, axis))

    def vjp(g):
        inner = sum_axes(mul(g, out), (axis % out.data.ndim,), keepdims=True)
        return (mul(out, sub(g, inner)),)

    _attach_vjp(out, vjp)
    return out


def concat(parts, axis: int = 0) -> Value:
    parts = [_as_value(p) for p in parts]
    sizes = [p.data.shape[axis] for p in parts]
    offsets = np.concatenate([[0], np.cumsum(sizes)])

    def vjp(g):
        cots = []
        for i in range(len(parts)):
            key = [slice(None)] * g.data.ndim
            key[axis] = slice(int(offsets[i]), int(offsets[i + 1]))
            cots.append(take(g, tuple(key)))
        return tuple(cots)

    return _make("concat", tuple(parts), vjp, lambda *xs: np.concatenate(xs, axis=axis))


def take(a, key) -> Value:
    """Basic indexing/slicing; advanced (array) indexing is not supported."""
    a = _as_value(a)
    shape = a.data.shape
    return _make("take", (a,), lambda g: (_scatter(g, key, shape),), lambda x: x[key].copy())


def _scatter(g, key, shape) -> Value:
    g = _as_value(g)

    def fwd(x):
        out = np.zeros(shape, dtype=np.float64)
        out[key] = x
        return out

    return _make("scatter", (g,), lambda h: (take(h, key),), fwd)


def stop_gradient(a) -> Value:
    """Identity forward, zero backward."""
    a = _as_value(a)
    return _make("stop_gradient", (a,), lambda g: (None,), lambda x: x.copy())


# ---------------------------------------------------------------------------
# Recording and differentiation
# ---------------------------------------------------------------------------


def record(expr, higher_order: bool = False) -> tuple[Value, Tape]:
    """Evaluate ``expr()`` under a fresh tape and return (output, tape)."""
    tape = Tape(higher_order=higher_order)
    with tape:
        out = expr()
    return out, tape


def grad(tape: Tape, output: Value, wrt: list[Value]) -> list[Value]:
    """Gradient of a scalar ``output`` with respect to each Value in ``wrt``.

    A ``wrt`` entry that does not participate in the tape (or is unreachable
    from ``output``) yields a zero gradient of matching shape rather than an
    error; parameter masks legitimately freeze segments.
    """
    if output._tape is not tape:
        raise ValueError("output does not belong to the given tape")
    if output.data.size != 1:
        raise ValueError(f"grad requires a scalar output, got shape {output.data.shape}")

    ctx = tape if tape.higher_order else None
    cots: dict[int, Value] = {}
    if ctx is not None:
        with ctx:
            cots[output._nid] = Value(np.ones_like(output.data))
            _backward(tape, output._nid, cots)
    else:
        with no_recording():
            cots[output._nid] = Value(np.ones_like(output.data))
            _backward(tape, output._nid, cots)

    out = []
    for v in wrt:
        if v._tape is tape and v._nid in cots:
            out.append(cots[v._nid])
        else:
            out.append(Value(np.zeros_like(v.data)))
    return out


def _backward(tape: Tape, start: int, cots: dict[int, Value]) -> None:
    nodes = tape._nodes
    for nid in range(start, -1, -1):
        g = cots.get(nid)
        if g is None:
            continue
        node = nodes[nid]
        if node.vjp is None:
            continue
        for pid, pg in zip(node.parents, node.vjp(g)):
            if pg is None:
                continue
            if pid in cots:
                cots[pid] = add(cots[pid], pg)
            else:
                cots[pid] = pg


def hvp(tape: Tape, output: Value, wrt: Value, v) -> Value:
    """Hessian-vector product H·v, computed as the gradient of (grad ⋅ v)."""
    if not tape.higher_order:
        raise ValueError("hvp requires a tape recorded with higher_order=True")
    v = _as_value(v)
    if v.data.shape != wrt.data.shape:
        raise ValueError("v must have the shape of wrt")
    (g,) = grad(tape, output, [wrt])
    with tape:
        s = sum_all(mul(g, v))
    (h,) = grad(tape, s, [wrt])
    return h


# ---------------------------------------------------------------------------
# Finite-difference verification
# ---------------------------------------------------------------------------


class FdReport:
    """Result of comparing an analytic gradient against central differences."""

    __slots__ = ("max_rel_error", "tol", "passed", "n_params")

    def __init__(self, max_rel_error: float, tol: float, n_params: int):
        self.max_rel_error = max_rel_error
        self.tol = tol
        self.passed = max_rel_error < tol
        self.n_params = n_params

    def __repr__(self):
        status = "pass" if self.passed else "FAIL"
        return f"FdReport({status}: max_rel_error={self.max_rel_error:.3e}, tol={self.tol:.0e}, n={self.n_params})"


def fd_check(f, theta, tol: float, step: float = 1e-5) -> FdReport:
    """Compare the analytic gradient of scalar ``f(theta)`` to central differences.

    Deviations are measured relative to the larger of the two gradients'
    max-norms, so a uniformly tiny true gradient does not produce spurious
    failures.
    """
    theta = np.asarray(theta, dtype=np.float64)
    v = Value(theta)
    with Tape() as tape:
        out = f(v)
    (g,) = grad(tape, out, [v])
    analytic = g.data.reshape(-1)

    flat = theta.reshape(-1)
    fd = np.empty_like(flat)
    with no_recording():
        for i in range(flat.size):
            e = np.zeros_like(flat)
            e[i] = step
            fp = float(f(Value((flat + e).reshape(theta.shape))).data)
            fm = float(f(Value((flat - e).reshape(theta.shape))).data)
            fd[i] = (fp - fm) / (2.0 * step)

    scale = max(np.abs(analytic).max(initial=0.0), np.abs(fd).max(initial=0.0), 1e-12)
    dev = float(np.abs(analytic - fd).max(initial=0.0) / scale)
    return FdReport(dev, tol, flat.size)
