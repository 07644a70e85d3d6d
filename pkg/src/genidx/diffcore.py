"""Reverse-mode automatic differentiation over numpy arrays.

Expression graphs are built from :func:`var` placeholders and
:func:`const` payloads combined with numpy-backed operators, then
evaluated against a binding map (name -> ndarray).  Gradients come from
a single reverse sweep over the topologically sorted graph; adjoints of
shared subexpressions are summed.  Evaluation is deterministic for
fixed bindings.  Tests run in float64; values are promoted to whatever
dtype the bindings carry.

Elementwise broadcasting is restricted to a leading batch extent: the
two operand shapes must be equal, or one must be a scalar, or the
shorter shape must be a trailing suffix of the longer one (e.g.
``(B, V) + (V,)``).  Per-row scalar scaling and shifting are provided
by the dedicated ``scale_rows`` / ``shift_rows`` kernels instead of
general broadcasting.

``max`` reductions (and ``one_hot_argmax``) break ties toward the
lowest index so that argmax-derived identifiers are deterministic.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


class DiffError(Exception):
    """Base class for graph construction/evaluation failures."""


class ShapeError(DiffError):
    """Operand shapes do not conform for the given operator."""


class NonFiniteError(DiffError):
    """An operator produced NaN or infinity."""


class GradientError(DiffError):
    """Gradient request is invalid (non-scalar root, unbound name)."""


_SCALAR_TYPES = (int, float, np.integer, np.floating)


def _as_expr(x):
    if isinstance(x, Expr):
        return x
    if isinstance(x, _SCALAR_TYPES):
        return const(np.float64(x))
    if isinstance(x, np.ndarray):
        return const(x)
    raise TypeError(f"cannot use {type(x).__name__} as an expression operand")


class Expr:
    """One node of an expression graph: operator tag plus operand refs."""

    __slots__ = ("op", "args", "attrs")

    def __init__(self, op, args=(), **attrs):
        self.op = op
        self.args = tuple(args)
        self.attrs = attrs

    # -- operator sugar -------------------------------------------------
    def __add__(self, o):
        return Expr("add", (self, _as_expr(o)))

    def __radd__(self, o):
        return Expr("add", (_as_expr(o), self))

    def __sub__(self, o):
        return Expr("sub", (self, _as_expr(o)))

    def __rsub__(self, o):
        return Expr("sub", (_as_expr(o), self))

    def __mul__(self, o):
        return Expr("mul", (self, _as_expr(o)))

    def __rmul__(self, o):
        return Expr("mul", (_as_expr(o), self))

    def __truediv__(self, o):
        return Expr("div", (self, _as_expr(o)))

    def __rtruediv__(self, o):
        return Expr("div", (_as_expr(o), self))

    def __neg__(self):
        return Expr("neg", (self,))

    def __matmul__(self, o):
        return Expr("matmul", (self, _as_expr(o)))

    # -- reduction / shaping sugar --------------------------------------
    def sum(self, axis=None):
        return Expr("sum", (self,), axis=axis)

    def mean(self, axis=None):
        return Expr("mean", (self,), axis=axis)

    def max(self, axis=None):
        return Expr("max", (self,), axis=axis)

    def reshape(self, shape):
        return Expr("reshape", (self,), shape=tuple(shape))

    @property
    def T(self):
        return Expr("transpose", (self,))

    def __repr__(self):
        if self.op == "var":
            return f"Expr(var {self.attrs['name']!r})"
        return f"Expr({self.op}, {len(self.args)} args)"


# -- node constructors ---------------------------------------------------

def var(name: str) -> Expr:
    return Expr("var", name=name)


def const(value) -> Expr:
    return Expr("const", value=np.asarray(value))


def exp(x) -> Expr:
    return Expr("exp", (_as_expr(x),))


def log(x) -> Expr:
    return Expr("log", (_as_expr(x),))


def square(x) -> Expr:
    return Expr("square", (_as_expr(x),))


def sqrt(x) -> Expr:
    return Expr("sqrt", (_as_expr(x),))


def tanh(x) -> Expr:
    return Expr("tanh", (_as_expr(x),))


def relu(x) -> Expr:
    return Expr("relu", (_as_expr(x),))


def clip_min(x, lo: float) -> Expr:
    """max(x, lo) elementwise; subgradient 0 where x <= lo."""
    return Expr("clip_min", (_as_expr(x),), lo=float(lo))


def softmax(x, axis: int = -1) -> Expr:
    if axis != -1:
        raise ValueError("softmax supports the last axis only")
    return Expr("softmax", (_as_expr(x),))


def log_softmax(x, axis: int = -1) -> Expr:
    if axis != -1:
        raise ValueError("log_softmax supports the last axis only")
    return Expr("log_softmax", (_as_expr(x),))


def logsumexp(x, axis: int) -> Expr:
    return Expr("logsumexp", (_as_expr(x),), axis=axis)


def l2_normalize(x) -> Expr:
    """Normalize rows (last axis) to unit L2 norm; norms are clamped at 1e-12."""
    return Expr("l2norm", (_as_expr(x),))


def stop_gradient(x) -> Expr:
    """Pass the value through; block derivative flow."""
    return Expr("stop_grad", (_as_expr(x),))


def one_hot_argmax(x) -> Expr:
    """One-hot of the last-axis argmax (ties to lowest index); zero gradient."""
    return Expr("one_hot_argmax", (_as_expr(x),))


def slice_last(x, start: int, stop: int) -> Expr:
    return Expr("slice_last", (_as_expr(x),), start=int(start), stop=int(stop))


def concat_last(parts) -> Expr:
    return Expr("concat", tuple(_as_expr(p) for p in parts))


def embed(table, ids: np.ndarray) -> Expr:
    """Gather rows of a 2-D expression: ``table[ids]``. ids carry no gradient."""
    ids = np.asarray(ids)
    if not np.issubdtype(ids.dtype, np.integer):
        raise TypeError("embed ids must be integers")
    return Expr("embed", (_as_expr(table),), ids=ids)


def pick_last(x, idx: np.ndarray) -> Expr:
    """Per-row gather on the last axis of a 2-D expr: out[n] = x[n, idx[n]]."""
    idx = np.asarray(idx)
    if not np.issubdtype(idx.dtype, np.integer):
        raise TypeError("pick_last indices must be integers")
    return Expr("pick_last", (_as_expr(x),), idx=idx)


def log_softmax_pick(x, idx: np.ndarray) -> Expr:
    """Fused row log-softmax + gather: out[n] = log softmax(x[n])[idx[n]].

    One backward pass instead of materializing the dense log-softmax
    adjoint; used by the teacher-forcing loss over wide vocabularies.
    """
    idx = np.asarray(idx)
    if not np.issubdtype(idx.dtype, np.integer):
        raise TypeError("log_softmax_pick indices must be integers")
    return Expr("log_softmax_pick", (_as_expr(x),), idx=idx)


def scale_rows(x, w) -> Expr:
    """x * w[..., None] where w.shape == x.shape[:-1]."""
    return Expr("scale_rows", (_as_expr(x), _as_expr(w)))


def shift_rows(x, b) -> Expr:
    """x + b[..., None] where b.shape == x.shape[:-1]."""
    return Expr("shift_rows", (_as_expr(x), _as_expr(b)))


# -- evaluation -----------------------------------------------------------

def _topo(root: Expr, skip: set) -> list:
    """Children-before-parents ordering of the nodes reachable from root.

    Nodes whose id is in ``skip`` are treated as leaves (already valued).
    """
    order = []
    seen = set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen or id(node) in skip:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for a in node.args:
            stack.append((a, False))
    return order


def _check_broadcast(op, sa, sb):
    if sa == sb or sa == () or sb == ():
        return
    short, long_ = (sa, sb) if len(sa) < len(sb) else (sb, sa)
    if len(short) < len(long_) and long_[len(long_) - len(short):] == short:
        return
    raise ShapeError(f"{op}: shapes {sa} and {sb} do not conform "
                     "(equal, scalar, or trailing-suffix broadcast only)")


def _unbroadcast(grad, shape):
    if grad.shape == shape:
        return grad
    if shape == ():
        return grad.sum()
    extra = grad.ndim - len(shape)
    return grad.sum(axis=tuple(range(extra)))


# ops that only move or select already-checked values; skipping the finite
# check on them is safe by induction over their inputs
_MOVEMENT_OPS = frozenset({"reshape", "transpose", "slice_last", "concat",
                           "embed", "pick_last", "stop_grad", "one_hot_argmax",
                           "neg", "relu", "clip_min", "max"})


def _forward_one(node: Expr, vals, aux, bindings):
    with np.errstate(all="ignore"):
        return _forward_raw(node, vals, aux, bindings)


def _forward_raw(node: Expr, vals, aux, bindings):
    op = node.op
    a = vals[id(node.args[0])] if node.args else None
    if op == "var":
        name = node.attrs["name"]
        if name not in bindings:
            raise DiffError(f"unbound variable {name!r}")
        v = np.asarray(bindings[name])
    elif op == "const":
        v = node.attrs["value"]
    elif op in ("add", "sub", "mul", "div"):
        b = vals[id(node.args[1])]
        _check_broadcast(op, a.shape, b.shape)
        if op == "add":
            v = a + b
        elif op == "sub":
            v = a - b
        elif op == "mul":
            v = a * b
        else:
            v = a / b
    elif op == "neg":
        v = -a
    elif op == "matmul":
        b = vals[id(node.args[1])]
        if a.ndim != 2 or b.ndim != 2:
            raise ShapeError(f"matmul: 2-D operands required, got {a.shape} @ {b.shape}")
        if a.shape[1] != b.shape[0]:
            raise ShapeError(f"matmul: inner dimensions differ: {a.shape} @ {b.shape}")
        v = a @ b
    elif op == "exp":
        v = np.exp(a)
    elif op == "log":
        v = np.log(a)
    elif op == "square":
        v = a * a
    elif op == "sqrt":
        v = np.sqrt(a)
    elif op == "tanh":
        v = np.tanh(a)
    elif op == "relu":
        v = np.maximum(a, 0.0)
    elif op == "clip_min":
        v = np.maximum(a, node.attrs["lo"])
    elif op == "softmax":
        m = a.max(axis=-1, keepdims=True)
        e = np.exp(a - m)
        v = e / e.sum(axis=-1, keepdims=True)
    elif op == "log_softmax":
        m = a.max(axis=-1, keepdims=True)
        e = np.exp(a - m)
        tot = e.sum(axis=-1, keepdims=True)
        v = (a - m) - np.log(tot)
        aux[id(node)] = e / tot            # softmax, reused by backward
    elif op == "logsumexp":
        ax = node.attrs["axis"]
        m = a.max(axis=ax, keepdims=True)
        e = np.exp(a - m)
        tot = e.sum(axis=ax, keepdims=True)
        v = np.squeeze(m + np.log(tot), axis=ax)
        aux[id(node)] = e / tot            # softmax along axis, for backward
    elif op == "sum":
        v = a.sum(axis=node.attrs["axis"])
    elif op == "mean":
        v = a.mean(axis=node.attrs["axis"])
    elif op == "max":
        v = a.max(axis=node.attrs["axis"])
    elif op == "l2norm":
        n = np.sqrt((a * a).sum(axis=-1, keepdims=True))
        v = a / np.maximum(n, 1e-12)
    elif op == "stop_grad":
        v = a
    elif op == "one_hot_argmax":
        idx = a.argmax(axis=-1)
        v = np.zeros_like(a)
        np.put_along_axis(v, idx[..., None], 1.0, axis=-1)
    elif op == "reshape":
        shape = node.attrs["shape"]
        if a.size != int(np.prod(shape, dtype=np.int64)):
            raise ShapeError(f"reshape: cannot view {a.shape} as {shape}")
        v = a.reshape(shape)
    elif op == "transpose":
        if a.ndim != 2:
            raise ShapeError(f"transpose: 2-D operand required, got {a.shape}")
        v = a.T
    elif op == "slice_last":
        v = a[..., node.attrs["start"]:node.attrs["stop"]]
    elif op == "concat":
        parts = [vals[id(p)] for p in node.args]
        lead = parts[0].shape[:-1]
        for p in parts[1:]:
            if p.shape[:-1] != lead:
                raise ShapeError(f"concat: leading shapes differ: "
                                 f"{[p.shape for p in parts]}")
        v = np.concatenate(parts, axis=-1)
    elif op == "embed":
        ids = node.attrs["ids"]
        if a.ndim != 2:
            raise ShapeError(f"embed: table must be 2-D, got {a.shape}")
        v = a[ids]
    elif op == "pick_last":
        idx = node.attrs["idx"]
        if a.ndim != 2 or idx.shape != (a.shape[0],):
            raise ShapeError(f"pick_last: need (N, D) input with (N,) indices, "
                             f"got {a.shape} and {idx.shape}")
        v = a[np.arange(a.shape[0]), idx]
    elif op == "log_softmax_pick":
        idx = node.attrs["idx"]
        if a.ndim != 2 or idx.shape != (a.shape[0],):
            raise ShapeError(f"log_softmax_pick: need (N, D) input with (N,) "
                             f"indices, got {a.shape} and {idx.shape}")
        m = a.max(axis=-1, keepdims=True)
        e = np.exp(a - m)
        tot = e.sum(axis=-1, keepdims=True)
        rows = np.arange(a.shape[0])
        v = (a[rows, idx] - m[:, 0]) - np.log(tot[:, 0])
        aux[id(node)] = e / tot
    elif op == "scale_rows":
        w = vals[id(node.args[1])]
        if w.shape != a.shape[:-1]:
            raise ShapeError(f"scale_rows: weights {w.shape} must match rows of {a.shape}")
        v = a * w[..., None]
    elif op == "shift_rows":
        b = vals[id(node.args[1])]
        if b.shape != a.shape[:-1]:
            raise ShapeError(f"shift_rows: shifts {b.shape} must match rows of {a.shape}")
        v = a + b[..., None]
    else:
        raise DiffError(f"unknown operator {op!r}")
    if op not in _MOVEMENT_OPS and not np.all(np.isfinite(v)):
        raise NonFiniteError(f"{op}: produced non-finite values")
    return v


def _expand_reduced(grad, src_shape, axis):
    """Broadcast a reduction gradient back to the pre-reduction shape."""
    if axis is None:
        return np.broadcast_to(grad, src_shape)
    g = np.expand_dims(grad, axis=axis)
    return np.broadcast_to(g, src_shape)


def _scatter_rows(ids, g, table_shape):
    """Sum gradient rows into table rows (sorted-run reduction; add.at is
    an order of magnitude slower on wide rows)."""
    flat_ids = ids.ravel()
    rows = np.ascontiguousarray(g).reshape(-1, table_shape[-1])
    out = np.zeros(table_shape, dtype=g.dtype)
    order = np.argsort(flat_ids, kind="stable")
    sorted_ids = flat_ids[order]
    starts = np.flatnonzero(np.r_[True, sorted_ids[1:] != sorted_ids[:-1]])
    sums = np.add.reduceat(rows[order], starts, axis=0)
    out[sorted_ids[starts]] = sums
    return out


def _backward_one(node: Expr, g, vals, aux):
    """Yield (child, child_adjoint) contributions for one node."""
    op = node.op
    args = node.args
    if op in ("var", "const"):
        return
    a = vals[id(args[0])]
    if op == "add":
        b = vals[id(args[1])]
        yield args[0], _unbroadcast(g, a.shape)
        yield args[1], _unbroadcast(g, b.shape)
    elif op == "sub":
        b = vals[id(args[1])]
        yield args[0], _unbroadcast(g, a.shape)
        yield args[1], _unbroadcast(-g, b.shape)
    elif op == "mul":
        b = vals[id(args[1])]
        yield args[0], _unbroadcast(g * b, a.shape)
        yield args[1], _unbroadcast(g * a, b.shape)
    elif op == "div":
        b = vals[id(args[1])]
        yield args[0], _unbroadcast(g / b, a.shape)
        yield args[1], _unbroadcast(-g * a / (b * b), b.shape)
    elif op == "neg":
        yield args[0], -g
    elif op == "matmul":
        b = vals[id(args[1])]
        yield args[0], g @ b.T
        yield args[1], a.T @ g
    elif op == "exp":
        yield args[0], g * vals[id(node)]
    elif op == "log":
        yield args[0], g / a
    elif op == "square":
        yield args[0], 2.0 * a * g
    elif op == "sqrt":
        yield args[0], g / (2.0 * vals[id(node)])
    elif op == "tanh":
        out = vals[id(node)]
        yield args[0], g * (1.0 - out * out)
    elif op == "relu":
        yield args[0], g * (a > 0.0)
    elif op == "clip_min":
        yield args[0], g * (a > node.attrs["lo"])
    elif op == "softmax":
        out = vals[id(node)]
        dot = (g * out).sum(axis=-1, keepdims=True)
        yield args[0], out * (g - dot)
    elif op == "log_softmax":
        soft = aux[id(node)]
        yield args[0], g - soft * g.sum(axis=-1, keepdims=True)
    elif op == "logsumexp":
        ax = node.attrs["axis"]
        yield args[0], aux[id(node)] * np.expand_dims(g, axis=ax)
    elif op == "sum":
        yield args[0], _expand_reduced(g, a.shape, node.attrs["axis"])
    elif op == "mean":
        ax = node.attrs["axis"]
        n = a.size if ax is None else a.shape[ax]
        yield args[0], _expand_reduced(g / n, a.shape, ax)
    elif op == "max":
        ax = node.attrs["axis"]
        da = np.zeros_like(a)
        if ax is None:
            da.ravel()[a.argmax()] = g
        else:
            idx = a.argmax(axis=ax)
            gg = np.expand_dims(g, axis=ax)
            np.put_along_axis(da, np.expand_dims(idx, axis=ax), gg, axis=ax)
        yield args[0], da
    elif op == "l2norm":
        out = vals[id(node)]
        n = np.sqrt((a * a).sum(axis=-1, keepdims=True))
        clamped = n <= 1e-12
        r = np.maximum(n, 1e-12)
        proj = (g * out).sum(axis=-1, keepdims=True)
        da = np.where(clamped, g / r, (g - out * proj) / r)
        yield args[0], da
    elif op == "stop_grad":
        return
    elif op == "one_hot_argmax":
        return
    elif op == "reshape":
        yield args[0], g.reshape(a.shape)
    elif op == "transpose":
        yield args[0], g.T
    elif op == "slice_last":
        da = np.zeros_like(a)
        da[..., node.attrs["start"]:node.attrs["stop"]] = g
        yield args[0], da
    elif op == "concat":
        off = 0
        for p in args:
            w = vals[id(p)].shape[-1]
            yield p, np.ascontiguousarray(g[..., off:off + w])
            off += w
    elif op == "embed":
        yield args[0], _scatter_rows(node.attrs["ids"], g, a.shape)
    elif op == "pick_last":
        idx = node.attrs["idx"]
        da = np.zeros_like(a)
        np.add.at(da, (np.arange(a.shape[0]), idx), g)
        yield args[0], da
    elif op == "log_softmax_pick":
        idx = node.attrs["idx"]
        da = aux[id(node)] * (-g[:, None])
        np.add.at(da, (np.arange(a.shape[0]), idx), g)
        yield args[0], da
    elif op == "scale_rows":
        w = vals[id(args[1])]
        yield args[0], g * w[..., None]
        yield args[1], (g * a).sum(axis=-1)
    elif op == "shift_rows":
        yield args[0], g
        yield args[1], g.sum(axis=-1)
    else:
        raise DiffError(f"no backward rule for operator {op!r}")


class Session:
    """Caches forward values so several evals and a backward share work.

    Tensors bound to a session are treated as immutable for its lifetime.
    With ``dtype`` set (training loops may run float32), floating leaf
    values are cast on entry so numpy promotion cannot silently widen
    the whole graph back to float64.
    """

    def __init__(self, bindings, dtype=None):
        self.bindings = bindings
        self.dtype = np.dtype(dtype) if dtype is not None else None
        self._vals = {}
        self._aux = {}
        self._hold = []

    def eval(self, expr: Expr) -> np.ndarray:
        if id(expr) not in self._vals:
            order = _topo(expr, skip=set(self._vals))
            for node in order:
                v = _forward_one(node, self._vals, self._aux, self.bindings)
                if self.dtype is not None and node.op in ("var", "const") \
                        and v.dtype.kind == "f" and v.dtype != self.dtype:
                    v = v.astype(self.dtype)
                self._vals[id(node)] = v
                self._hold.append(node)
        return self._vals[id(expr)]

    def eval_many(self, exprs) -> list:
        return [self.eval(e) for e in exprs]

    def grad(self, root: Expr, wrt) -> dict:
        """Gradients of a scalar root with respect to bound variable names."""
        for name in wrt:
            if name not in self.bindings:
                raise GradientError(f"wrt name {name!r} is not bound")
        rv = self.eval(root)
        if rv.size != 1:
            raise GradientError(f"gradient root must be scalar, got shape {rv.shape}")
        order = _topo(root, skip=set())
        adj = {id(root): np.ones_like(rv)}
        grads = {name: np.zeros_like(np.asarray(self.bindings[name]), dtype=rv.dtype)
                 for name in wrt}
        wanted = set(wrt)
        for node in reversed(order):
            g = adj.pop(id(node), None)
            if g is None:
                continue
            if node.op == "var":
                name = node.attrs["name"]
                if name in wanted:
                    grads[name] = grads[name] + g
                continue
            for child, cg in _backward_one(node, g, self._vals, self._aux):
                prev = adj.get(id(child))
                adj[id(child)] = cg if prev is None else prev + cg
        return grads


def forward(expr: Expr, bindings, dtype=None) -> np.ndarray:
    """Evaluate an expression against bindings; deterministic for fixed input."""
    return Session(bindings, dtype=dtype).eval(expr)


def forward_many(exprs, bindings, dtype=None) -> list:
    return Session(bindings, dtype=dtype).eval_many(exprs)


def gradient(expr: Expr, bindings, wrt) -> dict:
    """d(expr)/d(name) for each requested variable of a scalar expression."""
    return Session(bindings).grad(expr, wrt)


def value_and_grad(expr: Expr, bindings, wrt, extra=()):
    """One-pass (value, gradients, extra values) for training loops."""
    sess = Session(bindings)
    value = sess.eval(expr)
    extras = sess.eval_many(extra)
    return value, sess.grad(expr, wrt), extras


@dataclass
class FdReport:
    """Outcome of a central-difference gradient check.

    ``max_rel_error`` covers the coordinates where both one-sided slopes
    agree; coordinates where they disagree (kinks: hinge corners, argmax
    boundaries) are reported in ``suspects`` instead of failing the check.
    """

    max_rel_error: float = 0.0
    worst: tuple | None = None
    suspects: list = field(default_factory=list)


def finite_diff_check(expr: Expr, bindings, step: float = 1e-5,
                      wrt=None, kink_tol: float = 1e-2) -> FdReport:
    """Compare analytic gradients of a scalar expr with central differences.

    Relative error per coordinate is |analytic - central| / max(1e-12,
    |central|), maximised over all coordinates of the checked variables.
    """
    if step <= 0:
        raise ValueError("step must be positive")
    if wrt is None:
        names = sorted({n.attrs["name"] for n in _topo(expr, set())
                        if n.op == "var" and n.attrs["name"] in bindings})
    else:
        names = list(wrt)
    grads = gradient(expr, bindings, names)
    f0 = float(forward(expr, bindings))
    report = FdReport()
    for name in names:
        base = np.array(bindings[name], dtype=np.float64)
        flat = base.ravel()
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + step
            fp = float(forward(expr, {**bindings, name: base}))
            flat[i] = orig - step
            fm = float(forward(expr, {**bindings, name: base}))
            flat[i] = orig
            central = (fp - fm) / (2.0 * step)
            right = (fp - f0) / step
            left = (f0 - fm) / step
            if abs(right - left) > kink_tol * max(1.0, abs(right), abs(left)):
                report.suspects.append((name, i))
                continue
            analytic = float(np.asarray(grads[name]).ravel()[i])
            rel = abs(analytic - central) / max(1e-12, abs(central))
            if rel > report.max_rel_error:
                report.max_rel_error = rel
                report.worst = (name, i)
    return report
