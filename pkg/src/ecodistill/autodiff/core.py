"""Tape-based reverse-mode automatic differentiation.

A :class:`Var` wraps either a Python float or a numpy array of rank <= 2 and
belongs to exactly one :class:`Tape`. Every primitive appends one record
(parent indices plus local partials, or a vector-Jacobian closure for the
non-elementwise tensor ops) so the tape is topologically ordered by
construction, and :meth:`Tape.backward` is a single reverse sweep.

All primitives accept plain floats/arrays as well; with no ``Var`` operand
they simply return the plain result. Model code is therefore written once
and runs either untaped (fast simulation) or taped (training).

Subgradient convention at ties: ``minimum``/``maximum`` route the gradient to
the first argument, ``relu`` and ``clamp01`` take the pass-through branch.
"""

from __future__ import annotations

import math

import numpy as np

from ..errors import DetachedVariable, DomainError, ShapeMismatch

__all__ = [
    "Var", "Tape", "Gradients", "value", "is_var",
    "add", "sub", "mul", "div", "pow", "neg", "exp", "ln", "sqrt",
    "minimum", "maximum", "relu", "tanh", "sigmoid", "clamp01", "square",
    "matvec", "matmul", "emap", "sum", "mean", "layer_norm",
    "concat", "take", "stack", "index",
]

_builtin_sum = sum


class Var:
    """A differentiable value recorded on a tape."""

    __slots__ = ("value", "tape", "index")
    # make numpy defer mixed ndarray/Var arithmetic to the Var operators
    __array_ufunc__ = None

    def __init__(self, value, tape, index):
        self.value = value
        self.tape = tape
        self.index = index

    @property
    def shape(self):
        v = self.value
        return v.shape if isinstance(v, np.ndarray) else ()

    def __repr__(self):
        return f"Var({self.value!r}, index={self.index})"

    def __float__(self):
        return float(self.value)

    __add__ = lambda self, o: add(self, o)
    __radd__ = lambda self, o: add(o, self)
    __sub__ = lambda self, o: sub(self, o)
    __rsub__ = lambda self, o: sub(o, self)
    __mul__ = lambda self, o: mul(self, o)
    __rmul__ = lambda self, o: mul(o, self)
    __truediv__ = lambda self, o: div(self, o)
    __rtruediv__ = lambda self, o: div(o, self)
    __pow__ = lambda self, o: pow(self, o)
    __rpow__ = lambda self, o: pow(o, self)
    __neg__ = lambda self: neg(self)
    __matmul__ = lambda self, o: matmul(self, o)
    __rmatmul__ = lambda self, o: matmul(o, self)
    __getitem__ = lambda self, idx: index(self, idx)

    def __len__(self):
        return len(self.value)


def _shape_of(v):
    return v.shape if isinstance(v, np.ndarray) else ()


def _unbroadcast(c, shape):
    """Sum a broadcast contribution back down to ``shape``."""
    if shape == ():
        return float(np.sum(c))
    c = np.asarray(c)
    while c.ndim > len(shape):
        c = c.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and c.shape[axis] != 1:
            c = c.sum(axis=axis, keepdims=True)
    if c.shape != shape:
        c = np.broadcast_to(c, shape).copy()
    return c


class Tape:
    """Append-only record of primitive operations."""

    def __init__(self):
        self._parents = []
        self._partials = []
        self._shapes = []

    def __len__(self):
        return len(self._parents)

    def var(self, x) -> Var:
        """Create a leaf variable."""
        if isinstance(x, Var):
            raise DetachedVariable("value is already a tape variable")
        if isinstance(x, np.ndarray) or isinstance(x, (list, tuple)):
            x = np.array(x, dtype=np.float64)
            if x.ndim > 2:
                raise ShapeMismatch(f"tensors are limited to rank 2, got shape {x.shape}")
            if x.ndim == 0:
                x = float(x)
        else:
            x = float(x)
        return self._push(x, (), None)

    def _push(self, val, parents, partials) -> Var:
        i = len(self._parents)
        self._parents.append(parents)
        self._partials.append(partials)
        self._shapes.append(val.shape if isinstance(val, np.ndarray) else ())
        return Var(val, self, i)

    def backward(self, loss: Var) -> "Gradients":
        """Reverse sweep from a scalar ``loss``; returns gradients for every record."""
        if not isinstance(loss, Var) or loss.tape is not self:
            raise DetachedVariable("loss is not a variable on this tape")
        if loss.shape != ():
            raise ShapeMismatch(f"loss must be scalar, got shape {loss.shape}")
        top = loss.index
        grads = [None] * (top + 1)
        grads[top] = 1.0
        parents, partials, shapes = self._parents, self._partials, self._shapes
        for i in range(top, -1, -1):
            g = grads[i]
            if g is None:
                continue
            ps = parents[i]
            if not ps:
                continue
            loc = partials[i]
            if type(loc) is tuple:
                contribs = [d * g for d in loc]
            else:
                contribs = loc(g)
            for p, c in zip(ps, contribs):
                if c is None:
                    continue
                shp = shapes[p]
                if type(c) is float:
                    if shp:
                        c = np.full(shp, c)
                elif c.shape != shp:
                    c = _unbroadcast(c, shp)
                prev = grads[p]
                grads[p] = c if prev is None else prev + c
        return Gradients(self, grads)


class Gradients:
    """Mapping from tape variables to d(loss)/d(variable)."""

    def __init__(self, tape, grads):
        self._tape = tape
        self._grads = grads

    def __getitem__(self, var: Var):
        if not isinstance(var, Var) or var.tape is not self._tape:
            raise DetachedVariable("variable does not belong to this tape")
        g = self._grads[var.index] if var.index < len(self._grads) else None
        if g is None:
            return np.zeros(var.shape) if var.shape else 0.0
        return g

    def get(self, var, default=None):
        try:
            return self[var]
        except DetachedVariable:
            return default


def value(x):
    """Plain value of a Var, or ``x`` itself."""
    return x.value if isinstance(x, Var) else x


def is_var(x) -> bool:
    return isinstance(x, Var)


def _tape_of(a, b):
    ta = a.tape if isinstance(a, Var) else None
    tb = b.tape if isinstance(b, Var) else None
    if ta is not None and tb is not None and ta is not tb:
        raise DetachedVariable("operands live on different tapes")
    return ta or tb


def _plain(x):
    if isinstance(x, Var):
        return x.value
    if isinstance(x, (list, tuple)):
        return np.asarray(x, dtype=np.float64)
    return x


def _record2(a, b, out, da, db):
    """Record a binary op; ``da``/``db`` are local partials (skipped for constants)."""
    tape = _tape_of(a, b)
    if tape is None:
        return out
    if isinstance(a, Var):
        if isinstance(b, Var):
            return tape._push(out, (a.index, b.index), (da(), db()))
        return tape._push(out, (a.index,), (da(),))
    return tape._push(out, (b.index,), (db(),))


def _record1(x, out, d):
    if type(x) is Var:
        if type(out) is float:
            return _push_scalar(x.tape, out, (x.index,), (d,))
        return x.tape._push(out, (x.index,), (d,))
    return out


# ----------------------------------------------------------------- arithmetic

def _push_scalar(tape, out, parents, partials):
    i = len(tape._parents)
    tape._parents.append(parents)
    tape._partials.append(partials)
    tape._shapes.append(())
    return Var(out, tape, i)


def add(a, b):
    ta, tb = type(a), type(b)
    if ta is Var:
        av = a.value
        if tb is Var:
            if a.tape is not b.tape:
                raise DetachedVariable("operands live on different tapes")
            out = av + b.value
            if type(out) is float:
                return _push_scalar(a.tape, out, (a.index, b.index), (1.0, 1.0))
            return a.tape._push(out, (a.index, b.index), (1.0, 1.0))
        out = av + _plain(b)
        if type(out) is float:
            return _push_scalar(a.tape, out, (a.index,), (1.0,))
        return a.tape._push(out, (a.index,), (1.0,))
    if tb is Var:
        out = _plain(a) + b.value
        if type(out) is float:
            return _push_scalar(b.tape, out, (b.index,), (1.0,))
        return b.tape._push(out, (b.index,), (1.0,))
    return _plain(a) + _plain(b)


def sub(a, b):
    ta, tb = type(a), type(b)
    if ta is Var:
        av = a.value
        if tb is Var:
            if a.tape is not b.tape:
                raise DetachedVariable("operands live on different tapes")
            out = av - b.value
            if type(out) is float:
                return _push_scalar(a.tape, out, (a.index, b.index), (1.0, -1.0))
            return a.tape._push(out, (a.index, b.index), (1.0, -1.0))
        out = av - _plain(b)
        if type(out) is float:
            return _push_scalar(a.tape, out, (a.index,), (1.0,))
        return a.tape._push(out, (a.index,), (1.0,))
    if tb is Var:
        out = _plain(a) - b.value
        if type(out) is float:
            return _push_scalar(b.tape, out, (b.index,), (-1.0,))
        return b.tape._push(out, (b.index,), (-1.0,))
    return _plain(a) - _plain(b)


def mul(a, b):
    ta, tb = type(a), type(b)
    if ta is Var and tb is Var:
        if a.tape is not b.tape:
            raise DetachedVariable("operands live on different tapes")
        av, bv = a.value, b.value
        out = av * bv
        if type(out) is float:
            return _push_scalar(a.tape, out, (a.index, b.index), (bv, av))
        return a.tape._push(out, (a.index, b.index), (bv, av))
    if ta is Var:
        bv = _plain(b)
        out = a.value * bv
        if type(out) is float:
            return _push_scalar(a.tape, out, (a.index,), (bv,))
        return a.tape._push(out, (a.index,), (bv,))
    if tb is Var:
        av = _plain(a)
        out = av * b.value
        if type(out) is float:
            return _push_scalar(b.tape, out, (b.index,), (av,))
        return b.tape._push(out, (b.index,), (av,))
    return _plain(a) * _plain(b)


def div(a, b):
    av, bv = _plain(a), _plain(b)
    if (bv == 0) if type(bv) is float else np.any(np.asarray(bv) == 0):
        raise DomainError("division by zero")
    out = av / bv
    return _record2(a, b, out, lambda: 1.0 / bv, lambda: -out / bv)


def neg(x):
    return _record1(x, -_plain(x), -1.0)


def square(x):
    xv = _plain(x)
    return _record1(x, xv * xv, 2.0 * xv)


def pow(a, b):
    """``a ** b``; the exponent may itself be differentiable."""
    av, bv = _plain(a), _plain(b)
    out = av ** bv
    if isinstance(out, complex) or np.iscomplexobj(out):
        raise DomainError("negative base with non-integer exponent")

    def da():
        return bv * av ** (bv - 1) if not np.isscalar(bv) or bv != 0 else 0.0 * av

    def db():
        if isinstance(av, np.ndarray) or isinstance(out, np.ndarray):
            a_arr = np.asarray(av, dtype=np.float64)
            safe = np.where(a_arr > 0, a_arr, 1.0)
            return np.where(a_arr > 0, out * np.log(safe), 0.0)
        if av > 0:
            return out * math.log(av)
        if av == 0:
            return 0.0
        raise DomainError("gradient of exponent undefined for negative base")

    return _record2(a, b, out, da, db)


# --------------------------------------------------------------- elementwise

def exp(x):
    xv = _plain(x)
    out = np.exp(xv) if isinstance(xv, np.ndarray) else math.exp(xv)
    return _record1(x, out, out)


def ln(x):
    xv = _plain(x)
    if isinstance(xv, np.ndarray):
        if np.any(xv <= 0):
            raise DomainError("ln of non-positive value")
        return _record1(x, np.log(xv), 1.0 / xv)
    if xv <= 0:
        raise DomainError(f"ln of non-positive value {xv!r}")
    return _record1(x, math.log(xv), 1.0 / xv)


def sqrt(x):
    xv = _plain(x)
    if isinstance(xv, np.ndarray):
        if np.any(xv < 0):
            raise DomainError("sqrt of negative value")
        out = np.sqrt(xv)
        with np.errstate(divide="ignore"):
            return _record1(x, out, 0.5 / out)
    if xv < 0:
        raise DomainError(f"sqrt of negative value {xv!r}")
    out = math.sqrt(xv)
    return _record1(x, out, 0.5 / out if out > 0 else math.inf)


def _select(a, b, first, av, bv):
    out = float(av if first else bv)
    if type(a) is Var:
        if type(b) is Var:
            if a.tape is not b.tape:
                raise DetachedVariable("operands live on different tapes")
            return _push_scalar(a.tape, out, (a.index, b.index), (1.0, 0.0) if first else (0.0, 1.0))
        return _push_scalar(a.tape, out, (a.index,), (1.0 if first else 0.0,))
    if type(b) is Var:
        return _push_scalar(b.tape, out, (b.index,), (0.0 if first else 1.0,))
    return out


def minimum(a, b):
    """Elementwise minimum; ties send the gradient to ``a``."""
    av, bv = _plain(a), _plain(b)
    if isinstance(av, np.ndarray) or isinstance(bv, np.ndarray):
        m = np.asarray(av <= bv, dtype=np.float64)
        out = np.where(m > 0, av, bv)
        return _record2(a, b, out, lambda: m, lambda: 1.0 - m)
    return _select(a, b, av <= bv, av, bv)


def maximum(a, b):
    """Elementwise maximum; ties send the gradient to ``a``."""
    av, bv = _plain(a), _plain(b)
    if isinstance(av, np.ndarray) or isinstance(bv, np.ndarray):
        m = np.asarray(av >= bv, dtype=np.float64)
        out = np.where(m > 0, av, bv)
        return _record2(a, b, out, lambda: m, lambda: 1.0 - m)
    return _select(a, b, av >= bv, av, bv)


def relu(x):
    xv = _plain(x)
    if isinstance(xv, np.ndarray):
        m = (xv >= 0).astype(np.float64)
        return _record1(x, xv * m, m)
    if xv >= 0:
        return _record1(x, xv, 1.0)
    return _record1(x, 0.0, 0.0)


def clamp01(x):
    xv = _plain(x)
    if isinstance(xv, np.ndarray):
        m = ((xv >= 0) & (xv <= 1)).astype(np.float64)
        return _record1(x, np.clip(xv, 0.0, 1.0), m)
    if xv < 0:
        return _record1(x, 0.0, 0.0)
    if xv > 1:
        return _record1(x, 1.0, 0.0)
    return _record1(x, xv, 1.0)


def tanh(x):
    xv = _plain(x)
    out = np.tanh(xv) if isinstance(xv, np.ndarray) else math.tanh(xv)
    return _record1(x, out, 1.0 - out * out)


def _sigmoid_plain(xv):
    if isinstance(xv, np.ndarray):
        out = np.empty_like(xv, dtype=np.float64)
        pos = xv >= 0
        out[pos] = 1.0 / (1.0 + np.exp(-xv[pos]))
        ex = np.exp(xv[~pos])
        out[~pos] = ex / (1.0 + ex)
        return out
    if xv >= 0:
        return 1.0 / (1.0 + math.exp(-xv))
    ex = math.exp(xv)
    return ex / (1.0 + ex)


def sigmoid(x):
    out = _sigmoid_plain(_plain(x))
    return _record1(x, out, out * (1.0 - out))


def emap(x, f, df):
    """Elementwise map with a user-supplied derivative ``df(x)``."""
    xv = _plain(x)
    return _record1(x, f(xv), df(xv))


# -------------------------------------------------------------------- tensor

def _check_rank(v, what):
    if np.ndim(v) > 2:
        raise ShapeMismatch(f"{what}: tensors are limited to rank 2")


def matmul(a, b):
    """Matrix product for rank-1/rank-2 operands (numpy ``@`` semantics)."""
    av, bv = _plain(a), _plain(b)
    av = np.asarray(av, dtype=np.float64)
    bv = np.asarray(bv, dtype=np.float64)
    _check_rank(av, "matmul")
    _check_rank(bv, "matmul")
    if av.ndim == 0 or bv.ndim == 0:
        raise ShapeMismatch("matmul needs rank >= 1 operands")
    if av.shape[-1] != bv.shape[0]:
        raise ShapeMismatch(f"matmul shapes {av.shape} and {bv.shape} do not chain")
    out = av @ bv
    if not isinstance(out, np.ndarray):
        out = float(out)
    tape = _tape_of(a, b)
    if tape is None:
        return out
    a_is, b_is = isinstance(a, Var), isinstance(b, Var)

    def vjp(g):
        g = np.asarray(g, dtype=np.float64)
        ga = gb = None
        if a_is:
            if av.ndim == 2 and bv.ndim == 2:
                ga = g @ bv.T
            elif av.ndim == 2:  # (m,n)@(n,) -> (m,)
                ga = np.outer(g, bv)
            elif bv.ndim == 2:  # (n,)@(n,k) -> (k,)
                ga = bv @ g
            else:
                ga = g * bv
        if b_is:
            if av.ndim == 2 and bv.ndim == 2:
                gb = av.T @ g
            elif av.ndim == 2:
                gb = av.T @ g
            elif bv.ndim == 2:
                gb = np.outer(av, g)
            else:
                gb = g * av
        return [x for x, keep in ((ga, a_is), (gb, b_is)) if keep]

    parents = tuple(v.index for v in (a, b) if isinstance(v, Var))
    return tape._push(out, parents, vjp)


def matvec(A, x):
    """``A @ x`` for a rank-2 ``A`` and rank-1 ``x``."""
    if np.ndim(_plain(A)) != 2 or np.ndim(_plain(x)) != 1:
        raise ShapeMismatch("matvec expects a matrix and a vector")
    return matmul(A, x)


def sum(x, axis=None):
    xv = _plain(x)
    if not isinstance(xv, np.ndarray):
        return x
    out = xv.sum(axis=axis)
    if axis is None or out.ndim == 0:
        out = float(out)
    if not isinstance(x, Var):
        return out
    shape = xv.shape

    def vjp(g):
        if axis is None:
            return [np.full(shape, float(g))]
        return [np.broadcast_to(np.expand_dims(g, axis), shape).copy()]

    return x.tape._push(out, (x.index,), vjp)


def mean(x, axis=None):
    xv = _plain(x)
    if not isinstance(xv, np.ndarray):
        return x
    n = xv.size if axis is None else xv.shape[axis]
    return mul(sum(x, axis=axis), 1.0 / n)


def layer_norm(x, eps=1e-5):
    """Normalize each vector along the last axis to zero mean, unit variance."""
    xv = np.asarray(_plain(x), dtype=np.float64)
    _check_rank(xv, "layer_norm")
    mu = xv.mean(axis=-1, keepdims=True)
    xc = xv - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    if not isinstance(x, Var):
        return xhat

    def vjp(g):
        gm = g.mean(axis=-1, keepdims=True)
        gx = (g * xhat).mean(axis=-1, keepdims=True)
        return [inv * (g - gm - xhat * gx)]

    return x.tape._push(xhat, (x.index,), vjp)


def concat(parts, axis=-1):
    vals = [np.asarray(_plain(p), dtype=np.float64) for p in parts]
    out = np.concatenate(vals, axis=axis)
    vars_ = [(i, p) for i, p in enumerate(parts) if isinstance(p, Var)]
    if not vars_:
        return out
    tape = vars_[0][1].tape
    for _, p in vars_:
        if p.tape is not tape:
            raise DetachedVariable("operands live on different tapes")
    sizes = [v.shape[axis] for v in vals]
    bounds = np.cumsum([0] + sizes)

    def vjp(g):
        pieces = []
        for i, _ in vars_:
            sl = [slice(None)] * g.ndim
            sl[axis] = slice(bounds[i], bounds[i + 1])
            pieces.append(g[tuple(sl)])
        return pieces

    return tape._push(out, tuple(p.index for _, p in vars_), vjp)


def take(table, idx):
    """Gather rows ``table[idx]`` (embedding lookup)."""
    tv = _plain(table)
    idx = np.asarray(idx, dtype=np.int64)
    out = tv[idx]
    if not isinstance(table, Var):
        return out
    shape = tv.shape

    def vjp(g):
        z = np.zeros(shape)
        np.add.at(z, idx, g)
        return [z]

    return table.tape._push(out, (table.index,), vjp)


def index(x, idx):
    """Basic or integer-array indexing."""
    xv = _plain(x)
    out = xv[idx]
    if isinstance(out, np.ndarray) and out.ndim == 0:
        out = float(out)
    elif isinstance(out, np.floating):
        out = float(out)
    if not isinstance(x, Var):
        return out
    shape = xv.shape

    def vjp(g):
        z = np.zeros(shape)
        np.add.at(z, idx, g)
        return [z]

    return x.tape._push(out, (x.index,), vjp)


def stack(items):
    """Stack scalars into a vector, or vectors into a matrix (rows)."""
    vals = [_plain(v) for v in items]
    out = np.array(vals, dtype=np.float64)
    _check_rank(out, "stack")
    vars_ = [(i, v) for i, v in enumerate(items) if isinstance(v, Var)]
    if not vars_:
        return out
    tape = vars_[0][1].tape
    scalar = out.ndim == 1

    def vjp(g):
        if scalar:
            gl = g.tolist()
            return [gl[i] for i, _ in vars_]
        return [g[i] for i, _ in vars_]

    return tape._push(out, tuple(v.index for _, v in vars_), vjp)
