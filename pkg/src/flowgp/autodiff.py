"""Reverse-mode differentiation on an explicit tape.

The engine records a static graph of array operations whose leaves are
either parameter slots (bound from one flat 64-bit vector), rebindable
named inputs (minibatches, dropout masks, jitter levels), or constants.
``Tape.forward`` evaluates the graph and caches every primal value;
``Tape.backward`` returns the gradient of the single scalar loss with
respect to the flat parameter vector.

A small forward-mode layer (:class:`Dual`) rides on top of the same
generic operations so that elementwise input-derivatives (flow Jacobians)
can be computed once and stay differentiable with respect to parameters.

All numerics are float64.  Evaluation is deterministic: identical tape,
parameters and inputs produce identical losses and gradients.
"""

from __future__ import annotations

import math
from contextlib import contextmanager

import numpy as np
import scipy.linalg
import scipy.special

from .errors import NonFiniteValue, NotPositiveDefinite, UsageError

_LOG_2PI = math.log(2.0 * math.pi)


def _unbroadcast(g, shape):
    """Reduce a broadcasted gradient back to ``shape``."""
    g = np.asarray(g)
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, size in enumerate(shape):
        if size == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def _tri_solve_np(L, b, trans):
    return scipy.linalg.solve_triangular(L, b, lower=True, trans=trans, check_finite=False)


class Node:
    __slots__ = ("op", "parents", "meta", "section")

    def __init__(self, op, parents, meta, section):
        self.op = op
        self.parents = parents
        self.meta = meta
        self.section = section


class Ref:
    """Handle to a tape node; supports numpy-style operator overloading."""

    __slots__ = ("tape", "id")
    __array_ufunc__ = None  # keep numpy from taking over mixed expressions

    def __init__(self, tape, node_id):
        self.tape = tape
        self.id = node_id

    def _lift(self, other):
        if isinstance(other, Ref):
            if other.tape is not self.tape:
                raise UsageError("cannot mix refs from different tapes")
            return other
        return self.tape.const(other)

    def __add__(self, other):
        o = self._lift(other)
        return self.tape._node("add", (self.id, o.id))

    __radd__ = __add__

    def __sub__(self, other):
        o = self._lift(other)
        return self.tape._node("sub", (self.id, o.id))

    def __rsub__(self, other):
        o = self._lift(other)
        return self.tape._node("sub", (o.id, self.id))

    def __mul__(self, other):
        o = self._lift(other)
        return self.tape._node("mul", (self.id, o.id))

    __rmul__ = __mul__

    def __truediv__(self, other):
        o = self._lift(other)
        return self.tape._node("div", (self.id, o.id))

    def __rtruediv__(self, other):
        o = self._lift(other)
        return self.tape._node("div", (o.id, self.id))

    def __pow__(self, other):
        return power(self, other)

    def __neg__(self):
        return self.tape._node("neg", (self.id,))

    @property
    def T(self):
        return transpose(self)

    def value(self):
        """Cached primal value from the most recent forward pass."""
        v = self.tape._values[self.id]
        if v is None:
            raise UsageError("no forward pass has been run on this tape")
        return v


class Tape:
    """A static computation graph with one scalar loss."""

    def __init__(self):
        self.nodes = []
        self._values = []
        self._slots = {}          # name -> (slice, shape, node_id)
        self._inputs = {}         # name -> node_id
        self._loss = None
        self.n_params = 0
        self._section = None
        self._ran_forward = False

    # ---- construction -------------------------------------------------

    def _node(self, op, parents, meta=None):
        self.nodes.append(Node(op, parents, meta, self._section))
        self._values.append(None)
        return Ref(self, len(self.nodes) - 1)

    def slot(self, name, shape):
        """Register a parameter leaf bound from the flat vector."""
        if name in self._slots:
            raise UsageError(f"duplicate slot {name!r}")
        shape = tuple(int(s) for s in shape)
        size = int(np.prod(shape)) if shape else 1
        sl = slice(self.n_params, self.n_params + size)
        self.n_params += size
        ref = self._node("slot", (), (sl, shape))
        self._slots[name] = (sl, shape, ref.id)
        return ref

    def input(self, name):
        """Register a named data leaf rebound on every forward pass."""
        if name in self._inputs:
            raise UsageError(f"duplicate input {name!r}")
        ref = self._node("input", (), name)
        self._inputs[name] = ref.id
        return ref

    def const(self, value):
        return self._node("const", (), np.asarray(value, dtype=np.float64))

    def set_loss(self, ref):
        if not isinstance(ref, Ref) or ref.tape is not self:
            raise UsageError("loss must be a ref on this tape")
        self._loss = ref.id

    @contextmanager
    def section(self, label):
        """Label nodes created inside the block, for error attribution."""
        prev = self._section
        self._section = label
        try:
            yield
        finally:
            self._section = prev

    # ---- parameter packing ---------------------------------------------

    def pack(self, params):
        """Flatten a name -> array dict into the slot vector."""
        theta = np.empty(self.n_params)
        for name, (sl, shape, _) in self._slots.items():
            arr = np.asarray(params[name], dtype=np.float64)
            if arr.shape != shape:
                raise UsageError(f"slot {name!r} expects shape {shape}, got {arr.shape}")
            theta[sl] = arr.reshape(-1)
        return theta

    def unpack(self, theta):
        return {
            name: np.asarray(theta[sl]).reshape(shape)
            for name, (sl, shape, _) in self._slots.items()
        }

    def slot_slice(self, name):
        return self._slots[name][0]

    # ---- execution ------------------------------------------------------

    def forward(self, theta, inputs=None):
        """Evaluate the loss, caching all primal intermediates.

        Raises :class:`NonFiniteValue` as soon as any node produces a NaN
        or infinity, identifying the offending node.
        """
        if self._loss is None:
            raise UsageError("no loss marked on this tape")
        theta = np.asarray(theta, dtype=np.float64)
        if theta.shape != (self.n_params,):
            raise UsageError(
                f"parameter vector has shape {theta.shape}, tape expects ({self.n_params},)"
            )
        inputs = inputs or {}
        for name in self._inputs:
            if name not in inputs:
                raise UsageError(f"missing input {name!r}")

        vals = self._values
        with np.errstate(all="ignore"):  # non-finite detection is ours, below
            for i, node in enumerate(self.nodes):
                op = node.op
                if op == "slot":
                    sl, shape = node.meta
                    v = theta[sl].reshape(shape)
                elif op == "input":
                    v = np.asarray(inputs[node.meta], dtype=np.float64)
                elif op == "const":
                    v = node.meta
                else:
                    v = _FORWARD[op](node, vals)
                v = np.asarray(v)
                if not np.isfinite(v).all():
                    raise NonFiniteValue(
                        f"non-finite value at node {i} (op={op!r}, section={node.section!r})",
                        node_id=i, op=op, section=node.section,
                    )
                vals[i] = v

        self._ran_forward = True
        loss = vals[self._loss]
        if loss.size != 1:
            raise UsageError("loss node is not scalar")
        return float(loss)

    def backward(self):
        """Gradient of the loss w.r.t. the flat parameter vector."""
        if not self._ran_forward:
            raise UsageError("backward called before forward")
        vals = self._values
        grads = [None] * len(self.nodes)
        grads[self._loss] = np.ones_like(vals[self._loss])
        for i in range(len(self.nodes) - 1, -1, -1):
            g = grads[i]
            if g is None:
                continue
            node = self.nodes[i]
            if node.op in ("slot", "input", "const"):
                continue
            contribs = _BACKWARD[node.op](node, vals, g, vals[i])
            for pid, c in zip(node.parents, contribs):
                if c is None:
                    continue
                if grads[pid] is None:
                    grads[pid] = c
                else:
                    grads[pid] = grads[pid] + c

        out = np.zeros(self.n_params)
        for name, (sl, shape, nid) in self._slots.items():
            if grads[nid] is not None:
                out[sl] = np.asarray(grads[nid]).reshape(-1)
        if not np.isfinite(out).all():
            raise NonFiniteValue("non-finite gradient")
        return out


# ---------------------------------------------------------------------------
# Op rules.  Forward functions take (node, values); backward functions take
# (node, values, out_grad, out_value) and return one gradient per parent.
# ---------------------------------------------------------------------------

def _p(node, vals, k=0):
    return vals[node.parents[k]]


_FORWARD = {
    "add": lambda n, v: _p(n, v, 0) + _p(n, v, 1),
    "sub": lambda n, v: _p(n, v, 0) - _p(n, v, 1),
    "mul": lambda n, v: _p(n, v, 0) * _p(n, v, 1),
    "div": lambda n, v: _p(n, v, 0) / _p(n, v, 1),
    "neg": lambda n, v: -_p(n, v),
    "exp": lambda n, v: np.exp(_p(n, v)),
    "log": lambda n, v: np.log(_p(n, v)),
    "softplus": lambda n, v: np.logaddexp(0.0, _p(n, v)),
    "sin": lambda n, v: np.sin(_p(n, v)),
    "sinh": lambda n, v: np.sinh(_p(n, v)),
    "arcsinh": lambda n, v: np.arcsinh(_p(n, v)),
    "tanh": lambda n, v: np.tanh(_p(n, v)),
    "erf": lambda n, v: scipy.special.erf(_p(n, v)),
    "log_norm_cdf": lambda n, v: scipy.special.log_ndtr(_p(n, v)),
    "square": lambda n, v: np.square(_p(n, v)),
    "sqrt": lambda n, v: np.sqrt(_p(n, v)),
    "abs": lambda n, v: np.abs(_p(n, v)),
    "power": lambda n, v: np.power(_p(n, v, 0), _p(n, v, 1)),
    "matmul": lambda n, v: _p(n, v, 0) @ _p(n, v, 1),
    "transpose": lambda n, v: _p(n, v).T,
    "sum": lambda n, v: np.sum(_p(n, v), axis=n.meta[0], keepdims=n.meta[1]),
    "mean": lambda n, v: np.mean(_p(n, v), axis=n.meta[0], keepdims=n.meta[1]),
    "broadcast": lambda n, v: np.broadcast_to(_p(n, v), n.meta),
    "gather": lambda n, v: np.take(_p(n, v), n.meta[0], axis=n.meta[1]),
    "logsumexp": lambda n, v: scipy.special.logsumexp(_p(n, v), axis=n.meta[0],
                                                      keepdims=n.meta[1]),
}


def _fwd_cholesky(node, vals):
    a = _p(node, vals)
    try:
        return np.linalg.cholesky(a)
    except np.linalg.LinAlgError:
        raise NotPositiveDefinite(
            f"Cholesky failed at node {node.parents[0]} (section={node.section!r})"
        ) from None


def _fwd_tri_solve(node, vals):
    return _tri_solve_np(_p(node, vals, 0), _p(node, vals, 1), node.meta)


_FORWARD["cholesky"] = _fwd_cholesky
_FORWARD["tri_solve"] = _fwd_tri_solve


def _bwd_add(n, v, g, out):
    return (_unbroadcast(g, _p(n, v, 0).shape), _unbroadcast(g, _p(n, v, 1).shape))


def _bwd_sub(n, v, g, out):
    return (_unbroadcast(g, _p(n, v, 0).shape), _unbroadcast(-g, _p(n, v, 1).shape))


def _bwd_mul(n, v, g, out):
    a, b = _p(n, v, 0), _p(n, v, 1)
    return (_unbroadcast(g * b, a.shape), _unbroadcast(g * a, b.shape))


def _bwd_div(n, v, g, out):
    a, b = _p(n, v, 0), _p(n, v, 1)
    return (_unbroadcast(g / b, a.shape), _unbroadcast(-g * a / (b * b), b.shape))


def _bwd_power(n, v, g, out):
    a, b = _p(n, v, 0), _p(n, v, 1)
    ga = g * b * np.power(a, b - 1.0)
    gb = g * out * np.log(a)
    return (_unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape))


def _bwd_matmul(n, v, g, out):
    a, b = _p(n, v, 0), _p(n, v, 1)
    if a.ndim == 2 and b.ndim == 2:
        return (g @ b.T, a.T @ g)
    if a.ndim == 2 and b.ndim == 1:
        return (np.outer(g, b), a.T @ g)
    if a.ndim == 1 and b.ndim == 2:
        return (b @ g, np.outer(a, g))
    return (g * b, g * a)  # vector dot


def _bwd_sum(n, v, g, out):
    x = _p(n, v)
    axis, keepdims = n.meta
    if axis is not None and not keepdims:
        g = np.expand_dims(g, axis)
    return (np.broadcast_to(g, x.shape),)


def _bwd_mean(n, v, g, out):
    x = _p(n, v)
    axis, keepdims = n.meta
    count = x.size if axis is None else x.shape[axis]
    if axis is not None and not keepdims:
        g = np.expand_dims(g, axis)
    return (np.broadcast_to(g, x.shape) / count,)


def _bwd_gather(n, v, g, out):
    x = _p(n, v)
    idx, axis = n.meta
    gx = np.zeros_like(x)
    key = (slice(None),) * axis + (idx,)
    np.add.at(gx, key, g)
    return (gx,)


def _bwd_logsumexp(n, v, g, out):
    x = _p(n, v)
    axis, keepdims = n.meta
    o = out
    if axis is not None and not keepdims:
        o = np.expand_dims(out, axis)
        g = np.expand_dims(g, axis)
    return (g * np.exp(x - o),)


def _bwd_cholesky(n, v, g, L):
    """Raw-storage adjoint of ``A -> chol(A)`` (lower triangle only).

    Uses the standard Cholesky reverse rule: with Phi the lower-triangular
    half-diagonal projection, S = L^{-T} Phi(L^T g) L^{-1} symmetrized gives
    the gradient for symmetric perturbations; the factorization only reads the
    lower triangle, so the raw gradient concentrates each off-diagonal pair
    there.
    """
    phi = np.tril(L.T @ g)
    idx = np.diag_indices_from(phi)
    phi[idx] *= 0.5
    s = _tri_solve_np(L, phi, "T")
    s = _tri_solve_np(L, s.T, "T").T
    sym = 0.5 * (s + s.T)
    ga = 2.0 * np.tril(sym)
    ga[idx] -= np.diag(sym)
    return (ga,)


def _bwd_tri_solve(n, v, g, x):
    L = _p(n, v, 0)
    if n.meta == "N":          # L x = b
        gb = _tri_solve_np(L, g, "T")
        gL = -(gb @ x.T if x.ndim == 2 else np.outer(gb, x))
    else:                      # L^T x = b
        gb = _tri_solve_np(L, g, "N")
        gL = -(x @ gb.T if x.ndim == 2 else np.outer(x, gb))
    return (np.tril(gL), gb)


_BACKWARD = {
    "add": _bwd_add,
    "sub": _bwd_sub,
    "mul": _bwd_mul,
    "div": _bwd_div,
    "neg": lambda n, v, g, out: (-g,),
    "exp": lambda n, v, g, out: (g * out,),
    "log": lambda n, v, g, out: (g / _p(n, v),),
    "softplus": lambda n, v, g, out: (g * scipy.special.expit(_p(n, v)),),
    "sin": lambda n, v, g, out: (g * np.cos(_p(n, v)),),
    "sinh": lambda n, v, g, out: (g * np.cosh(_p(n, v)),),
    "arcsinh": lambda n, v, g, out: (g / np.sqrt(1.0 + np.square(_p(n, v))),),
    "tanh": lambda n, v, g, out: (g * (1.0 - np.square(out)),),
    "erf": lambda n, v, g, out: (g * (2.0 / math.sqrt(math.pi)) * np.exp(-np.square(_p(n, v))),),
    "log_norm_cdf": lambda n, v, g, out: (
        g * np.exp(-0.5 * np.square(_p(n, v)) - 0.5 * _LOG_2PI - out),),
    "square": lambda n, v, g, out: (g * 2.0 * _p(n, v),),
    "sqrt": lambda n, v, g, out: (g * 0.5 / out,),
    "abs": lambda n, v, g, out: (g * np.sign(_p(n, v)),),
    "power": _bwd_power,
    "matmul": _bwd_matmul,
    "transpose": lambda n, v, g, out: (g.T,),
    "cholesky": _bwd_cholesky,
    "tri_solve": _bwd_tri_solve,
    "sum": _bwd_sum,
    "mean": _bwd_mean,
    "broadcast": lambda n, v, g, out: (_unbroadcast(g, _p(n, v).shape),),
    "gather": _bwd_gather,
    "logsumexp": _bwd_logsumexp,
}


# ---------------------------------------------------------------------------
# Forward-mode duals over the same operation vocabulary.
# ---------------------------------------------------------------------------

def _is_zero(t):
    return isinstance(t, float) and t == 0.0


class Dual:
    """A (value, input-tangent) pair.

    Components may be ndarrays or :class:`Ref`s, so elementwise derivative
    expressions built through duals remain differentiable with respect to
    tape parameters.
    """

    __slots__ = ("val", "tan")
    __array_ufunc__ = None

    def __init__(self, val, tan):
        self.val = val
        self.tan = tan

    @staticmethod
    def lift(x):
        return x if isinstance(x, Dual) else Dual(x, 0.0)

    def __add__(self, other):
        o = Dual.lift(other)
        return Dual(self.val + o.val, self.tan + o.tan)

    __radd__ = __add__

    def __sub__(self, other):
        o = Dual.lift(other)
        return Dual(self.val - o.val, self.tan - o.tan)

    def __rsub__(self, other):
        o = Dual.lift(other)
        return Dual(o.val - self.val, o.tan - self.tan)

    def __mul__(self, other):
        o = Dual.lift(other)
        tan = self.tan * o.val if _is_zero(o.tan) else self.tan * o.val + o.tan * self.val
        return Dual(self.val * o.val, tan)

    __rmul__ = __mul__

    def __truediv__(self, other):
        o = Dual.lift(other)
        val = self.val / o.val
        tan = self.tan / o.val
        if not _is_zero(o.tan):
            tan = tan - o.tan * val / o.val
        return Dual(val, tan)

    def __rtruediv__(self, other):
        return Dual.lift(other).__truediv__(self)

    def __pow__(self, other):
        return power(self, other)

    def __neg__(self):
        return Dual(-self.val, -self.tan)


def _elementwise(name, deriv):
    """Build a generic elementwise function with dual and tape dispatch."""
    np_fn = {
        "exp": np.exp, "log": np.log,
        "softplus": lambda x: np.logaddexp(0.0, x),
        "sin": np.sin, "sinh": np.sinh, "arcsinh": np.arcsinh,
        "tanh": np.tanh, "erf": scipy.special.erf,
        "log_norm_cdf": scipy.special.log_ndtr,
        "square": np.square, "sqrt": np.sqrt, "abs": np.abs,
    }[name]

    def fn(x):
        if isinstance(x, Dual):
            v = fn(x.val)
            return Dual(v, x.tan * deriv(x.val, v))
        if isinstance(x, Ref):
            return x.tape._node(name, (x.id,))
        return np_fn(x)

    fn.__name__ = name
    return fn


def _cos_any(x):
    if isinstance(x, (Ref, Dual)):
        return sin(x + math.pi / 2.0)
    return np.cos(x)


exp = _elementwise("exp", lambda x, v: v)
log = _elementwise("log", lambda x, v: 1.0 / x)
softplus = _elementwise("softplus", lambda x, v: sigmoid(x))
sin = _elementwise("sin", lambda x, v: _cos_any(x))
sinh = _elementwise("sinh", lambda x, v: sqrt(1.0 + square(v)))
arcsinh = _elementwise("arcsinh", lambda x, v: 1.0 / sqrt(1.0 + square(x)))
tanh = _elementwise("tanh", lambda x, v: 1.0 - square(v))
erf = _elementwise("erf", lambda x, v: (2.0 / math.sqrt(math.pi)) * exp(-square(x)))
log_norm_cdf = _elementwise(
    "log_norm_cdf", lambda x, v: exp(-0.5 * square(x) - 0.5 * _LOG_2PI - v))
square = _elementwise("square", lambda x, v: 2.0 * x)
sqrt = _elementwise("sqrt", lambda x, v: 0.5 / v)
abs_ = _elementwise("abs", lambda x, v: sign(x))


def sign(x):
    # x / |x|; the measure-zero singularity at 0 is acceptable here
    if isinstance(x, (Ref, Dual)):
        return x / abs_(x)
    return np.sign(x)


def sigmoid(x):
    """Stable logistic function, valid on every backend."""
    if isinstance(x, (Ref, Dual)):
        return exp(x - softplus(x))
    return scipy.special.expit(x)


def relu(x):
    if isinstance(x, (Ref, Dual)):
        return 0.5 * (x + abs_(x))
    return np.maximum(x, 0.0)


def power(x, p):
    if isinstance(x, Dual) or isinstance(p, Dual):
        xd, pd = Dual.lift(x), Dual.lift(p)
        v = power(xd.val, pd.val)
        tan = 0.0
        if not _is_zero(xd.tan):
            tan = tan + xd.tan * pd.val * power(xd.val, pd.val - 1.0)
        if not _is_zero(pd.tan):
            tan = tan + pd.tan * v * log(xd.val)
        return Dual(v, tan)
    if isinstance(x, Ref) or isinstance(p, Ref):
        tape = x.tape if isinstance(x, Ref) else p.tape
        xr = x if isinstance(x, Ref) else tape.const(x)
        pr = p if isinstance(p, Ref) else tape.const(p)
        if xr.tape is not pr.tape:
            raise UsageError("cannot mix refs from different tapes")
        return tape._node("power", (xr.id, pr.id))
    return np.power(x, p)


def matmul(a, b):
    if isinstance(a, Ref) or isinstance(b, Ref):
        tape = a.tape if isinstance(a, Ref) else b.tape
        ar = a if isinstance(a, Ref) else tape.const(a)
        br = b if isinstance(b, Ref) else tape.const(b)
        return tape._node("matmul", (ar.id, br.id))
    return a @ b


def transpose(a):
    if isinstance(a, Ref):
        return a.tape._node("transpose", (a.id,))
    return np.transpose(a)


def cholesky(a):
    if isinstance(a, Ref):
        return a.tape._node("cholesky", (a.id,))
    try:
        return np.linalg.cholesky(a)
    except np.linalg.LinAlgError:
        raise NotPositiveDefinite("Cholesky failed") from None


def tri_solve(L, b, trans="N"):
    """Solve ``L x = b`` (trans="N") or ``L^T x = b`` (trans="T"), L lower."""
    if trans not in ("N", "T"):
        raise UsageError("trans must be 'N' or 'T'")
    if isinstance(L, Ref) or isinstance(b, Ref):
        tape = L.tape if isinstance(L, Ref) else b.tape
        Lr = L if isinstance(L, Ref) else tape.const(L)
        br = b if isinstance(b, Ref) else tape.const(b)
        return tape._node("tri_solve", (Lr.id, br.id), trans)
    return _tri_solve_np(L, b, trans)


def sum_(x, axis=None, keepdims=False):
    if isinstance(x, Ref):
        return x.tape._node("sum", (x.id,), (axis, keepdims))
    return np.sum(x, axis=axis, keepdims=keepdims)


def mean_(x, axis=None, keepdims=False):
    if isinstance(x, Ref):
        return x.tape._node("mean", (x.id,), (axis, keepdims))
    return np.mean(x, axis=axis, keepdims=keepdims)


def broadcast_to(x, shape):
    shape = tuple(int(s) for s in shape)
    if isinstance(x, Ref):
        return x.tape._node("broadcast", (x.id,), shape)
    return np.broadcast_to(x, shape)


def gather(x, indices, axis=0):
    indices = np.asarray(indices, dtype=np.intp)
    if isinstance(x, Ref):
        return x.tape._node("gather", (x.id,), (indices, axis))
    return np.take(x, indices, axis=axis)


def logsumexp(x, axis=None, keepdims=False):
    if isinstance(x, Ref):
        return x.tape._node("logsumexp", (x.id,), (axis, keepdims))
    return scipy.special.logsumexp(x, axis=axis, keepdims=keepdims)


# ---------------------------------------------------------------------------
# Finite-difference validation.
# ---------------------------------------------------------------------------

def finite_diff_check(fun, grad_fun, theta, step=1e-6):
    """Max relative error between an analytic gradient and central differences.

    ``fun(theta)`` returns the scalar loss, ``grad_fun(theta)`` its analytic
    gradient.  The reported error is
    ``max_i |analytic_i - central_i| / max(1, |central_i|)``.
    """
    theta = np.asarray(theta, dtype=np.float64)
    analytic = np.asarray(grad_fun(theta), dtype=np.float64)
    if analytic.shape != theta.shape:
        raise UsageError("gradient shape does not match parameter shape")
    worst = 0.0
    for i in range(theta.size):
        e = np.zeros_like(theta)
        e[i] = step
        f_hi = fun(theta + e)
        f_lo = fun(theta - e)
        if not (np.isfinite(f_hi) and np.isfinite(f_lo)):
            raise NonFiniteValue(f"non-finite loss while perturbing parameter {i}")
        central = (f_hi - f_lo) / (2.0 * step)
        err = abs(analytic[i] - central) / max(1.0, abs(central))
        worst = max(worst, err)
    return worst
