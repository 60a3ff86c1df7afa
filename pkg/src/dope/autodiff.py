"""A small differentiable-computation engine over numpy arrays.

Reverse mode is a Wengert tape: every primitive applied to a :class:`Var`
appends one record (forward closure plus vector-Jacobian product) to the
active :class:`Tape`.  Forward mode uses :class:`Dual` values whose primal and
tangent may each be a plain array or a taped :class:`Var`; this is how the
Riesz objective differentiates a functional's JVP with respect to the weights
that produced the tangent.

Complex intermediates follow the convention that the adjoint of ``z`` is
``dL/dRe(z) + 1j * dL/dIm(z)``.  Adjoints flowing into real inputs keep only
the real part.

The module-level functions (``exp``, ``matmul``, ``sigmoid`` ...) dispatch on
their argument type, so one piece of model code runs on arrays, on taped
variables, or on dual numbers.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from functools import lru_cache
from typing import Any, Callable, Sequence

import numpy as np
from scipy.special import expit, ndtr

__all__ = [
    "Tape", "Var", "Dual", "UnsupportedOperation", "TrainingDivergedError",
    "reverse_gradient", "forward_jvp", "AdamState", "adam_step",
    "exp", "log", "tanh", "sigmoid", "softplus", "gelu", "square", "sqrt",
    "matmul", "einsum", "sum", "mean", "reshape", "transpose", "clip",
    "concatenate", "take_along_axis", "fft_trunc", "ifft_trunc", "value_of",
]


class UnsupportedOperation(TypeError):
    """A numpy operation without a registered derivative was applied to a Var."""


class TrainingDivergedError(FloatingPointError):
    """Non-finite loss or gradient met during optimization."""


# --------------------------------------------------------------------------
# tape
# --------------------------------------------------------------------------

@dataclass
class _Record:
    name: str
    args: tuple
    out: "Var"
    fwd: Callable
    vjp: Callable


class Tape:
    """Records primitive applications in evaluation order.

    Use as a context manager or call :meth:`variable` directly; variables keep
    a reference to their tape, so operations record onto the right tape even
    when several tapes are alive.
    """

    def __init__(self):
        self.records: list[_Record] = []
        self.leaves: list[Var] = []
        self._used = False

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        return False

    def variable(self, value, name: str | None = None) -> "Var":
        v = Var(np.asarray(value), self, name=name)
        self.leaves.append(v)
        return v

    def gradient(self, loss: "Var", wrt: Sequence["Var"]) -> list[np.ndarray]:
        if loss.tape is not self:
            raise ValueError("loss was not recorded on this tape")
        if np.size(loss.value) != 1:
            raise ValueError("gradient needs a scalar loss")
        if self._used:
            raise RuntimeError("a tape is single-use; record a fresh one")
        self._used = True
        adj: dict[int, Any] = {id(loss): np.ones_like(loss.value)}
        for rec in reversed(self.records):
            g = adj.pop(id(rec.out), None)
            if g is None:
                continue
            vals = [a.value if isinstance(a, Var) else a for a in rec.args]
            cots = rec.vjp(g, rec.out.value, *vals)
            for a, c in zip(rec.args, cots):
                if c is None or not isinstance(a, Var):
                    continue
                if not np.iscomplexobj(a.value) and np.iscomplexobj(c):
                    c = c.real
                k = id(a)
                adj[k] = c if k not in adj else adj[k] + c
        out = []
        for v in wrt:
            g = adj.get(id(v))
            out.append(np.zeros_like(v.value, dtype=float) if g is None else np.asarray(g))
        return out

    def replay(self) -> list[np.ndarray]:
        """Recompute every recorded output from the leaves, in record order."""
        current: dict[int, np.ndarray] = {id(v): v.value for v in self.leaves}
        outs = []
        for rec in self.records:
            vals = [current.get(id(a), a.value) if isinstance(a, Var) else a for a in rec.args]
            val = rec.fwd(*vals)
            current[id(rec.out)] = val
            outs.append(val)
        return outs


class Var:
    """An array recorded on a tape."""

    __slots__ = ("value", "tape", "name", "__weakref__")
    __array_priority__ = 1000

    def __init__(self, value, tape: Tape, name: str | None = None):
        self.value = value
        self.tape = tape
        self.name = name

    def __repr__(self):
        return f"Var(shape={self.shape}, name={self.name!r})"

    @property
    def shape(self):
        return np.shape(self.value)

    @property
    def ndim(self):
        return np.ndim(self.value)

    @property
    def dtype(self):
        return np.asarray(self.value).dtype

    @property
    def T(self):
        return transpose(self)

    def __len__(self):
        return len(self.value)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def sum(self, axis=None, keepdims=False):
        return sum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis=axis, keepdims=keepdims)

    def __add__(self, o):
        return _add(self, o)

    def __radd__(self, o):
        return _add(o, self)

    def __sub__(self, o):
        return _sub(self, o)

    def __rsub__(self, o):
        return _sub(o, self)

    def __mul__(self, o):
        return _mul(self, o)

    def __rmul__(self, o):
        return _mul(o, self)

    def __truediv__(self, o):
        return _div(self, o)

    def __rtruediv__(self, o):
        return _div(o, self)

    def __neg__(self):
        return _neg(self)

    def __pow__(self, k):
        if not np.isscalar(k):
            raise UnsupportedOperation("only scalar constant exponents are supported")
        return _pow(self, float(k))

    def __matmul__(self, o):
        return matmul(self, o)

    def __rmatmul__(self, o):
        return matmul(o, self)

    def __getitem__(self, idx):
        return _getitem(self, idx)

    _UFUNCS = {
        "add": lambda a, b: _add(a, b),
        "subtract": lambda a, b: _sub(a, b),
        "multiply": lambda a, b: _mul(a, b),
        "true_divide": lambda a, b: _div(a, b),
        "divide": lambda a, b: _div(a, b),
        "negative": lambda a: _neg(a),
        "exp": lambda a: exp(a),
        "log": lambda a: log(a),
        "tanh": lambda a: tanh(a),
        "sqrt": lambda a: sqrt(a),
        "square": lambda a: square(a),
        "matmul": lambda a, b: matmul(a, b),
    }

    def __array_ufunc__(self, ufunc, method, *inputs, **kwargs):
        fn = self._UFUNCS.get(ufunc.__name__)
        if method != "__call__" or fn is None or kwargs:
            raise UnsupportedOperation(f"numpy.{ufunc.__name__} has no recorded derivative")
        return fn(*inputs)

    def __array_function__(self, func, types, args, kwargs):
        raise UnsupportedOperation(f"numpy.{func.__name__} has no recorded derivative")


def value_of(x):
    """Strip tape and dual wrappers, returning the primal array."""
    if isinstance(x, Dual):
        return value_of(x.primal)
    if isinstance(x, Var):
        return x.value
    return x


def _tape_of(args) -> Tape | None:
    for a in args:
        if isinstance(a, Var):
            return a.tape
    return None


def _apply(name: str, fwd: Callable, vjp: Callable, *args):
    tape = _tape_of(args)
    vals = [a.value if isinstance(a, Var) else a for a in args]
    out = fwd(*vals)
    if tape is None:
        return out
    for a in args:
        if isinstance(a, Var) and a.tape is not tape:
            raise ValueError("operands recorded on different tapes")
    var = Var(out, tape)
    tape.records.append(_Record(name, args, var, fwd, vjp))
    return var


def _unbroadcast(g, shape):
    g = np.asarray(g)
    shape = tuple(shape)
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, n in enumerate(shape):
        if n == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g.reshape(shape)


# --------------------------------------------------------------------------
# primitive rules on Var / ndarray
# --------------------------------------------------------------------------

def _add(a, b):
    if isinstance(a, Dual) or isinstance(b, Dual):
        return Dual._lift(a) + Dual._lift(b)
    return _apply("add", np.add,
                  lambda g, o, x, y: (_unbroadcast(g, np.shape(x)), _unbroadcast(g, np.shape(y))), a, b)


def _sub(a, b):
    if isinstance(a, Dual) or isinstance(b, Dual):
        return Dual._lift(a) - Dual._lift(b)
    return _apply("sub", np.subtract,
                  lambda g, o, x, y: (_unbroadcast(g, np.shape(x)), _unbroadcast(-g, np.shape(y))), a, b)


def _mul(a, b):
    if isinstance(a, Dual) or isinstance(b, Dual):
        return Dual._lift(a) * Dual._lift(b)
    return _apply("mul", np.multiply,
                  lambda g, o, x, y: (_unbroadcast(g * np.conj(y), np.shape(x)),
                                      _unbroadcast(g * np.conj(x), np.shape(y))), a, b)


def _div(a, b):
    if isinstance(a, Dual) or isinstance(b, Dual):
        return Dual._lift(a) / Dual._lift(b)
    return _apply("div", np.divide,
                  lambda g, o, x, y: (_unbroadcast(g / np.conj(y), np.shape(x)),
                                      _unbroadcast(-g * np.conj(o / y), np.shape(y))), a, b)


def _neg(a):
    return _apply("neg", np.negative, lambda g, o, x: (-g,), a)


def _pow(a, k):
    return _apply("pow", lambda x: x ** k, lambda g, o, x: (g * k * x ** (k - 1),), a)


def _getitem(a, idx):
    def vjp(g, o, x):
        out = np.zeros_like(x, dtype=np.result_type(x, g))
        np.add.at(out, idx, g)
        return (out,)
    return _apply("getitem", lambda x: x[idx], vjp, a)


def _unary(name, fwd, dfwd, x):
    """dfwd(x, out) is the elementwise derivative."""
    if isinstance(x, Dual):
        if isinstance(x.primal, Var):
            raise UnsupportedOperation(f"{name} on a taped primal needs second derivatives")
        p = fwd(np.asarray(x.primal))
        return Dual(p, _mul(x.tangent, dfwd(x.primal, p)))
    return _apply(name, fwd, lambda g, o, v: (g * dfwd(v, o),), x)


def exp(x):
    return _unary("exp", np.exp, lambda v, o: o, x)


def log(x):
    return _unary("log", np.log, lambda v, o: 1.0 / v, x)


def tanh(x):
    return _unary("tanh", np.tanh, lambda v, o: 1.0 - o * o, x)


def sqrt(x):
    return _unary("sqrt", np.sqrt, lambda v, o: 0.5 / o, x)


def square(x):
    return _unary("square", np.square, lambda v, o: 2.0 * v, x)


def sigmoid(x):
    return _unary("sigmoid", expit, lambda v, o: o * (1.0 - o), x)


def _softplus(v):
    return np.logaddexp(0.0, v)


def softplus(x):
    return _unary("softplus", _softplus, lambda v, o: expit(v), x)


_INV_SQRT_2PI = 1.0 / np.sqrt(2.0 * np.pi)


def gelu(x):
    """Exact Gaussian-error linear unit x * Phi(x)."""
    return _unary("gelu", lambda v: v * ndtr(v),
                  lambda v, o: ndtr(v) + v * _INV_SQRT_2PI * np.exp(-0.5 * v * v), x)


def clip(x, lo, hi):
    if isinstance(x, Dual):
        p = value_of(x.primal)
        inside = ((p >= lo) & (p <= hi)).astype(float)
        return Dual(clip(x.primal, lo, hi), x.tangent * inside)
    return _apply("clip", lambda v: np.clip(v, lo, hi),
                  lambda g, o, v: (g * ((v >= lo) & (v <= hi)),), x)


def matmul(a, b):
    if isinstance(a, Dual) or isinstance(b, Dual):
        a, b = Dual._lift(a), Dual._lift(b)
        return Dual(matmul(a.primal, b.primal),
                    _add(matmul(a.tangent, b.primal), matmul(a.primal, b.tangent)))

    def vjp(g, o, x, y):
        x2 = x[None, :] if np.ndim(x) == 1 else x
        y2 = y[:, None] if np.ndim(y) == 1 else y
        g2 = g
        if np.ndim(x) == 1:
            g2 = np.expand_dims(g2, -2)
        if np.ndim(y) == 1:
            g2 = np.expand_dims(g2, -1)
        gx = np.matmul(g2, np.conj(np.swapaxes(y2, -1, -2)))
        gy = np.matmul(np.conj(np.swapaxes(x2, -1, -2)), g2)
        if np.ndim(x) == 1:
            gx = gx[..., 0, :]
        if np.ndim(y) == 1:
            gy = gy[..., :, 0]
        return _unbroadcast(gx, np.shape(x)), _unbroadcast(gy, np.shape(y))

    return _apply("matmul", np.matmul, vjp, a, b)


def _einsum2(subscripts, x, y):
    return np.einsum(subscripts, x, y, optimize=False)


def einsum(subscripts: str, a, b):
    """Two-operand einsum; every input index must appear in the other operand or the output."""
    lhs, out = subscripts.replace(" ", "").split("->")
    sa, sb = lhs.split(",")
    for s, other in ((sa, sb), (sb, sa)):
        for ch in s:
            if ch not in out and ch not in other:
                raise UnsupportedOperation(f"index {ch!r} summed within one operand")
    if isinstance(a, Dual) or isinstance(b, Dual):
        a, b = Dual._lift(a), Dual._lift(b)
        return Dual(einsum(subscripts, a.primal, b.primal),
                    _add(einsum(subscripts, a.tangent, b.primal), einsum(subscripts, a.primal, b.tangent)))

    def fwd(x, y):
        return _einsum2(subscripts, x, y)

    def vjp(g, o, x, y):
        return (_einsum2(f"{out},{sb}->{sa}", g, np.conj(y)),
                _einsum2(f"{out},{sa}->{sb}", g, np.conj(x)))

    return _apply("einsum", fwd, vjp, a, b)


def sum(x, axis=None, keepdims=False):  # noqa: A001 - mirrors numpy
    if isinstance(x, Dual):
        return Dual(sum(x.primal, axis, keepdims), sum(x.tangent, axis, keepdims))

    def vjp(g, o, v):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, np.shape(v)).copy(),)

    return _apply("sum", lambda v: np.sum(v, axis=axis, keepdims=keepdims), vjp, x)


def mean(x, axis=None, keepdims=False):
    n = np.size(value_of(x)) if axis is None else np.prod(
        [np.shape(value_of(x))[i] for i in np.atleast_1d(axis)])
    return sum(x, axis=axis, keepdims=keepdims) * (1.0 / n)


def reshape(x, shape):
    if isinstance(x, Dual):
        return Dual(reshape(x.primal, shape), reshape(x.tangent, shape))
    return _apply("reshape", lambda v: np.reshape(v, shape),
                  lambda g, o, v: (np.reshape(g, np.shape(v)),), x)


def transpose(x, axes=None):
    if isinstance(x, Dual):
        return Dual(transpose(x.primal, axes), transpose(x.tangent, axes))
    inv = None if axes is None else np.argsort(axes)
    return _apply("transpose", lambda v: np.transpose(v, axes),
                  lambda g, o, v: (np.transpose(g, inv),), x)


def concatenate(xs: Sequence, axis: int = -1):
    if any(isinstance(x, Dual) for x in xs):
        xs = [Dual._lift(x) for x in xs]
        return Dual(concatenate([x.primal for x in xs], axis), concatenate([x.tangent for x in xs], axis))

    def vjp(g, o, *vs):
        splits = np.cumsum([np.shape(v)[axis] for v in vs])[:-1]
        return tuple(np.split(g, splits, axis=axis))

    return _apply("concatenate", lambda *vs: np.concatenate(vs, axis=axis), vjp, *xs)


def take_along_axis(x, idx: np.ndarray, axis: int = -1):
    """Gather ``x`` at integer positions ``idx`` (same rank as ``x``)."""
    if isinstance(x, Dual):
        return Dual(take_along_axis(x.primal, idx, axis), take_along_axis(x.tangent, idx, axis))

    def vjp(g, o, v):
        out = np.zeros(np.shape(v), dtype=np.result_type(v, g))
        ax = axis % np.ndim(v)
        grids = list(np.indices(np.shape(idx), sparse=True))
        grids[ax] = idx
        np.add.at(out, tuple(grids), g)
        return (out,)

    return _apply("take", lambda v: np.take_along_axis(v, idx, axis), vjp, x)


# --------------------------------------------------------------------------
# truncated Fourier pair
# --------------------------------------------------------------------------

def spectral_index(shape: Sequence[int], modes: Sequence[int]) -> tuple[np.ndarray, ...]:
    """Retained frequency indices per axis.

    The last axis keeps the nonnegative frequencies ``0..m-1`` (real-input
    symmetry); leading axes keep ``0..m-1`` and the matching negative block.
    """
    if len(shape) != len(modes):
        raise ValueError("one mode count per transformed axis")
    idx = []
    for ax, (n, m) in enumerate(zip(shape, modes)):
        if ax == len(shape) - 1:
            if m > n // 2 + (n % 2):
                raise ValueError(f"{m} modes exceed the {n}-point axis")
            idx.append(np.arange(m))
        else:
            if 2 * m > n:
                raise ValueError(f"2*{m} modes exceed the {n}-point axis")
            idx.append(np.concatenate([np.arange(m), np.arange(n - m, n)]))
    return tuple(idx)


@lru_cache(maxsize=64)
def _dft_matrix(n: int, idx: tuple, sign: int) -> np.ndarray:
    """Rows ``exp(sign * 2 pi i k t / n)`` for the retained frequencies ``k``."""
    k = np.asarray(idx)[:, None]
    t = np.arange(n)[None, :]
    return np.exp(sign * 2j * np.pi * k * t / n)


def _along(A, x, axis):
    """Apply matrix ``A`` (k, n) to axis ``axis`` of ``x``."""
    if axis == -1:
        return np.matmul(x, A.T)
    if axis == -2:
        return np.matmul(A, x)
    out = np.matmul(np.moveaxis(x, axis, -1), A.T)
    return np.moveaxis(out, -1, axis)


def _transform(x, shape, idx, sign, adjoint=False):
    """Partial DFT over the trailing axes, restricted to the retained frequencies.

    With ``adjoint`` the conjugate transpose is applied (grid <- modes).
    """
    k = len(shape)
    for j, (n, ix) in enumerate(zip(shape, idx)):
        A = _dft_matrix(int(n), tuple(int(i) for i in ix), sign)
        x = _along(A.conj().T if adjoint else A, x, j - k)
    return x


def fft_trunc(x, modes: Sequence[int]):
    """Forward DFT over the trailing ``len(modes)`` axes, keeping only low modes.

    Computed as a partial DFT (small dense matrices), which is faster than a
    full FFT when few modes are retained on short axes.
    """
    k = len(modes)

    def fwd(v):
        shape = np.shape(v)[-k:]
        return _transform(v, shape, spectral_index(shape, modes), -1)

    def vjp(g, o, v):
        shape = np.shape(v)[-k:]
        out = _transform(g, shape, spectral_index(shape, modes), -1, adjoint=True)
        return (out if np.iscomplexobj(v) else out.real,)

    if isinstance(x, Dual):
        return Dual(fft_trunc(x.primal, modes), fft_trunc(x.tangent, modes))
    return _apply("fft_trunc", fwd, vjp, x)


def _halfspec_factor(shape, idx):
    c = np.where(idx[-1] == 0, 1.0, 2.0)
    if shape[-1] % 2 == 0:
        c = np.where(idx[-1] == shape[-1] // 2, 1.0, c)
    return c


def ifft_trunc(z, shape: Sequence[int]):
    """Real inverse of :func:`fft_trunc`: zero-pad the retained modes and invert.

    Matches ``irfftn`` of the padded half spectrum: nonzero last-axis
    frequencies count twice, and only the real part is kept.
    """
    shape = tuple(int(s) for s in shape)
    k = len(shape)
    n = int(np.prod(shape))

    def modes_of(v):
        ms = list(np.shape(v)[-k:])
        for i in range(k - 1):
            ms[i] //= 2
        return ms

    def fwd(v):
        idx = spectral_index(shape, modes_of(v))
        c = _halfspec_factor(shape, idx)
        return _transform(v * c, shape, idx, -1, adjoint=True).real / n

    def vjp(g, o, v):
        idx = spectral_index(shape, modes_of(v))
        c = _halfspec_factor(shape, idx)
        return (_transform(np.asarray(g, dtype=float), shape, idx, -1) * c / n,)

    if isinstance(z, Dual):
        return Dual(ifft_trunc(z.primal, shape), ifft_trunc(z.tangent, shape))
    return _apply("ifft_trunc", fwd, vjp, z)


# --------------------------------------------------------------------------
# forward mode
# --------------------------------------------------------------------------

class Dual:
    """A (primal, tangent) pair obeying the first-order chain rule."""

    __slots__ = ("primal", "tangent")
    __array_priority__ = 2000

    def __init__(self, primal, tangent):
        self.primal = primal
        self.tangent = tangent

    def __repr__(self):
        return f"Dual(primal={self.primal!r}, tangent={self.tangent!r})"

    @staticmethod
    def _lift(x) -> "Dual":
        if isinstance(x, Dual):
            return x
        return Dual(x, np.zeros_like(value_of(x), dtype=float))

    @property
    def shape(self):
        return np.shape(value_of(self.primal))

    def __add__(self, o):
        o = Dual._lift(o)
        return Dual(_add(self.primal, o.primal), _add(self.tangent, o.tangent))

    __radd__ = __add__

    def __sub__(self, o):
        o = Dual._lift(o)
        return Dual(_sub(self.primal, o.primal), _sub(self.tangent, o.tangent))

    def __rsub__(self, o):
        return Dual._lift(o) - self

    def __mul__(self, o):
        o = Dual._lift(o)
        return Dual(_mul(self.primal, o.primal),
                    _add(_mul(self.primal, o.tangent), _mul(self.tangent, o.primal)))

    __rmul__ = __mul__

    def __truediv__(self, o):
        o = Dual._lift(o)
        q = _div(self.primal, o.primal)
        return Dual(q, _div(_sub(self.tangent, _mul(q, o.tangent)), o.primal))

    def __rtruediv__(self, o):
        return Dual._lift(o) / self

    def __neg__(self):
        return Dual(_neg(self.primal), _neg(self.tangent))

    def __pow__(self, k):
        return Dual(_pow(self.primal, float(k)),
                    _mul(self.tangent, _mul(float(k), _pow(self.primal, float(k) - 1.0))))

    def __matmul__(self, o):
        return matmul(self, o)

    def __rmatmul__(self, o):
        return matmul(o, self)

    def __getitem__(self, idx):
        return Dual(self.primal[idx], self.tangent[idx])

    def sum(self, axis=None, keepdims=False):
        return sum(self, axis=axis, keepdims=keepdims)

    def __array_ufunc__(self, ufunc, method, *inputs, **kwargs):
        fn = Var._UFUNCS.get(ufunc.__name__)
        if method != "__call__" or fn is None or kwargs:
            raise UnsupportedOperation(f"numpy.{ufunc.__name__} has no dual rule")
        return fn(*inputs)


def forward_jvp(fn: Callable, x, v):
    """Directional derivative of ``fn`` at ``x`` along ``v`` by dual evaluation."""
    out = fn(Dual(np.asarray(x, dtype=float), v))
    if not isinstance(out, Dual):
        return np.zeros_like(np.asarray(out, dtype=float))
    return out.tangent


def reverse_gradient(fn: Callable, params: Sequence[np.ndarray]) -> tuple[float, list[np.ndarray]]:
    """Evaluate scalar ``fn(*vars)`` on a fresh tape and return (value, gradients)."""
    tape = Tape()
    vs = [tape.variable(np.asarray(p)) for p in params]
    loss = fn(*vs)
    if not isinstance(loss, Var):
        return float(np.real(loss)), [np.zeros_like(np.asarray(p), dtype=float) for p in params]
    return float(np.real(loss.value)), tape.gradient(loss, vs)


# --------------------------------------------------------------------------
# optimizer
# --------------------------------------------------------------------------

@dataclass
class AdamState:
    lr: float = 1e-3
    weight_decay: float = 1e-5
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: list = field(default_factory=list)
    v: list = field(default_factory=list)


def adam_step(params: Sequence[np.ndarray], grads: Sequence[np.ndarray],
              state: AdamState) -> tuple[list[np.ndarray], AdamState]:
    """One bias-corrected Adam update followed by decoupled weight decay."""
    if len(params) != len(grads):
        raise ValueError("params and grads differ in length")
    for g in grads:
        if not np.all(np.isfinite(g)):
            raise TrainingDivergedError(f"non-finite gradient at step {state.step + 1}")
    if not state.m:
        state.m = [np.zeros_like(p) for p in params]
        state.v = [np.zeros_like(p) for p in params]
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** state.step
    c2 = 1.0 - b2 ** state.step
    new = []
    for i, (p, g) in enumerate(zip(params, grads)):
        if p.shape != g.shape:
            raise ValueError(f"shape mismatch {p.shape} vs {g.shape}")
        m, v = state.m[i], state.v[i]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        denom = np.sqrt(v / c2)
        denom += state.eps
        upd = m / denom
        upd *= state.lr / c1
        out = p * (1.0 - state.lr * state.weight_decay)
        out -= upd
        new.append(out)
    return new, state
