"""Second-order forward-mode automatic differentiation.

A :class:`Jet` carries a value together with its gradient and Hessian with
respect to a fixed set of seed variables, so a single evaluation of a
function on jets yields exact first and second derivatives. Jets interoperate
with NumPy: ``np.sin(jet)`` works for scalars and object arrays of jets.

The value may also be an array with a leading batch axis (for instance one
entry per stage); the gradient and Hessian then carry the same batch axes in
front of their derivative axes, so many points are differentiated in one pass.
"""

from __future__ import annotations

import numpy as np


class Jet:
    """Truncated second-order Taylor expansion ``val + grad.dz + dz.hess.dz / 2``."""

    __slots__ = ("val", "grad", "hess")
    __array_priority__ = 1000

    def __init__(self, val, grad, hess):
        self.val = val
        self.grad = grad
        self.hess = hess

    @classmethod
    def seed(cls, value: float, index: int, dim: int) -> "Jet":
        grad = np.zeros(dim)
        grad[index] = 1.0
        return cls(float(value), grad, np.zeros((dim, dim)))

    def _const(self, c) -> "Jet":
        d = self.grad.shape[-1]
        return Jet(c, np.zeros(d), np.zeros((d, d)))

    def _chain(self, f0, f1, f2) -> "Jet":
        g = self.grad
        f1 = np.asarray(f1)[..., None]
        f2 = np.asarray(f2)[..., None, None]
        return Jet(f0, f1 * g, f1[..., None] * self.hess + f2 * _outer(g, g))

    # arithmetic ---------------------------------------------------------

    def __add__(self, other):
        if isinstance(other, Jet):
            return Jet(self.val + other.val, self.grad + other.grad, self.hess + other.hess)
        if isinstance(other, np.ndarray):
            return NotImplemented
        return Jet(self.val + other, self.grad, self.hess)

    __radd__ = __add__

    def __sub__(self, other):
        if isinstance(other, Jet):
            return Jet(self.val - other.val, self.grad - other.grad, self.hess - other.hess)
        if isinstance(other, np.ndarray):
            return NotImplemented
        return Jet(self.val - other, self.grad, self.hess)

    def __rsub__(self, other):
        if isinstance(other, np.ndarray):
            return NotImplemented
        return Jet(other - self.val, -self.grad, -self.hess)

    def __neg__(self):
        return Jet(-self.val, -self.grad, -self.hess)

    def __pos__(self):
        return self

    def __mul__(self, other):
        if isinstance(other, Jet):
            a, b = self, other
            av, bv = np.asarray(a.val)[..., None], np.asarray(b.val)[..., None]
            cross = _outer(a.grad, b.grad)
            return Jet(
                a.val * b.val,
                a.grad * bv + b.grad * av,
                a.hess * bv[..., None] + b.hess * av[..., None] + cross + np.swapaxes(cross, -1, -2),
            )
        if isinstance(other, np.ndarray):
            return NotImplemented
        return Jet(self.val * other, self.grad * other, self.hess * other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, Jet):
            return self * other.reciprocal()
        if isinstance(other, np.ndarray):
            return NotImplemented
        return Jet(self.val / other, self.grad / other, self.hess / other)

    def __rtruediv__(self, other):
        if isinstance(other, np.ndarray):
            return NotImplemented
        return self.reciprocal() * other

    def reciprocal(self):
        v = self.val
        return self._chain(1.0 / v, -1.0 / v**2, 2.0 / v**3)

    def __pow__(self, p):
        if isinstance(p, Jet):
            return (self.log() * p).exp()
        if p == 0:
            return self._const(1.0)
        if p == 1:
            return self
        if p == 2:
            return self._chain(self.val * self.val, 2.0 * self.val, 2.0)
        v = self.val
        return self._chain(v**p, p * v ** (p - 1), p * (p - 1) * v ** (p - 2))

    def __rpow__(self, base):
        return (self * np.log(base)).exp()

    # comparisons act on the primal value so that branching code runs
    def __lt__(self, other):
        return self.val < _primal(other)

    def __le__(self, other):
        return self.val <= _primal(other)

    def __gt__(self, other):
        return self.val > _primal(other)

    def __ge__(self, other):
        return self.val >= _primal(other)

    # elementary functions; object-array ufunc loops call these by name --

    def sin(self):
        s, c = np.sin(self.val), np.cos(self.val)
        return self._chain(s, c, -s)

    def cos(self):
        s, c = np.sin(self.val), np.cos(self.val)
        return self._chain(c, -s, -c)

    def tan(self):
        t = np.tan(self.val)
        sec2 = 1.0 + t * t
        return self._chain(t, sec2, 2.0 * t * sec2)

    def exp(self):
        e = np.exp(self.val)
        return self._chain(e, e, e)

    def log(self):
        v = self.val
        return self._chain(np.log(v), 1.0 / v, -1.0 / (v * v))

    def sqrt(self):
        r = np.sqrt(self.val)
        return self._chain(r, 0.5 / r, -0.25 / (r * self.val))

    def square(self):
        return self**2

    def arcsin(self):
        v = self.val
        w = 1.0 - v * v
        return self._chain(np.arcsin(v), 1.0 / np.sqrt(w), v / w**1.5)

    def arccos(self):
        v = self.val
        w = 1.0 - v * v
        return self._chain(np.arccos(v), -1.0 / np.sqrt(w), -v / w**1.5)

    def arctan(self):
        v = self.val
        w = 1.0 + v * v
        return self._chain(np.arctan(v), 1.0 / w, -2.0 * v / (w * w))

    def sinh(self):
        s, c = np.sinh(self.val), np.cosh(self.val)
        return self._chain(s, c, s)

    def cosh(self):
        s, c = np.sinh(self.val), np.cosh(self.val)
        return self._chain(c, s, c)

    def tanh(self):
        t = np.tanh(self.val)
        d = 1.0 - t * t
        return self._chain(t, d, -2.0 * t * d)

    def __abs__(self):
        sgn = np.sign(self.val)
        return self._chain(abs(self.val), sgn, 0.0)

    absolute = __abs__

    _UNARY = {
        "sin", "cos", "tan", "exp", "log", "sqrt", "square", "arcsin", "arccos",
        "arctan", "sinh", "cosh", "tanh", "absolute",
    }
    _BINARY = {
        "add": "__add__",
        "subtract": "__sub__",
        "multiply": "__mul__",
        "true_divide": "__truediv__",
        "divide": "__truediv__",
        "power": "__pow__",
    }

    def __array_ufunc__(self, ufunc, method, *inputs, **kwargs):
        if method != "__call__" or kwargs:
            return NotImplemented
        name = ufunc.__name__
        if len(inputs) == 1 and name in self._UNARY:
            return getattr(self, name)()
        if name == "negative":
            return -self
        if len(inputs) == 2 and name in self._BINARY:
            a, b = inputs
            if any(isinstance(t, np.ndarray) and t.ndim > 0 for t in inputs):
                # broadcast over arrays elementwise as object arrays
                a_arr = np.asarray(a, dtype=object)
                b_arr = np.asarray(b, dtype=object)
                return ufunc(a_arr, b_arr)
            if not isinstance(a, Jet):
                a = self._const(float(a))
            return getattr(a, self._BINARY[name])(b if isinstance(b, Jet) else float(b))
        return NotImplemented

    def __repr__(self) -> str:
        return f"Jet({self.val!r}, grad={self.grad!r})"


def _outer(a, b):
    return a[..., :, None] * b[..., None, :]


def _primal(x):
    return x.val if isinstance(x, Jet) else x


def seed_vector(point, dim: int | None = None, offset: int = 0) -> np.ndarray:
    """Return an object array of jets seeded on ``point`` (indices shifted by ``offset``).

    A 2-D ``point`` of shape ``(d, B)`` seeds a batch: entry ``i`` is a jet
    whose value is the row ``point[i]``.
    """
    point = np.asarray(point, dtype=float)
    size = point.shape[0] if point.ndim else 1
    dim = size if dim is None else dim
    out = np.empty(size, dtype=object)
    for i in range(size):
        v = point[i] if point.ndim else point
        grad = np.zeros(dim)
        grad[offset + i] = 1.0
        out[i] = Jet(v.copy() if point.ndim > 1 else float(v), grad, np.zeros((dim, dim)))
    return out


def unpack(result, dim: int, batch: int | None = None):
    """Split a jet-valued result into ``(value, jacobian, hessian)`` arrays.

    ``result`` may be a scalar or any sequence containing jets and plain
    numbers. A scalar gives shapes ``()``, ``(dim,)``, ``(dim, dim)``; a vector
    of length ``p`` gives ``(p,)``, ``(p, dim)``, ``(p, dim, dim)``. With
    ``batch = B`` the batch axis comes first: ``(B, p)``, ``(B, p, dim)``,
    ``(B, p, dim, dim)``, or ``(B,)``, ``(B, dim)``, ``(B, dim, dim)`` for
    a scalar.
    """
    if isinstance(result, Jet) or np.ndim(result) == 0 or (batch is not None and _is_batch_scalar(result, batch)):
        v, g, h = unpack([result], dim, batch)
        return v[..., 0], g[..., 0, :], h[..., 0, :, :]
    items = result if isinstance(result, list) else list(np.asarray(result, dtype=object).reshape(-1))
    p = len(items)
    lead = () if batch is None else (batch,)
    val = np.empty(lead + (p,))
    jac = np.zeros(lead + (p, dim))
    hess = np.zeros(lead + (p, dim, dim))
    for i, item in enumerate(items):
        if isinstance(item, Jet):
            val[..., i] = item.val
            jac[..., i, :] = item.grad
            hess[..., i, :, :] = item.hess
        else:
            val[..., i] = np.asarray(item, dtype=float)
    return val, jac, hess


def _is_batch_scalar(result, batch):
    arr = np.asarray(result)
    return arr.dtype != object and arr.shape == (batch,)
