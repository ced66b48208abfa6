"""Dense float64 tensors with reverse-mode automatic differentiation.

The graph is built eagerly: every operation returns a new Tensor holding the
result plus a closure that routes the incoming gradient to its parents.
``Tensor.backward()`` runs a single topological sweep, visiting each recorded
node exactly once. An optional value filter (see :func:`value_filter`) is
applied to every primitive's output and every gradient accumulation, which is
how reduced-precision arithmetic is emulated without a second code path.
"""

from __future__ import annotations

import contextlib
from typing import Callable, Optional

import numpy as np
from scipy.special import erf as _np_erf

_SQRT2 = np.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / np.sqrt(2.0 * np.pi)

# Module-level hook applied to op outputs and gradient accumulations.
_value_filter: Optional[Callable[[np.ndarray], np.ndarray]] = None


@contextlib.contextmanager
def value_filter(fn):
    """Temporarily filter every primitive result through ``fn``.

    Used by the mixed-precision emulation to round all intermediate values
    (forward activations and backward gradients) to binary16.
    """
    global _value_filter
    prev = _value_filter
    _value_filter = fn
    try:
        yield
    finally:
        _value_filter = prev


def _filtered(a: np.ndarray) -> np.ndarray:
    if _value_filter is None:
        return a
    return _value_filter(a)


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    """Reduce a broadcast gradient back to ``shape``."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


class Tensor:
    """A dense n-dimensional float64 array, optionally tracked for gradients."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "name")

    def __init__(self, data, requires_grad=False, name=None):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.grad: Optional[np.ndarray] = None
        self._parents: tuple = ()
        self._backward: Optional[Callable[[np.ndarray], None]] = None
        self.name = name

    # -- basics ----------------------------------------------------------

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{tag}, requires_grad={self.requires_grad})"

    def _accumulate(self, g: np.ndarray):
        g = _unbroadcast(np.asarray(g, dtype=np.float64), self.data.shape)
        if self.grad is None:
            self.grad = _filtered(g.copy())
        else:
            self.grad = _filtered(self.grad + g)

    # -- graph construction ----------------------------------------------

    @staticmethod
    def _make(out_data, parents, backward) -> "Tensor":
        out = Tensor(_filtered(np.asarray(out_data, dtype=np.float64)))
        if any(p.requires_grad for p in parents):
            out.requires_grad = True
            out._parents = tuple(parents)
            out._backward = backward
        return out

    def backward(self):
        """Reverse sweep from a scalar; fills ``grad`` on every tracked node."""
        if self.data.size != 1:
            raise ValueError("backward() requires a scalar tensor")
        topo: list[Tensor] = []
        seen = set()
        stack = [(self, False)]
        while stack:
            node, processed = stack.pop()
            if processed:
                topo.append(node)
                continue
            if id(node) in seen or not node.requires_grad:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                stack.append((p, False))
        self._accumulate(np.ones_like(self.data))
        for node in reversed(topo):
            if node._backward is not None:
                node._backward(node.grad)

    # -- arithmetic -------------------------------------------------------

    def __add__(self, other):
        other = as_tensor(other)
        def bwd(g):
            if self.requires_grad:
                self._accumulate(g)
            if other.requires_grad:
                other._accumulate(g)
        return Tensor._make(self.data + other.data, (self, other), bwd)

    __radd__ = __add__

    def __neg__(self):
        def bwd(g):
            self._accumulate(-g)
        return Tensor._make(-self.data, (self,), bwd)

    def __sub__(self, other):
        return self + (-as_tensor(other))

    def __rsub__(self, other):
        return as_tensor(other) + (-self)

    def __mul__(self, other):
        other = as_tensor(other)
        def bwd(g):
            if self.requires_grad:
                self._accumulate(g * other.data)
            if other.requires_grad:
                other._accumulate(g * self.data)
        return Tensor._make(self.data * other.data, (self, other), bwd)

    __rmul__ = __mul__

    def __truediv__(self, other):
        other = as_tensor(other)
        def bwd(g):
            if self.requires_grad:
                self._accumulate(g / other.data)
            if other.requires_grad:
                other._accumulate(-g * self.data / (other.data * other.data))
        return Tensor._make(self.data / other.data, (self, other), bwd)

    def __rtruediv__(self, other):
        return as_tensor(other) / self

    def __pow__(self, exponent: float):
        e = float(exponent)
        def bwd(g):
            self._accumulate(g * e * self.data ** (e - 1.0))
        return Tensor._make(self.data ** e, (self,), bwd)

    def __matmul__(self, other):
        other = as_tensor(other)
        def bwd(g):
            if self.requires_grad:
                self._accumulate(g @ other.data.T)
            if other.requires_grad:
                other._accumulate(self.data.T @ g)
        return Tensor._make(self.data @ other.data, (self, other), bwd)

    # -- elementwise functions -------------------------------------------

    def exp(self):
        out_data = np.exp(self.data)
        def bwd(g):
            self._accumulate(g * out_data)
        return Tensor._make(out_data, (self,), bwd)

    def log(self):
        def bwd(g):
            self._accumulate(g / self.data)
        return Tensor._make(np.log(self.data), (self,), bwd)

    def tanh(self):
        out_data = np.tanh(self.data)
        def bwd(g):
            self._accumulate(g * (1.0 - out_data * out_data))
        return Tensor._make(out_data, (self,), bwd)

    def erf(self):
        def bwd(g):
            self._accumulate(g * 2.0 * _INV_SQRT_2PI * _SQRT2
                             * np.exp(-self.data * self.data))
        return Tensor._make(_np_erf(self.data), (self,), bwd)

    # -- shape manipulation ----------------------------------------------

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        old = self.data.shape
        def bwd(g):
            self._accumulate(g.reshape(old))
        return Tensor._make(self.data.reshape(shape), (self,), bwd)

    def transpose(self, axes=None):
        def bwd(g):
            inv = None if axes is None else np.argsort(axes)
            self._accumulate(g.transpose(inv))
        return Tensor._make(self.data.transpose(axes), (self,), bwd)

    @property
    def T(self):
        return self.transpose()

    def __getitem__(self, key):
        def bwd(g):
            full = np.zeros_like(self.data)
            np.add.at(full, key, g)
            self._accumulate(full)
        return Tensor._make(self.data[key], (self,), bwd)

    def take_rows(self, indices):
        """Gather rows by an integer index array; grads scatter-add back."""
        idx = np.asarray(indices, dtype=np.intp)
        def bwd(g):
            full = np.zeros_like(self.data)
            np.add.at(full, idx, g)
            self._accumulate(full)
        return Tensor._make(self.data[idx], (self,), bwd)

    # -- reductions -------------------------------------------------------

    def sum(self, axis=None, keepdims=False):
        out_data = self.data.sum(axis=axis, keepdims=keepdims)
        def bwd(g):
            if axis is not None and not keepdims:
                g = np.expand_dims(g, axis)
            self._accumulate(np.broadcast_to(g, self.data.shape))
        return Tensor._make(out_data, (self,), bwd)

    def mean(self, axis=None, keepdims=False):
        n = self.data.size if axis is None else self.data.shape[axis]
        return self.sum(axis=axis, keepdims=keepdims) / float(n)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def concat(tensors, axis=0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    sizes = [t.data.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]
    def bwd(g):
        for t, piece in zip(tensors, np.split(g, splits, axis=axis)):
            if t.requires_grad:
                t._accumulate(piece)
    return Tensor._make(np.concatenate([t.data for t in tensors], axis=axis),
                        tuple(tensors), bwd)


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    """Numerically stable softmax along ``axis``.

    Raises ValueError naming the first offending index when the input is
    not finite.
    """
    x = as_tensor(x)
    if not np.all(np.isfinite(x.data)):
        bad = np.argwhere(~np.isfinite(x.data))[0]
        raise ValueError(
            f"softmax input is not finite at index {tuple(int(i) for i in bad)}")
    shift = x - Tensor(x.data.max(axis=axis, keepdims=True))
    e = shift.exp()
    return e / e.sum(axis=axis, keepdims=True)


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    x = as_tensor(x)
    if not np.all(np.isfinite(x.data)):
        bad = np.argwhere(~np.isfinite(x.data))[0]
        raise ValueError(
            f"log_softmax input is not finite at index {tuple(int(i) for i in bad)}")
    shift = x - Tensor(x.data.max(axis=axis, keepdims=True))
    return shift - shift.exp().sum(axis=axis, keepdims=True).log()


def gelu(x: Tensor) -> Tensor:
    """Exact-erf GeLU: x * Phi(x) with Phi the standard normal CDF."""
    x = as_tensor(x)
    return x * 0.5 * ((x * (1.0 / _SQRT2)).erf() + 1.0)


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-12) -> Tensor:
    """Normalize the last axis to mean 0 / population variance 1, then affine."""
    if eps < 0:
        raise ValueError("eps must be >= 0")
    x = as_tensor(x)
    n = x.shape[-1]
    mu = x.sum(axis=-1, keepdims=True) / float(n)
    centered = x - mu
    var = (centered * centered).sum(axis=-1, keepdims=True) / float(n)
    normed = centered / ((var + eps) ** 0.5)
    return normed * as_tensor(gamma) + as_tensor(beta)


def dropout(x: Tensor, rate: float, rng: np.random.Generator) -> Tensor:
    """Inverted dropout; identity when rate == 0."""
    if rate <= 0.0:
        return x
    keep = (rng.random(x.shape) >= rate) / (1.0 - rate)
    return x * Tensor(keep)
