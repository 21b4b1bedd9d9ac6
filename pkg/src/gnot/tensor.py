"""Dense float64 tensors with define-by-run reverse-mode differentiation.

Every operation records its inputs and a backward rule on the output, so a
scalar loss can be differentiated with a single reverse sweep.  The op set is
deliberately small: exactly what an attention/MLP stack needs.  Values are
always float64; gradients accumulate additively, and the caller is expected
to zero leaf grads between optimization steps.

A graph and its tensors form a single-owner unit (one logical thread builds
and differentiates it).  Detached tensors are plain immutable values.
"""

import threading

import numpy as np
from scipy.special import erf as _erf

from .errors import ContractError, ShapeError

_INV_SQRT2 = 1.0 / np.sqrt(2.0)
_INV_SQRT2PI = 1.0 / np.sqrt(2.0 * np.pi)

_tls = threading.local()  # per-thread recording flag (default: on)


def _recording():
    return getattr(_tls, "grad_enabled", True)


class no_grad:
    """Context manager that disables graph recording (evaluation mode).

    The flag is per-thread, so read-only evaluation may fan out across
    workers without interfering with a training thread.
    """

    def __enter__(self):
        self._prev = _recording()
        _tls.grad_enabled = False
        return self

    def __exit__(self, *exc):
        _tls.grad_enabled = self._prev
        return False


def _as_array(value):
    return np.asarray(value, dtype=np.float64)


def _as_tensor(value):
    return value if isinstance(value, Tensor) else Tensor(_as_array(value))


def _unbroadcast(grad, shape):
    """Sum `grad` down to `shape` (reverses numpy broadcasting)."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


class Tensor:
    """A float64 array plus optional gradient state.

    `requires_grad` marks a leaf whose gradient should be populated by
    `backward()`.  Results of operations track their parents while grad
    recording is enabled and propagate gradients through `_backward`.
    """

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad=False):
        self.data = _as_array(data)
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._parents = ()
        self._backward = None

    # -- basics --------------------------------------------------------------

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def item(self):
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else self._non_scalar()

    def _non_scalar(self):
        raise ContractError(f"item() requires a scalar tensor, got shape {self.shape}")

    def numpy(self):
        """The underlying array (not a copy; treat as read-only)."""
        return self.data

    def detach(self):
        return Tensor(self.data)

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    def _accumulate(self, g):
        # grads are never mutated in place, so views (even read-only
        # broadcast views) are safe to keep
        self.grad = g if self.grad is None else self.grad + g

    # -- graph construction ----------------------------------------------

    @staticmethod
    def _result(data, parents, backward):
        out = Tensor(data)
        if _recording() and any(p.requires_grad or p._parents for p in parents):
            out.requires_grad = True
            out._parents = parents
            out._backward = backward
        return out

    def backward(self):
        """Reverse sweep from a scalar; populates grad on requires_grad leaves."""
        if self.data.size != 1:
            raise ContractError(f"backward() requires a scalar loss, got shape {self.shape}")
        order = []
        seen = set()
        stack = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for parent in node._parents:
                if id(parent) not in seen:
                    stack.append((parent, False))
        self._accumulate(np.ones_like(self.data))
        for node in reversed(order):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)

    # -- elementwise arithmetic --------------------------------------------

    def __add__(self, other):
        other = _as_tensor(other)
        a, b = self, other

        def bw(g):
            if a.requires_grad or a._parents:
                a._accumulate(_unbroadcast(g, a.shape))
            if b.requires_grad or b._parents:
                b._accumulate(_unbroadcast(g, b.shape))

        return Tensor._result(a.data + b.data, (a, b), bw)

    __radd__ = __add__

    def __neg__(self):
        a = self

        def bw(g):
            a._accumulate(-g)

        return Tensor._result(-a.data, (a,), bw)

    def __sub__(self, other):
        return self + (-_as_tensor(other))

    def __rsub__(self, other):
        return _as_tensor(other) + (-self)

    def __mul__(self, other):
        other = _as_tensor(other)
        a, b = self, other

        def bw(g):
            if a.requires_grad or a._parents:
                a._accumulate(_unbroadcast(g * b.data, a.shape))
            if b.requires_grad or b._parents:
                b._accumulate(_unbroadcast(g * a.data, b.shape))

        return Tensor._result(a.data * b.data, (a, b), bw)

    __rmul__ = __mul__

    def __truediv__(self, other):
        other = _as_tensor(other)
        a, b = self, other

        def bw(g):
            if a.requires_grad or a._parents:
                a._accumulate(_unbroadcast(g / b.data, a.shape))
            if b.requires_grad or b._parents:
                b._accumulate(_unbroadcast(-g * a.data / (b.data * b.data), b.shape))

        return Tensor._result(a.data / b.data, (a, b), bw)

    def __rtruediv__(self, other):
        return _as_tensor(other) / self

    def __pow__(self, exponent):
        if not isinstance(exponent, (int, float)):
            raise ShapeError("pow expects a scalar exponent")
        a, p = self, float(exponent)

        def bw(g):
            a._accumulate(g * p * a.data ** (p - 1.0))

        return Tensor._result(a.data ** p, (a,), bw)

    # -- linear algebra ------------------------------------------------------

    def __matmul__(self, other):
        other = _as_tensor(other)
        a, b = self, other
        if a.ndim < 2 or b.ndim < 2:
            raise ShapeError(f"matmul requires >=2-d operands, got {a.shape} @ {b.shape}")
        if a.shape[-1] != b.shape[-2]:
            raise ShapeError(f"matmul inner dimensions disagree: {a.shape} @ {b.shape}")

        def bw(g):
            if a.requires_grad or a._parents:
                a._accumulate(_unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.shape))
            if b.requires_grad or b._parents:
                b._accumulate(_unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.shape))

        return Tensor._result(a.data @ b.data, (a, b), bw)

    # -- reductions -----------------------------------------------------------

    def sum(self, axis=None, keepdims=False):
        a = self
        axes = (axis,) if isinstance(axis, int) else axis

        def bw(g):
            gg = g
            if axes is not None and not keepdims:
                gg = np.expand_dims(g, axes)
            a._accumulate(np.broadcast_to(gg, a.shape))

        return Tensor._result(a.data.sum(axis=axes, keepdims=keepdims), (a,), bw)

    def mean(self, axis=None, keepdims=False):
        axes = (axis,) if isinstance(axis, int) else axis
        if axes is None:
            count = self.data.size
        else:
            count = int(np.prod([self.shape[ax] for ax in axes]))
        return self.sum(axis=axis, keepdims=keepdims) * (1.0 / count)

    # -- shape manipulation ----------------------------------------------------

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        a = self

        def bw(g):
            a._accumulate(g.reshape(a.shape))

        return Tensor._result(a.data.reshape(shape), (a,), bw)

    def transpose(self, axes):
        a = self
        axes = tuple(axes)
        inverse = tuple(np.argsort(axes))

        def bw(g):
            a._accumulate(np.transpose(g, inverse))

        return Tensor._result(np.transpose(a.data, axes), (a,), bw)

    def swap_last(self):
        """Transpose the trailing two axes."""
        axes = list(range(self.ndim))
        axes[-1], axes[-2] = axes[-2], axes[-1]
        return self.transpose(axes)

    def __getitem__(self, index):
        a = self

        def bw(g):
            buf = np.zeros_like(a.data)
            np.add.at(buf, index, g)
            a._accumulate(buf)

        return Tensor._result(a.data[index], (a,), bw)

    # -- nonlinearities ----------------------------------------------------------

    def exp(self):
        a = self
        out_data = np.exp(a.data)

        def bw(g):
            a._accumulate(g * out_data)

        return Tensor._result(out_data, (a,), bw)

    def clip_min(self, floor):
        """max(x, floor) with gradient passing only through unclipped entries."""
        a = self
        floor = float(floor)

        def bw(g):
            a._accumulate(g * (a.data > floor))

        return Tensor._result(np.maximum(a.data, floor), (a,), bw)


def tensor(data, requires_grad=False):
    return Tensor(data, requires_grad=requires_grad)


def concat(tensors, axis=0):
    tensors = [_as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    offsets = np.cumsum(sizes)[:-1]

    def bw(g):
        for t, piece in zip(tensors, np.split(g, offsets, axis=axis)):
            if t.requires_grad or t._parents:
                t._accumulate(piece)

    return Tensor._result(
        np.concatenate([t.data for t in tensors], axis=axis), tuple(tensors), bw
    )


def matmul(a, b):
    return _as_tensor(a) @ _as_tensor(b)


def softmax_lastdim(x):
    """Softmax along the trailing axis, computed with max-subtraction.

    Each trailing-axis slice of the output is strictly positive and sums
    to one; finite inputs can never overflow.
    """
    x = _as_tensor(x)
    shifted = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    out_data = e / e.sum(axis=-1, keepdims=True)

    def bw(g):
        inner = (g * out_data).sum(axis=-1, keepdims=True)
        x._accumulate(out_data * (g - inner))

    return Tensor._result(out_data, (x,), bw)


def gelu(x):
    """Gaussian error linear unit, exact erf form: 0.5*x*(1+erf(x/sqrt(2)))."""
    x = _as_tensor(x)
    cdf = 0.5 * (1.0 + _erf(x.data * _INV_SQRT2))
    out_data = x.data * cdf

    def bw(g):
        pdf = _INV_SQRT2PI * np.exp(-0.5 * x.data * x.data)
        x._accumulate(g * (cdf + x.data * pdf))

    return Tensor._result(out_data, (x,), bw)


def layer_norm(x, gamma, beta, eps=1e-6):
    """Per-token normalization over the trailing axis with learned affine.

    Fused primitive: the composed form costs ~8 array passes per call, which
    dominates training time on memory-bound CPU runs.
    """
    x, gamma, beta = _as_tensor(x), _as_tensor(gamma), _as_tensor(beta)
    mu = x.data.mean(axis=-1, keepdims=True)
    centered = x.data - mu
    var = (centered * centered).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = centered * inv
    out_data = xhat * gamma.data + beta.data

    def bw(g):
        if gamma.requires_grad or gamma._parents:
            axes = tuple(range(g.ndim - 1))
            gamma._accumulate((g * xhat).sum(axis=axes))
        if beta.requires_grad or beta._parents:
            beta._accumulate(g.sum(axis=tuple(range(g.ndim - 1))))
        if x.requires_grad or x._parents:
            gx = g * gamma.data
            m1 = gx.mean(axis=-1, keepdims=True)
            m2 = (gx * xhat).mean(axis=-1, keepdims=True)
            x._accumulate(inv * (gx - m1 - xhat * m2))

    return Tensor._result(out_data, (x, gamma, beta), bw)
