"""Dense float64 tensors with a reverse-mode gradient tape.

Every differentiable quantity in the model (activations, weights, losses)
is a :class:`Tensor` wrapping a ``numpy`` array. Operations record their
parents and a backward closure; ``backward()`` on a scalar loss walks the
graph in reverse topological order and accumulates gradients into every
reachable tensor with ``requires_grad=True``.

Broadcasting follows numpy's trailing-dimension rule everywhere.
"""

from __future__ import annotations

import math
from contextlib import contextmanager

import numpy as np
from scipy.special import erf as _erf, expit as _expit

_GRAD_ENABLED = True


@contextmanager
def no_grad():
    """Disable tape construction inside the block (pure inference)."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum `grad` down to `shape`, undoing trailing-dimension broadcasting."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


class ShapeError(ValueError):
    pass


class Tensor:
    """N-dimensional float64 array with optional gradient tracking."""

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "_op")
    __array_priority__ = 100  # keep numpy from hijacking ndarray <op> Tensor

    def __init__(self, data, requires_grad: bool = False):
        if isinstance(data, Tensor):
            data = data.data
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad) and _GRAD_ENABLED
        self.grad: np.ndarray | None = None
        self._parents: tuple = ()
        self._backward = None
        self._op = "leaf"

    # -- construction helpers -------------------------------------------------

    @staticmethod
    def _from_op(data: np.ndarray, parents, backward, op: str) -> "Tensor":
        out = Tensor(data)
        if _GRAD_ENABLED and any(p.requires_grad for p in parents):
            out.requires_grad = True
            out._parents = tuple(parents)
            out._backward = backward
            out._op = op
        return out

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = np.zeros_like(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, op={self._op}, grad={self.requires_grad})"

    # -- elementwise arithmetic -----------------------------------------------

    @staticmethod
    def _coerce(other) -> "Tensor":
        return other if isinstance(other, Tensor) else Tensor(other)

    def _binary(self, other, fwd, bwd_a, bwd_b, op):
        other = self._coerce(other)
        try:
            data = fwd(self.data, other.data)
        except ValueError as e:
            raise ShapeError(
                f"{op}: shapes {self.shape} and {other.shape} not broadcastable"
            ) from e

        def backward(g):
            if self.requires_grad:
                self._accum(_unbroadcast(bwd_a(g, self.data, other.data), self.shape))
            if other.requires_grad:
                other._accum(_unbroadcast(bwd_b(g, self.data, other.data), other.shape))

        return Tensor._from_op(data, (self, other), backward, op)

    def _accum(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += g

    def __add__(self, other):
        return self._binary(other, np.add, lambda g, a, b: g, lambda g, a, b: g, "add")

    __radd__ = __add__

    def __sub__(self, other):
        return self._binary(other, np.subtract, lambda g, a, b: g, lambda g, a, b: -g, "sub")

    def __rsub__(self, other):
        return Tensor._coerce(other).__sub__(self)

    def __mul__(self, other):
        return self._binary(other, np.multiply, lambda g, a, b: g * b, lambda g, a, b: g * a, "mul")

    __rmul__ = __mul__

    def __truediv__(self, other):
        return self._binary(
            other, np.divide,
            lambda g, a, b: g / b,
            lambda g, a, b: -g * a / (b * b),
            "div",
        )

    def __rtruediv__(self, other):
        return Tensor._coerce(other).__truediv__(self)

    def __neg__(self):
        def backward(g):
            if self.requires_grad:
                self._accum(-g)
        return Tensor._from_op(-self.data, (self,), backward, "neg")

    # -- matmul ----------------------------------------------------------------

    def __matmul__(self, other):
        other = self._coerce(other)
        a, b = self.data, other.data
        if a.shape[-1] != b.shape[-2 if b.ndim > 1 else 0]:
            raise ShapeError(
                f"matmul: inner dimensions differ, {a.shape} @ {b.shape}"
            )
        data = np.matmul(a, b)

        def backward(g):
            if self.requires_grad:
                ga = np.matmul(g, np.swapaxes(b, -1, -2)) if b.ndim > 1 else np.multiply.outer(g, b)
                self._accum(_unbroadcast(ga, a.shape))
            if other.requires_grad:
                gb = np.matmul(np.swapaxes(a, -1, -2), g)
                other._accum(_unbroadcast(gb, b.shape))

        return Tensor._from_op(data, (self, other), backward, "matmul")

    # -- unary math -------------------------------------------------------------

    def _unary(self, fwd_data, dlocal, op):
        def backward(g):
            if self.requires_grad:
                self._accum(g * dlocal)
        return Tensor._from_op(fwd_data, (self,), backward, op)

    def exp(self):
        y = np.exp(self.data)
        return self._unary(y, y, "exp")

    def log(self):
        return self._unary(np.log(self.data), 1.0 / self.data, "log")

    def sqrt(self):
        y = np.sqrt(self.data)
        return self._unary(y, 0.5 / y, "sqrt")

    def tanh(self):
        y = np.tanh(self.data)
        return self._unary(y, 1.0 - y * y, "tanh")

    def erf(self):
        y = _erf(self.data)
        d = (2.0 / math.sqrt(math.pi)) * np.exp(-self.data * self.data)
        return self._unary(y, d, "erf")

    def gelu(self):
        """Exact Gaussian error linear unit, 0.5*x*(1+erf(x/sqrt(2)))."""
        return self * 0.5 * (self._coerce(1.0) + (self * (1.0 / math.sqrt(2.0))).erf())

    def sigmoid(self):
        y = _expit(self.data)
        return self._unary(y, y * (1.0 - y), "sigmoid")

    def softplus(self):
        """log(1 + exp(x)), computed without overflow."""
        return self._unary(np.logaddexp(0.0, self.data), _expit(self.data), "softplus")

    # -- reductions ---------------------------------------------------------------

    def sum(self, axis=None, keepdims: bool = False):
        data = self.data.sum(axis=axis, keepdims=keepdims)

        def backward(g):
            if not self.requires_grad:
                return
            if axis is None:
                self._accum(np.broadcast_to(g, self.shape).copy())
                return
            if not keepdims:
                g = np.expand_dims(g, axis)
            self._accum(np.broadcast_to(g, self.shape).copy())

        return Tensor._from_op(data, (self,), backward, "sum")

    def mean(self, axis=None, keepdims: bool = False):
        if axis is None:
            n = self.size
        else:
            axes = axis if isinstance(axis, tuple) else (axis,)
            n = 1
            for ax in axes:
                n *= self.shape[ax]
        return self.sum(axis=axis, keepdims=keepdims) * (1.0 / n)

    # -- shape manipulation ---------------------------------------------------------

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        data = self.data.reshape(shape)
        src = self.shape

        def backward(g):
            if self.requires_grad:
                self._accum(g.reshape(src))

        return Tensor._from_op(data, (self,), backward, "reshape")

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        if not axes:
            axes = tuple(reversed(range(self.data.ndim)))
        inv = np.argsort(axes)

        def backward(g):
            if self.requires_grad:
                self._accum(g.transpose(inv))

        return Tensor._from_op(self.data.transpose(axes), (self,), backward, "transpose")

    def __getitem__(self, key):
        data = self.data[key]
        parts = key if isinstance(key, tuple) else (key,)
        fancy = any(isinstance(p, (np.ndarray, list)) for p in parts)

        def backward(g):
            if self.requires_grad:
                full = np.zeros_like(self.data)
                if fancy:
                    np.add.at(full, key, g)  # integer indices may repeat
                else:
                    full[key] += g
                self._accum(full)

        return Tensor._from_op(data, (self,), backward, "slice")

    def pad2d(self, pad: int):
        """Zero-pad the two leading-of-last-three spatial axes of [..., H, W, C]."""
        widths = [(0, 0)] * (self.data.ndim - 3) + [(pad, pad), (pad, pad), (0, 0)]
        data = np.pad(self.data, widths)
        sl = tuple(
            [slice(None)] * (self.data.ndim - 3)
            + [slice(pad, pad + self.shape[-3]), slice(pad, pad + self.shape[-2]), slice(None)]
        )

        def backward(g):
            if self.requires_grad:
                self._accum(g[sl])

        return Tensor._from_op(data, (self,), backward, "pad2d")

    def take_rows(self, idx):
        """Gather rows along axis 0 (embedding lookup). `idx` is an int array."""
        idx = np.asarray(idx, dtype=np.int64)
        if idx.size and (idx.min() < 0 or idx.max() >= self.shape[0]):
            raise IndexError(f"take_rows: index out of range for {self.shape[0]} rows")
        data = self.data[idx]

        def backward(g):
            if self.requires_grad:
                full = np.zeros_like(self.data)
                np.add.at(full, idx, g)
                self._accum(full)

        return Tensor._from_op(data, (self,), backward, "take_rows")

    # -- fused numerics ----------------------------------------------------------------

    def softmax(self, axis: int = -1):
        """Numerically stabilized softmax along `axis`."""
        z = self.data - self.data.max(axis=axis, keepdims=True)
        e = np.exp(z)
        y = e / e.sum(axis=axis, keepdims=True)

        def backward(g):
            if self.requires_grad:
                dot = (g * y).sum(axis=axis, keepdims=True)
                self._accum(y * (g - dot))

        return Tensor._from_op(y, (self,), backward, "softmax")

    def log_softmax(self, axis: int = -1):
        z = self.data - self.data.max(axis=axis, keepdims=True)
        lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
        y = z - lse

        def backward(g):
            if self.requires_grad:
                self._accum(g - np.exp(y) * g.sum(axis=axis, keepdims=True))

        return Tensor._from_op(y, (self,), backward, "log_softmax")


# -- free-function aliases used throughout the package ------------------------------


def concat(tensors, axis: int = 0) -> Tensor:
    tensors = [t for t in tensors]
    data = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def backward(g):
        for t, lo, hi in zip(tensors, offsets[:-1], offsets[1:]):
            if t.requires_grad:
                sl = [slice(None)] * g.ndim
                sl[axis] = slice(lo, hi)
                t._accum(g[tuple(sl)])

    return Tensor._from_op(data, tuple(tensors), backward, "concat")


def add(a, b) -> Tensor:
    return Tensor._coerce(a) + b


def sub(a, b) -> Tensor:
    return Tensor._coerce(a) - b


def mul(a, b) -> Tensor:
    return Tensor._coerce(a) * b


def div(a, b) -> Tensor:
    return Tensor._coerce(a) / b


def matmul(a, b) -> Tensor:
    return Tensor._coerce(a) @ b


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    return x.softmax(axis=axis)


def rms_norm(x: Tensor, weight: Tensor, eps: float = 1e-6) -> Tensor:
    """Root-mean-square normalization over the last axis, then scale by `weight`."""
    if weight.shape != (x.shape[-1],):
        raise ShapeError(
            f"rms_norm: weight shape {weight.shape} does not match last axis {x.shape[-1]}"
        )
    ms = (x * x).mean(axis=-1, keepdims=True)
    return x / (ms + eps).sqrt() * weight


def cross_entropy(logits: Tensor, targets) -> Tensor:
    """Mean of -log softmax(logits)[i, target_i] over the rows of `logits`."""
    targets = np.asarray(targets, dtype=np.int64)
    n, v = logits.shape
    if targets.shape != (n,):
        raise ShapeError(f"cross_entropy: expected {n} targets, got {targets.shape}")
    if targets.size and (targets.min() < 0 or targets.max() >= v):
        raise IndexError(f"cross_entropy: target index out of range for vocab {v}")
    logp = logits.log_softmax(axis=-1)
    picked = logp[np.arange(n), targets]
    return -picked.mean()


def backward(loss: Tensor) -> None:
    """Reverse-accumulate gradients from a scalar `loss` through the tape."""
    if loss.size != 1:
        raise ValueError(f"backward: loss must be scalar, got shape {loss.shape}")
    topo: list[Tensor] = []
    seen = set()
    stack = [(loss, False)]
    while stack:
        node, processed = stack.pop()
        if processed:
            topo.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in seen:
                stack.append((p, False))

    loss._accum(np.ones_like(loss.data))
    for node in reversed(topo):
        if node._backward is not None:
            node._backward(node.grad)


def grad_check(f, x: Tensor, eps: float = 1e-5, sample: int | None = None,
               rng: np.random.Generator | None = None) -> float:
    """Max relative error between analytic and central-difference gradients.

    `f` maps `x` to a scalar Tensor and must be deterministic. With `sample`
    set, only that many randomly chosen elements are probed (for big tensors);
    by default every element is checked.
    """
    x.requires_grad = True
    x.grad = None
    loss = f(x)
    backward(loss)
    analytic = x.grad.copy()

    flat = x.data.reshape(-1)
    idx = np.arange(flat.size)
    if sample is not None and sample < flat.size:
        rng = rng or np.random.default_rng(0)
        idx = rng.choice(flat.size, size=sample, replace=False)

    worst = 0.0
    with no_grad():
        for i in idx:
            orig = flat[i]
            flat[i] = orig + eps
            hi = f(x).item()
            flat[i] = orig - eps
            lo = f(x).item()
            flat[i] = orig
            numeric = (hi - lo) / (2.0 * eps)
            err = abs(analytic.reshape(-1)[i] - numeric) / max(abs(numeric), 1e-8)
            worst = max(worst, err)
    return worst
