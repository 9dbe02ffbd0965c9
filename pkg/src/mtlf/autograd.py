"""Dense tensors with reverse-mode automatic differentiation.

Everything the encoder, task heads, and losses compute is built from the
primitives in this module.  Tensors wrap numpy arrays; training runs in
float32, and every op preserves float64 inputs so gradient verification
can run in 64-bit mode.  Gradients accumulate into ``.grad`` until
explicitly cleared.

Non-finite values are rejected at op boundaries: constructing a tensor
whose data contains NaN/Inf raises NumericError.
"""

from __future__ import annotations

import math
import threading
from typing import Callable, Sequence

import numpy as np

from .errors import (
    ContractError,
    DimensionError,
    EncodingError,
    LabelError,
    NumericError,
    ParameterError,
)

# tanh-approximation GELU constants (the convention of the BERT family):
# gelu(x) = 0.5 * x * (1 + tanh(sqrt(2/pi) * (x + 0.044715 * x^3)))
GELU_SCALE = math.sqrt(2.0 / math.pi)
GELU_CUBIC = 0.044715

# Additive pre-softmax penalty for masked attention keys.  Finite (the
# tensor invariant forbids Inf) but large enough that exp() underflows to
# exactly 0.0 after max-subtraction, in float32 and float64 alike.
MASK_NEG = -1e9

# graph construction is toggled per thread so parallel fold/grid jobs can
# mix training and eval-mode forwards without interfering
_thread_state = threading.local()


def _grad_enabled() -> bool:
    return getattr(_thread_state, "grad_enabled", True)


class no_grad:
    """Context manager that disables graph construction (eval-mode forwards)."""

    def __enter__(self):
        self._prev = _grad_enabled()
        _thread_state.grad_enabled = False
        return self

    def __exit__(self, *exc):
        _thread_state.grad_enabled = self._prev
        return False


class Tensor:
    """A dense n-dimensional array with optional gradient tracking.

    ``data`` is a numpy float array (row-major).  ``grad`` is None until a
    backward pass reaches this tensor, then an array of identical shape.
    """

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_vjp")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        if dtype is not None:
            arr = np.asarray(data, dtype=dtype)
        elif isinstance(data, np.ndarray) and np.issubdtype(data.dtype, np.floating):
            arr = data
        elif isinstance(data, np.floating):
            arr = np.asarray(data)
        else:
            arr = np.asarray(data, dtype=np.float32)
        if not np.all(np.isfinite(arr)):
            raise NumericError("tensor data contains NaN/Inf")
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._vjp: Callable[[np.ndarray], tuple] | None = None

    # -- convenience constructors -------------------------------------
    @classmethod
    def zeros(cls, shape, requires_grad=False, dtype=np.float32):
        return cls(np.zeros(shape, dtype=dtype), requires_grad)

    @classmethod
    def ones(cls, shape, requires_grad=False, dtype=np.float32):
        return cls(np.ones(shape, dtype=dtype), requires_grad)

    # -- introspection --------------------------------------------------
    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def astype(self, dtype) -> "Tensor":
        """Leaf copy in another float width (for 64-bit verification mode)."""
        return Tensor(self.data.astype(dtype), requires_grad=self.requires_grad)

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype}, requires_grad={self.requires_grad})"

    # -- backward pass ---------------------------------------------------
    def backward(self) -> None:
        """Backpropagate from a scalar loss.

        Each reachable tensor with requires_grad accumulates its gradient
        into ``.grad``; repeated calls without zeroing add up exactly.
        """
        if self.data.size != 1:
            raise ContractError(
                f"backward requires a scalar loss, got shape {self.shape}"
            )
        # Pass-local flow accumulation keeps repeated backward calls exact:
        # .grad only receives each tensor's finished total once per pass.
        flows: dict[int, np.ndarray] = {id(self): np.ones_like(self.data)}
        for node in reversed(_topo_order(self)):
            g = flows.pop(id(node), None)
            if g is None:
                continue
            if node.requires_grad:
                node.grad = g if node.grad is None else node.grad + g
            if node._vjp is None:
                continue
            for parent, pg in zip(node._parents, node._vjp(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if key in flows:
                    flows[key] = flows[key] + pg
                else:
                    flows[key] = pg

    # -- operator sugar ---------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return mul(self, -1.0)

    def __sub__(self, other):
        return add(self, mul(other, -1.0) if isinstance(other, Tensor) else -other)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return take(self, key)

    def sum(self):
        return total(self)


def _topo_order(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            stack.append((p, False))
    return order


def make_node(data, parents: Sequence[Tensor], vjp) -> Tensor:
    """Low-level constructor for custom differentiable ops.

    ``vjp(upstream)`` must return one gradient array (or None) per parent.
    """
    needs = _grad_enabled() and any(p.requires_grad for p in parents)
    out = Tensor(data, requires_grad=needs)
    if needs:
        out._parents = tuple(parents)
        out._vjp = vjp
    return out


def _as_tensor(x) -> Tensor:
    if isinstance(x, Tensor):
        return x
    if isinstance(x, (int, float)):
        return Tensor(np.float32(x))
    return Tensor(x)


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum gradient over axes introduced or stretched by broadcasting."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


# -- elementwise arithmetic -------------------------------------------------

def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    data = a.data + b.data

    def vjp(g):
        return _unbroadcast(g, a.data.shape), _unbroadcast(g, b.data.shape)

    return make_node(data, (a, b), vjp)


def mul(a, b) -> Tensor:
    if not isinstance(b, Tensor) and np.isscalar(b):
        a = _as_tensor(a)
        c = float(b)

        def vjp_scalar(g):
            return (g * c,)

        return make_node(a.data * c, (a,), vjp_scalar)
    a, b = _as_tensor(a), _as_tensor(b)
    data = a.data * b.data

    def vjp(g):
        return (
            _unbroadcast(g * b.data, a.data.shape),
            _unbroadcast(g * a.data, b.data.shape),
        )

    return make_node(data, (a, b), vjp)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product, 2-D or batched; gradient flows to both operands."""
    a, b = _as_tensor(a), _as_tensor(b)
    if a.data.ndim < 2 or b.data.ndim < 2:
        raise DimensionError(
            f"matmul needs >=2-D operands, got {a.shape} and {b.shape}"
        )
    if a.data.shape[-1] != b.data.shape[-2]:
        raise DimensionError(
            f"matmul inner dimensions disagree: {a.shape} x {b.shape}"
        )
    data = a.data @ b.data

    def vjp(g):
        ga = _unbroadcast(g @ b.data.swapaxes(-1, -2), a.data.shape)
        gb = _unbroadcast(a.data.swapaxes(-1, -2) @ g, b.data.shape)
        return ga, gb

    return make_node(data, (a, b), vjp)


# -- shape manipulation ------------------------------------------------------

def reshape(x: Tensor, shape) -> Tensor:
    old = x.data.shape
    data = x.data.reshape(shape)

    def vjp(g):
        return (g.reshape(old),)

    return make_node(data, (x,), vjp)


def swapaxes(x: Tensor, axis1: int, axis2: int) -> Tensor:
    data = x.data.swapaxes(axis1, axis2)

    def vjp(g):
        return (g.swapaxes(axis1, axis2),)

    return make_node(data, (x,), vjp)


def take(x: Tensor, key) -> Tensor:
    """Basic (non-aliasing) indexing, e.g. ``take(h, (slice(None), 0))``."""
    data = x.data[key]

    def vjp(g):
        buf = np.zeros_like(x.data)
        buf[key] += g
        return (buf,)

    return make_node(data, (x,), vjp)


def embedding(table: Tensor, ids: np.ndarray) -> Tensor:
    """Row gather from an embedding table; gradient scatter-adds rows."""
    ids = np.asarray(ids)
    if ids.size and (ids.min() < 0 or ids.max() >= table.data.shape[0]):
        raise EncodingError(
            f"embedding ids outside table of {table.data.shape[0]} rows"
        )
    data = table.data[ids]

    def vjp(g):
        buf = np.zeros_like(table.data)
        np.add.at(buf, ids, g)
        return (buf,)

    return make_node(data, (table,), vjp)


def total(x: Tensor) -> Tensor:
    """Full reduction to a scalar (used to scalarize test functions)."""
    data = np.asarray(x.data.sum(), dtype=x.data.dtype)

    def vjp(g):
        return (np.broadcast_to(g, x.data.shape).astype(x.data.dtype),)

    return make_node(data, (x,), vjp)


# -- nonlinearities ----------------------------------------------------------

def gelu(x: Tensor) -> Tensor:
    """Gaussian-error linear unit, tanh approximation.

    gelu(x) = 0.5 x (1 + tanh(GELU_SCALE * (x + GELU_CUBIC * x^3)))
    """
    x = _as_tensor(x)
    v = x.data
    inner = GELU_SCALE * (v + GELU_CUBIC * v**3)
    t = np.tanh(inner)
    data = 0.5 * v * (1.0 + t)

    def vjp(g):
        sech2 = 1.0 - t * t
        d_inner = GELU_SCALE * (1.0 + 3.0 * GELU_CUBIC * v * v)
        return (g * (0.5 * (1.0 + t) + 0.5 * v * sech2 * d_inner),)

    return make_node(data, (x,), vjp)


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    """Rows along ``axis`` become non-negative and sum to 1 (max-subtracted)."""
    x = _as_tensor(x)
    if not -x.data.ndim <= axis < x.data.ndim:
        raise ParameterError(f"softmax axis {axis} invalid for shape {x.shape}")
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    s = e / e.sum(axis=axis, keepdims=True)

    def vjp(g):
        dot = (g * s).sum(axis=axis, keepdims=True)
        return (s * (g - dot),)

    return make_node(s, (x,), vjp)


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Zero-mean unit-variance normalization over the last axis, then affine."""
    x, gamma, beta = _as_tensor(x), _as_tensor(gamma), _as_tensor(beta)
    d = x.data.shape[-1]
    if gamma.data.shape != (d,) or beta.data.shape != (d,):
        raise DimensionError(
            f"layer_norm gamma/beta must have shape ({d},), got "
            f"{gamma.shape} and {beta.shape}"
        )
    mu = x.data.mean(axis=-1, keepdims=True)
    var = x.data.var(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mu) * inv
    data = gamma.data * xhat + beta.data

    def vjp(g):
        reduce_axes = tuple(range(g.ndim - 1))
        dgamma = (g * xhat).sum(axis=reduce_axes)
        dbeta = g.sum(axis=reduce_axes)
        dxhat = g * gamma.data
        dx = inv * (
            dxhat
            - dxhat.mean(axis=-1, keepdims=True)
            - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True)
        )
        return dx, dgamma, dbeta

    return make_node(data, (x, gamma, beta), vjp)


def dropout(x: Tensor, p: float, training: bool, rng: np.random.Generator | None = None) -> Tensor:
    """Inverted dropout: zero with probability p, scale survivors by 1/(1-p)."""
    if not 0.0 <= p < 1.0:
        raise ParameterError(f"dropout probability must be in [0, 1), got {p}")
    x = _as_tensor(x)
    if not training or p == 0.0:
        return x
    if rng is None:
        raise ParameterError("dropout in training mode needs an rng")
    keep = (rng.random(x.data.shape) >= p).astype(x.data.dtype)
    scale = 1.0 / (1.0 - p)
    data = x.data * keep * scale

    def vjp(g):
        return (g * keep * scale,)

    return make_node(data, (x,), vjp)


# -- losses ------------------------------------------------------------------

def cross_entropy_loss(logits: Tensor, labels) -> Tensor:
    """Mean negative log-softmax probability of the true class.

    ``logits`` is [B, C]; ``labels`` a length-B sequence of class indices.
    """
    logits = _as_tensor(logits)
    if logits.data.ndim != 2:
        raise DimensionError(f"cross_entropy_loss expects [B, C] logits, got {logits.shape}")
    b, c = logits.data.shape
    if b < 1:
        raise DimensionError("cross_entropy_loss needs at least one row")
    idx = np.asarray(labels)
    if idx.shape != (b,):
        raise DimensionError(
            f"labels must have length {b}, got shape {idx.shape}"
        )
    if not np.issubdtype(idx.dtype, np.integer):
        raise ContractError("cross_entropy_loss labels must be class indices")
    bad = np.nonzero((idx < 0) | (idx >= c))[0]
    if bad.size:
        raise LabelError(
            f"label {int(idx[bad[0]])} at row {int(bad[0])} outside [0, {c})"
        )
    shifted = logits.data - logits.data.max(axis=1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    logp = shifted - lse
    rows = np.arange(b)
    data = np.asarray(-logp[rows, idx].mean(), dtype=logits.data.dtype)

    def vjp(g):
        grad = np.exp(logp)
        grad[rows, idx] -= 1.0
        return (g * grad / b,)

    return make_node(data, (logits,), vjp)


def mse_loss(pred: Tensor, target) -> Tensor:
    """Mean squared difference between two equal-length vectors."""
    pred = _as_tensor(pred)
    target = _as_tensor(target)
    if pred.data.shape != target.data.shape:
        raise DimensionError(
            f"mse_loss length mismatch: {pred.shape} vs {target.shape}"
        )
    if pred.data.size < 1:
        raise DimensionError("mse_loss needs at least one element")
    diff = pred.data - target.data
    n = diff.size
    data = np.asarray((diff * diff).mean(), dtype=pred.data.dtype)

    def vjp(g):
        base = g * 2.0 * diff / n
        return base, -base

    return make_node(data, (pred, target), vjp)
