"""Reverse-mode automatic differentiation over dense numpy arrays.

A ``Var`` wraps an ndarray and records the operation that produced it as a
backward closure; calling ``backward()`` on a scalar root zeroes every
adjoint in the graph and then accumulates gradients in reverse topological
order. The engine is dtype-agnostic: feed float64 leaves to run gradient
checks in double precision, float32 for normal work.

Quantized matmul nodes are straight-through: their forward value runs the
real mixed-precision kernel, their backward is the gradient of the
full-precision product with the same master weights.
"""
from __future__ import annotations

from typing import Callable, Optional, Sequence

import numpy as np
from scipy.special import erf

from .quantlinear import (
    OutlierPolicy,
    QuantLinearLayer,
    mixed_matmul,
)
from .tensor import topk_column_indices

__all__ = [
    "Var",
    "add",
    "sub",
    "mul",
    "scale",
    "matmul",
    "square",
    "sqrt",
    "mean",
    "total",
    "maximum",
    "clamp",
    "transpose",
    "reshape",
    "layernorm",
    "softmax",
    "gelu",
    "topk_columns",
    "extract_patches",
    "cross_entropy",
    "quant_matmul",
    "finite_diff_check",
]


class Var:
    """A computation-graph node: cached value, adjoint, parents, backward rule."""

    __slots__ = ("value", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, value, requires_grad: bool = False):
        self.value = np.asarray(value)
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = requires_grad
        self._parents: tuple = ()
        self._backward: Callable[[], None] = lambda: None

    @property
    def shape(self):
        return self.value.shape

    def backward(self) -> None:
        """Accumulate d(self)/d(leaf) into every differentiable node's ``grad``.

        The root must be scalar-valued. All adjoints in the reachable graph
        are reset first, so repeated calls give identical results.
        """
        if self.value.size != 1:
            raise ValueError("backward requires a scalar-valued root")
        topo: list[Var] = []
        seen = set()
        stack: list[tuple[Var, bool]] = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                topo.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if id(p) not in seen:
                    stack.append((p, False))
        for node in topo:
            node.grad = None
        self.grad = np.ones_like(self.value)
        for node in reversed(topo):
            # subgraphs with no differentiable leaves contribute nothing
            if node.requires_grad:
                node._backward()

    def __repr__(self):
        return f"Var(shape={self.value.shape}, requires_grad={self.requires_grad})"

    # light operator sugar; constants are wrapped as non-differentiable leaves
    def __add__(self, other):
        return add(self, _wrap(other))

    def __radd__(self, other):
        return add(_wrap(other), self)

    def __sub__(self, other):
        return sub(self, _wrap(other))

    def __rsub__(self, other):
        return sub(_wrap(other), self)

    def __mul__(self, other):
        return mul(self, _wrap(other))

    def __rmul__(self, other):
        return mul(_wrap(other), self)

    def __neg__(self):
        return scale(self, -1.0)


def _wrap(x) -> Var:
    return x if isinstance(x, Var) else Var(np.asarray(x))


def _make(value, parents: Sequence[Var]) -> Var:
    out = Var(value, requires_grad=any(p.requires_grad for p in parents))
    out._parents = tuple(parents)
    return out


def _acc(node: Var, g: np.ndarray) -> None:
    # first deposit may alias the child's adjoint (it is final by the time
    # this closure runs); later deposits allocate, never mutate in place
    if node.grad is None:
        node.grad = g
    else:
        node.grad = node.grad + g


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Reduce a gradient back to ``shape`` after numpy broadcasting."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, dim in enumerate(shape):
        if dim == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g.reshape(shape)


def add(a: Var, b: Var) -> Var:
    out = _make(a.value + b.value, (a, b))

    def backward():
        if a.requires_grad:
            _acc(a, _unbroadcast(out.grad, a.value.shape))
        if b.requires_grad:
            _acc(b, _unbroadcast(out.grad, b.value.shape))

    out._backward = backward
    return out


def sub(a: Var, b: Var) -> Var:
    out = _make(a.value - b.value, (a, b))

    def backward():
        if a.requires_grad:
            _acc(a, _unbroadcast(out.grad, a.value.shape))
        if b.requires_grad:
            _acc(b, _unbroadcast(-out.grad, b.value.shape))

    out._backward = backward
    return out


def mul(a: Var, b: Var) -> Var:
    out = _make(a.value * b.value, (a, b))

    def backward():
        if a.requires_grad:
            _acc(a, _unbroadcast(out.grad * b.value, a.value.shape))
        if b.requires_grad:
            _acc(b, _unbroadcast(out.grad * a.value, b.value.shape))

    out._backward = backward
    return out


def scale(a: Var, c: float) -> Var:
    """Multiply by a python scalar constant."""
    out = _make(a.value * c, (a,))

    def backward():
        if a.requires_grad:
            _acc(a, out.grad * c)

    out._backward = backward
    return out


def matmul(a: Var, b: Var) -> Var:
    """Matrix product. Supports stacked @ 2D (parameter case) and
    equal-rank batched products (attention case)."""
    av, bv = a.value, b.value
    if not (bv.ndim == 2 or bv.ndim == av.ndim):
        raise ValueError(f"unsupported matmul ranks {av.ndim} @ {bv.ndim}")
    out = _make(np.matmul(av, bv), (a, b))

    def backward():
        g = out.grad
        if bv.ndim == 2:
            if a.requires_grad:
                _acc(a, np.matmul(g, bv.T))
            if b.requires_grad:
                _acc(
                    b,
                    np.matmul(
                        av.reshape(-1, av.shape[-1]).T, g.reshape(-1, g.shape[-1])
                    ),
                )
        else:
            if a.requires_grad:
                _acc(a, np.matmul(g, bv.swapaxes(-1, -2)))
            if b.requires_grad:
                _acc(b, np.matmul(av.swapaxes(-1, -2), g))

    out._backward = backward
    return out


def square(a: Var) -> Var:
    out = _make(a.value * a.value, (a,))

    def backward():
        if a.requires_grad:
            _acc(a, out.grad * 2.0 * a.value)

    out._backward = backward
    return out


def sqrt(a: Var, eps: float = 0.0) -> Var:
    """Square root of (a + eps); pass eps > 0 to smooth the kink at zero."""
    val = np.sqrt(a.value + eps)
    out = _make(val, (a,))

    def backward():
        if a.requires_grad:
            _acc(a, out.grad * 0.5 / val)

    out._backward = backward
    return out


def mean(a: Var, axis: Optional[int] = None) -> Var:
    out = _make(np.asarray(np.mean(a.value, axis=axis)), (a,))
    n = a.value.size if axis is None else a.value.shape[axis]

    def backward():
        if a.requires_grad:
            g = out.grad
            if axis is not None:
                g = np.expand_dims(g, axis)
            _acc(a, np.broadcast_to(g / n, a.value.shape))

    out._backward = backward
    return out


def total(a: Var, axis: Optional[int] = None) -> Var:
    """Sum over all elements or one axis."""
    out = _make(np.asarray(np.sum(a.value, axis=axis)), (a,))

    def backward():
        if a.requires_grad:
            g = out.grad
            if axis is not None:
                g = np.expand_dims(g, axis)
            _acc(a, np.broadcast_to(g, a.value.shape))

    out._backward = backward
    return out


def maximum(a: Var, c: float) -> Var:
    """Elementwise max(a, c) against a constant; gradient is zero at the tie."""
    out = _make(np.maximum(a.value, c), (a,))

    def backward():
        if a.requires_grad:
            _acc(a, out.grad * (a.value > c))

    out._backward = backward
    return out


def clamp(a: Var, lo: float, hi: float) -> Var:
    out = _make(np.clip(a.value, lo, hi), (a,))

    def backward():
        if a.requires_grad:
            _acc(a, out.grad * ((a.value > lo) & (a.value < hi)))

    out._backward = backward
    return out


def transpose(a: Var, axes: Sequence[int]) -> Var:
    axes = tuple(axes)
    out = _make(np.transpose(a.value, axes), (a,))
    inverse = tuple(np.argsort(axes))

    def backward():
        if a.requires_grad:
            _acc(a, np.transpose(out.grad, inverse))

    out._backward = backward
    return out


def reshape(a: Var, shape: Sequence[int]) -> Var:
    out = _make(a.value.reshape(shape), (a,))

    def backward():
        if a.requires_grad:
            _acc(a, out.grad.reshape(a.value.shape))

    out._backward = backward
    return out


def layernorm(a: Var, gamma: Var, beta: Var, eps: float = 1e-5) -> Var:
    """Normalize over the last axis, then apply the affine (gamma, beta)."""
    mu = np.mean(a.value, axis=-1, keepdims=True)
    var = np.mean((a.value - mu) ** 2, axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (a.value - mu) * inv
    out = _make(gamma.value * xhat + beta.value, (a, gamma, beta))
    n_reduce = tuple(range(out.value.ndim - 1))

    def backward():
        g = out.grad
        if gamma.requires_grad:
            _acc(gamma, np.sum(g * xhat, axis=n_reduce))
        if beta.requires_grad:
            _acc(beta, np.sum(g, axis=n_reduce))
        if a.requires_grad:
            gg = g * gamma.value
            m1 = np.mean(gg, axis=-1, keepdims=True)
            m2 = np.mean(gg * xhat, axis=-1, keepdims=True)
            _acc(a, (gg - m1 - xhat * m2) * inv)

    out._backward = backward
    return out


def softmax(a: Var, axis: int = -1) -> Var:
    shifted = a.value - np.max(a.value, axis=axis, keepdims=True)
    e = np.exp(shifted)
    s = e / np.sum(e, axis=axis, keepdims=True)
    out = _make(s, (a,))

    def backward():
        if a.requires_grad:
            g = out.grad
            _acc(a, s * (g - np.sum(g * s, axis=axis, keepdims=True)))

    out._backward = backward
    return out


def gelu(a: Var) -> Var:
    """Gaussian error linear unit, exact erf form."""
    x = a.value
    cdf = 0.5 * (1.0 + erf(x / np.sqrt(2.0)))
    out = _make(x * cdf, (a,))

    def backward():
        if a.requires_grad:
            pdf = np.exp(-0.5 * x * x) / np.sqrt(2.0 * np.pi)
            _acc(a, out.grad * (cdf + x * pdf))

    out._backward = backward
    return out


def topk_columns(a: Var, k: int) -> Var:
    """The k largest values per column of a 2D input, descending.

    The backward pass routes gradient only to the selected (row, column)
    positions; every other entry receives exactly zero.
    """
    idx = topk_column_indices(a.value, k)
    cols = np.broadcast_to(np.arange(a.value.shape[1]), idx.shape)
    out = _make(np.take_along_axis(a.value, idx, axis=0), (a,))

    def backward():
        if a.requires_grad:
            scatter = np.zeros_like(a.value)
            np.add.at(scatter, (idx, cols), out.grad)
            _acc(a, scatter)

    out._backward = backward
    return out


def extract_patches(a: Var, patch: int) -> Var:
    """Cut B x C x H x W images into non-overlapping patches.

    Output is B x N x (C * patch * patch) with patches in row-major order
    and each patch flattened channel-first.
    """
    b, c, h, w = a.value.shape
    if h % patch or w % patch:
        raise ValueError("image size must be divisible by the patch size")
    gh, gw = h // patch, w // patch
    blocks = a.value.reshape(b, c, gh, patch, gw, patch)
    blocks = blocks.transpose(0, 2, 4, 1, 3, 5)
    out = _make(np.ascontiguousarray(blocks).reshape(b, gh * gw, c * patch * patch), (a,))

    def backward():
        if a.requires_grad:
            g = out.grad.reshape(b, gh, gw, c, patch, patch)
            g = g.transpose(0, 3, 1, 4, 2, 5)
            _acc(a, np.ascontiguousarray(g).reshape(b, c, h, w))

    out._backward = backward
    return out


def cross_entropy(logits: Var, labels: np.ndarray) -> Var:
    """Mean softmax cross-entropy of B x M logits against integer labels."""
    z = logits.value
    if z.ndim != 2:
        raise ValueError("logits must be 2D (batch x classes)")
    labels = np.asarray(labels)
    n = z.shape[0]
    m = np.max(z, axis=1, keepdims=True)
    lse = m[:, 0] + np.log(np.sum(np.exp(z - m), axis=1))
    picked = z[np.arange(n), labels]
    out = _make(np.asarray(np.mean(lse - picked)), (logits,))

    def backward():
        if logits.requires_grad:
            p = np.exp(z - m)
            p /= np.sum(p, axis=1, keepdims=True)
            p[np.arange(n), labels] -= 1.0
            _acc(logits, out.grad * p / n)

    out._backward = backward
    return out


def quant_matmul(
    x: Var,
    weight: Var,
    bias: Optional[Var],
    layer: QuantLinearLayer,
    tau: float,
    policy: Optional[OutlierPolicy] = None,
    quantized: bool = True,
    trace_sink: Optional[list] = None,
    capture_sink: Optional[list] = None,
) -> Var:
    """Linear layer node with a straight-through quantized forward.

    With ``quantized=True`` the value runs ``mixed_matmul`` on the layer's
    cached int8 weights (emitting a trace into ``trace_sink``); the backward
    pass is always the full-precision product rule on ``weight``, which is
    the straight-through treatment of the piecewise-constant rounding.
    ``capture_sink`` receives the 2D pre-multiplication hidden state node,
    so losses over captured states stay differentiable. 3D inputs are
    stacked batch-major into 2D before the product, matching how batches
    contaminate the outlier set.
    """
    if quantized and weight.value is not layer.weights:
        raise ValueError("weight var must wrap the layer's master array")
    batched = x.value.ndim == 3
    if batched:
        b, s, h = x.value.shape
        x2 = reshape(x, (b * s, h))
    elif x.value.ndim == 2:
        x2 = x
    else:
        raise ValueError(f"expected 2D or 3D input, got shape {x.value.shape}")

    if capture_sink is not None:
        capture_sink.append((layer.layer_id, x2))

    if quantized:
        value, trace = mixed_matmul(x2.value, layer, tau=tau, policy=policy)
        if trace_sink is not None:
            trace_sink.append(trace)
    else:
        value = np.matmul(x2.value, weight.value)
        if bias is not None:
            value = value + bias.value

    parents = (x2, weight) if bias is None else (x2, weight, bias)
    out2 = _make(value, parents)

    def backward():
        g = out2.grad
        if x2.requires_grad:
            _acc(x2, np.matmul(g, weight.value.T))
        if weight.requires_grad:
            _acc(weight, np.matmul(x2.value.T, g))
        if bias is not None and bias.requires_grad:
            _acc(bias, np.sum(g, axis=0))

    out2._backward = backward
    if batched:
        return reshape(out2, (b, s, value.shape[-1]))
    return out2


def finite_diff_check(
    f: Callable[[np.ndarray], tuple[float, np.ndarray]],
    x: np.ndarray,
    h: float = 1e-5,
) -> float:
    """Max relative discrepancy between analytic and central-difference
    gradients of a scalar function.

    ``f(x)`` must return ``(value, gradient)``. The check runs in double
    precision; callers are responsible for choosing points away from kinks.
    """
    x = np.asarray(x, dtype=np.float64)
    _, analytic = f(x)
    analytic = np.asarray(analytic, dtype=np.float64).ravel()
    worst = 0.0
    flat = x.ravel()
    for i in range(flat.size):
        xp = flat.copy()
        xm = flat.copy()
        xp[i] += h
        xm[i] -= h
        fp, _ = f(xp.reshape(x.shape))
        fm, _ = f(xm.reshape(x.shape))
        central = (fp - fm) / (2.0 * h)
        disc = abs(analytic[i] - central) / max(abs(central), 1e-12)
        worst = max(worst, disc)
    return worst
