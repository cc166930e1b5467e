"""Dynamic mixed-precision linear algebra.

A matrix product X @ W is split at runtime into a half-precision segment
over the input's outlier columns (any column whose magnitude crosses a
threshold) and an int8 segment over everything else. Every call emits a
trace with the outlier set and exact MAC/byte accounting, which is what the
cost harness consumes.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .tensor import (
    QuantizedMatrix,
    absmax_quantize,
    dequantize_product,
    require_2d,
    round_to_half,
)

#: Threshold above which a column is routed to the half-precision path.
DEFAULT_TAU = 6.0


@dataclass(frozen=True)
class OutlierPolicy:
    """Rule limiting how many columns may take the high-precision path.

    ``unlimited`` keeps every detected outlier column; ``capped`` keeps only
    the ``cap`` columns with the largest per-column max magnitude.
    """

    mode: str = "unlimited"
    cap: int = 0

    def __post_init__(self):
        if self.mode not in ("unlimited", "capped"):
            raise ValueError(f"unknown policy mode {self.mode!r}")
        if self.cap < 0:
            raise ValueError("cap must be >= 0")

    @classmethod
    def unlimited(cls) -> "OutlierPolicy":
        return cls(mode="unlimited")

    @classmethod
    def capped(cls, cap: int) -> "OutlierPolicy":
        return cls(mode="capped", cap=cap)


@dataclass
class MatmulTrace:
    """Per-call instrumentation: outlier set, MAC split, bytes touched.

    f16_macs + int8_macs always equals s_rows * h * o. bytes_moved counts
    one byte per int8 operand element, two per f16 operand element, and two
    per output element, once per call.
    """

    layer_id: str
    outlier_columns: frozenset
    s_rows: int
    h: int
    o: int
    f16_macs: int = 0
    int8_macs: int = 0
    bytes_moved: int = 0


class QuantLinearLayer:
    """A linear layer whose weights carry a column-quantized int8 cache.

    The float32 master weights stay authoritative; the cache is rebuilt
    whenever they change so the int8 path never sees stale scales.
    """

    def __init__(
        self,
        weights: np.ndarray,
        bias: Optional[np.ndarray] = None,
        layer_id: str = "linear",
    ):
        self.layer_id = layer_id
        self.bias = None if bias is None else np.asarray(bias, dtype=np.float32)
        self._set(np.asarray(weights, dtype=np.float32))

    def _set(self, weights: np.ndarray) -> None:
        require_2d(weights, "weights")
        if self.bias is not None and self.bias.shape != (weights.shape[1],):
            raise ValueError("bias length must equal the output dimension")
        self.weights = weights
        self.cached_qweights: QuantizedMatrix = absmax_quantize(weights, axis="column")

    def update_weights(self, weights: np.ndarray) -> None:
        self._set(np.asarray(weights, dtype=np.float32))

    @property
    def in_features(self) -> int:
        return self.weights.shape[0]

    @property
    def out_features(self) -> int:
        return self.weights.shape[1]


def extract_outliers(x: np.ndarray, tau: float, signed: bool = False) -> frozenset:
    """Column indices holding at least one entry beyond the threshold.

    The test is strict magnitude |x| > tau by default; ``signed=True``
    switches to a signed max(x) > tau test for comparison runs.
    """
    x = np.asarray(x)
    require_2d(x, "x")
    col_max = np.max(x, axis=0) if signed else np.max(np.abs(x), axis=0)
    return frozenset(np.flatnonzero(col_max > tau).tolist())


def apply_policy(
    outliers: frozenset, policy: OutlierPolicy, x: np.ndarray
) -> frozenset:
    """Restrict an outlier set per policy, keeping the strongest columns first."""
    if policy.mode == "unlimited" or len(outliers) <= policy.cap:
        return frozenset(outliers)
    if policy.cap == 0:
        return frozenset()
    x = np.asarray(x)
    cols = sorted(outliers)
    strength = np.max(np.abs(x[:, cols]), axis=0)
    # strongest first, ties resolved toward the lower column index
    order = sorted(range(len(cols)), key=lambda i: (-strength[i], cols[i]))
    return frozenset(cols[i] for i in order[: policy.cap])


def _int_matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Exact int8 x int8 product with 32-bit accumulation semantics.

    Partial sums are bounded by h * 127^2; while that stays below 2^24 a
    float32 BLAS product is exact integer arithmetic and much faster than
    numpy's integer matmul, so route through it when safe. The returned
    array holds exact integer values either way.
    """
    h = a.shape[1]
    if h * 127 * 127 < 2**24:
        return np.matmul(a.astype(np.float32), b.astype(np.float32))
    return np.matmul(a.astype(np.int32), b.astype(np.int32))


def mixed_matmul(
    x: np.ndarray,
    layer: QuantLinearLayer,
    tau: float = DEFAULT_TAU,
    policy: Optional[OutlierPolicy] = None,
) -> tuple[np.ndarray, MatmulTrace]:
    """Mixed-precision product: f16-emulated outlier segment + int8 remainder.

    Outlier columns of x (and the matching weight rows) go through the
    binary16 grid and a full-precision multiply; the remaining columns are
    absmax-quantized row-wise against the layer's cached column-quantized
    weights, multiplied in integers and dequantized. Segments and bias sum
    into the output. Returns (output, trace).
    """
    x = np.asarray(x, dtype=np.float32)
    require_2d(x, "x")
    if policy is None:
        policy = OutlierPolicy.unlimited()
    s, h = x.shape
    if h != layer.in_features:
        raise ValueError(
            f"x has {h} columns but layer expects {layer.in_features}"
        )
    o = layer.out_features

    outliers = apply_policy(extract_outliers(x, tau), policy, x)
    out_idx = np.array(sorted(outliers), dtype=np.intp)
    non_idx = np.setdiff1d(np.arange(h), out_idx)

    result = np.zeros((s, o), dtype=np.float32)
    bytes_moved = 2 * s * o  # output, two bytes per element

    if out_idx.size:
        x_out = round_to_half(x[:, out_idx])
        w_out = round_to_half(layer.weights[out_idx, :])
        result += round_to_half(np.matmul(x_out, w_out))
        bytes_moved += 2 * (x_out.size + w_out.size)

    if non_idx.size:
        qx = absmax_quantize(x[:, non_idx], axis="row")
        qw_values = layer.cached_qweights.values[non_idx, :]
        p = _int_matmul(qx.values, qw_values)
        result += dequantize_product(p, qx.scales, layer.cached_qweights.scales)
        bytes_moved += qx.values.size + qw_values.size

    if layer.bias is not None:
        result += layer.bias

    n_out = int(out_idx.size)
    trace = MatmulTrace(
        layer_id=layer.layer_id,
        outlier_columns=outliers,
        s_rows=s,
        h=h,
        o=o,
        f16_macs=s * n_out * o,
        int8_macs=s * (h - n_out) * o,
        bytes_moved=bytes_moved,
    )
    return result, trace


def batch_flatten(x: np.ndarray) -> np.ndarray:
    """Stack a B x s x h batch into (B*s) x h, image b in rows [b*s, (b+1)*s)."""
    x = np.asarray(x)
    if x.ndim != 3:
        raise ValueError(f"expected rank-3 input, got shape {x.shape}")
    b, s, h = x.shape
    return x.reshape(b * s, h)


def batch_unflatten(x: np.ndarray, batch: int) -> np.ndarray:
    """Inverse of batch_flatten."""
    x = np.asarray(x)
    require_2d(x, "x")
    rows, h = x.shape
    if batch < 1 or rows % batch:
        raise ValueError(f"cannot split {rows} rows into {batch} equal blocks")
    return x.reshape(batch, rows // batch, h)
