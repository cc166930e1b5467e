"""Low-level numeric primitives: absmax int8 quantization, binary16 grid
rounding, a full-precision matmul oracle, and per-column top-k selection.

All tensors are dense numpy arrays. Full precision means float32 storage;
half precision is emulated by snapping float32 values onto the binary16
grid at defined points, which keeps results deterministic on machines
without native half support.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Literal

import numpy as np

Axis = Literal["row", "column"]

#: Largest finite binary16 value; grid rounding saturates here.
F16_MAX = 65504.0


def as_tensor(data, dtype=np.float32) -> np.ndarray:
    """Convert to a dense array of the given float dtype, rejecting NaN/Inf."""
    arr = np.asarray(data, dtype=dtype)
    if not np.all(np.isfinite(arr)):
        raise ValueError("tensor contains non-finite values")
    return arr


def require_2d(x: np.ndarray, name: str = "input") -> None:
    if x.ndim != 2:
        raise ValueError(f"{name} must be 2-dimensional, got shape {x.shape}")


def round_half_away(x: np.ndarray) -> np.ndarray:
    """Round to nearest integer with ties away from zero (symmetric in sign)."""
    return np.copysign(np.floor(np.abs(x) + 0.5), x)


@dataclass(frozen=True)
class QuantizedMatrix:
    """int8 values plus one positive float32 scale per quantized vector.

    ``axis`` records whether vectors run along rows or columns. Every value
    lies in [-127, 127]; -128 is never produced so negation is always safe.
    """

    values: np.ndarray
    scales: np.ndarray
    axis: Axis

    def __post_init__(self):
        if self.values.dtype != np.int8:
            raise ValueError("values must be int8")
        if self.values.ndim != 2 or self.scales.ndim != 1:
            raise ValueError("values must be 2D and scales 1D")
        n_vectors = self.values.shape[0] if self.axis == "row" else self.values.shape[1]
        if self.scales.shape[0] != n_vectors:
            raise ValueError(
                f"expected {n_vectors} scales for axis={self.axis!r}, "
                f"got {self.scales.shape[0]}"
            )
        if np.any(self.scales <= 0):
            raise ValueError("scales must be strictly positive")
        if np.any(self.values == -128):
            raise ValueError("quantized values must stay in [-127, 127]")


def absmax_quantize(x: np.ndarray, axis: Axis = "row") -> QuantizedMatrix:
    """Symmetric int8 quantization with scale 127/absmax per vector.

    Each vector v along ``axis`` gets scale s = 127 / max|v| (s = 1 for an
    all-zero vector) and values round_half_away(s * v), so the vector's
    extreme always maps to +/-127 and dequantization is division by s.
    """
    x = np.asarray(x, dtype=np.float32)
    require_2d(x, "x")
    reduce_axis = 1 if axis == "row" else 0
    absmax = np.max(np.abs(x), axis=reduce_axis)
    safe = np.where(absmax > 0, absmax, 1.0).astype(np.float32)
    scales = np.where(absmax > 0, np.float32(127.0) / safe, np.float32(1.0))
    scales = scales.astype(np.float32)
    broadcast = scales[:, None] if axis == "row" else scales[None, :]
    q = round_half_away(x * broadcast)
    q = np.clip(q, -127, 127).astype(np.int8)
    return QuantizedMatrix(values=q, scales=scales, axis=axis)


def dequantize_product(
    p: np.ndarray, row_scales: np.ndarray, col_scales: np.ndarray
) -> np.ndarray:
    """Denormalize an integer product: C[i,j] = P[i,j] / (row_s[i] * col_s[j])."""
    p = np.asarray(p)
    require_2d(p, "p")
    row_scales = np.asarray(row_scales, dtype=np.float32)
    col_scales = np.asarray(col_scales, dtype=np.float32)
    if row_scales.shape != (p.shape[0],) or col_scales.shape != (p.shape[1],):
        raise ValueError("scale vector lengths must match product dimensions")
    if np.any(row_scales <= 0) or np.any(col_scales <= 0):
        raise ValueError("scales must be strictly positive")
    # float32 throughout: products below 2^24 are exact integers in float32,
    # which covers any feature dimension this testbed runs at
    denom = np.outer(row_scales, col_scales)
    return (p.astype(np.float32) / denom).astype(np.float32)


def round_to_half(x) -> np.ndarray:
    """Snap to the nearest binary16-representable value (round-to-nearest-even).

    The result is returned in float32. Magnitudes beyond the largest finite
    binary16 saturate to +/-F16_MAX instead of overflowing to infinity.
    """
    arr = np.asarray(x, dtype=np.float32)
    clipped = np.clip(arr, -F16_MAX, F16_MAX)
    return clipped.astype(np.float16).astype(np.float32)


def matmul_ref(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Full-precision matrix product; the oracle the mixed path is checked against."""
    a = np.asarray(a)
    b = np.asarray(b)
    require_2d(a, "a")
    require_2d(b, "b")
    if a.shape[1] != b.shape[0]:
        raise ValueError(f"inner dimensions disagree: {a.shape} @ {b.shape}")
    return np.matmul(a, b)


def topk_column_indices(x: np.ndarray, k: int) -> np.ndarray:
    """Row indices of the k largest values per column, descending, ties to the
    lower row index."""
    x = np.asarray(x)
    require_2d(x, "x")
    if not 1 <= k <= x.shape[0]:
        raise ValueError(f"k must be in [1, {x.shape[0]}], got {k}")
    # stable argsort of -x keeps the lower row index first among equal values
    return np.argsort(-x, axis=0, kind="stable")[:k, :]


def topk_columns(x: np.ndarray, k: int) -> np.ndarray:
    """The k largest values of every column, sorted descending (k x h output)."""
    idx = topk_column_indices(x, k)
    return np.take_along_axis(np.asarray(x), idx, axis=0)
