"""Dense float64 tensors and the numeric kernels the layers are built on.

Tensors are plain ``numpy.ndarray`` values of dtype float64 in row-major
NCHW layout. The helpers here add the validation the rest of the engine
relies on (shape checks, finiteness) and the im2col/col2im lowering used by
convolution and pooling.
"""
from __future__ import annotations

from typing import Sequence

import numpy as np

from .errors import ShapeError, ValidationError

DTYPE = np.float64


def tensor_new(shape: Sequence[int], fill: float | None = None, data=None) -> np.ndarray:
    """Create a float64 tensor from a scalar fill or a flat row-major data list."""
    shape = tuple(int(d) for d in shape)
    if not 1 <= len(shape) <= 4:
        raise ShapeError(f"tensor rank must be 1-4, got {len(shape)}")
    if any(d < 1 for d in shape):
        raise ShapeError(f"every extent must be >= 1, got {shape}")
    if (fill is None) == (data is None):
        raise ValueError("give exactly one of fill or data")
    count = int(np.prod(shape))
    if data is None:
        return np.full(shape, fill, dtype=DTYPE)
    flat = np.asarray(data, dtype=DTYPE).ravel()
    if flat.size != count:
        raise ShapeError(f"expected {count} values, got {flat.size}")
    return flat.reshape(shape).copy()


def check_finite(x: np.ndarray, what: str = "tensor") -> np.ndarray:
    if not np.all(np.isfinite(x)):
        raise ValidationError(f"{what} contains NaN or Inf")
    return x


def matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    if a.ndim != 2 or b.ndim != 2:
        raise ShapeError(f"matmul needs 2-D operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul inner dims differ: {a.shape} x {b.shape}")
    return a @ b


_ELEMENTWISE = {
    "add": np.add,
    "sub": np.subtract,
    "mul": np.multiply,
}


def elementwise(op: str, a: np.ndarray, b) -> np.ndarray:
    """Pointwise ``add``/``sub``/``mul`` of equal-shape tensors, or ``scale`` by a scalar."""
    if op == "scale":
        if np.ndim(b) != 0:
            raise ShapeError("scale takes a scalar operand")
        return a * float(b)
    try:
        fn = _ELEMENTWISE[op]
    except KeyError:
        raise ValueError(f"unknown elementwise op {op!r}") from None
    if a.shape != np.shape(b):
        raise ShapeError(f"shape mismatch {a.shape} vs {np.shape(b)}")
    return fn(a, b)


def conv_out_extent(n: int, k: int, s: int, p: int) -> int:
    """Output extent of a k-wide window sliding with stride s over n inputs padded by p."""
    if n < 1 or k < 1 or s < 1 or p < 0:
        raise ShapeError(f"invalid geometry n={n} k={k} s={s} p={p}")
    if n + 2 * p < k:
        raise ShapeError(f"kernel larger than padded input (n={n}, k={k}, p={p})")
    return (n + 2 * p - k) // s + 1


def im2col(x: np.ndarray, k: int, s: int = 1, p: int = 0, pad_value: float = 0.0) -> np.ndarray:
    """Unroll k x k patches of an NCHW tensor into rows.

    Row ``(b*oh + i)*ow + j`` holds the patch at output position (i, j) of
    sample b, flattened channel-major as ``(c, ki, kj)``.
    """
    if x.ndim != 4:
        raise ShapeError(f"im2col expects [b,c,h,w], got {x.shape}")
    b, c, h, w = x.shape
    oh = conv_out_extent(h, k, s, p)
    ow = conv_out_extent(w, k, s, p)
    if p > 0:
        x = np.pad(x, ((0, 0), (0, 0), (p, p), (p, p)), constant_values=pad_value)
    cols = np.empty((b, c, k, k, oh, ow), dtype=DTYPE)
    for ki in range(k):
        hi = ki + s * oh
        for kj in range(k):
            wj = kj + s * ow
            cols[:, :, ki, kj] = x[:, :, ki:hi:s, kj:wj:s]
    return cols.transpose(0, 4, 5, 1, 2, 3).reshape(b * oh * ow, c * k * k)


def col2im(cols: np.ndarray, x_shape: Sequence[int], k: int, s: int = 1, p: int = 0) -> np.ndarray:
    """Adjoint of :func:`im2col`: scatter-add patch rows back onto an NCHW grid."""
    b, c, h, w = x_shape
    oh = conv_out_extent(h, k, s, p)
    ow = conv_out_extent(w, k, s, p)
    if cols.shape != (b * oh * ow, c * k * k):
        raise ShapeError(f"col2im got {cols.shape}, expected {(b * oh * ow, c * k * k)}")
    cols = cols.reshape(b, oh, ow, c, k, k).transpose(0, 3, 4, 5, 1, 2)
    out = np.zeros((b, c, h + 2 * p, w + 2 * p), dtype=DTYPE)
    for ki in range(k):
        hi = ki + s * oh
        for kj in range(k):
            wj = kj + s * ow
            out[:, :, ki:hi:s, kj:wj:s] += cols[:, :, ki, kj]
    if p > 0:
        out = out[:, :, p:p + h, p:p + w]
    return np.ascontiguousarray(out)
