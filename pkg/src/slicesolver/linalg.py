"""Dense numeric kernels every other module is built on.

Matrices are plain 2-D numpy arrays (row-major, float64 by default, float32
selectable for the benchmark harness). The wrappers here add shape validation,
op counting, and a fixed accumulation order: all products go through BLAS with
the same operand layout every call, so a given input always produces the same
bits on the same platform. Transposed products use strided views; the
transpose is never materialized.
"""

from __future__ import annotations

import numpy as np

from . import counters
from .errors import ShapeError

DenseMatrix = np.ndarray  # 2-D, C-contiguous unless a kernel documents otherwise


def make_rng(seed: int) -> np.random.Generator:
    """Seeded PCG64 generator; identical seed gives a bit-identical stream."""
    return np.random.Generator(np.random.PCG64(seed))


def uniform_init(rng: np.random.Generator, shape: tuple[int, ...], fan_in: int,
                 dtype=np.float64) -> np.ndarray:
    """uniform(-1/sqrt(fan_in), +1/sqrt(fan_in)), the default layer init."""
    bound = 1.0 / np.sqrt(float(fan_in))
    return ((rng.random(shape) * 2.0 - 1.0) * bound).astype(dtype)


def as_matrix(data, dtype=np.float64) -> np.ndarray:
    """Coerce to a 2-D contiguous array of the requested float dtype."""
    a = np.ascontiguousarray(data, dtype=dtype)
    if a.ndim != 2:
        raise ShapeError(f"expected a 2-D matrix, got shape {a.shape}")
    return a


def _check_2d(a: np.ndarray, b: np.ndarray, op: str) -> None:
    if a.ndim != 2 or b.ndim != 2:
        raise ShapeError(f"{op}: operands must be 2-D, got {a.shape} and {b.shape}")


def matmul(a: np.ndarray, b: np.ndarray, tag: str = "matmul") -> np.ndarray:
    """a @ b with inner-dimension validation."""
    _check_2d(a, b, "matmul")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: inner dimensions differ: {a.shape} x {b.shape}")
    counters.record_matmul(a.shape[0], a.shape[1], b.shape[1], tag)
    return a @ b


def matmul_tn(a: np.ndarray, b: np.ndarray, tag: str = "matmul_tn") -> np.ndarray:
    """a.T @ b without materializing the transpose (strided BLAS view)."""
    _check_2d(a, b, "matmul_tn")
    if a.shape[0] != b.shape[0]:
        raise ShapeError(f"matmul_tn: leading dimensions differ: {a.shape} x {b.shape}")
    counters.record_matmul(a.shape[1], a.shape[0], b.shape[1], tag)
    return a.T @ b


def matmul_nt(a: np.ndarray, b: np.ndarray, tag: str = "matmul_nt") -> np.ndarray:
    """a @ b.T without materializing the transpose."""
    _check_2d(a, b, "matmul_nt")
    if a.shape[1] != b.shape[1]:
        raise ShapeError(f"matmul_nt: trailing dimensions differ: {a.shape} x {b.shape}")
    counters.record_matmul(a.shape[0], a.shape[1], b.shape[0], tag)
    return a @ b.T


def matmul_rowstable(a: np.ndarray, b: np.ndarray, tag: str = "matmul") -> np.ndarray:
    """a @ b with a per-row reduction order that does not depend on the number
    of rows in `a`.

    BLAS gemm kernels sum tail rows of a batch in a different order than
    interior rows, so row i of (a @ b) can differ in the last ulp depending on
    how many rows ride along. Per-point decoding promises bit-identical
    results for any query chunking, so it uses this kernel (a plain einsum
    contraction, row-local by construction) instead of gemm.
    """
    _check_2d(a, b, "matmul")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: inner dimensions differ: {a.shape} x {b.shape}")
    counters.record_matmul(a.shape[0], a.shape[1], b.shape[1], tag)
    return np.einsum("ij,jk->ik", a, b)


def softmax_rows(z: np.ndarray, tag: str = "softmax") -> np.ndarray:
    """Row-wise softmax with per-row max subtraction for stability.

    Rejects NaN input; finite input always yields rows that are nonnegative
    and sum to 1 within 1e-12.
    """
    if z.ndim != 2:
        raise ShapeError(f"softmax_rows: expected 2-D input, got {z.shape}")
    if np.isnan(z).any():
        raise ValueError("softmax_rows: NaN in input")
    counters.record_softmax(z.shape[0] * z.shape[1], tag)
    shifted = z - z.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=1, keepdims=True)


GELU_K = float(np.sqrt(2.0 / np.pi))
GELU_A = 0.044715


def gelu(x: np.ndarray) -> np.ndarray:
    """GELU nonlinearity, tanh form."""
    return 0.5 * x * (1.0 + np.tanh(GELU_K * (x + GELU_A * x * x * x)))


def layer_norm_rows(x: np.ndarray, gain: np.ndarray, shift: np.ndarray,
                    eps: float = 1e-6) -> np.ndarray:
    """Per-row normalization to mean 0 / variance 1, then affine gain & shift."""
    if eps <= 0:
        raise ValueError(f"layer_norm_rows: eps must be positive, got {eps}")
    if x.ndim != 2 or gain.shape != (x.shape[1],) or shift.shape != (x.shape[1],):
        raise ShapeError(
            f"layer_norm_rows: x {x.shape} needs gain/shift of shape ({x.shape[1]},), "
            f"got {gain.shape} and {shift.shape}")
    mean = x.mean(axis=1, keepdims=True)
    var = x.var(axis=1, keepdims=True)
    xhat = (x - mean) / np.sqrt(var + eps)
    return xhat * gain + shift
