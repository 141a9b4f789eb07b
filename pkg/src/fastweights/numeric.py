"""Small dense linear algebra on numpy arrays with a fixed summation order.

Matrices are row-major ``ndarray``s of dtype float32 ("single") or float64
("double"). Every reduction here accumulates in ascending index order, so
results are bit-identical to a naive scalar loop. Leading batch dimensions
are allowed everywhere and are broadcast.
"""

from __future__ import annotations

import numpy as np
from scipy.special import expit

from .errors import DimensionError

PRECISIONS = {"single": np.float32, "double": np.float64}


def dtype_of(precision: str) -> type:
    try:
        return PRECISIONS[precision]
    except KeyError:
        raise ValueError(f"unknown precision {precision!r}") from None


def precision_of(a: np.ndarray) -> str:
    if a.dtype == np.float32:
        return "single"
    if a.dtype == np.float64:
        return "double"
    raise DimensionError(f"unsupported dtype {a.dtype}")


def _same_precision(a: np.ndarray, b: np.ndarray) -> None:
    if a.dtype != b.dtype:
        raise DimensionError(f"precision mismatch: {a.dtype} vs {b.dtype}")


def matvec(A: np.ndarray, x: np.ndarray) -> np.ndarray:
    """``y[..., i] = sum_j A[..., i, j] * x[..., j]``, summed for j ascending."""
    A = np.asarray(A)
    x = np.asarray(x)
    if A.ndim < 2 or x.ndim < 1 or A.shape[-1] != x.shape[-1]:
        raise DimensionError(f"matvec shapes {A.shape} and {x.shape}")
    _same_precision(A, x)
    y = A[..., :, 0] * x[..., None, 0]
    for j in range(1, A.shape[-1]):
        y = y + A[..., :, j] * x[..., None, j]
    return y


def dot(u: np.ndarray, w: np.ndarray) -> np.ndarray:
    """Inner product over the last axis, ascending order."""
    if u.shape[-1] != w.shape[-1]:
        raise DimensionError(f"dot shapes {u.shape} and {w.shape}")
    _same_precision(u, w)
    s = u[..., 0] * w[..., 0]
    for j in range(1, u.shape[-1]):
        s = s + u[..., j] * w[..., j]
    return s


def outer(u: np.ndarray, w: np.ndarray) -> np.ndarray:
    return u[..., :, None] * w[..., None, :]


def sigmoid(x: np.ndarray) -> np.ndarray:
    return expit(x)


def logit(p):
    """Inverse sigmoid."""
    return np.log(p) - np.log1p(-p)


def relu(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0)


def elu1(x: np.ndarray) -> np.ndarray:
    """ELU(x) + 1: ``x + 1`` for x >= 0, ``exp(x)`` otherwise."""
    x = np.asarray(x)
    return np.where(x >= 0, x + 1, np.exp(np.minimum(x, 0)))


_UNARY = {"sigmoid": sigmoid, "relu": relu, "elu1": elu1, "exp": np.exp}
_BINARY = {"mul": np.multiply, "add": np.add, "sub": np.subtract}


def elementwise(op: str, A: np.ndarray, B: np.ndarray | None = None) -> np.ndarray:
    A = np.asarray(A)
    if op in _UNARY:
        if B is not None:
            raise DimensionError(f"{op} is unary")
        return _UNARY[op](A)
    if op not in _BINARY:
        raise ValueError(f"unknown op {op!r}")
    if B is None:
        raise DimensionError(f"{op} needs two operands")
    B = np.asarray(B)
    if A.shape != B.shape:
        raise DimensionError(f"shape mismatch {A.shape} vs {B.shape}")
    _same_precision(A, B)
    return _BINARY[op](A, B)


def softmax(x: np.ndarray) -> np.ndarray:
    """Softmax over the last axis with max-subtraction."""
    x = np.asarray(x)
    e = np.exp(x - x.max(axis=-1, keepdims=True))
    total = e[..., 0]
    for j in range(1, e.shape[-1]):
        total = total + e[..., j]
    return e / total[..., None]
