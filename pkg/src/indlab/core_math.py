"""Dense kernels shared by the models: checked matmul and causal masked softmax.

Everything is float64. Arrays may carry leading batch dimensions; the last two
axes are the matrix axes.
"""

from __future__ import annotations

import enum

import numpy as np


class MaskMode(str, enum.Enum):
    """Causal masking variant for attention scores.

    ``INCLUSIVE`` lets position i attend to every j <= i (standard
    autoregressive masking). ``EXCLUSIVE`` forbids self-attention, j < i,
    which leaves row 0 with no valid column.
    """

    INCLUSIVE = "inclusive"
    EXCLUSIVE = "exclusive"

    @classmethod
    def parse(cls, value: "MaskMode | str") -> "MaskMode":
        if isinstance(value, cls):
            return value
        return cls(str(value).lower())


def matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.ndim < 2 or b.ndim < 2:
        raise ValueError("matmul expects at least 2-d operands")
    if a.shape[-1] != b.shape[-2]:
        raise ValueError(f"dimension mismatch: {a.shape} x {b.shape}")
    return a @ b


def causal_mask(length: int, mode: MaskMode | str) -> np.ndarray:
    """Boolean L x L matrix, True where position i may attend to j."""
    mode = MaskMode.parse(mode)
    k = 0 if mode is MaskMode.INCLUSIVE else -1
    return np.tril(np.ones((length, length), dtype=bool), k=k)


def masked_softmax(scores: np.ndarray, mode: MaskMode | str) -> np.ndarray:
    """Row-wise softmax over the causally valid columns.

    Masked entries are exactly zero. A row without any valid column (row 0
    under ``EXCLUSIVE``) is returned as all zeros, so the attended value for
    that position is the zero vector.
    """
    scores = np.asarray(scores, dtype=np.float64)
    if scores.ndim < 2 or scores.shape[-1] != scores.shape[-2]:
        raise ValueError(f"scores must be square, got shape {scores.shape}")
    if not np.all(np.isfinite(scores)):
        raise ValueError("scores must be finite")
    mask = causal_mask(scores.shape[-1], mode)
    masked = np.where(mask, scores, -np.inf)
    row_max = masked.max(axis=-1, keepdims=True)
    # empty rows have max -inf; any finite shift works since they end up zero
    row_max = np.where(np.isfinite(row_max), row_max, 0.0)
    e = np.where(mask, np.exp(masked - row_max), 0.0)
    total = e.sum(axis=-1, keepdims=True)
    return np.divide(e, total, out=np.zeros_like(e), where=total > 0)


def softmax_backward(weights: np.ndarray, grad_weights: np.ndarray) -> np.ndarray:
    """Vector-Jacobian product of a row softmax.

    Masked and empty-row entries have zero weight, so they receive zero
    gradient automatically.
    """
    inner = np.sum(grad_weights * weights, axis=-1, keepdims=True)
    return weights * (grad_weights - inner)
