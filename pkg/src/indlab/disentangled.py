"""Two-layer attention-only transformer with a concatenated residual stream.

    U = [X | softmax(X W1 X^T) X]
    V = [U | softmax(U W2 U^T) U]
    Y = V W3,   loss = ||y - Y[last]||^2

Only the query row of the output enters the loss. All passes are batched
over a leading axis; a single sequence is a batch of one.
"""

from __future__ import annotations

import csv
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .core_math import MaskMode, masked_softmax, softmax_backward
from .icl_data import SequenceBatch

MAGIC = b"INDLWGTS"
FORMAT_VERSION = 1


@dataclass
class WeightSet:
    w1: np.ndarray  # 2D x 2D
    w2: np.ndarray  # 4D x 4D
    w3: np.ndarray  # 8D x D

    def __post_init__(self):
        self.w1 = np.asarray(self.w1, dtype=np.float64)
        self.w2 = np.asarray(self.w2, dtype=np.float64)
        self.w3 = np.asarray(self.w3, dtype=np.float64)
        d = self.w3.shape[1]
        if self.w1.shape != (2 * d, 2 * d) or self.w2.shape != (4 * d, 4 * d) or self.w3.shape != (8 * d, d):
            raise ValueError(
                f"inconsistent weight shapes {self.w1.shape}, {self.w2.shape}, {self.w3.shape}"
            )

    @property
    def dim(self) -> int:
        return self.w3.shape[1]

    @classmethod
    def zeros(cls, d: int) -> "WeightSet":
        return cls(np.zeros((2 * d, 2 * d)), np.zeros((4 * d, 4 * d)), np.zeros((8 * d, d)))

    def matrices(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        return self.w1, self.w2, self.w3

    def copy(self) -> "WeightSet":
        return WeightSet(self.w1.copy(), self.w2.copy(), self.w3.copy())

    def is_finite(self) -> bool:
        return all(np.all(np.isfinite(w)) for w in self.matrices())

    def axpy(self, scale: float, other: "WeightSet") -> "WeightSet":
        """self + scale * other, as a new WeightSet."""
        return WeightSet(self.w1 + scale * other.w1, self.w2 + scale * other.w2, self.w3 + scale * other.w3)


# Gradients share the layout of the weights they differentiate.
Gradients = WeightSet


@dataclass
class ForwardCache:
    x: np.ndarray
    s1: np.ndarray
    t1: np.ndarray
    u: np.ndarray
    s2: np.ndarray
    t2: np.ndarray
    v: np.ndarray
    y_hat: np.ndarray
    weights: WeightSet
    mode: MaskMode


def _rmul(a: np.ndarray, m: np.ndarray) -> np.ndarray:
    """(B, L, k) @ (k, n) as one flat GEMM."""
    b, l, k = a.shape
    return (a.reshape(b * l, k) @ m).reshape(b, l, m.shape[1])


def forward(x: np.ndarray, w: WeightSet, mode: MaskMode | str = MaskMode.EXCLUSIVE) -> ForwardCache:
    """Run the model on ``x`` of shape (L, 2D) or (B, L, 2D)."""
    mode = MaskMode.parse(mode)
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 2:
        x = x[None]
    if x.ndim != 3 or x.shape[2] != 2 * w.dim:
        raise ValueError(f"input shape {x.shape} does not match weight dimension D={w.dim}")
    s1 = _rmul(x, w.w1) @ np.swapaxes(x, 1, 2)
    t1 = masked_softmax(s1, mode)
    u = np.concatenate([x, t1 @ x], axis=2)
    s2 = _rmul(u, w.w2) @ np.swapaxes(u, 1, 2)
    t2 = masked_softmax(s2, mode)
    v = np.concatenate([u, t2 @ u], axis=2)
    y_hat = v[:, -1, :] @ w.w3
    return ForwardCache(x, s1, t1, u, s2, t2, v, y_hat, w, mode)


def loss(cache: ForwardCache, y: np.ndarray) -> np.ndarray | float:
    """Squared error of the query-row prediction, one value per sequence."""
    y = np.asarray(y, dtype=np.float64)
    per_seq = np.sum((y.reshape(cache.y_hat.shape) - cache.y_hat) ** 2, axis=1)
    return float(per_seq[0]) if per_seq.shape[0] == 1 else per_seq


def backward(cache: ForwardCache, y: np.ndarray) -> Gradients:
    """Gradient of the batch-summed loss with respect to W1, W2, W3."""
    w = cache.weights
    d = w.dim
    y = np.asarray(y, dtype=np.float64).reshape(cache.y_hat.shape)
    x, u, v = cache.x, cache.u, cache.v
    dz = 2.0 * (cache.y_hat - y)  # (B, D)
    v_last = v[:, -1, :]
    g3 = v_last.T @ dz

    # only the last row of V carries gradient
    dv_last = dz @ w.w3.T  # (B, 8D)
    du = np.zeros_like(u)
    du[:, -1, :] = dv_last[:, : 4 * d]
    dretr2 = dv_last[:, 4 * d :]  # gradient of (T2 U)[last]
    du += cache.t2[:, -1, :, None] * dretr2[:, None, :]
    dt2_last = (u @ dretr2[:, :, None])[:, :, 0]
    ds2_last = softmax_backward(cache.t2[:, -1, :], dt2_last)  # (B, L)
    # s2[last, j] = u_last W2 u_j^T
    u_last = u[:, -1, :]
    uj_w = (ds2_last[:, None, :] @ u)[:, 0, :]  # sum_j ds2_j u_j
    g2 = u_last.T @ uj_w
    du[:, -1, :] += uj_w @ w.w2.T
    du += ds2_last[:, :, None] * (u_last @ w.w2)[:, None, :]

    # U = [X | T1 X]; only the retrieved half feeds back into W1
    dretr1 = du[:, :, 2 * d :]
    dt1 = dretr1 @ np.swapaxes(x, 1, 2)
    ds1 = softmax_backward(cache.t1, dt1)
    b, l, k = x.shape
    g1 = x.reshape(b * l, k).T @ (ds1 @ x).reshape(b * l, k)
    return Gradients(g1, g2, g3)


def batch_grad(batch: SequenceBatch, w: WeightSet, mode: MaskMode | str = MaskMode.EXCLUSIVE) -> tuple[float, Gradients]:
    """Mean loss and mean gradient over the sequences of ``batch``."""
    if batch.batch == 0:
        raise ValueError("empty batch")
    cache = forward(batch.inputs, w, mode)
    per_seq = np.sum((batch.targets - cache.y_hat) ** 2, axis=1)
    g = backward(cache, batch.targets)
    inv = 1.0 / batch.batch
    return float(per_seq.mean()), Gradients(g.w1 * inv, g.w2 * inv, g.w3 * inv)


def batch_loss(batch: SequenceBatch, w: WeightSet, mode: MaskMode | str = MaskMode.EXCLUSIVE) -> np.ndarray:
    cache = forward(batch.inputs, w, mode)
    return np.sum((batch.targets - cache.y_hat) ** 2, axis=1)


def save_weights(w: WeightSet, path: str | Path) -> Path:
    """Binary layout: magic, u32 version, u32 D, then W1, W2, W3 row-major f64."""
    path = Path(path)
    with path.open("wb") as fh:
        fh.write(MAGIC + struct.pack("<2I", FORMAT_VERSION, w.dim))
        for m in w.matrices():
            fh.write(np.ascontiguousarray(m, dtype="<f8").tobytes())
    return path


def load_weights(path: str | Path) -> WeightSet:
    raw = Path(path).read_bytes()
    if raw[:8] != MAGIC:
        raise ValueError(f"{path}: not a weight file")
    version, d = struct.unpack_from("<2I", raw, 8)
    if version != FORMAT_VERSION:
        raise ValueError(f"{path}: unsupported version {version}")
    flat = np.frombuffer(raw, dtype="<f8", offset=16)
    sizes = [(2 * d, 2 * d), (4 * d, 4 * d), (8 * d, d)]
    out, pos = [], 0
    for r, c in sizes:
        out.append(flat[pos : pos + r * c].reshape(r, c).copy())
        pos += r * c
    if pos != flat.size:
        raise ValueError(f"{path}: payload size mismatch")
    return WeightSet(*out)


def export_weights_csv(w: WeightSet, directory: str | Path) -> list[Path]:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    paths = []
    for name, m in zip(("w1", "w2", "w3"), w.matrices()):
        p = directory / f"{name}.csv"
        with p.open("w", newline="") as fh:
            writer = csv.writer(fh)
            for row in m:
                writer.writerow([repr(float(v)) for v in row])
        paths.append(p)
    return paths
