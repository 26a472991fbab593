"""In-context learning sequences for the disentangled model.

A sequence holds N item-label pairs followed by a query item::

    row 2i-1 = [a_i | p_i]        (item i with its positional embedding)
    row 2i   = [b_i | p_i M]      (label i with the rotated embedding)
    row 2N+1 = [a_q | 0]          (query, no positional embedding)
    target   = b_q

Rows above are 1-based; arrays are 0-based, so item i sits at index 2(i-1).
Vectors are row vectors and ``M`` swaps the two halves of positional space.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .seeding import rng

MAGIC = b"INDLDATA"
FORMAT_VERSION = 1
_MODE_CODES = {"gaussian": 0, "orthonormal": 1}


def make_rotation(d: int) -> np.ndarray:
    """Block anti-diagonal identity: M[i, j] = 1 iff |i - j| = d/2."""
    if d < 2 or d % 2:
        raise ValueError(f"rotation dimension must be even and >= 2, got {d}")
    h = d // 2
    m = np.zeros((d, d))
    m[:h, h:] = np.eye(h)
    m[h:, :h] = np.eye(h)
    return m


@dataclass
class SequenceBatch:
    """B sequences of N pairs in dimension D.

    ``inputs`` is (B, 2N+1, 2D), ``targets`` is (B, D), ``queries`` holds the
    1-based query index of each sequence.
    """

    n_pairs: int
    dim: int
    inputs: np.ndarray
    targets: np.ndarray
    queries: np.ndarray
    mode: str = "gaussian"

    @property
    def batch(self) -> int:
        return self.inputs.shape[0]

    def __len__(self) -> int:
        return self.batch

    def subset(self, idx) -> "SequenceBatch":
        return SequenceBatch(
            self.n_pairs, self.dim, self.inputs[idx], self.targets[idx], self.queries[idx], self.mode
        )

    @staticmethod
    def concat(batches: list["SequenceBatch"]) -> "SequenceBatch":
        first = batches[0]
        return SequenceBatch(
            first.n_pairs,
            first.dim,
            np.concatenate([b.inputs for b in batches]),
            np.concatenate([b.targets for b in batches]),
            np.concatenate([b.queries for b in batches]),
            first.mode,
        )


def assemble(items: np.ndarray, labels: np.ndarray, positions: np.ndarray, queries: np.ndarray) -> SequenceBatch:
    """Lay out (B, N, D) items/labels/positions into input matrices."""
    b, n, d = items.shape
    m = make_rotation(d)
    x = np.zeros((b, 2 * n + 1, 2 * d))
    x[:, 0 : 2 * n : 2, :d] = items
    x[:, 0 : 2 * n : 2, d:] = positions
    x[:, 1 : 2 * n : 2, :d] = labels
    x[:, 1 : 2 * n : 2, d:] = positions @ m
    rows = np.arange(b)
    x[:, 2 * n, :d] = items[rows, queries - 1]
    targets = labels[rows, queries - 1].copy()
    return SequenceBatch(n, d, x, targets, queries.astype(np.int64))


def gen_gaussian(n: int, d: int, b: int, seed: int, *, query: str = "uniform", scale: float = 1.0) -> SequenceBatch:
    """Items, labels and positions with i.i.d. N(0, scale^2) entries.

    ``query`` is ``"uniform"`` (q ~ unif{1..N}) or ``"last"`` (q = N).
    """
    if n < 1:
        raise ValueError("need at least one item-label pair")
    if d < 2 or d % 2:
        raise ValueError(f"dimension must be even, got {d}")
    if b < 1:
        raise ValueError("batch must be non-empty")
    g = rng(seed, 0)
    items = g.standard_normal((b, n, d)) * scale
    labels = g.standard_normal((b, n, d)) * scale
    positions = g.standard_normal((b, n, d)) * scale
    if query == "uniform":
        queries = g.integers(1, n + 1, size=b)
    elif query == "last":
        queries = np.full(b, n)
    else:
        raise ValueError(f"unknown query mode {query!r}")
    batch = assemble(items, labels, positions, queries)
    batch.mode = "gaussian"
    return batch


def random_orthogonal(g: np.random.Generator, k: int) -> np.ndarray:
    """Haar-distributed orthogonal matrix (QR with sign correction)."""
    q, r = np.linalg.qr(g.standard_normal((k, k)))
    return q * np.sign(np.diag(r))


def random_block_orthogonal(g: np.random.Generator, d: int) -> np.ndarray:
    """diag(E, E) or the half-swapped [[0, E], [E, 0]]; these commute with M."""
    h = d // 2
    e = random_orthogonal(g, h)
    f = np.zeros((d, d))
    if g.random() < 0.5:
        f[:h, :h] = e
        f[h:, h:] = e
    else:
        f[:h, h:] = e
        f[h:, :h] = e
    return f


def gen_orthonormal(n: int, d: int, b: int, seed: int = 0, *, basis: str = "canonical") -> SequenceBatch:
    """Orthonormal items, labels and positions with the query fixed to q = N.

    Canonical basis: a_i = e_{2i-1}, b_i = e_{2i} in token space and p_i = e_i
    in the first half of positional space, so p_i M = e_{i + D/2}. With
    ``basis="random"`` each sequence applies its own Haar rotation to token
    space and a random block-orthogonal rotation to positional space; neither
    changes any inner product the task relies on.
    """
    if n < 1:
        raise ValueError("need at least one item-label pair")
    if d % 2 or d < 2 * n:
        raise ValueError(f"orthonormal inputs need even d >= 2n (n={n}, d={d})")
    if basis not in ("canonical", "random"):
        raise ValueError(f"unknown basis {basis!r}")
    eye = np.eye(d)
    items = np.broadcast_to(eye[0 : 2 * n : 2], (b, n, d)).copy()
    labels = np.broadcast_to(eye[1 : 2 * n : 2], (b, n, d)).copy()
    positions = np.broadcast_to(eye[:n], (b, n, d)).copy()
    if basis == "random":
        g = rng(seed, 1)
        for k in range(b):
            e = random_orthogonal(g, d)
            f = random_block_orthogonal(g, d)
            items[k] = items[k] @ e
            labels[k] = labels[k] @ e
            positions[k] = positions[k] @ f
    batch = assemble(items, labels, positions, np.full(b, n))
    batch.mode = "orthonormal"
    return batch


def write_batch(batch: SequenceBatch, path: str | Path, *, seed: int | None = None) -> Path:
    """Flat little-endian binary file plus a JSON sidecar (``<path>.json``).

    Header: 8-byte magic, then u32 version, N, D, B, mode code. Payload:
    inputs, targets and (as float64) query indices, all row-major.
    """
    path = Path(path)
    header = MAGIC + struct.pack("<5I", FORMAT_VERSION, batch.n_pairs, batch.dim, batch.batch, _MODE_CODES[batch.mode])
    with path.open("wb") as fh:
        fh.write(header)
        fh.write(np.ascontiguousarray(batch.inputs, dtype="<f8").tobytes())
        fh.write(np.ascontiguousarray(batch.targets, dtype="<f8").tobytes())
        fh.write(np.ascontiguousarray(batch.queries, dtype="<f8").tobytes())
    sidecar = {
        "format": "indlab-sequence-batch",
        "version": FORMAT_VERSION,
        "mode": batch.mode,
        "n_pairs": batch.n_pairs,
        "dim": batch.dim,
        "batch": batch.batch,
        "seed": seed,
        "shapes": {
            "inputs": list(batch.inputs.shape),
            "targets": list(batch.targets.shape),
            "queries": list(batch.queries.shape),
        },
        "dtype": "float64-le",
    }
    Path(str(path) + ".json").write_text(json.dumps(sidecar, indent=2, sort_keys=True) + "\n")
    return path


def read_batch(path: str | Path) -> SequenceBatch:
    raw = Path(path).read_bytes()
    if raw[:8] != MAGIC:
        raise ValueError(f"{path}: not a sequence batch file")
    version, n, d, b, code = struct.unpack_from("<5I", raw, 8)
    if version != FORMAT_VERSION:
        raise ValueError(f"{path}: unsupported version {version}")
    mode = {v: k for k, v in _MODE_CODES.items()}[code]
    payload = np.frombuffer(raw, dtype="<f8", offset=28)
    length = 2 * n + 1
    n_in = b * length * 2 * d
    inputs = payload[:n_in].reshape(b, length, 2 * d)
    targets = payload[n_in : n_in + b * d].reshape(b, d)
    queries = payload[n_in + b * d : n_in + b * d + b].astype(np.int64)
    return SequenceBatch(n, d, inputs.copy(), targets.copy(), queries, mode)
