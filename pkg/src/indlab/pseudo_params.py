"""The 19-dimensional structured weight subspace.

Weights are viewed as grids of D x D blocks. Token blocks carry a multiple of
I; positional blocks carry a combination of I and the half-swap M:

    W1 = [[a1 I, 0], [0, a2 I + a3 M]]

    W2 = [[b1 I,  0,              b2 I,  0             ],
          [0,     b3 I + b4 M,    0,     b5 I + b6 M   ],
          [b7 I,  0,              b8 I,  0             ],
          [0,     b9 I + b10 M,   0,     b11 I + b12 M ]]

    W3 = [g1 I | 0 | g2 I | 0 | g3 I | 0 | g4 I | 0]^T

The beta numbering reads the W2 grid row by row, with the I coefficient
before the M coefficient inside a block. Coefficients are orthogonal
projections under the trace inner product: <I, B>/D and <M, B>/D, which is
exact because I and M are orthogonal and both have squared norm D.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Iterable

import numpy as np

from .disentangled import Gradients, WeightSet
from .icl_data import make_rotation

NAMES: tuple[str, ...] = (
    ("a1", "a2", "a3")
    + tuple(f"b{i}" for i in range(1, 13))
    + ("g1", "g2", "g3", "g4")
)
INDEX = {name: i for i, name in enumerate(NAMES)}

# (matrix, block row, block col, "I" | "M") for each pseudo-parameter
LAYOUT: tuple[tuple[int, int, int, str], ...] = (
    (0, 0, 0, "I"),
    (0, 1, 1, "I"),
    (0, 1, 1, "M"),
    (1, 0, 0, "I"),
    (1, 0, 2, "I"),
    (1, 1, 1, "I"),
    (1, 1, 1, "M"),
    (1, 1, 3, "I"),
    (1, 1, 3, "M"),
    (1, 2, 0, "I"),
    (1, 2, 2, "I"),
    (1, 3, 1, "I"),
    (1, 3, 1, "M"),
    (1, 3, 3, "I"),
    (1, 3, 3, "M"),
    (2, 0, 0, "I"),
    (2, 2, 0, "I"),
    (2, 4, 0, "I"),
    (2, 6, 0, "I"),
)

INDUCTION_HEAD = ("a3", "b2", "g3")


@dataclass
class PseudoParams:
    alpha: np.ndarray = field(default_factory=lambda: np.zeros(3))
    beta: np.ndarray = field(default_factory=lambda: np.zeros(12))
    gamma: np.ndarray = field(default_factory=lambda: np.zeros(4))

    def __post_init__(self):
        self.alpha = np.asarray(self.alpha, dtype=np.float64).reshape(3)
        self.beta = np.asarray(self.beta, dtype=np.float64).reshape(12)
        self.gamma = np.asarray(self.gamma, dtype=np.float64).reshape(4)

    def vector(self) -> np.ndarray:
        return np.concatenate([self.alpha, self.beta, self.gamma])

    @classmethod
    def from_vector(cls, v) -> "PseudoParams":
        v = np.asarray(v, dtype=np.float64)
        if v.shape != (19,):
            raise ValueError(f"expected 19 coefficients, got shape {v.shape}")
        return cls(v[:3], v[3:15], v[15:])

    @classmethod
    def from_named(cls, **values: float) -> "PseudoParams":
        v = np.zeros(19)
        for name, val in values.items():
            v[INDEX[name]] = val
        return cls.from_vector(v)

    def __getitem__(self, name: str) -> float:
        return float(self.vector()[INDEX[name]])

    def as_dict(self) -> dict[str, list[float]]:
        return {"alpha": self.alpha.tolist(), "beta": self.beta.tolist(), "gamma": self.gamma.tolist()}


@dataclass
class StructureReport:
    params: PseudoParams
    residual_fro: np.ndarray  # per matrix (w1, w2, w3)
    total_fro: np.ndarray
    residual: WeightSet

    @property
    def relative_residual(self) -> np.ndarray:
        return np.divide(
            self.residual_fro, self.total_fro, out=np.zeros(3), where=self.total_fro > 0
        )

    @property
    def combined_relative(self) -> float:
        """Residual over total Frobenius norm with all three matrices stacked."""
        tot = float(np.sqrt(np.sum(self.total_fro**2)))
        return float(np.sqrt(np.sum(self.residual_fro**2)) / tot) if tot > 0 else 0.0

    def to_json(self) -> dict:
        rel = self.relative_residual
        out = self.params.as_dict()
        out["residuals"] = dict(zip(("w1", "w2", "w3"), self.residual_fro.tolist()))
        out["relative"] = dict(zip(("w1", "w2", "w3"), rel.tolist()))
        return out


def _check_dim(d: int) -> None:
    if d < 2 or d % 2:
        raise ValueError(f"structured subspace needs even D, got {d}")


def _block(mat: np.ndarray, r: int, c: int, d: int) -> np.ndarray:
    return mat[r * d : (r + 1) * d, c * d : (c + 1) * d]


def coefficients(w: WeightSet) -> np.ndarray:
    d = w.dim
    _check_dim(d)
    m = make_rotation(d)
    mats = w.matrices()
    out = np.empty(19)
    for k, (mi, r, c, kind) in enumerate(LAYOUT):
        blk = _block(mats[mi], r, c, d)
        out[k] = (np.trace(blk) if kind == "I" else np.sum(m * blk)) / d
    return out


def materialize(p: PseudoParams | np.ndarray, d: int) -> WeightSet:
    """Build the structured WeightSet for coefficients ``p``."""
    _check_dim(d)
    v = p.vector() if isinstance(p, PseudoParams) else np.asarray(p, dtype=np.float64)
    eye, m = np.eye(d), make_rotation(d)
    w = WeightSet.zeros(d)
    mats = w.matrices()
    for k, (mi, r, c, kind) in enumerate(LAYOUT):
        if v[k] != 0.0:
            _block(mats[mi], r, c, d)[...] += v[k] * (eye if kind == "I" else m)
    return w


def project(w: WeightSet) -> StructureReport:
    coef = coefficients(w)
    fitted = materialize(coef, w.dim)
    residual = WeightSet(w.w1 - fitted.w1, w.w2 - fitted.w2, w.w3 - fitted.w3)
    res = np.array([np.linalg.norm(r) for r in residual.matrices()])
    tot = np.array([np.linalg.norm(x) for x in w.matrices()])
    return StructureReport(PseudoParams.from_vector(coef), res, tot, residual)


def basis(d: int) -> list[WeightSet]:
    """The 19 structured basis directions (unit coefficient each)."""
    out = []
    for k in range(19):
        v = np.zeros(19)
        v[k] = 1.0
        out.append(materialize(v, d))
    return out


def resolve_indices(active: Iterable[str | int]) -> list[int]:
    idx = []
    for a in active:
        i = INDEX[a] if isinstance(a, str) else int(a)
        if not 0 <= i < 19:
            raise ValueError(f"pseudo-parameter index out of range: {a}")
        idx.append(i)
    return sorted(set(idx))


def ablation_mask(active: Iterable[str | int]) -> Callable[[Gradients], Gradients]:
    """Gradient transform keeping only the ``active`` structured coefficients.

    The gradient is projected onto the structured subspace, every coefficient
    outside ``active`` is zeroed, and the result is materialized back.
    """
    idx = resolve_indices(active)
    if not idx:
        raise ValueError("ablation needs at least one active pseudo-parameter")
    keep = np.zeros(19, dtype=bool)
    keep[idx] = True

    def apply(g: Gradients) -> Gradients:
        coef = np.where(keep, coefficients(g), 0.0)
        return materialize(coef, g.dim)

    apply.active = tuple(NAMES[i] for i in idx)
    return apply
