"""Counterfactual embeddings: keep the nullspace part, re-add the rowspace
components with a chosen sign and magnitude.

    h' = h_null + alpha * sum_i S_i * h_i

where ``h_i`` is the projection of ``h`` on direction ``i`` and ``S_i`` is the
sign of ``w_i . h``. Positive alpha lands on the L1 side of every direction,
negative alpha on the L2 side.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, Optional

import numpy as np

from .classifier import Side
from .errors import DimensionMismatch, IndexOutOfRange
from .projection import DirectionBasis, ProjectionSplit, _as_vector, split

DEFAULT_ALPHA = 3.0
DEFAULT_ALPHA_GRID = (1.0, 2.0, 3.0, 4.0, 6.0, 8.0)


@dataclass(frozen=True)
class PushSpec:
    alpha: float = DEFAULT_ALPHA
    target_side: Optional[Side] = None

    def __post_init__(self):
        if not np.isfinite(self.alpha):
            raise ValueError(f"alpha must be finite, got {self.alpha}")
        if self.target_side is not None and self.alpha != 0:
            if (self.alpha > 0) != (self.target_side is Side.L1):
                raise ValueError(f"alpha={self.alpha} disagrees with target side {self.target_side.name}")

    @classmethod
    def toward(cls, side: Side, magnitude: float = DEFAULT_ALPHA) -> "PushSpec":
        alpha = abs(magnitude) if side is Side.L1 else -abs(magnitude)
        return cls(alpha, side)


@dataclass(frozen=True)
class AlteredEmbedding:
    original: np.ndarray
    split: ProjectionSplit
    altered: np.ndarray
    push: PushSpec


def alter(h, basis: DirectionBasis, push: PushSpec) -> AlteredEmbedding:
    h = _as_vector(h, basis.dim)
    parts = split(h, basis)
    signed = np.zeros_like(h)
    for comp in parts.per_direction:
        signed += comp.side_sign * comp.component
    return AlteredEmbedding(h, parts, parts.null_component + push.alpha * signed, push)


def alter_matrix(states, basis: DirectionBasis, alpha: float) -> np.ndarray:
    """Vectorized ``alter`` over every row of ``states``."""
    X = np.asarray(states, dtype=np.float64)
    if X.ndim != 2 or X.shape[1] != basis.dim:
        raise DimensionMismatch(f"states shape {X.shape} does not match basis dim {basis.dim}")
    if not len(basis):
        return X.copy()
    W = basis.directions
    scores = X @ W.T
    # |score| * w == S * (score * w); zero scores contribute nothing
    return X - scores @ W + alpha * np.abs(scores) @ W


def alter_batch(states, positions: Iterable[int], basis: DirectionBasis, push: PushSpec) -> np.ndarray:
    """Replace the listed rows by their altered versions; other rows are copied as is."""
    X = np.array(states, dtype=np.float64, copy=True)
    if X.ndim != 2 or X.shape[1] != basis.dim:
        raise DimensionMismatch(f"states shape {X.shape} does not match basis dim {basis.dim}")
    idx = np.asarray(sorted(set(int(p) for p in positions)), dtype=np.int64)
    if idx.size == 0:
        return X
    if idx.min() < 0 or idx.max() >= X.shape[0]:
        raise IndexOutOfRange(f"positions {idx.tolist()} outside 0..{X.shape[0] - 1}")
    X[idx] = alter_matrix(X[idx], basis, push.alpha)
    return X
