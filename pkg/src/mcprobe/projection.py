"""Orthonormal direction bases and nullspace/rowspace splitting.

Everything here works on float64 arrays; float32 input is widened.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import List, Sequence

import numpy as np

from .errors import AllDirectionsDegenerate, DimensionMismatch

DROP_RTOL = 1e-10
_NORM_FLOOR = 1e-12


@dataclass(frozen=True)
class DirectionBasis:
    """Ordered orthonormal directions, stored as a ``(k, dim)`` array."""

    directions: np.ndarray
    dim: int

    def __post_init__(self):
        d = np.asarray(self.directions, dtype=np.float64).reshape(-1, self.dim)
        d.setflags(write=False)
        object.__setattr__(self, "directions", d)

    @classmethod
    def empty(cls, dim: int) -> "DirectionBasis":
        return cls(np.zeros((0, dim)), dim)

    def __len__(self) -> int:
        return self.directions.shape[0]

    def extend(self, raw_direction) -> "DirectionBasis":
        """Append one direction after orthogonalizing it against this basis.

        A direction that collapses is dropped and the basis is returned unchanged.
        """
        v = _as_vector(raw_direction, self.dim)
        residual = _residual(v, self.directions)
        if np.linalg.norm(residual) < DROP_RTOL * np.linalg.norm(v) or not np.any(v):
            return self
        residual /= np.linalg.norm(residual)
        return DirectionBasis(np.vstack([self.directions, residual]), self.dim)

    def projector(self) -> np.ndarray:
        """Dense nullspace projector ``I - W^T W``."""
        return np.eye(self.dim) - self.directions.T @ self.directions


@dataclass(frozen=True)
class DirectionalComponent:
    component: np.ndarray
    side_sign: int
    raw_score: float


@dataclass(frozen=True)
class ProjectionSplit:
    null_component: np.ndarray
    rowspace_component: np.ndarray
    per_direction: List[DirectionalComponent] = field(default_factory=list)


def _as_vector(v, dim=None) -> np.ndarray:
    arr = np.asarray(v, dtype=np.float64).ravel()
    if dim is not None and arr.shape[0] != dim:
        raise DimensionMismatch(f"expected dimension {dim}, got {arr.shape[0]}")
    return arr


def _residual(v: np.ndarray, directions: np.ndarray) -> np.ndarray:
    # modified Gram-Schmidt: subtract one direction at a time
    r = v.copy()
    for q in directions:
        r -= (q @ r) * q
    return r


def orthonormalize(raw_directions: Sequence) -> DirectionBasis:
    """Modified Gram-Schmidt over ``raw_directions`` in order.

    Vectors whose residual falls below ``1e-10`` of their original norm are
    dropped; the survivors keep their input order.
    """
    vectors = [np.asarray(v, dtype=np.float64).ravel() for v in raw_directions]
    if not vectors:
        raise AllDirectionsDegenerate("no directions given")
    dim = vectors[0].shape[0]
    for v in vectors:
        if v.shape[0] != dim:
            raise DimensionMismatch(f"directions of dimension {dim} and {v.shape[0]}")
    kept: list[np.ndarray] = []
    for v in vectors:
        norm = np.linalg.norm(v)
        if norm <= _NORM_FLOOR:
            continue
        r = _residual(v, kept)
        rnorm = np.linalg.norm(r)
        if rnorm < DROP_RTOL * norm:
            continue
        kept.append(r / rnorm)
    if not kept:
        raise AllDirectionsDegenerate("every direction was degenerate or dependent")
    return DirectionBasis(np.array(kept), dim)


def _sign(score: float) -> int:
    if score > 0:
        return 1
    if score < 0:
        return -1
    return 0


def split(h, basis: DirectionBasis) -> ProjectionSplit:
    """Split ``h`` into its nullspace part and one component per direction."""
    h = _as_vector(h, basis.dim)
    scores = basis.directions @ h
    components = scores[:, None] * basis.directions
    rowspace = components.sum(axis=0) if len(basis) else np.zeros_like(h)
    per_direction = [
        DirectionalComponent(c, _sign(float(s)), float(s)) for c, s in zip(components, scores)
    ]
    return ProjectionSplit(h - rowspace, rowspace, per_direction)


def project_nullspace_batch(matrix, basis: DirectionBasis) -> np.ndarray:
    """Row-wise nullspace projection; output has the input's shape."""
    X = np.asarray(matrix, dtype=np.float64)
    if X.ndim != 2 or X.shape[1] != basis.dim:
        raise DimensionMismatch(f"matrix shape {X.shape} does not match basis dim {basis.dim}")
    if not len(basis):
        return X.copy()
    W = basis.directions
    return X - (X @ W.T) @ W
