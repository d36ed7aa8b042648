"""Linear language-ID classifier trained by hinge-loss sub-gradient descent."""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from enum import Enum
from pathlib import Path
from typing import Optional, Tuple

import numpy as np

from .errors import DimensionMismatch, EmptyClass, EmptyDataset, FormatError, NonFiniteEmbedding


class Side(Enum):
    L1 = 1
    L2 = -1


@dataclass(frozen=True)
class LanguageLabel:
    side: Side
    display_name: str = ""


@dataclass(frozen=True)
class Prediction:
    label: LanguageLabel
    raw_score: float
    boundary: bool = False


@dataclass
class ClassifierConfig:
    regularization: float = 1e-3
    epochs: int = 200
    learning_rate: float = 0.1
    batch_size: int = 256
    seed: int = 0


@dataclass(frozen=True)
class LinearClassifier:
    direction: np.ndarray
    bias: float
    train_accuracy: float
    seed: int

    @property
    def dim(self) -> int:
        return self.direction.shape[0]

    def decision(self, X) -> np.ndarray:
        return np.asarray(X, dtype=np.float64) @ self.direction + self.bias

    def to_dict(self) -> dict:
        return {
            "dim": int(self.dim),
            "direction": [float(x) for x in self.direction],
            "bias": float(self.bias),
            "train_accuracy": float(self.train_accuracy),
            "seed": int(self.seed),
        }

    @classmethod
    def from_dict(cls, obj: dict) -> "LinearClassifier":
        try:
            direction = np.asarray(obj["direction"], dtype=np.float64)
            if direction.ndim != 1 or direction.shape[0] != int(obj["dim"]):
                raise FormatError("direction length does not match dim")
            return cls(direction, float(obj["bias"]), float(obj["train_accuracy"]), int(obj["seed"]))
        except (KeyError, TypeError, ValueError) as exc:
            if isinstance(exc, FormatError):
                raise
            raise FormatError(f"bad classifier record: {exc}") from exc

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict()))

    @classmethod
    def load(cls, path) -> "LinearClassifier":
        try:
            obj = json.loads(Path(path).read_text())
        except json.JSONDecodeError as exc:
            raise FormatError(str(exc), path=path, line=exc.lineno) from exc
        return cls.from_dict(obj)


@dataclass
class TokenDataset:
    """Token embeddings with +1 (L1) / -1 (L2) labels.

    ``mask_embeddings``, when present, holds for each row the state the encoder
    produces when that token is replaced by the mask token.
    """

    embeddings: np.ndarray
    labels: np.ndarray
    masked_flags: np.ndarray = None
    mask_embeddings: Optional[np.ndarray] = None
    names: Tuple[str, str] = ("L1", "L2")

    def __post_init__(self):
        self.embeddings = np.asarray(self.embeddings, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.embeddings.ndim != 2:
            raise DimensionMismatch("embeddings must be a 2-D matrix")
        if self.labels.shape[0] != self.embeddings.shape[0]:
            raise DimensionMismatch(
                f"{self.embeddings.shape[0]} rows but {self.labels.shape[0]} labels"
            )
        if not np.all(np.isin(self.labels, (1, -1))):
            raise ValueError("labels must be +1 (L1) or -1 (L2)")
        if self.masked_flags is None:
            self.masked_flags = np.zeros(len(self.labels), dtype=bool)
        self.masked_flags = np.asarray(self.masked_flags, dtype=bool)
        if self.mask_embeddings is not None:
            self.mask_embeddings = np.asarray(self.mask_embeddings, dtype=np.float64)
            if self.mask_embeddings.shape != self.embeddings.shape:
                raise DimensionMismatch("mask_embeddings must match embeddings shape")

    def __len__(self) -> int:
        return self.labels.shape[0]

    @property
    def dim(self) -> int:
        return self.embeddings.shape[1]

    def class_counts(self) -> Tuple[int, int]:
        return int(np.sum(self.labels == 1)), int(np.sum(self.labels == -1))

    def subset(self, idx) -> "TokenDataset":
        idx = np.asarray(idx, dtype=np.int64)
        return TokenDataset(
            self.embeddings[idx],
            self.labels[idx],
            self.masked_flags[idx],
            None if self.mask_embeddings is None else self.mask_embeddings[idx],
            self.names,
        )

    def with_embeddings(self, embeddings, mask_embeddings=None) -> "TokenDataset":
        return replace(
            self,
            embeddings=embeddings,
            mask_embeddings=mask_embeddings,
            masked_flags=self.masked_flags.copy(),
        )

    def label_for(self, y: int) -> LanguageLabel:
        return LanguageLabel(Side(int(y)), self.names[0] if y == 1 else self.names[1])


def balanced_sample(pool: TokenDataset, seed: int, max_per_class: Optional[int] = None) -> TokenDataset:
    """Draw ``min(n_L1, n_L2)`` rows per class without replacement.

    ``max_per_class`` optionally caps the per-class count further.
    """
    pos = np.flatnonzero(pool.labels == 1)
    neg = np.flatnonzero(pool.labels == -1)
    if len(pos) == 0 or len(neg) == 0:
        raise EmptyClass(f"class counts {len(pos)} / {len(neg)}")
    n = min(len(pos), len(neg))
    if max_per_class is not None:
        n = min(n, max_per_class)
    rng = np.random.default_rng(seed)
    take = np.concatenate([rng.choice(pos, n, replace=False), rng.choice(neg, n, replace=False)])
    return pool.subset(np.sort(take))


def mask_for_training(tokens: TokenDataset, rate: float, seed: int) -> TokenDataset:
    """Flag ``round(rate * n)`` rows; their embeddings become the mask-token states.

    Without ``mask_embeddings`` only the flags change.
    """
    if not 0.0 <= rate <= 1.0:
        raise ValueError(f"masking rate {rate} outside [0, 1]")
    n = len(tokens)
    k = int(round(rate * n))
    rng = np.random.default_rng(seed)
    chosen = rng.choice(n, k, replace=False) if k else np.zeros(0, dtype=np.int64)
    flags = np.zeros(n, dtype=bool)
    flags[chosen] = True
    emb = tokens.embeddings.copy()
    if tokens.mask_embeddings is not None:
        emb[flags] = tokens.mask_embeddings[flags]
    return replace(tokens, embeddings=emb, masked_flags=flags)


def train_classifier(data: TokenDataset, config: ClassifierConfig = None) -> LinearClassifier:
    """Mini-batch sub-gradient descent on the L2-regularized hinge loss.

    The learning rate decays as ``lr / epoch`` (1-based) and is constant within
    an epoch. Batch order is drawn from ``config.seed``. Data with no signal
    left (e.g. fully erased) yields an all-zero direction.
    """
    config = config or ClassifierConfig()
    n_pos, n_neg = data.class_counts()
    if n_pos < 2 or n_neg < 2:
        raise EmptyClass(f"need at least 2 examples per class, got {n_pos} / {n_neg}")
    X = data.embeddings
    if not np.all(np.isfinite(X)):
        raise NonFiniteEmbedding("embeddings contain NaN or inf")
    y = data.labels.astype(np.float64)
    n, d = X.shape
    w = np.zeros(d)
    b = 0.0
    lam = config.regularization
    rng = np.random.default_rng(config.seed)
    bs = max(1, min(config.batch_size, n))
    for epoch in range(1, config.epochs + 1):
        lr = config.learning_rate / epoch
        order = rng.permutation(n)
        for start in range(0, n, bs):
            idx = order[start:start + bs]
            xb, yb = X[idx], y[idx]
            active = yb * (xb @ w + b) < 1.0
            gw = lam * w
            gb = 0.0
            if np.any(active):
                gw = gw - (yb[active] @ xb[active]) / len(idx)
                gb = -yb[active].sum() / len(idx)
            w = w - lr * gw
            b = b - lr * gb
    clf = LinearClassifier(w, float(b), 0.0, config.seed)
    return replace(clf, train_accuracy=accuracy(clf, data))


def predict_side(c: LinearClassifier, h, names: Tuple[str, str] = ("L1", "L2")) -> Prediction:
    """L1 iff ``w.h + b > 0``; an exact zero reports L2 with ``boundary`` set."""
    h = np.asarray(h, dtype=np.float64).ravel()
    if h.shape[0] != c.dim:
        raise DimensionMismatch(f"classifier dim {c.dim}, vector dim {h.shape[0]}")
    score = float(h @ c.direction + c.bias)
    if score > 0:
        return Prediction(LanguageLabel(Side.L1, names[0]), score)
    return Prediction(LanguageLabel(Side.L2, names[1]), score, boundary=score == 0.0)


def accuracy(c: LinearClassifier, data: TokenDataset) -> float:
    if len(data) == 0:
        raise EmptyDataset("cannot score an empty dataset")
    if data.dim != c.dim:
        raise DimensionMismatch(f"classifier dim {c.dim}, data dim {data.dim}")
    pred = np.where(c.decision(data.embeddings) > 0, 1, -1)
    return float(np.mean(pred == data.labels))
