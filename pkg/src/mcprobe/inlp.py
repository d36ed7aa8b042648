"""Iterative nullspace projection (INLP)."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Optional, Tuple

import numpy as np

from .classifier import (
    ClassifierConfig,
    LinearClassifier,
    TokenDataset,
    accuracy,
    mask_for_training,
    train_classifier,
)
from .errors import DimensionMismatch, FormatError, IterationsExceedDim
from .projection import DirectionBasis, project_nullspace_batch


@dataclass
class InlpConfig:
    iterations: int = 4
    classifier: ClassifierConfig = field(default_factory=ClassifierConfig)
    masking_rate: float = 0.15
    seed: int = 0

    def __post_init__(self):
        if self.iterations < 0:
            raise ValueError("iterations must be >= 0")
        if not 0.0 <= self.masking_rate <= 1.0:
            raise ValueError("masking_rate must lie in [0, 1]")


@dataclass
class InlpResult:
    basis: DirectionBasis
    classifiers: List[LinearClassifier] = field(default_factory=list)
    accuracy_trace: List[float] = field(default_factory=list)
    degenerate: List[bool] = field(default_factory=list)
    names: Tuple[str, str] = ("L1", "L2")

    @classmethod
    def empty(cls, dim: int, names: Tuple[str, str] = ("L1", "L2")) -> "InlpResult":
        return cls(DirectionBasis.empty(dim), names=tuple(names))

    @property
    def dim(self) -> int:
        return self.basis.dim

    @property
    def iterations(self) -> int:
        return len(self.classifiers)

    def truncated(self, m: int) -> "InlpResult":
        """The state after the first ``m`` iterations."""
        kept = m - sum(self.degenerate[:m])
        return InlpResult(
            DirectionBasis(self.basis.directions[:kept], self.dim),
            self.classifiers[:m],
            self.accuracy_trace[:m],
            self.degenerate[:m],
            self.names,
        )

    def to_dict(self) -> dict:
        return {
            "dim": self.dim,
            "directions": self.basis.directions.tolist(),
            "classifiers": [c.to_dict() for c in self.classifiers],
            "accuracy_trace": list(self.accuracy_trace),
            "degenerate": list(self.degenerate),
            "names": list(self.names),
        }

    @classmethod
    def from_dict(cls, obj: dict) -> "InlpResult":
        try:
            dim = int(obj["dim"])
            directions = np.asarray(obj["directions"], dtype=np.float64).reshape(-1, dim)
            classifiers = [LinearClassifier.from_dict(c) for c in obj["classifiers"]]
            trace = [float(a) for a in obj["accuracy_trace"]]
        except (KeyError, TypeError, ValueError) as exc:
            if isinstance(exc, FormatError):
                raise
            raise FormatError(f"bad INLP bundle: {exc}") from exc
        degenerate = [bool(x) for x in obj.get("degenerate", [False] * len(classifiers))]
        if len(trace) != len(classifiers) or len(directions) > len(classifiers):
            raise FormatError("INLP bundle lengths are inconsistent")
        names = tuple(obj.get("names", ("L1", "L2")))
        return cls(DirectionBasis(directions, dim), classifiers, trace, degenerate, names)

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict()))

    @classmethod
    def load(cls, path) -> "InlpResult":
        try:
            obj = json.loads(Path(path).read_text())
        except json.JSONDecodeError as exc:
            raise FormatError(str(exc), path=path, line=exc.lineno) from exc
        return cls.from_dict(obj)


def iteration_seed(seed: int, iteration: int) -> int:
    return int(np.random.SeedSequence([seed, iteration]).generate_state(1)[0])


def _project(data: TokenDataset, basis: DirectionBasis) -> TokenDataset:
    masked = None
    if data.mask_embeddings is not None:
        masked = project_nullspace_batch(data.mask_embeddings, basis)
    return data.with_embeddings(project_nullspace_batch(data.embeddings, basis), masked)


def step_inlp(state: InlpResult, data: TokenDataset, heldout: TokenDataset, config: InlpConfig) -> InlpResult:
    """Run one more INLP iteration on top of ``state``."""
    if data.dim != state.dim or heldout.dim != state.dim:
        raise DimensionMismatch(f"data dim {data.dim}, heldout dim {heldout.dim}, state dim {state.dim}")
    i = state.iterations
    if i >= state.dim:
        raise IterationsExceedDim(f"iteration {i + 1} exceeds embedding dimension {state.dim}")
    seed = iteration_seed(config.seed, i)
    train = mask_for_training(_project(data, state.basis), config.masking_rate, seed)
    clf_cfg = ClassifierConfig(**{**vars(config.classifier), "seed": seed})
    clf = train_classifier(train, clf_cfg)
    held_acc = accuracy(clf, heldout.with_embeddings(project_nullspace_batch(heldout.embeddings, state.basis)))
    basis = state.basis.extend(clf.direction)
    return InlpResult(
        basis,
        state.classifiers + [clf],
        state.accuracy_trace + [held_acc],
        state.degenerate + [len(basis) == len(state.basis)],
        state.names,
    )


def run_inlp(data: TokenDataset, heldout: TokenDataset, config: InlpConfig) -> InlpResult:
    if config.iterations > data.dim:
        raise IterationsExceedDim(f"{config.iterations} iterations > dimension {data.dim}")
    state = InlpResult.empty(data.dim, data.names)
    for _ in range(config.iterations):
        state = step_inlp(state, data, heldout, config)
    return state
