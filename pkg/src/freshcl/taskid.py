"""Nearest-prototype pseudo task identification.

Each trained task keeps the normalized mean of its training features. At
inference a feature is assigned to the task whose prototype has the highest
cosine similarity with it.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ParameterError, StateError
from .numerics import l2_normalize


@dataclass
class TaskPrototypeBank:
    prototypes: dict[int, np.ndarray] = field(default_factory=dict)
    counts: dict[int, int] = field(default_factory=dict)

    def add(self, task_id: int, features: np.ndarray) -> None:
        self.prototypes[task_id] = build_prototype(features)
        self.counts[task_id] = len(features)

    def __len__(self) -> int:
        return len(self.prototypes)


def build_prototype(features) -> np.ndarray:
    feats = np.asarray(features, dtype=np.float64)
    if feats.ndim != 2 or len(feats) == 0:
        raise ParameterError("build_prototype needs a non-empty list of vectors")
    return l2_normalize(feats.mean(axis=0))


def identify_task(bank: TaskPrototypeBank, feature: np.ndarray) -> int:
    return int(identify_tasks(bank, np.asarray(feature, dtype=np.float64)[None, :])[0])


def identify_tasks(bank: TaskPrototypeBank, features: np.ndarray) -> np.ndarray:
    """Vectorized :func:`identify_task` over the rows of ``features``."""
    if not bank.prototypes:
        raise StateError("task prototype bank is empty")
    ids = sorted(bank.prototypes)
    protos = np.stack([bank.prototypes[t] for t in ids])
    norms = np.linalg.norm(features, axis=1, keepdims=True)
    cos = (features / np.where(norms > 0, norms, 1.0)) @ protos.T
    # argmax returns the first maximum, and ids are ascending
    return np.asarray(ids)[np.argmax(cos, axis=1)]
