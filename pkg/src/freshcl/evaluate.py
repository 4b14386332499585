"""Inference, accuracy bookkeeping and separation diagnostics."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import experts as ex
from . import routing as rt
from .data import TaskDataset
from .errors import StateError
from .taskid import TaskPrototypeBank, identify_tasks
from .trainer import ModelState

ORACLE = "oracle"
PSEUDO = "pseudo"


def class_scores(state: ModelState, task_id: int, features: np.ndarray) -> tuple[list[int], np.ndarray]:
    """Gated target scores ``sum_i G_i w^i_col(c) . project_i(x)`` for the task's classes.

    Returns ``(class_ids, scores)`` with scores shaped ``n x len(class_ids)``.
    """
    classes = state.task_classes(task_id)
    cols = np.array([state.column(c) for c in classes])
    _, selected, g = rt.gate_batch(state.routers[task_id], features, state.config.k_top)
    scores = np.zeros((len(features), len(classes)))
    for e_id in np.unique(selected):
        rows, pos = np.nonzero(selected == e_id)
        e = state.experts[e_id]
        u, _ = ex.project_batch(e.projection, features[rows])
        scores[rows] += g[rows, pos][:, None] * (u @ e.frame.targets[:, cols])
    return classes, scores


def predict_batch(state: ModelState, bank: TaskPrototypeBank | None, features: np.ndarray,
                  id_mode: str = ORACLE, task_ids=None) -> np.ndarray:
    """Predicted global class ids for the rows of ``features``.

    In oracle mode ``task_ids`` (a scalar or per-row array) gives the task;
    in pseudo mode the prototype bank picks it.
    """
    if not state.tasks_trained:
        raise StateError("model has not been trained on any task")
    features = np.atleast_2d(np.asarray(features, dtype=np.float64))
    n = len(features)
    if id_mode == ORACLE:
        if task_ids is None:
            raise StateError("oracle id mode needs ground-truth task ids")
        tasks = np.broadcast_to(np.asarray(task_ids), (n,))
    elif id_mode == PSEUDO:
        tasks = identify_tasks(bank if bank is not None else state.bank, features)
    else:
        raise ValueError(f"unknown id mode {id_mode!r}")
    preds = np.empty(n, dtype=np.int64)
    for t in np.unique(tasks):
        rows = np.nonzero(tasks == t)[0]
        classes, scores = class_scores(state, int(t), features[rows])
        # argmax keeps the first maximum; classes are ascending
        preds[rows] = np.asarray(classes)[np.argmax(scores, axis=1)]
    return preds


def predict(state: ModelState, bank: TaskPrototypeBank | None, feature: np.ndarray,
            id_mode: str = ORACLE, task_id: int | None = None) -> int:
    return int(predict_batch(state, bank, feature, id_mode, task_id)[0])


def accuracy(state: ModelState, dataset: TaskDataset, id_mode: str = ORACLE) -> float:
    if len(dataset.test_y) == 0:
        raise StateError(f"task {dataset.task_id} has no test samples")
    preds = predict_batch(state, state.bank, dataset.test_x, id_mode, dataset.task_id)
    return float(np.mean(preds == dataset.test_y))


class AccuracyMatrix:
    """Lower-triangular grid ``a[trained][evaluated]``; empty cells are NaN."""

    def __init__(self, n_tasks: int):
        self.entries = np.full((n_tasks, n_tasks), np.nan)

    @property
    def n_tasks(self) -> int:
        return self.entries.shape[0]

    def __setitem__(self, key, value):
        t, tau = key
        if tau > t:
            raise IndexError("only cells with evaluated task <= trained task are stored")
        if not 0.0 <= value <= 1.0:
            raise ValueError(f"accuracy {value} outside [0, 1]")
        self.entries[t, tau] = value

    def __getitem__(self, key):
        return self.entries[key]

    def final_row(self) -> np.ndarray:
        row = self.entries[-1]
        if np.any(np.isnan(row)):
            raise StateError("final row of the accuracy matrix is incomplete")
        return row

    @classmethod
    def from_rows(cls, rows) -> "AccuracyMatrix":
        m = cls(len(rows))
        for t, row in enumerate(rows):
            for tau, v in enumerate(row[: t + 1]):
                m[t, tau] = v
        return m


def evaluate_sequence(states: list[ModelState], datasets: list[TaskDataset], id_mode: str = ORACLE
                      ) -> AccuracyMatrix:
    """``states[t]`` is the model right after task ``t``."""
    if len(states) < len(datasets):
        raise StateError(f"missing checkpoint for task {len(states)}")
    m = AccuracyMatrix(len(datasets))
    for t, state in enumerate(states[: len(datasets)]):
        if state is None:
            raise StateError(f"missing checkpoint for task {t}")
        for tau in range(t + 1):
            m[t, tau] = accuracy(state, datasets[tau], id_mode)
    return m


def last_accuracy(m: AccuracyMatrix) -> float:
    return float(np.mean(m.final_row()))


def forgetting(m: AccuracyMatrix) -> list[float]:
    """Best-ever minus final accuracy for every task except the last."""
    final = m.final_row()
    last = m.n_tasks - 1
    return [float(np.nanmax(m.entries[tau:, tau]) - final[tau]) for tau in range(last)]


def mean_forgetting(m: AccuracyMatrix) -> float:
    f = forgetting(m)
    return float(np.mean(f)) if f else 0.0


@dataclass
class SeparationReport:
    within_class_cosine: float
    between_class_cosine: float

    @property
    def separation_gap(self) -> float:
        return self.within_class_cosine - self.between_class_cosine


def separation_from_embeddings(embeddings: np.ndarray, labels: np.ndarray) -> SeparationReport:
    emb = np.asarray(embeddings, dtype=np.float64)
    emb = emb / np.linalg.norm(emb, axis=1, keepdims=True)
    labels = np.asarray(labels)
    cos = np.clip(emb @ emb.T, -1.0, 1.0)
    same = labels[:, None] == labels[None, :]
    upper = np.triu(np.ones_like(same), k=1)

    within = []
    for c in np.unique(labels):
        idx = np.nonzero(labels == c)[0]
        if len(idx) < 2:
            continue
        block = cos[np.ix_(idx, idx)]
        within.append(block[np.triu_indices(len(idx), k=1)])
    within_mean = float(np.mean(np.concatenate(within))) if within else float("nan")
    between = cos[upper & ~same]
    between_mean = float(np.mean(between)) if between.size else float("nan")
    return SeparationReport(within_mean, between_mean)


def routed_embeddings(state: ModelState, dataset: TaskDataset) -> np.ndarray:
    """Each test feature projected through its top-1 routed expert."""
    router = state.routers[dataset.task_id]
    _, selected, _ = rt.gate_batch(router, dataset.test_x, 1)
    out = np.empty((len(dataset.test_x), state.experts[0].d_out))
    for e_id in np.unique(selected[:, 0]):
        rows = np.nonzero(selected[:, 0] == e_id)[0]
        out[rows], _ = ex.project_batch(state.experts[e_id].projection, dataset.test_x[rows])
    return out


def separation_report(state: ModelState, dataset: TaskDataset) -> SeparationReport:
    return separation_from_embeddings(routed_embeddings(state, dataset), dataset.test_y)
