"""Simplex ETF pseudo-target frames and the dot-regression loss."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ContractError, DegenerateInputError, ParameterError
from .numerics import Rng, random_orthonormal

UNIT_TOL = 1e-9


@dataclass(frozen=True)
class EtfFrame:
    """``d x K`` matrix whose columns are the fixed unit pseudo-targets."""

    targets: np.ndarray

    def __post_init__(self):
        self.targets.setflags(write=False)

    @property
    def dim(self) -> int:
        return self.targets.shape[0]

    @property
    def num_targets(self) -> int:
        return self.targets.shape[1]

    def column(self, index: int) -> np.ndarray:
        if not 0 <= index < self.num_targets:
            raise IndexError(f"target index {index} out of range [0, {self.num_targets})")
        return self.targets[:, index]


def target_gram(k: int) -> np.ndarray:
    """Gram matrix every simplex ETF with ``k`` columns must have."""
    return (k / (k - 1)) * np.eye(k) - (1.0 / (k - 1)) * np.ones((k, k))


def generate_etf(d: int, k: int | None, rng: Rng) -> EtfFrame:
    """Random simplex ETF with ``k`` columns in dimension ``d`` (``k`` defaults to ``d``).

    Built as ``sqrt(k/(k-1)) * U (I - 11^T/k)`` where ``U`` has orthonormal
    columns drawn by QR of a Gaussian matrix.
    """
    if k is None:
        k = d
    if k < 2 or k > d:
        raise ParameterError(f"need 2 <= k <= d, got k={k}, d={d}")
    u = random_orthonormal(rng, d, k)
    centering = np.eye(k) - np.ones((k, k)) / k
    w = np.sqrt(k / (k - 1)) * (u @ centering)
    return EtfFrame(np.ascontiguousarray(w))


@dataclass
class EtfReport:
    max_gram_deviation: float
    max_norm_deviation: float
    column_sum_norm: float

    def ok(self, tol: float = 1e-9) -> bool:
        return max(self.max_gram_deviation, self.max_norm_deviation, self.column_sum_norm) < tol


def validate_etf(frame: EtfFrame | np.ndarray) -> EtfReport:
    w = frame.targets if isinstance(frame, EtfFrame) else np.asarray(frame, dtype=np.float64)
    k = w.shape[1]
    gram = w.T @ w
    return EtfReport(
        max_gram_deviation=float(np.max(np.abs(gram - target_gram(k)))),
        max_norm_deviation=float(np.max(np.abs(np.linalg.norm(w, axis=0) - 1.0))),
        column_sum_norm=float(np.linalg.norm(w.sum(axis=1))),
    )


def dr_loss(feature_hat: np.ndarray, frame: EtfFrame, label_index: int) -> float:
    """Dot-regression loss ``0.5 * (w_y . mu_hat - 1)^2`` for a unit feature."""
    w = frame.column(label_index)
    feature_hat = np.asarray(feature_hat, dtype=np.float64)
    if abs(np.linalg.norm(feature_hat) - 1.0) > UNIT_TOL:
        raise ContractError("dr_loss expects a unit-norm feature")
    s = float(w @ feature_hat)
    return 0.5 * (s - 1.0) ** 2


def dr_loss_grad(feature: np.ndarray, frame: EtfFrame, label_index: int) -> np.ndarray:
    """Gradient of the DR loss with respect to the feature *before* normalization."""
    w = frame.column(label_index)
    mu = np.asarray(feature, dtype=np.float64)
    norm = np.linalg.norm(mu)
    if not norm > 0.0:
        raise DegenerateInputError("zero-norm feature")
    mu_hat = mu / norm
    s = float(w @ mu_hat)
    tangent = w - s * mu_hat
    return (s - 1.0) * tangent / norm
