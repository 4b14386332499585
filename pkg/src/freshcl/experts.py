"""ETF-classifier experts: a bias-free linear projection onto a hypersphere,
paired with its own fixed simplex ETF."""

from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum

import numpy as np

from .errors import DegenerateInputError, ParameterError
from .etf import EtfFrame, generate_etf
from .numerics import AdamWHyper, AdamWState, Rng, adamw_step, gaussian_matrix


class Status(str, Enum):
    TRAINABLE = "trainable"
    FROZEN = "frozen"


@dataclass
class Expert:
    id: int
    projection: np.ndarray  # d_out x d_in
    frame: EtfFrame
    status: Status = Status.TRAINABLE
    usage_count: int = 0
    opt_state: AdamWState = field(default=None)

    def __post_init__(self):
        if self.frame.dim != self.projection.shape[0]:
            raise ParameterError("frame dimension must equal projection rows")
        if self.opt_state is None:
            self.opt_state = AdamWState.zeros_like(self.projection)

    @property
    def frozen(self) -> bool:
        return self.status is Status.FROZEN

    @property
    def d_in(self) -> int:
        return self.projection.shape[1]

    @property
    def d_out(self) -> int:
        return self.projection.shape[0]


def new_expert(id: int, d_in: int, d_out: int | None, rng: Rng, k: int | None = None) -> Expert:
    """Gaussian projection at scale ``1/sqrt(d_in)`` plus a fresh ETF (``K = d_out`` by default)."""
    if d_out is None:
        d_out = d_in
    if d_in < 1 or d_out < 2:
        raise ParameterError(f"invalid expert dims d_in={d_in}, d_out={d_out}")
    projection = gaussian_matrix(rng, d_out, d_in, std=1.0 / np.sqrt(d_in))
    frame = generate_etf(d_out, k, rng)
    return Expert(id=id, projection=projection, frame=frame)


def project(expert: Expert, feature: np.ndarray) -> np.ndarray:
    u = expert.projection @ np.asarray(feature, dtype=np.float64)
    norm = np.linalg.norm(u)
    if not norm > 0.0:
        raise DegenerateInputError(f"expert {expert.id} maps the feature to zero")
    return u / norm


def project_batch(projection: np.ndarray, features: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Row-wise projection of ``features`` (n x d_in); returns ``(unit rows, norms)``."""
    u = features @ projection.T
    norms = np.linalg.norm(u, axis=1)
    if np.any(norms <= 0.0):
        raise DegenerateInputError("projection maps a feature to zero")
    return u / norms[:, None], norms


def freeze(expert: Expert) -> Expert:
    expert.status = Status.FROZEN
    return expert


def record_usage(expert: Expert, times: int) -> Expert:
    if times < 0:
        raise ParameterError("usage increments must be non-negative")
    expert.usage_count += int(times)
    return expert


def apply_update(expert: Expert, grad: np.ndarray, hyper: AdamWHyper) -> bool:
    """AdamW step on the projection. Frozen experts are skipped entirely.

    Returns whether an update happened.
    """
    if expert.frozen:
        return False
    expert.projection, expert.opt_state = adamw_step(expert.projection, grad, expert.opt_state, hyper)
    return True
