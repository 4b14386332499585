"""Per-task routers with hard top-k selection followed by a softmax over the
selected logits.

Routers see the unit-normalized feature, so gating does not depend on the
feature's scale.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ContractError, DegenerateInputError, ParameterError
from .numerics import AdamWHyper, AdamWState, Rng, adamw_step, gaussian_matrix, l2_normalize, softmax


@dataclass
class Router:
    task_id: int
    weights: np.ndarray  # n_experts x d_in
    bias: np.ndarray  # n_experts
    frozen: bool = False
    weights_state: AdamWState = field(default=None)
    bias_state: AdamWState = field(default=None)

    def __post_init__(self):
        if self.weights_state is None:
            self.weights_state = AdamWState.zeros_like(self.weights)
        if self.bias_state is None:
            self.bias_state = AdamWState.zeros_like(self.bias)

    @property
    def n_experts(self) -> int:
        return self.weights.shape[0]

    def logits(self, feature: np.ndarray) -> np.ndarray:
        return self.weights @ l2_normalize(feature) + self.bias


@dataclass
class GatingResult:
    selected: np.ndarray  # expert indices, descending logit
    weights: np.ndarray  # dense over all experts, zero outside `selected`
    logits: np.ndarray

    @property
    def selected_weights(self) -> np.ndarray:
        return self.weights[self.selected]


def new_router(task_id: int, d_in: int, n_experts: int, rng: Rng, k_top: int = 1) -> Router:
    if d_in < 1 or n_experts < 1 or n_experts < k_top:
        raise ParameterError(f"invalid router sizes d_in={d_in}, n_experts={n_experts}, k_top={k_top}")
    weights = gaussian_matrix(rng, n_experts, d_in, std=1.0 / np.sqrt(d_in))
    return Router(task_id=task_id, weights=weights, bias=np.zeros(n_experts))


def unit_rows(features: np.ndarray) -> np.ndarray:
    """Row-wise unit normalization of a batch of router inputs."""
    x = np.asarray(features, dtype=np.float64)
    norms = np.linalg.norm(x, axis=1, keepdims=True)
    if np.any(norms == 0.0):
        raise DegenerateInputError("cannot route a zero-norm feature")
    return x / norms


def top_k(logits: np.ndarray, k_top: int) -> np.ndarray:
    """Indices of the ``k_top`` largest entries along the last axis.

    Descending order, ties go to the lower index.
    """
    order = np.argsort(-logits, axis=-1, kind="stable")
    return order[..., :k_top]


def gate_logits(logits: np.ndarray, k_top: int) -> GatingResult:
    logits = np.asarray(logits, dtype=np.float64)
    n = logits.shape[-1]
    if not 1 <= k_top <= n:
        raise ParameterError(f"k_top must be in [1, {n}], got {k_top}")
    selected = top_k(logits, k_top)
    weights = np.zeros(n)
    weights[selected] = softmax(logits[selected])
    return GatingResult(selected=selected, weights=weights, logits=logits)


def gate(router: Router, feature: np.ndarray, k_top: int) -> GatingResult:
    return gate_logits(router.logits(feature), k_top)


def gate_batch(router: Router, features: np.ndarray, k_top: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Batched gating: ``(logits n x E, selected n x k, selected weights n x k)``."""
    n_exp = router.n_experts
    if not 1 <= k_top <= n_exp:
        raise ParameterError(f"k_top must be in [1, {n_exp}], got {k_top}")
    logits = unit_rows(features) @ router.weights.T + router.bias
    selected = top_k(logits, k_top)
    g = softmax(np.take_along_axis(logits, selected, axis=1))
    return logits, selected, g


def logit_grad(selected_weights: np.ndarray, expert_losses: np.ndarray) -> np.ndarray:
    """dL/dlogit for the selected experts of ``L = sum_i G_i L_i``.

    Works on a single sample (1-D) or a batch (rows).
    """
    g = np.asarray(selected_weights, dtype=np.float64)
    losses = np.asarray(expert_losses, dtype=np.float64)
    if g.shape != losses.shape:
        raise ContractError(f"{losses.shape[-1]} losses for {g.shape[-1]} selected experts")
    # G_j * sum_m G_m (L_j - L_m): equals G_j (L_j - sum G L) and is exactly
    # zero when all selected losses agree
    diff = losses[..., :, None] - losses[..., None, :]
    return g * np.sum(g[..., None, :] * diff, axis=-1)


def gate_grad(router: Router, feature: np.ndarray, upstream: np.ndarray, k_top: int
              ) -> tuple[np.ndarray, np.ndarray]:
    """Gradients of ``sum_i G_i L_i`` w.r.t. router weights and bias.

    ``upstream`` holds the per-expert losses at the selected experts, in the
    order of ``gate(...).selected``. Unselected logits get zero gradient.
    """
    result = gate(router, feature, k_top)
    upstream = np.asarray(upstream, dtype=np.float64)
    if upstream.shape != (k_top,):
        raise ContractError(f"expected {k_top} upstream losses, got {upstream.shape}")
    dz = np.zeros(router.n_experts)
    dz[result.selected] = logit_grad(result.selected_weights, upstream)
    return np.outer(dz, l2_normalize(feature)), dz


def apply_update(router: Router, grad_w: np.ndarray, grad_b: np.ndarray, hyper: AdamWHyper) -> bool:
    if router.frozen:
        return False
    router.weights, router.weights_state = adamw_step(router.weights, grad_w, router.weights_state, hyper)
    router.bias, router.bias_state = adamw_step(router.bias, grad_b, router.bias_state, hyper)
    return True
