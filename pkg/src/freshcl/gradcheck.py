"""Finite-difference checks of every hand-written gradient.

Each check draws a random instance, evaluates the analytic gradient and the
central difference of the corresponding scalar loss, and returns the relative
error. Router checks only use points whose top-k set is stable under the
probe step.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import etf
from . import routing as rt
from .numerics import Rng, finite_diff_grad, gaussian, l2_normalize, relative_error
from .trainer import ModelState, TrainConfig, batch_grads, init_model, register_classes, sample_grads, sample_loss

FD_STEP = 1e-6
# minimum gap between the k-th and (k+1)-th logit for a router probe point
STABLE_MARGIN = 1e-4


@dataclass
class GradCheckResult:
    name: str
    instances: int
    max_rel_error: float

    def passed(self, tol: float = 1e-4) -> bool:
        return self.max_rel_error < tol


def check_dr_feature(rng: Rng, d: int = 8) -> float:
    frame = etf.generate_etf(d, d, rng)
    y = rng.below(d)
    mu = gaussian(rng, d)
    analytic = etf.dr_loss_grad(mu, frame, y)
    numeric = finite_diff_grad(lambda m: etf.dr_loss(l2_normalize(m), frame, y), mu, FD_STEP)
    return relative_error(analytic, numeric)


def small_model(rng: Rng, d: int = 8, n_experts: int = 4, k_top: int = 2, n_classes: int = 4) -> ModelState:
    cfg = TrainConfig(n_experts=n_experts, k_top=k_top, k_freeze=0, iterations=1, d_in=d, seed=0)
    state = init_model(cfg, rng)
    register_classes(state, 0, range(n_classes))
    state.routers[0] = rt.new_router(0, d, n_experts, rng, k_top)
    state.routers[0].bias = gaussian(rng, n_experts, 0.0, 0.1)
    return state


def _stable_point(state: ModelState, rng: Rng, d: int, max_tries: int = 1000) -> np.ndarray:
    k = state.config.k_top
    for _ in range(max_tries):
        x = l2_normalize(gaussian(rng, d))
        z = np.sort(state.routers[0].logits(x))[::-1]
        if k == len(z) or z[k - 1] - z[k] > STABLE_MARGIN:
            return x
    raise RuntimeError("could not find a point with a stable top-k set")


def check_full_loss(rng: Rng, d: int = 8, n_experts: int = 4, k_top: int = 2) -> dict[str, float]:
    """Relative errors for expert projections, router weights and router bias."""
    state = small_model(rng, d, n_experts, k_top)
    x = _stable_point(state, rng, d)
    y = rng.below(4)
    out = sample_grads(state, 0, x, y)
    router = state.routers[0]

    def loss() -> float:
        return sample_loss(state, 0, x, y)["loss"]

    errors = {}
    worst = 0.0
    for i, grad in out["expert_grads"].items():
        e = state.experts[i]
        p0 = e.projection.copy()

        def f(p, e=e):
            e.projection = p
            return loss()

        numeric = finite_diff_grad(f, p0, FD_STEP)
        e.projection = p0
        worst = max(worst, relative_error(grad, numeric))
    errors["expert_projection"] = worst

    w0, b0 = router.weights.copy(), router.bias.copy()

    def fw(w):
        router.weights = w
        return loss()

    def fb(b):
        router.bias = b
        return loss()

    errors["router_weights"] = relative_error(out["router_weights"], finite_diff_grad(fw, w0, FD_STEP))
    router.weights = w0
    errors["router_bias"] = relative_error(out["router_bias"], finite_diff_grad(fb, b0, FD_STEP))
    router.bias = b0
    return errors


def check_batch_path(rng: Rng, d: int = 8, n_experts: int = 4, k_top: int = 2, batch: int = 16) -> float:
    """Batched trainer gradients against the mean of single-sample gradients."""
    state = small_model(rng, d, n_experts, k_top)
    xs = np.stack([l2_normalize(gaussian(rng, d)) for _ in range(batch)])
    ys = np.array([rng.below(4) for _ in range(batch)])
    out = batch_grads(state, state.routers[0], xs, np.array([state.column(y) for y in ys]))
    ref_w = np.zeros_like(state.routers[0].weights)
    ref_b = np.zeros_like(state.routers[0].bias)
    ref_e = {}
    for x, y in zip(xs, ys):
        g = sample_grads(state, 0, x, y)
        ref_w += g["router_weights"] / batch
        ref_b += g["router_bias"] / batch
        for i, ge in g["expert_grads"].items():
            ref_e[i] = ref_e.get(i, 0.0) + ge / batch
    errs = [relative_error(out["router_weights"], ref_w), relative_error(out["router_bias"], ref_b)]
    errs += [relative_error(out["expert_grads"][i], ref_e[i]) for i in ref_e]
    return max(errs)


def run_all(n_instances: int = 100, seed: int = 12345) -> list[GradCheckResult]:
    rng = Rng(seed)
    feature = max(check_dr_feature(rng) for _ in range(n_instances))
    full = {"expert_projection": 0.0, "router_weights": 0.0, "router_bias": 0.0}
    for _ in range(n_instances):
        for key, err in check_full_loss(rng).items():
            full[key] = max(full[key], err)
    batch = max(check_batch_path(rng) for _ in range(max(1, n_instances // 10)))
    return [
        GradCheckResult("dr_feature_grad", n_instances, feature),
        GradCheckResult("expert_projection_grad", n_instances, full["expert_projection"]),
        GradCheckResult("router_weight_grad", n_instances, full["router_weights"]),
        GradCheckResult("router_bias_grad", n_instances, full["router_bias"]),
        GradCheckResult("batched_vs_single_grad", max(1, n_instances // 10), batch),
    ]
