"""Training loop for the mixture of ETF experts.

For a sample ``x`` of task ``t`` with class column ``y`` the loss is

    L = sum_{i in topk} G_i * 0.5 * (w^i_y . normalize(P_i x) - 1)^2,
    G = softmax(topk(R_t x))

Gradients are assembled by hand, averaged over the batch, and applied with
AdamW to the active router and to every selected expert that is not frozen.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import experts as ex
from . import routing as rt
from .data import TaskDataset
from .errors import CapacityError, ParameterError, RegistryError, StateError
from .etf import dr_loss, dr_loss_grad
from .numerics import AdamWHyper, Rng
from .taskid import TaskPrototypeBank


@dataclass
class TrainConfig:
    n_experts: int = 22
    k_top: int = 2
    k_freeze: int = 2
    iterations: int = 1000
    batch_size: int = 32
    lr: float = 1e-3
    weight_decay: float = 0.01
    seed: int = 0
    d_in: int = 64
    d_out: int | None = None
    # None: always freeze the chosen experts. A float p freezes each chosen
    # expert with probability p (used by the expert-count ablation).
    freeze_probability: float | None = None

    def validate(self) -> None:
        if self.n_experts < 1 or not 1 <= self.k_top <= self.n_experts:
            raise ParameterError(f"need 1 <= k_top <= n_experts, got {self.k_top}, {self.n_experts}")
        if not 0 <= self.k_freeze <= self.n_experts:
            raise ParameterError(f"need 0 <= k_freeze <= n_experts, got {self.k_freeze}")
        if self.iterations < 1 or self.batch_size < 1:
            raise ParameterError("iterations and batch_size must be >= 1")
        if self.freeze_probability is not None and not 0.0 <= self.freeze_probability <= 1.0:
            raise ParameterError("freeze_probability must lie in [0, 1]")

    @property
    def output_dim(self) -> int:
        return self.d_out if self.d_out is not None else self.d_in

    def hyper(self) -> AdamWHyper:
        return AdamWHyper(lr=self.lr, weight_decay=self.weight_decay)


@dataclass
class ModelState:
    config: TrainConfig
    experts: list[ex.Expert]
    routers: dict[int, rt.Router] = field(default_factory=dict)
    class_registry: dict[int, int] = field(default_factory=dict)
    class_task: dict[int, int] = field(default_factory=dict)
    bank: TaskPrototypeBank = field(default_factory=TaskPrototypeBank)
    # usage_count snapshot taken when the current task started
    usage_at_task_start: list[int] = field(default_factory=list)
    tasks_trained: list[int] = field(default_factory=list)

    @property
    def capacity(self) -> int:
        return self.experts[0].frame.num_targets

    @property
    def task_prototypes(self) -> dict[int, np.ndarray]:
        return self.bank.prototypes

    def column(self, class_id: int) -> int:
        try:
            return self.class_registry[int(class_id)]
        except KeyError:
            raise RegistryError(f"class {class_id} is not registered") from None

    def task_classes(self, task_id: int) -> list[int]:
        if task_id not in self.routers:
            raise StateError(f"no router for task {task_id}")
        return sorted(c for c, t in self.class_task.items() if t == task_id)


def init_model(config: TrainConfig, rng: Rng) -> ModelState:
    config.validate()
    experts = [ex.new_expert(i, config.d_in, config.output_dim, rng) for i in range(config.n_experts)]
    return ModelState(config=config, experts=experts, usage_at_task_start=[0] * config.n_experts)


def register_classes(state: ModelState, task_id: int, class_ids) -> None:
    new = sorted(int(c) for c in class_ids)
    taken = [c for c in new if c in state.class_registry]
    if taken:
        raise RegistryError(f"classes {taken} are already registered")
    if len(state.class_registry) + len(new) > state.capacity:
        raise CapacityError(
            f"registering {len(new)} classes would exceed the ETF capacity K={state.capacity}")
    for c in new:
        state.class_registry[c] = len(state.class_registry)
        state.class_task[c] = task_id


# ---------------------------------------------------------------------------
# single-sample loss and gradients (reference path, also used by gradcheck)


def sample_loss(state: ModelState, task_id: int, x: np.ndarray, y: int) -> dict:
    col = state.column(y)
    gating = rt.gate(state.routers[task_id], x, state.config.k_top)
    per_expert = []
    total = 0.0
    for i in gating.selected:
        e = state.experts[i]
        li = dr_loss(ex.project(e, x), e.frame, col)
        gi = float(gating.weights[i])
        per_expert.append((int(i), gi, li))
        total += gi * li
    return {"loss": total, "per_expert": per_expert, "gating": gating}


def expert_grad(expert: ex.Expert, x: np.ndarray, y_col: int, g_weight: float) -> np.ndarray:
    """Gradient of ``g * dr_loss(normalize(P x))`` with respect to ``P``."""
    x = np.asarray(x, dtype=np.float64)
    if g_weight == 0.0:
        return np.zeros_like(expert.projection)
    return g_weight * np.outer(dr_loss_grad(expert.projection @ x, expert.frame, y_col), x)


def sample_grads(state: ModelState, task_id: int, x: np.ndarray, y: int) -> dict:
    """Loss plus gradients w.r.t. selected expert projections and the router."""
    out = sample_loss(state, task_id, x, y)
    col = state.column(y)
    expert_grads = {i: expert_grad(state.experts[i], x, col, g) for i, g, _ in out["per_expert"]}
    losses = np.array([l for _, _, l in out["per_expert"]])
    gw, gb = rt.gate_grad(state.routers[task_id], x, losses, state.config.k_top)
    out.update(expert_grads=expert_grads, router_weights=gw, router_bias=gb)
    return out


# ---------------------------------------------------------------------------
# batched path


def batch_grads(state: ModelState, router: rt.Router, x: np.ndarray, cols: np.ndarray) -> dict:
    """Batch-averaged loss and gradients.

    Returns ``loss``, per-expert ``expert_grads`` (only experts that were
    selected at least once), ``router_weights``, ``router_bias``, ``counts``.
    """
    n = len(x)
    k_top = state.config.k_top
    logits, selected, g = rt.gate_batch(router, x, k_top)
    losses = np.zeros_like(g)
    expert_grads = {}
    for e_id in np.unique(selected):
        rows, pos = np.nonzero(selected == e_id)
        e = state.experts[e_id]
        xe = x[rows]
        u, norms = ex.project_batch(e.projection, xe)
        w = e.frame.targets[:, cols[rows]].T
        s = np.einsum("ij,ij->i", u, w)
        losses[rows, pos] = 0.5 * (s - 1.0) ** 2
        du = ((g[rows, pos] * (s - 1.0) / norms)[:, None]) * (w - s[:, None] * u)
        expert_grads[int(e_id)] = du.T @ xe / n
    dz_sel = rt.logit_grad(g, losses)
    dz = np.zeros_like(logits)
    np.put_along_axis(dz, selected, dz_sel, axis=1)
    counts = np.bincount(selected.ravel(), minlength=len(state.experts))
    return {
        "loss": float(np.sum(g * losses) / n),
        "expert_grads": expert_grads,
        "router_weights": dz.T @ rt.unit_rows(x) / n,
        "router_bias": dz.sum(axis=0) / n,
        "counts": counts,
    }


def train_task(state: ModelState, dataset: TaskDataset, config: TrainConfig, rng: Rng) -> list[dict]:
    """Train one task in place; returns the per-iteration log rows."""
    config.validate()
    t = dataset.task_id
    if t in state.routers:
        raise StateError(f"task {t} was already trained")
    register_classes(state, t, dataset.class_ids)
    router = rt.new_router(t, config.d_in, config.n_experts, rng, config.k_top)
    state.routers[t] = router
    state.usage_at_task_start = [e.usage_count for e in state.experts]

    x_all = dataset.train_x
    cols_all = np.array([state.column(y) for y in dataset.train_y], dtype=np.int64)
    hyper = config.hyper()
    log = []
    for it in range(config.iterations):
        idx = rng.integers(len(x_all), config.batch_size)
        out = batch_grads(state, router, x_all[idx], cols_all[idx])
        rt.apply_update(router, out["router_weights"], out["router_bias"], hyper)
        for e_id, grad in sorted(out["expert_grads"].items()):
            ex.apply_update(state.experts[e_id], grad, hyper)
        for e_id, c in enumerate(out["counts"]):
            if c:
                ex.record_usage(state.experts[e_id], int(c))
        log.append({"iteration": it, "mean_loss": out["loss"], "counts": out["counts"].tolist()})

    state.bank.add(t, x_all)
    state.tasks_trained.append(t)
    return log


def finalize_task(state: ModelState, k_freeze: int, rng: Rng | None = None,
                  freeze_probability: float | None = None) -> list[int]:
    """Freeze the most-used experts of the task just trained, and its router.

    Experts are ranked by usage accrued during the task (ties to the lower
    index); the top ``k_freeze`` that are not yet frozen and were used at all
    are frozen. With ``freeze_probability`` each candidate is frozen only with
    that probability, drawn from ``rng``. Returns the ids frozen now.
    """
    if not state.tasks_trained:
        raise StateError("no task has been trained")
    deltas = np.array([e.usage_count - s for e, s in zip(state.experts, state.usage_at_task_start)])
    order = np.argsort(-deltas, kind="stable")
    candidates = [int(i) for i in order if deltas[i] > 0 and not state.experts[i].frozen][:k_freeze]
    frozen_now = []
    for i in candidates:
        if freeze_probability is not None:
            if rng is None:
                raise ParameterError("probabilistic freezing needs an rng")
            if not rng.random() < freeze_probability:
                continue
        ex.freeze(state.experts[i])
        frozen_now.append(i)
    state.routers[state.tasks_trained[-1]].frozen = True
    state.usage_at_task_start = [e.usage_count for e in state.experts]
    return frozen_now


def train_sequence(datasets: list[TaskDataset], config: TrainConfig, on_task_end=None
                   ) -> tuple[ModelState, list[list[dict]]]:
    """Train every task in order; ``on_task_end(state, task_id)`` runs after each finalize."""
    rng = Rng(config.seed)
    state = init_model(config, rng)
    logs = []
    for ds in datasets:
        logs.append(train_task(state, ds, config, rng))
        finalize_task(state, config.k_freeze, rng, config.freeze_probability)
        if on_task_end is not None:
            on_task_end(state, ds.task_id)
    return state, logs
