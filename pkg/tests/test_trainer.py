import numpy as np
import pytest

from freshcl import checkpoint
from freshcl import experts as ex
from freshcl import routing as rt
from freshcl.data import SequenceSpec, TaskDataset, gen_sequence
from freshcl.errors import CapacityError, RegistryError, StateError
from freshcl.etf import dr_loss
from freshcl.gradcheck import check_batch_path, check_full_loss, small_model
from freshcl.numerics import Rng, finite_diff_grad, gaussian, l2_normalize, relative_error
from freshcl.trainer import (TrainConfig, expert_grad, finalize_task, init_model, register_classes,
                             sample_loss, train_sequence, train_task)


def small_sequence(seed=0, n_tasks=3, d=16, **kw):
    spec = SequenceSpec(n_tasks=n_tasks, classes_per_task=4, d_in=d, samples_per_class_train=10,
                        samples_per_class_test=5, seed=seed, **kw)
    return gen_sequence(spec)


def test_sample_loss_zero_when_aligned():
    state = small_model(Rng(1), d=8, n_experts=4, k_top=2)
    x = l2_normalize(gaussian(Rng(2), 8))
    col = state.column(3)
    for e in state.experts:
        e.projection = np.outer(e.frame.column(col), x) + 1e-3 * np.eye(8) * 0
    assert sample_loss(state, 0, x, 3)["loss"] < 1e-20


def test_sample_loss_k1_is_single_dr_loss():
    state = small_model(Rng(3), d=8, n_experts=4, k_top=1)
    x = gaussian(Rng(4), 8)
    out = sample_loss(state, 0, x, 1)
    (i, g, li), = out["per_expert"]
    e = state.experts[i]
    assert g == 1.0
    assert out["loss"] == dr_loss(ex.project(e, x), e.frame, state.column(1))


def test_sample_loss_composes_gate_and_dr():
    state = small_model(Rng(5), d=8, n_experts=4, k_top=2)
    x = gaussian(Rng(6), 8)
    res = rt.gate(state.routers[0], x, 2)
    a, b = res.selected
    la = dr_loss(ex.project(state.experts[a], x), state.experts[a].frame, state.column(2))
    lb = dr_loss(ex.project(state.experts[b], x), state.experts[b].frame, state.column(2))
    expected = res.weights[a] * la + res.weights[b] * lb
    assert abs(sample_loss(state, 0, x, 2)["loss"] - expected) < 1e-12


def test_sample_loss_unregistered_class():
    state = small_model(Rng(5))
    with pytest.raises(RegistryError):
        sample_loss(state, 0, np.ones(8), 99)


def test_expert_grad_examples():
    rng = Rng(7)
    e = ex.new_expert(0, 8, 8, rng)
    x = gaussian(rng, 8)
    assert not expert_grad(e, x, 2, 0.0).any()
    e.projection = np.outer(e.frame.column(2), x)
    assert np.max(np.abs(expert_grad(e, x, 2, 0.7))) < 1e-15


def test_expert_grad_matches_finite_differences():
    rng = Rng(8)
    for _ in range(20):
        e = ex.new_expert(0, 8, 8, rng)
        x = gaussian(rng, 8)
        y = rng.below(8)
        g = 0.2 + 0.8 * rng.random()

        def f(p):
            return g * dr_loss(l2_normalize(p @ x), e.frame, y)

        numeric = finite_diff_grad(f, e.projection.copy(), 1e-6)
        assert relative_error(expert_grad(e, x, y, g), numeric) < 1e-5


@pytest.mark.parametrize("seed", range(5))
def test_full_loss_gradients(seed):
    errs = check_full_loss(Rng(seed), d=8, n_experts=4, k_top=2)
    assert max(errs.values()) < 1e-4, errs


def test_batched_path_matches_single_sample_path():
    assert check_batch_path(Rng(21), batch=32) < 1e-12


def test_registry_capacity_and_duplicates():
    state = init_model(TrainConfig(n_experts=2, k_top=1, k_freeze=1, d_in=4), Rng(0))
    register_classes(state, 0, [0, 1, 2])
    assert state.class_registry == {0: 0, 1: 1, 2: 2}
    with pytest.raises(RegistryError):
        register_classes(state, 1, [2])
    with pytest.raises(CapacityError):
        register_classes(state, 1, [3, 4])


def test_already_aligned_features_stay_at_zero_loss():
    cfg = TrainConfig(n_experts=1, k_top=1, k_freeze=1, iterations=200, d_in=8, seed=3)
    rng = Rng(cfg.seed)
    state = init_model(cfg, rng)
    e0 = state.experts[0]
    p_inv = np.linalg.inv(e0.projection)
    classes = [0, 1, 2, 3]
    x = np.stack([p_inv @ e0.frame.column(c) for c in classes for _ in range(5)])
    y = np.repeat(classes, 5)
    ds = TaskDataset(0, classes, x, y, x, y)
    train_task(state, ds, cfg, rng)
    final = np.mean([sample_loss(state, 0, xi, yi)["loss"] for xi, yi in zip(x, y)])
    assert final < 1e-6


def test_windowed_loss_nonincreasing_on_separable_task():
    seq = gen_sequence(SequenceSpec(n_tasks=1, d_in=64, noise_sigma=0.0, seed=1))
    cfg = TrainConfig(n_experts=1, k_top=1, k_freeze=1, iterations=1000, seed=1)
    _, logs = train_sequence(seq, cfg)
    losses = [row["mean_loss"] for row in logs[0]]
    windows = [np.mean(losses[i:i + 50]) for i in range(0, len(losses), 50)]
    assert all(b <= a for a, b in zip(windows, windows[1:])), windows


def test_second_task_leaves_first_router_untouched():
    seq = small_sequence()
    cfg = TrainConfig(n_experts=4, k_top=2, k_freeze=1, iterations=30, d_in=16)
    rng = Rng(0)
    state = init_model(cfg, rng)
    train_task(state, seq[0], cfg, rng)
    finalize_task(state, cfg.k_freeze)
    before = state.routers[0].weights.tobytes() + state.routers[0].bias.tobytes()
    train_task(state, seq[1], cfg, rng)
    assert state.routers[0].frozen
    assert state.routers[0].weights.tobytes() + state.routers[0].bias.tobytes() == before
    with pytest.raises(StateError):
        train_task(state, seq[1], cfg, rng)


def test_finalize_ranks_by_task_usage():
    state = init_model(TrainConfig(n_experts=3, k_top=1, k_freeze=2, d_in=4), Rng(0))
    state.tasks_trained = [0]
    state.routers[0] = rt.new_router(0, 4, 3, Rng(1))
    state.experts[1].usage_count = 50  # usage from an earlier task does not count
    state.usage_at_task_start = [0, 50, 0]
    for e, d in zip(state.experts, [10, 3, 7]):
        ex.record_usage(e, d)
    assert finalize_task(state, 2) == [0, 2]
    assert [e.frozen for e in state.experts] == [True, False, True]
    assert state.routers[0].frozen


def test_finalize_when_everything_frozen_is_noop():
    state = init_model(TrainConfig(n_experts=2, k_top=1, k_freeze=2, d_in=4), Rng(0))
    state.tasks_trained = [0]
    state.routers[0] = rt.new_router(0, 4, 2, Rng(1))
    for e in state.experts:
        ex.freeze(e)
        ex.record_usage(e, 5)
    snapshot = [(e.status, e.usage_count) for e in state.experts]
    assert finalize_task(state, 2) == []
    assert [(e.status, e.usage_count) for e in state.experts] == snapshot


def test_finalize_probabilistic_extremes():
    for p, expected in ((0.0, []), (1.0, [0, 2])):
        state = init_model(TrainConfig(n_experts=3, k_top=1, k_freeze=2, d_in=4), Rng(0))
        state.tasks_trained = [0]
        state.routers[0] = rt.new_router(0, 4, 3, Rng(1))
        for e, d in zip(state.experts, [10, 3, 7]):
            ex.record_usage(e, d)
        assert finalize_task(state, 2, Rng(5), p) == expected


def test_frozen_experts_constant_through_next_task():
    seq = small_sequence(seed=2)
    cfg = TrainConfig(n_experts=4, k_top=2, k_freeze=2, iterations=50, d_in=16, seed=2)
    rng = Rng(cfg.seed)
    state = init_model(cfg, rng)
    train_task(state, seq[0], cfg, rng)
    frozen = finalize_task(state, cfg.k_freeze)
    assert frozen
    sums = {i: checkpoint.tensor_checksum(state.experts[i].projection) for i in frozen}
    train_task(state, seq[1], cfg, rng)
    assert {i: checkpoint.tensor_checksum(state.experts[i].projection) for i in frozen} == sums


def test_k_freeze_zero_never_freezes():
    cfg = TrainConfig(n_experts=3, k_top=2, k_freeze=0, iterations=20, d_in=16)
    state, _ = train_sequence(small_sequence(), cfg)
    assert not any(e.frozen for e in state.experts)
    assert all(r.frozen for r in state.routers.values())


def test_usage_counts_are_cumulative():
    cfg = TrainConfig(n_experts=3, k_top=2, k_freeze=0, iterations=20, batch_size=8, d_in=16)
    state, logs = train_sequence(small_sequence(), cfg)
    total = sum(sum(row["counts"]) for log in logs for row in log)
    assert total == 3 * 20 * 8 * 2
    assert sum(e.usage_count for e in state.experts) == total


def test_training_is_deterministic():
    cfg = TrainConfig(n_experts=4, k_top=2, k_freeze=2, iterations=40, d_in=16, seed=9)
    a, _ = train_sequence(small_sequence(9), cfg)
    b, _ = train_sequence(small_sequence(9), cfg)
    assert checkpoint.to_bytes(a) == checkpoint.to_bytes(b)


def test_task_prototypes_stored():
    seq = small_sequence()
    state, _ = train_sequence(seq, TrainConfig(n_experts=2, k_top=1, k_freeze=1, iterations=5, d_in=16))
    assert sorted(state.task_prototypes) == [0, 1, 2]
    for ds in seq:
        mean = ds.train_x.mean(axis=0)
        assert np.allclose(state.task_prototypes[ds.task_id], mean / np.linalg.norm(mean), atol=1e-15)
