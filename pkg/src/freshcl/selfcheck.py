"""Release-gate checks behind ``freshcl selfcheck``."""

from __future__ import annotations

import contextlib
from dataclasses import dataclass

import numpy as np

from . import etf, gradcheck
from . import routing as rt
from . import trainer
from .checkpoint import tensor_checksum
from .data import SequenceSpec, gen_sequence
from .numerics import Rng, gaussian

ETF_SHAPES = ((4, 4), (16, 16), (64, 64), (32, 16))


@dataclass
class Check:
    name: str
    passed: bool
    detail: str


@contextlib.contextmanager
def injected_grad_bug():
    """Flip the sign of the DR feature gradient for the duration of the block.

    Mutation hook: the gradient checks must catch it.
    """
    original = etf.dr_loss_grad

    def broken(feature, frame, label_index):
        return -original(feature, frame, label_index)

    etf.dr_loss_grad = broken
    trainer.dr_loss_grad = broken
    try:
        yield
    finally:
        etf.dr_loss_grad = original
        trainer.dr_loss_grad = original


def check_etf() -> Check:
    worst = 0.0
    for d, k in ETF_SHAPES:
        rep = etf.validate_etf(etf.generate_etf(d, k, Rng(d * 1000 + k)))
        worst = max(worst, rep.max_gram_deviation, rep.max_norm_deviation, rep.column_sum_norm)
    return Check("etf_geometry", worst < 1e-9, f"max ETF Gram deviation {worst:.3e}")


def check_dr_values() -> Check:
    frame = etf.EtfFrame(np.array([[1.0, 0.0], [0.0, 1.0]]))
    got = [etf.dr_loss(np.array(v), frame, 0) for v in ([1.0, 0.0], [0.0, 1.0], [-1.0, 0.0])]
    return Check("dr_loss_values", got == [0.0, 0.5, 2.0], f"losses {got}")


def check_gating(n_calls: int = 2000, seed: int = 7) -> Check:
    rng = Rng(seed)
    bad = 0
    for _ in range(n_calls):
        n = 2 + rng.below(7)
        k = 1 + rng.below(n)
        res = rt.gate_logits(gaussian(rng, n), k)
        nz = np.count_nonzero(res.weights)
        if nz != k or abs(res.weights.sum() - 1.0) > 1e-12:
            bad += 1
    tie = rt.gate_logits(np.array([1.0, 1.0, 1.0]), 2)
    tie_ok = tie.selected.tolist() == [0, 1] and tie.weights.tolist() == [0.5, 0.5, 0.0]
    return Check("gating_contract", bad == 0 and tie_ok, f"{n_calls} calls, {bad} violations, tie rule {'ok' if tie_ok else 'broken'}")


def check_frozen_immutability(seed: int = 3) -> Check:
    spec = SequenceSpec(n_tasks=3, classes_per_task=4, d_in=16, samples_per_class_train=10,
                        samples_per_class_test=5, seed=seed)
    cfg = trainer.TrainConfig(n_experts=4, k_top=2, k_freeze=2, iterations=40, d_in=16, seed=seed)
    datasets = gen_sequence(spec)
    rng = Rng(cfg.seed)
    state = trainer.init_model(cfg, rng)
    violations = 0
    for ds in datasets:
        before = _frozen_checksums(state)
        trainer.train_task(state, ds, cfg, rng)
        trainer.finalize_task(state, cfg.k_freeze)
        after = _frozen_checksums(state)
        violations += sum(1 for key, digest in before.items() if after.get(key) != digest)
    n_frozen = sum(e.frozen for e in state.experts)
    return Check("frozen_immutability", violations == 0,
                 f"{n_frozen} frozen experts, {violations} changed tensors")


def _frozen_checksums(state: trainer.ModelState) -> dict[str, str]:
    out = {f"expert{e.id}": tensor_checksum(e.projection) for e in state.experts if e.frozen}
    for t, r in state.routers.items():
        if r.frozen:
            out[f"router{t}"] = tensor_checksum(r.weights) + tensor_checksum(r.bias)
    return out


def run_selfcheck(inject_grad_bug: bool = False, n_grad_instances: int = 100) -> list[Check]:
    guard = injected_grad_bug() if inject_grad_bug else contextlib.nullcontext()
    with guard:
        checks = [check_etf(), check_dr_values()]
        for res in gradcheck.run_all(n_grad_instances):
            checks.append(Check(f"gradient:{res.name}", res.passed(),
                                f"max relative error {res.max_rel_error:.3e} over {res.instances} instances"))
        checks.append(check_gating())
        checks.append(check_frozen_immutability())
    return checks
