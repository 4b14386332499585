"""Command-line entry point: ``freshcl <command> [flags]``.

Exit codes: 0 success, 1 self-check failure, 2 I/O or usage error,
3 infeasible data spec, 4 class capacity exceeded, 5 missing artifact.
"""

from __future__ import annotations

import argparse
import copy
import csv
import json
import sys
import time
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from . import checkpoint, etf
from .data import SequenceSpec, gen_sequence, read_manifest, write_sequence
from .errors import FreshCLError, ParseError, StateError
from .evaluate import (ORACLE, PSEUDO, evaluate_sequence, forgetting, last_accuracy, mean_forgetting,
                       separation_report)
from .gradcheck import run_all as run_gradcheck
from .numerics import Rng
from .selfcheck import run_selfcheck
from .trainer import TrainConfig, train_sequence

EXIT_OK, EXIT_SELFCHECK, EXIT_IO, EXIT_INFEASIBLE, EXIT_CAPACITY, EXIT_MISSING = range(6)


@dataclass
class RunConfig:
    # sequence
    n_tasks: int = 3
    classes_per_task: int = 4
    d_in: int = 64
    samples_per_class_train: int = 50
    samples_per_class_test: int = 50
    noise_sigma: float = 0.05
    inter_class_min_angle: float = 60.0
    inter_task_rotation: bool = True
    seed: int = 0
    # training
    n_experts: int = 22
    k_top: int = 2
    k_freeze: int = 2
    iterations: int = 1000
    batch_size: int = 32
    lr: float = 1e-3
    weight_decay: float = 0.01
    d_out: int | None = None
    freeze_probability: float | None = None
    # run
    id_mode: str = "both"
    output_dir: str = "run"
    checkpoint_path: str = ""
    ablation_counts: list[int] = field(default_factory=lambda: [1, 2, 4, 8])
    ablation_seeds: int = 5
    ablation_scaled_freeze: bool = False

    def sequence_spec(self, seed: int | None = None) -> SequenceSpec:
        names = {f.name for f in fields(SequenceSpec)}
        spec = SequenceSpec(**{k: v for k, v in asdict(self).items() if k in names})
        if seed is not None:
            spec.seed = seed
        return spec

    def train_config(self, **overrides) -> TrainConfig:
        names = {f.name for f in fields(TrainConfig)}
        cfg = TrainConfig(**{k: v for k, v in asdict(self).items() if k in names})
        for k, v in overrides.items():
            setattr(cfg, k, v)
        return cfg

    @property
    def checkpoint_dir(self) -> Path:
        return Path(self.checkpoint_path or self.output_dir)

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True, indent=2) + "\n"

    @classmethod
    def from_dict(cls, raw: dict) -> "RunConfig":
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(raw) - known)
        if unknown:
            raise ParseError(f"unknown config keys: {', '.join(unknown)}")
        return cls(**raw)

    @classmethod
    def from_json(cls, text: str) -> "RunConfig":
        try:
            raw = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ParseError(f"config is not valid JSON: {exc}") from None
        if not isinstance(raw, dict):
            raise ParseError("config must be a JSON object")
        return cls.from_dict(raw)


def build_config(args: argparse.Namespace) -> RunConfig:
    cfg = RunConfig()
    if args.config:
        try:
            cfg = RunConfig.from_json(Path(args.config).read_text(encoding="utf-8"))
        except OSError as exc:
            raise ParseError(f"cannot read config {args.config}: {exc}") from None
    flag_map = {
        "seed": "seed", "out": "output_dir", "id_mode": "id_mode", "experts": "n_experts",
        "k_top": "k_top", "k_freeze": "k_freeze", "iters": "iterations",
        "checkpoints": "checkpoint_path", "seeds": "ablation_seeds",
    }
    for flag, key in flag_map.items():
        value = getattr(args, flag, None)
        if value is not None:
            setattr(cfg, key, value)
    if getattr(args, "counts", None):
        cfg.ablation_counts = [int(c) for c in args.counts.split(",")]
    if getattr(args, "few_shot", False):
        cfg.samples_per_class_train = 5
    if getattr(args, "scaled_freeze", False):
        cfg.ablation_scaled_freeze = True
    if cfg.id_mode not in (ORACLE, PSEUDO, "both"):
        raise ParseError(f"--id-mode must be oracle, pseudo or both, got {cfg.id_mode!r}")
    return cfg


def _id_modes(cfg: RunConfig) -> list[str]:
    return [ORACLE, PSEUDO] if cfg.id_mode == "both" else [cfg.id_mode]


def _ckpt_path(cfg: RunConfig, task_id: int) -> Path:
    return cfg.checkpoint_dir / f"ckpt_task{task_id}.bin"


def _manifest_path(cfg: RunConfig, args) -> Path:
    return Path(getattr(args, "manifest", None) or Path(cfg.output_dir) / "manifest.json")


def _load_sequence(path: Path):
    if not path.exists():
        raise StateError(f"manifest not found: {path}")
    try:
        return read_manifest(path)
    except OSError as exc:
        raise StateError(f"cannot read dataset listed in {path}: {exc}") from None


# ---------------------------------------------------------------------------
# commands


def cmd_gen_data(cfg: RunConfig, args) -> int:
    spec = cfg.sequence_spec()
    datasets = gen_sequence(spec)
    out = Path(cfg.output_dir)
    manifest = write_sequence(datasets, spec, out)
    (out / "run_config.json").write_text(cfg.to_json(), encoding="utf-8")
    print(f"wrote {len(datasets)} task files and {manifest}")
    print(f"tasks={spec.n_tasks} classes_per_task={spec.classes_per_task} d_in={spec.d_in} "
          f"train/class={spec.samples_per_class_train} test/class={spec.samples_per_class_test}")
    return EXIT_OK


def cmd_train(cfg: RunConfig, args) -> int:
    _, datasets = _load_sequence(_manifest_path(cfg, args))
    tcfg = cfg.train_config(d_in=datasets[0].dim)
    out = Path(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    cfg.checkpoint_dir.mkdir(parents=True, exist_ok=True)

    def on_task_end(state, task_id):
        checkpoint.save(state, _ckpt_path(cfg, task_id))
        frozen = [e.id for e in state.experts if e.frozen]
        print(f"task {task_id}: checkpoint {_ckpt_path(cfg, task_id)}; frozen experts {frozen}")

    start = time.perf_counter()
    _, logs = train_sequence(datasets, tcfg, on_task_end)
    for ds, log in zip(datasets, logs):
        write_train_log(log, out / f"train_log_task{ds.task_id}.csv", tcfg.n_experts)
    print(f"trained {len(datasets)} tasks in {time.perf_counter() - start:.1f} s")
    return EXIT_OK


def write_train_log(log: list[dict], path: Path, n_experts: int) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["iteration", "mean_loss"] + [f"sel_e{i}" for i in range(n_experts)])
        for row in log:
            w.writerow([row["iteration"], repr(row["mean_loss"])] + row["counts"])


def load_checkpoints(cfg: RunConfig, datasets) -> list:
    states = []
    for ds in datasets:
        path = _ckpt_path(cfg, ds.task_id)
        if not path.exists():
            raise StateError(f"missing checkpoint {path}")
        states.append(checkpoint.load(path))
    return states


def cmd_eval(cfg: RunConfig, args) -> int:
    _, datasets = _load_sequence(_manifest_path(cfg, args))
    states = load_checkpoints(cfg, datasets)
    out = Path(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    metric_rows = []
    for mode in _id_modes(cfg):
        m = evaluate_sequence(states, datasets, mode)
        with open(out / f"accuracy_matrix_{mode}.csv", "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["trained_task"] + [f"task{d.task_id}" for d in datasets])
            for t in range(m.n_tasks):
                w.writerow([t] + ["" if np.isnan(v) else f"{v:.4f}" for v in m.entries[t]])
        print(f"\naccuracy matrix (task-id: {'oracle' if mode == ORACLE else 'prototype'})")
        print("trained\\eval " + " ".join(f"{'T' + str(d.task_id):>7}" for d in datasets))
        for t in range(m.n_tasks):
            cells = " ".join(f"{v:7.4f}" if not np.isnan(v) else "      -" for v in m.entries[t])
            print(f"{t:>12} {cells}")
        a_last = f"{last_accuracy(m):.4f}"
        print(f"A_last [{mode}]: {a_last}")
        metric_rows.append([mode, "A_last", a_last])
        for tau, f in enumerate(forgetting(m)):
            metric_rows.append([mode, f"forgetting_task{tau}", f"{f:.4f}"])
        mf = f"{mean_forgetting(m):.4f}"
        print(f"mean forgetting [{mode}]: {mf}")
        metric_rows.append([mode, "mean_forgetting", mf])
    with open(out / "metrics.csv", "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["id_mode", "metric", "value"])
        w.writerows(metric_rows)

    final = states[-1]
    with open(out / "separation.csv", "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["task", "within_class_cosine", "between_class_cosine", "separation_gap"])
        print("\nseparation (final model, top-1 routed expert)")
        for ds in datasets:
            rep = separation_report(final, ds)
            vals = [f"{rep.within_class_cosine:.4f}", f"{rep.between_class_cosine:.4f}",
                    f"{rep.separation_gap:.4f}"]
            w.writerow([ds.task_id] + vals)
            print(f"task {ds.task_id}: within {vals[0]} between {vals[1]} gap {vals[2]}")
    return EXIT_OK


def run_ablation(cfg: RunConfig, progress=print) -> list[dict]:
    """Train and evaluate every expert count on every seed; returns one row per run."""
    if not cfg.ablation_counts:
        raise ParseError("ablation needs at least one expert count")
    n_max = max(cfg.ablation_counts)
    mode = ORACLE if cfg.id_mode == "both" else cfg.id_mode
    rows = []
    for i in range(cfg.ablation_seeds):
        seed = cfg.seed + i
        datasets = gen_sequence(cfg.sequence_spec(seed))
        for n in cfg.ablation_counts:
            tcfg = cfg.train_config(
                n_experts=n, k_top=min(cfg.k_top, n), k_freeze=min(cfg.k_freeze, n), seed=seed,
                d_in=datasets[0].dim,
                freeze_probability=(n / n_max) if cfg.ablation_scaled_freeze else cfg.freeze_probability,
            )
            snaps = []
            train_sequence(datasets, tcfg, lambda s, t: snaps.append(copy.deepcopy(s)))
            m = evaluate_sequence(snaps, datasets, mode)
            rows.append({"n_experts": n, "seed": seed, "a_last": last_accuracy(m),
                         "mean_forgetting": mean_forgetting(m)})
            progress(f"N_E={n:<3} seed={seed:<4} A_last={rows[-1]['a_last']:.4f} "
                     f"forgetting={rows[-1]['mean_forgetting']:.4f}")
    return rows


def summarize_ablation(rows: list[dict]) -> list[dict]:
    out = []
    for n in sorted({r["n_experts"] for r in rows}):
        sel = [r for r in rows if r["n_experts"] == n]
        out.append({"n_experts": n, "runs": len(sel),
                    "mean_a_last": float(np.mean([r["a_last"] for r in sel])),
                    "mean_forgetting": float(np.mean([r["mean_forgetting"] for r in sel]))})
    return out


def cmd_ablate(cfg: RunConfig, args) -> int:
    rows = run_ablation(cfg)
    summary = summarize_ablation(rows)
    out = Path(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "ablation_runs.csv", "w", newline="", encoding="utf-8") as fh:
        w = csv.DictWriter(fh, fieldnames=list(rows[0]), lineterminator="\n")
        w.writeheader()
        w.writerows(rows)
    with open(out / "ablation.csv", "w", newline="", encoding="utf-8") as fh:
        w = csv.DictWriter(fh, fieldnames=list(summary[0]), lineterminator="\n")
        w.writeheader()
        for r in summary:
            w.writerow({**r, "mean_a_last": f"{r['mean_a_last']:.4f}",
                        "mean_forgetting": f"{r['mean_forgetting']:.4f}"})
    print(f"\n{'experts':>8} {'runs':>5} {'A_last':>8} {'forgetting':>11}")
    for r in summary:
        print(f"{r['n_experts']:>8} {r['runs']:>5} {r['mean_a_last']:8.4f} {r['mean_forgetting']:11.4f}")
    return EXIT_OK


def cmd_selfcheck(cfg: RunConfig, args) -> int:
    checks = run_selfcheck(inject_grad_bug=args.inject_grad_bug)
    for c in checks:
        print(f"{'PASS' if c.passed else 'FAIL'} {c.name}: {c.detail}")
    failed = [c.name for c in checks if not c.passed]
    if failed:
        print(f"selfcheck failed: {', '.join(failed)}")
        return EXIT_SELFCHECK
    print("selfcheck passed")
    return EXIT_OK


def cmd_etf_check(cfg: RunConfig, args) -> int:
    d = args.dim or cfg.d_out or cfg.d_in
    k = args.k or d
    rep = etf.validate_etf(etf.generate_etf(d, k, Rng(cfg.seed)))
    print(f"d={d} K={k} max_gram_deviation={rep.max_gram_deviation:.3e} "
          f"max_norm_deviation={rep.max_norm_deviation:.3e} column_sum_norm={rep.column_sum_norm:.3e}")
    return EXIT_OK if rep.ok() else EXIT_SELFCHECK


def cmd_gradcheck(cfg: RunConfig, args) -> int:
    results = run_gradcheck(args.instances, seed=cfg.seed)
    for r in results:
        print(f"{'PASS' if r.passed() else 'FAIL'} {r.name}: max relative error {r.max_rel_error:.3e} "
              f"({r.instances} instances)")
    return EXIT_OK if all(r.passed() for r in results) else EXIT_SELFCHECK


COMMANDS = {
    "gen-data": cmd_gen_data,
    "train": cmd_train,
    "eval": cmd_eval,
    "ablate": cmd_ablate,
    "selfcheck": cmd_selfcheck,
    "etf-check": cmd_etf_check,
    "gradcheck": cmd_gradcheck,
}


def make_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON run config; flags override its values")
    common.add_argument("--seed", type=int)
    common.add_argument("--out", help="output directory")
    common.add_argument("--id-mode", choices=[ORACLE, PSEUDO, "both"])
    common.add_argument("--experts", type=int, help="number of experts N_E")
    common.add_argument("--k-top", type=int)
    common.add_argument("--k-freeze", type=int)
    common.add_argument("--iters", type=int, help="training iterations per task")
    common.add_argument("--few-shot", action="store_true", help="5 training samples per class")
    common.add_argument("--manifest", help="sequence manifest (default <out>/manifest.json)")
    common.add_argument("--checkpoints", help="checkpoint directory (default <out>)")

    parser = argparse.ArgumentParser(prog="freshcl", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name, parents=[common])
        if name == "ablate":
            p.add_argument("--counts", help="comma-separated expert counts, e.g. 1,2,4,8")
            p.add_argument("--seeds", type=int, help="number of seeds per count")
            p.add_argument("--scaled-freeze", action="store_true",
                           help="freeze each chosen expert with probability N_E / max(counts)")
        elif name == "selfcheck":
            p.add_argument("--inject-grad-bug", action="store_true", help=argparse.SUPPRESS)
        elif name == "etf-check":
            p.add_argument("--dim", type=int)
            p.add_argument("--k", type=int)
        elif name == "gradcheck":
            p.add_argument("--instances", type=int, default=100)
    return parser


def main(argv: list[str] | None = None) -> int:
    args = make_parser().parse_args(argv)
    try:
        cfg = build_config(args)
        return COMMANDS[args.command](cfg, args)
    except FreshCLError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO if isinstance(exc, ParseError) or exc.exit_code == 1 else exc.exit_code
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
