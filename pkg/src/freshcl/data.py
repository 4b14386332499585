"""Synthetic multi-domain task sequences and their on-disk format.

Each task draws well-separated class directions on the unit sphere, optionally
rotates them with a task-specific random orthogonal map (domain shift), and
emits unit-normalized noisy samples around them. Class ids are global and
disjoint across tasks.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, fields
from pathlib import Path

import numpy as np

from .errors import CapacityError, InfeasibleSpecError, ParameterError, ParseError
from .numerics import Rng, gaussian, l2_normalize, random_orthonormal

MAX_REJECTIONS = 10_000


@dataclass
class SequenceSpec:
    n_tasks: int = 3
    classes_per_task: int = 4
    d_in: int = 64
    samples_per_class_train: int = 50
    samples_per_class_test: int = 50
    noise_sigma: float = 0.05
    inter_class_min_angle: float = 60.0  # degrees
    inter_task_rotation: bool = True
    seed: int = 0

    def validate(self) -> None:
        if self.n_tasks < 1 or self.classes_per_task < 1 or self.d_in < 2:
            raise ParameterError("n_tasks, classes_per_task must be >= 1 and d_in >= 2")
        if self.n_tasks * self.classes_per_task > self.d_in:
            raise CapacityError(
                f"{self.n_tasks} x {self.classes_per_task} classes exceed the ETF capacity K = d_in = {self.d_in}")
        if self.samples_per_class_train < 1 or self.samples_per_class_test < 0:
            raise ParameterError("need at least one training sample per class")
        if self.noise_sigma < 0:
            raise ParameterError("noise_sigma must be non-negative")

    @property
    def total_classes(self) -> int:
        return self.n_tasks * self.classes_per_task


@dataclass
class TaskDataset:
    task_id: int
    class_ids: list[int]
    train_x: np.ndarray
    train_y: np.ndarray
    test_x: np.ndarray
    test_y: np.ndarray
    domain_seed: int = 0

    @property
    def dim(self) -> int:
        return self.train_x.shape[1]


def _class_means(rng: Rng, n: int, d: int, min_angle_deg: float,
                 rotation: np.ndarray | None = None, existing: np.ndarray | None = None) -> np.ndarray:
    """Rejection-sample ``n`` unit directions at least ``min_angle_deg`` apart.

    Candidates are rotated by ``rotation`` first and must also keep the angle
    to every direction in ``existing`` (classes of earlier tasks).
    """
    threshold = math.cos(math.radians(min_angle_deg))
    means: list[np.ndarray] = []
    others = [] if existing is None else list(existing)
    failures = 0
    while len(means) < n:
        cand = l2_normalize(gaussian(rng, d))
        if rotation is not None:
            cand = rotation @ cand
        if all(float(cand @ m) < threshold for m in means + others):
            means.append(cand)
            continue
        failures += 1
        if failures >= MAX_REJECTIONS:
            raise InfeasibleSpecError(
                f"infeasible-spec: could not place {n} classes {min_angle_deg} degrees apart in d={d}")
    return np.array(means)


def _draw_samples(rng: Rng, mean: np.ndarray, count: int, sigma: float) -> np.ndarray:
    out = np.empty((count, mean.size))
    for i in range(count):
        out[i] = l2_normalize(mean + gaussian(rng, mean.size, 0.0, sigma))
    return out


def gen_task(spec: SequenceSpec, task_id: int, domain_seed: int,
             earlier_means: np.ndarray | None = None) -> tuple[TaskDataset, np.ndarray]:
    """One task's dataset plus its (rotated) class means."""
    rng = Rng(domain_seed)
    rotation = random_orthonormal(rng, spec.d_in, spec.d_in) if spec.inter_task_rotation else None
    means = _class_means(rng, spec.classes_per_task, spec.d_in, spec.inter_class_min_angle,
                         rotation, earlier_means)
    class_ids = [task_id * spec.classes_per_task + j for j in range(spec.classes_per_task)]
    train_x, train_y, test_x, test_y = [], [], [], []
    n_tr, n_te = spec.samples_per_class_train, spec.samples_per_class_test
    for cid, mean in zip(class_ids, means):
        block = _draw_samples(rng, mean, n_tr + n_te, spec.noise_sigma)
        train_x.append(block[:n_tr])
        test_x.append(block[n_tr:])
        train_y += [cid] * n_tr
        test_y += [cid] * n_te
    ds = TaskDataset(
        task_id=task_id,
        class_ids=class_ids,
        train_x=np.concatenate(train_x),
        train_y=np.array(train_y, dtype=np.int64),
        test_x=np.concatenate(test_x).reshape(-1, spec.d_in),
        test_y=np.array(test_y, dtype=np.int64),
        domain_seed=domain_seed,
    )
    return ds, means


def gen_sequence(spec: SequenceSpec) -> list[TaskDataset]:
    spec.validate()
    master = Rng(spec.seed)
    seeds = [master.next_u64() for _ in range(spec.n_tasks)]
    datasets = []
    all_means = np.empty((0, spec.d_in))
    for t, s in enumerate(seeds):
        ds, means = gen_task(spec, t, s, all_means)
        datasets.append(ds)
        all_means = np.vstack([all_means, means])
    return datasets


# ---------------------------------------------------------------------------
# file format


def _fmt(x: float) -> str:
    return format(x, ".17g")


def save_dataset(ds: TaskDataset, path: str | Path) -> None:
    lines = [f"dim,{ds.dim}"]
    for split, xs, ys in (("train", ds.train_x, ds.train_y), ("test", ds.test_x, ds.test_y)):
        for x, y in zip(xs, ys):
            lines.append(",".join([str(ds.task_id), str(int(y)), split] + [_fmt(v) for v in x]))
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def load_dataset(path: str | Path) -> TaskDataset:
    text = Path(path).read_text(encoding="utf-8").splitlines()
    if not text:
        raise ParseError(f"{path}: empty file")
    head = text[0].split(",")
    if len(head) != 2 or head[0] != "dim":
        raise ParseError(f"{path}:1: expected header 'dim,<d_in>'")
    try:
        dim = int(head[1])
    except ValueError:
        raise ParseError(f"{path}:1: bad dimension {head[1]!r}") from None

    task_ids = set()
    rows = {"train": ([], []), "test": ([], [])}
    for lineno, line in enumerate(text[1:], start=2):
        if not line.strip():
            continue
        parts = line.split(",")
        if len(parts) != dim + 3:
            raise ParseError(f"{path}:{lineno}: row {lineno} has {len(parts) - 3} features, expected {dim}")
        split = parts[2]
        if split not in rows:
            raise ParseError(f"{path}:{lineno}: unknown split {split!r}")
        try:
            task_ids.add(int(parts[0]))
            y = int(parts[1])
            x = [float(v) for v in parts[3:]]
        except ValueError as exc:
            raise ParseError(f"{path}:{lineno}: {exc}") from None
        rows[split][0].append(x)
        rows[split][1].append(y)
    if len(task_ids) != 1:
        raise ParseError(f"{path}: expected exactly one task id, found {sorted(task_ids)}")

    def arr(split):
        xs, ys = rows[split]
        return np.array(xs, dtype=np.float64).reshape(-1, dim), np.array(ys, dtype=np.int64)

    train_x, train_y = arr("train")
    test_x, test_y = arr("test")
    return TaskDataset(
        task_id=task_ids.pop(),
        class_ids=sorted(set(train_y.tolist()) | set(test_y.tolist())),
        train_x=train_x, train_y=train_y, test_x=test_x, test_y=test_y,
    )


def write_sequence(datasets: list[TaskDataset], spec: SequenceSpec, out_dir: str | Path) -> Path:
    """Write one CSV per task plus ``manifest.json``; returns the manifest path."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    tasks = []
    for ds in datasets:
        name = f"task{ds.task_id}.csv"
        save_dataset(ds, out / name)
        tasks.append({"task_id": ds.task_id, "path": name, "domain_seed": ds.domain_seed})
    manifest = out / "manifest.json"
    manifest.write_text(json.dumps({"spec": asdict(spec), "tasks": tasks}, indent=2, sort_keys=True) + "\n",
                        encoding="utf-8")
    return manifest


def read_manifest(path: str | Path) -> tuple[SequenceSpec, list[TaskDataset]]:
    path = Path(path)
    try:
        doc = json.loads(path.read_text(encoding="utf-8"))
        known = {f.name for f in fields(SequenceSpec)}
        spec = SequenceSpec(**{k: v for k, v in doc["spec"].items() if k in known})
        entries = doc["tasks"]
    except (json.JSONDecodeError, KeyError, TypeError) as exc:
        raise ParseError(f"{path}: malformed manifest ({exc})") from None
    datasets = []
    for entry in entries:
        ds = load_dataset(path.parent / entry["path"])
        ds.domain_seed = int(entry.get("domain_seed", 0))
        datasets.append(ds)
    return spec, datasets
