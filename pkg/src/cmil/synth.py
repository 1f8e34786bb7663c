"""Synthetic continual MIL streams standing in for frozen-extractor slide features.

Each bag is a ``grid_side x grid_side`` sheet of instance feature vectors.
Positive bags carry one contiguous disc of positive instances; everything else
is drawn from the task's negative mixture.

Feature geometry is fixed by a seeded random orthonormal frame of R^D.  Each
task owns ``dims_per_task`` columns of the frame that carry its positive
signature.  From task 2 on, one component of the negative mixture is a benign
*mimic*: a weakened copy of the previous task's positive signature.  Training
on task t alone therefore teaches the model to ignore what marked a positive in
task t-1, which is the interference continual methods have to resist; the
mimic is weaker than a true positive, so joint training can still separate the
two.
"""

from __future__ import annotations

import hashlib
import json
import shutil
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .numeric import read_matrix, write_matrix

DETECTION = "detection"
SUBTYPING = "subtyping"


@dataclass(frozen=True)
class SynthConfig:
    feature_dim: int = 32
    grid_side: int = 16
    regime: str = DETECTION
    num_negative_components: int = 3
    negative_std: float = 0.5
    positive_std: float = 0.5
    negative_spread: float = 1.5
    signal_strength: float = 4.0
    mimic_strength: float = 0.5  # mimic mean = this fraction of the previous positive mean
    dims_per_task: int = 2
    positive_blob_radius: int = 5
    drift_distance: float = 4.0
    classes_per_task: int = 2

    def validate(self) -> None:
        if self.feature_dim < 4 or self.grid_side < 4:
            raise ValueError("feature_dim and grid_side must both be >= 4")
        if self.regime not in (DETECTION, SUBTYPING):
            raise ValueError(f"unknown regime {self.regime!r}")
        if self.positive_blob_radius < 1:
            raise ValueError("positive_blob_radius must be >= 1")
        if self.dims_per_task < 1 or self.dims_per_task >= self.feature_dim:
            raise ValueError("dims_per_task must lie in [1, feature_dim)")
        if not 0 <= self.mimic_strength < 1:
            raise ValueError("mimic_strength must lie in [0, 1)")
        if self.regime == SUBTYPING and self.classes_per_task < 2:
            raise ValueError("subtyping needs at least 2 classes per task")


@dataclass
class TaskSpec:
    task_index: int
    feature_dim: int
    negative_mixture: list[tuple[np.ndarray, float]]
    positive_means: dict[int, np.ndarray]
    positive_std: float
    grid_side: int
    positive_blob_radius: int
    bag_label_space: list[int]
    negative_class: int | None
    seed: int
    regime: str = DETECTION

    @property
    def num_instances(self) -> int:
        return self.grid_side * self.grid_side

    @property
    def positive_mean(self) -> np.ndarray:
        return self.positive_means[self.bag_label_space[0]]

    @property
    def classes(self) -> list[int]:
        """Every class id a bag of this task can carry."""
        extra = [] if self.negative_class is None else [self.negative_class]
        return sorted(set(self.bag_label_space) | set(extra))


@dataclass
class Bag:
    instances: np.ndarray  # M x D
    positions: np.ndarray  # M x 2 integer grid coordinates
    bag_label: int
    instance_labels: np.ndarray  # M, {0,1}; evaluation only
    task_index: int = 1

    @property
    def num_instances(self) -> int:
        return self.instances.shape[0]


@dataclass
class TaskDataset:
    task_index: int
    spec: TaskSpec
    train: list[Bag]
    test: list[Bag]

    @property
    def classes(self) -> list[int]:
        return self.spec.classes

    @property
    def positive_classes(self) -> list[int]:
        return list(self.spec.bag_label_space)


def _frame(base_seed: int, dim: int) -> np.ndarray:
    rng = np.random.default_rng([base_seed, 0xF4A3])
    q, r = np.linalg.qr(rng.standard_normal((dim, dim)))
    return q * np.sign(np.diag(r))


def _task_columns(task_index: int, config: SynthConfig) -> list[int]:
    start = (task_index - 1) * config.dims_per_task
    return [(start + j) % config.feature_dim for j in range(config.dims_per_task)]


def _unit(v: np.ndarray) -> np.ndarray:
    return v / np.linalg.norm(v)


def _positive_directions(task_index: int, task_cols: np.ndarray, config: SynthConfig,
                         rng: np.random.Generator):
    """Label space, negative class and unit positive direction per class for one task."""
    if config.regime == DETECTION:
        mix = task_cols @ rng.standard_normal(task_cols.shape[1])
        return [1], 0, {1: _unit(mix)}
    k = config.classes_per_task
    first = (task_index - 1) * k
    label_space = list(range(first, first + k))
    directions = {}
    for j, c in enumerate(label_space):
        # classes of one task share the task columns but point apart
        angle = 2 * np.pi * j / k
        coef = np.zeros(task_cols.shape[1])
        coef[0] = np.cos(angle)
        coef[1 % task_cols.shape[1]] += np.sin(angle)
        directions[c] = _unit(task_cols @ coef)
    return label_space, None, directions


def make_task_spec(task_index: int, base_seed: int, config: SynthConfig | None = None) -> TaskSpec:
    config = config or SynthConfig()
    config.validate()
    if task_index < 1:
        raise ValueError("task_index is 1-based")
    D = config.feature_dim
    frame = _frame(base_seed, D)
    rng = np.random.default_rng([base_seed, task_index, 0x5EC])

    task_cols = frame[:, _task_columns(task_index, config)]
    label_space, negative_class, directions = _positive_directions(task_index, task_cols, config, rng)
    positive_means = {c: config.signal_strength * d for c, d in directions.items()}

    # negative offsets avoid every signal direction of this task
    q_block, _ = np.linalg.qr(task_cols)
    negative_mixture = []
    for _ in range(config.num_negative_components):
        g = rng.standard_normal(D)
        g -= q_block @ (q_block.T @ g)
        negative_mixture.append((config.negative_spread * _unit(g), config.negative_std))
    if task_index > 1 and config.mimic_strength > 0:
        prev_cols = frame[:, _task_columns(task_index - 1, config)]
        prev_rng = np.random.default_rng([base_seed, task_index - 1, 0x5EC])
        _, _, prev_dirs = _positive_directions(task_index - 1, prev_cols, config, prev_rng)
        mimic = config.mimic_strength * config.signal_strength * next(iter(prev_dirs.values()))
        negative_mixture[0] = (mimic, config.negative_std)

    spec = TaskSpec(
        task_index=task_index,
        feature_dim=D,
        negative_mixture=negative_mixture,
        positive_means=positive_means,
        positive_std=config.positive_std,
        grid_side=config.grid_side,
        positive_blob_radius=config.positive_blob_radius,
        bag_label_space=label_space,
        negative_class=negative_class,
        seed=base_seed,
        regime=config.regime,
    )
    _check_separation(spec)
    if task_index > 1:
        prev = make_task_spec(task_index - 1, base_seed, config)
        gap = min(
            np.linalg.norm(a - b)
            for a in spec.positive_means.values()
            for b in prev.positive_means.values()
        )
        if gap < config.drift_distance:
            raise ValueError(f"task drift {gap:.3f} below drift_distance {config.drift_distance}")
    return spec


def _check_separation(spec: TaskSpec) -> None:
    for mu in spec.positive_means.values():
        for nu, sd in spec.negative_mixture:
            need = 2 * (spec.positive_std + sd)
            if np.linalg.norm(mu - nu) < need:
                raise ValueError(
                    f"positive/negative means only {np.linalg.norm(mu - nu):.3f} apart, need {need:.3f}"
                )


def grid_positions(grid_side: int) -> np.ndarray:
    r, c = np.divmod(np.arange(grid_side * grid_side), grid_side)
    return np.column_stack([r, c]).astype(np.int64)


def sample_bag(spec: TaskSpec, label: int, rng: np.random.Generator) -> Bag:
    if label != spec.negative_class and label not in spec.bag_label_space:
        raise ValueError(f"label {label} not owned by task {spec.task_index}")
    M, D = spec.num_instances, spec.feature_dim
    positions = grid_positions(spec.grid_side)

    comp = rng.integers(len(spec.negative_mixture), size=M)
    means = np.stack([mu for mu, _ in spec.negative_mixture])[comp]
    stds = np.array([sd for _, sd in spec.negative_mixture])[comp]
    X = means + stds[:, None] * rng.standard_normal((M, D))
    y = np.zeros(M, dtype=np.int64)

    if label != spec.negative_class:
        R = spec.positive_blob_radius
        radius = rng.uniform(max(1.0, R / 2), R)
        center = rng.integers(spec.grid_side, size=2)
        d2 = ((positions - center) ** 2).sum(axis=1)
        order = np.argsort(d2, kind="stable")
        inside = int((d2 <= radius * radius).sum())
        inside = min(max(inside, 1), M // 2)
        blob = order[:inside]
        y[blob] = 1
        X[blob] = spec.positive_means[label] + spec.positive_std * rng.standard_normal((inside, D))

    return Bag(instances=X, positions=positions, bag_label=int(label),
               instance_labels=y, task_index=spec.task_index)


def _bag_labels(spec: TaskSpec, n: int) -> list[int]:
    pool = ([spec.negative_class] if spec.negative_class is not None else []) + list(spec.bag_label_space)
    return [pool[i % len(pool)] for i in range(n)]


def build_task(task_index: int, bags_per_task: int, base_seed: int, config: SynthConfig | None = None) -> TaskDataset:
    config = config or SynthConfig()
    if bags_per_task < 10:
        raise ValueError("bags_per_task must be >= 10")
    spec = make_task_spec(task_index, base_seed, config)
    labels = _bag_labels(spec, bags_per_task)
    bags = [sample_bag(spec, lab, np.random.default_rng([base_seed, task_index, 1, i]))
            for i, lab in enumerate(labels)]

    # stratified 80/20 split so both halves stay label-balanced
    split_rng = np.random.default_rng([base_seed, task_index, 2])
    train_idx: list[int] = []
    test_idx: list[int] = []
    for lab in sorted(set(labels)):
        idx = np.array([i for i, l in enumerate(labels) if l == lab])
        idx = idx[split_rng.permutation(len(idx))]
        n_train = int(round(0.8 * len(idx)))
        train_idx += idx[:n_train].tolist()
        test_idx += idx[n_train:].tolist()
    train_idx.sort()
    test_idx.sort()
    return TaskDataset(task_index, spec, [bags[i] for i in train_idx], [bags[i] for i in test_idx])


def build_sequence(num_tasks: int, bags_per_task: int, base_seed: int,
                   config: SynthConfig | None = None) -> list[TaskDataset]:
    if num_tasks < 1:
        raise ValueError("num_tasks must be >= 1")
    return [build_task(t, bags_per_task, base_seed, config) for t in range(1, num_tasks + 1)]


# ---------------------------------------------------------------------------
# on-disk layout: manifest.json + bags/<id>.x.cmlm (instances) + bags/<id>.meta.cmlm
# (row, col, instance label per instance)
# ---------------------------------------------------------------------------

MANIFEST = "manifest.json"


def save_sequence(datasets: list[TaskDataset], directory: str | Path, *, base_seed: int,
                  bags_per_task: int, config: SynthConfig) -> Path:
    directory = Path(directory)
    (directory / "bags").mkdir(parents=True, exist_ok=True)
    tasks = []
    for ds in datasets:
        entry = {
            "task_index": ds.task_index,
            "classes": ds.classes,
            "positive_classes": ds.positive_classes,
            "negative_class": ds.spec.negative_class,
        }
        for split in ("train", "test"):
            rows = []
            for i, bag in enumerate(getattr(ds, split)):
                bag_id = f"t{ds.task_index}_{split}_{i:03d}"
                write_matrix(directory / "bags" / f"{bag_id}.x.cmlm", bag.instances)
                meta = np.column_stack([bag.positions, bag.instance_labels]).astype(np.float64)
                write_matrix(directory / "bags" / f"{bag_id}.meta.cmlm", meta)
                rows.append({"id": bag_id, "label": bag.bag_label})
            entry[split] = rows
        tasks.append(entry)
    manifest = {
        "format": "cmil-dataset",
        "version": 1,
        "base_seed": base_seed,
        "num_tasks": len(datasets),
        "bags_per_task": bags_per_task,
        "config": asdict(config),
        "tasks": tasks,
    }
    (directory / MANIFEST).write_text(json.dumps(manifest, indent=2, sort_keys=True))
    return directory


def load_sequence(directory: str | Path) -> list[TaskDataset]:
    directory = Path(directory)
    manifest = json.loads((directory / MANIFEST).read_text())
    config = SynthConfig(**manifest["config"])
    out = []
    for entry in manifest["tasks"]:
        t = entry["task_index"]
        spec = make_task_spec(t, manifest["base_seed"], config)
        splits = {}
        for split in ("train", "test"):
            bags = []
            for row in entry[split]:
                X = read_matrix(directory / "bags" / f"{row['id']}.x.cmlm")
                meta = read_matrix(directory / "bags" / f"{row['id']}.meta.cmlm")
                bags.append(Bag(instances=X, positions=meta[:, :2].astype(np.int64),
                                bag_label=int(row["label"]),
                                instance_labels=meta[:, 2].astype(np.int64), task_index=t))
            splits[split] = bags
        out.append(TaskDataset(t, spec, splits["train"], splits["test"]))
    return out


def content_hash(directory: str | Path) -> str:
    """Git-style sha1 over every file (relative path + blob header + bytes)."""
    directory = Path(directory)
    h = hashlib.sha1()
    for path in sorted(p for p in directory.rglob("*") if p.is_file()):
        data = path.read_bytes()
        h.update(path.relative_to(directory).as_posix().encode())
        h.update(b"blob %d\0" % len(data))
        h.update(data)
    return h.hexdigest()


def clear_directory(directory: str | Path) -> None:
    directory = Path(directory)
    if directory.exists():
        shutil.rmtree(directory)


def merge_tasks(datasets: list[TaskDataset]) -> TaskDataset:
    """Single task holding every training bag (joint upper bound)."""
    first = datasets[0]
    train = [b for ds in datasets for b in ds.train]
    test = [b for ds in datasets for b in ds.test]
    spec = first.spec
    merged_spec = TaskSpec(
        task_index=1,
        feature_dim=spec.feature_dim,
        negative_mixture=spec.negative_mixture,
        positive_means={c: m for ds in datasets for c, m in ds.spec.positive_means.items()},
        positive_std=spec.positive_std,
        grid_side=spec.grid_side,
        positive_blob_radius=spec.positive_blob_radius,
        bag_label_space=sorted({c for ds in datasets for c in ds.spec.bag_label_space}),
        negative_class=spec.negative_class,
        seed=spec.seed,
        regime=spec.regime,
    )
    return TaskDataset(1, merged_spec, train, test)
