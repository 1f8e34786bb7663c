"""Task-sequential training, evaluation and forgetting metrics."""

from __future__ import annotations

import csv
import hashlib
import io
import json
import logging
import math
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np
import torch

from .bppl import AccEstimator, BpplConfig, instance_loss, predict_instances
from .model import MILModel, ModelConfig, bag_loss, load_checkpoint, save_checkpoint
from .gdat import GdatConfig
from .numeric import NonFiniteError
from .owlora import adapter_layers
from .synth import SynthConfig, TaskDataset, build_sequence, merge_tasks

log = logging.getLogger(__name__)

METRICS = ("bag", "mbag", "inst", "inst_pos", "iou", "dice")


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 100
    lr: float = 1e-4
    weight_decay: float = 1e-5
    cosine: bool = True
    seed: int = 0
    use_bppl: bool = True
    use_owlora: bool = True
    projection_on: bool = True
    lambda3: float = 1.0
    rank: int = 16
    eps: float = 0.99
    acc_momentum: float = 0.99
    adapter_lr_scale: float = 1.0  # multiplier on lr for U/S/V triples of tasks >= 2

    def __post_init__(self):
        if self.epochs < 1 or self.lr <= 0 or self.adapter_lr_scale <= 0:
            raise ValueError("epochs, lr and adapter_lr_scale must be positive")


@dataclass(frozen=True)
class RunConfig:
    synth: SynthConfig = field(default_factory=SynthConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    bppl: BpplConfig = field(default_factory=BpplConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    num_tasks: int = 5
    bags_per_task: int = 60
    data_seed: int = 0
    joint: bool = False
    label: str = "run"


class TrainingDiverged(RuntimeError):
    def __init__(self, message: str, last_good: Path | None = None):
        super().__init__(message)
        self.last_good = last_good


# ---------------------------------------------------------------------------
# metrics
# ---------------------------------------------------------------------------


@dataclass
class MetricsMatrix:
    """``values[metric][n, l]``: score on task l after training stage n (NaN = not evaluated)."""

    num_stages: int
    num_tasks: int
    values: dict[str, np.ndarray] = field(default_factory=dict)
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        for m in METRICS:
            self.values.setdefault(m, np.full((self.num_stages, self.num_tasks), np.nan))

    def record(self, stage: int, task: int, scores: dict[str, float]) -> None:
        for m in METRICS:
            v = scores[m]
            if not (math.isnan(v) or 0.0 <= v <= 1.0):
                raise ValueError(f"{m}={v} outside [0, 1]")
            self.values[m][stage, task] = v

    def rows(self):
        for n in range(self.num_stages):
            for l in range(self.num_tasks):
                for m in METRICS:
                    v = self.values[m][n, l]
                    if not np.isnan(v):
                        yield n + 1, l + 1, m, float(v)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["stage", "task", "metric", "value"])
        for n, l, m, v in self.rows():
            w.writerow([n, l, m, repr(v)])
        return buf.getvalue()

    @classmethod
    def from_csv(cls, text: str) -> "MetricsMatrix":
        rows = list(csv.DictReader(io.StringIO(text)))
        stages = max(int(r["stage"]) for r in rows)
        tasks = max(int(r["task"]) for r in rows)
        mm = cls(stages, tasks)
        for r in rows:
            mm.values[r["metric"]][int(r["stage"]) - 1, int(r["task"]) - 1] = float(r["value"])
        return mm


def finalize_metrics(R: MetricsMatrix) -> dict[str, float | None]:
    """Final-row averages plus forgetting (peak before the last stage minus final)."""
    bag = R.values["bag"]
    N = R.num_tasks
    sequential = R.num_stages == N and N > 1
    if R.num_stages == N:
        needed = np.tril(np.ones((N, N), dtype=bool))
    else:
        needed = np.zeros((R.num_stages, N), dtype=bool)
        needed[-1] = True
    if np.isnan(bag[needed]).any():
        raise ValueError("metrics matrix is incomplete")

    def last(m):
        return float(np.mean(R.values[m][-1]))

    def forget(m):
        if not sequential:
            return None
        X = R.values[m]
        return float(np.mean([X[l:N - 1, l].max() - X[N - 1, l] for l in range(N - 1)]))

    def last_nan(m):
        row = R.values[m][-1]
        return float(np.nanmean(row)) if np.isfinite(row).any() else None

    return {
        "acc_inst": last("inst"),
        "forget_inst": forget("inst"),
        "iou": last_nan("iou"),
        "dice": last_nan("dice"),
        "acc_bag": last("bag"),
        "forget_bag": forget("bag"),
        "macc_bag": last("mbag"),
        "acc_inst_pos": last_nan("inst_pos"),
    }


@dataclass
class BagPrediction:
    task: int
    label: int
    predicted: int
    predicted_masked: int
    truth: np.ndarray
    instances: np.ndarray


def set_scores(pred: np.ndarray, truth: np.ndarray) -> tuple[float, float]:
    """IoU and Dice between the predicted and true positive instance sets."""
    inter = int(np.sum((pred == 1) & (truth == 1)))
    union = int(np.sum((pred == 1) | (truth == 1)))
    total = int(np.sum(pred == 1) + np.sum(truth == 1))
    return (inter / union if union else 1.0), (2 * inter / total if total else 1.0)


def score_predictions(preds: list[BagPrediction]) -> dict[str, float]:
    if not preds:
        raise ValueError("empty dataset")
    bag = np.mean([p.predicted == p.label for p in preds])
    mbag = np.mean([p.predicted_masked == p.label for p in preds])
    correct = sum(int(np.sum(p.instances == p.truth)) for p in preds)
    total = sum(p.truth.size for p in preds)
    positive = [p for p in preds if p.truth.any()]
    if positive:
        inst_pos = sum(int(np.sum(p.instances == p.truth)) for p in positive) / sum(p.truth.size for p in positive)
        ious, dices = zip(*(set_scores(p.instances, p.truth) for p in positive))
        iou, dice = float(np.mean(ious)), float(np.mean(dices))
    else:
        inst_pos = iou = dice = float("nan")
    return {"bag": float(bag), "mbag": float(mbag), "inst": correct / total,
            "inst_pos": float(inst_pos), "iou": iou, "dice": dice}


@torch.no_grad()
def predict_bags(model: MILModel, bags, task_classes: list[int]) -> list[BagPrediction]:
    out = []
    mask = torch.full((model.classifier.num_classes,), -math.inf, dtype=torch.float64)
    mask[task_classes] = 0.0
    for bag in bags:
        o = model(bag)
        out.append(BagPrediction(
            task=bag.task_index,
            label=bag.bag_label,
            predicted=o.Y_hat,
            predicted_masked=int(torch.argmax(o.logits + mask)),
            truth=np.asarray(bag.instance_labels),
            instances=predict_instances(o.A),
        ))
    return out


def evaluate_task(model: MILModel, dataset: TaskDataset) -> tuple[dict[str, float], list[BagPrediction]]:
    if not dataset.test:
        raise ValueError("empty dataset")
    preds = predict_bags(model, dataset.test, dataset.classes)
    return score_predictions(preds), preds


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------


@dataclass
class EpochLog:
    task: int
    epoch: int
    bag_loss: float
    inst_loss: float
    ortho_loss: float
    train_acc: float
    pl_selected: int
    pl_precision: float
    pl_recall: float
    pl_accuracy: float


def begin_task(model: MILModel, task_index: int, dataset: TaskDataset, cfg: TrainConfig) -> None:
    """Prepare the model for ``task_index``: new classifier rows and, with OWLoRA, new adapters."""
    have = model.classifier.num_classes
    need = max(dataset.classes) + 1
    if need > have:
        model.classifier.add_classes(need - have, torch.Generator().manual_seed(cfg.seed * 1000 + task_index))
    if cfg.use_owlora and task_index > 1:
        rng = np.random.default_rng([cfg.seed, task_index, 7])
        for layer in adapter_layers(model).values():
            layer.init_adapter(cfg.rank, rng, task_index, confine=cfg.projection_on)


def end_task(model: MILModel, task_index: int, cfg: TrainConfig) -> dict[str, int]:
    """After task 1 with OWLoRA, replace each dense weight by its truncated SVD."""
    ranks = {}
    if cfg.use_owlora and task_index == 1:
        for name, layer in adapter_layers(model).items():
            ranks[name] = layer.truncate(cfg.eps)
    return ranks


def trainable_parameters(model: MILModel, task_index: int, cfg: TrainConfig,
                         classes=None) -> list[torch.nn.Parameter]:
    """Everything in task 1 or without OWLoRA; afterwards adapters, the scorer and the head rows
    holding one of the current task's classes (the whole head in the detection regime)."""
    if not cfg.use_owlora or task_index == 1:
        return list(model.parameters())
    params = []
    for layer in adapter_layers(model).values():
        params += [layer.U, layer.S, layer.V]
    params.append(model.attn_score)
    wanted = set(classes) if classes is not None else None
    start = 0
    for w, b in zip(model.classifier.weights, model.classifier.biases):
        rows = set(range(start, start + w.shape[0]))
        start += w.shape[0]
        if wanted is None or rows & wanted:
            params += [w, b]
    return params


def train_task(model: MILModel, dataset: TaskDataset, task_index: int, cfg: TrainConfig,
               bppl: BpplConfig, acc: AccEstimator | None = None,
               on_step=None) -> list[EpochLog]:
    """Train one task in place; returns per-epoch logs."""
    acc = acc or AccEstimator(momentum=cfg.acc_momentum)
    params = trainable_parameters(model, task_index, cfg, dataset.classes)
    trainable = {id(p) for p in params}
    for p in model.parameters():
        p.requires_grad_(id(p) in trainable)
    layers = list(adapter_layers(model).values())
    low_rank = cfg.use_owlora and task_index > 1
    adapter_ids = {id(p) for l in layers if l.U is not None for p in (l.U, l.S, l.V)} if low_rank else set()
    groups = [{"params": [p for p in params if id(p) not in adapter_ids]}]
    if adapter_ids:
        groups.append({"params": [p for p in params if id(p) in adapter_ids],
                       "lr": cfg.lr * cfg.adapter_lr_scale})
    opt = torch.optim.Adam(groups, lr=cfg.lr, weight_decay=cfg.weight_decay)
    sched = torch.optim.lr_scheduler.CosineAnnealingLR(opt, T_max=cfg.epochs) if cfg.cosine else None

    logs = []
    for epoch in range(cfg.epochs):
        order = np.random.default_rng([cfg.seed, task_index, 100 + epoch]).permutation(len(dataset.train))
        sums = dict(bag=0.0, inst=0.0, ortho=0.0, correct=0, sel=0, tp=0, sel_correct=0, pos_total=0)
        for i in order:
            bag = dataset.train[i]
            out = model(bag)
            loss = bag_loss(out.logits, bag.bag_label)
            sums["bag"] += loss.item()
            if cfg.use_bppl:
                terms = instance_loss(bag, out, bppl, acc, detail=True)
                loss = loss + terms.loss
                sums["inst"] += terms.loss.item()
                if terms.selected is not None:
                    sel = terms.selected.numpy()
                    truth = np.asarray(bag.instance_labels)
                    pl = terms.pseudo_labels.numpy()
                    sums["sel"] += int(sel.sum())
                    sums["sel_correct"] += int(np.sum(sel & (pl == truth)))
                    sums["tp"] += int(np.sum(sel & (pl == 1) & (truth == 1)))
                    sums["pos_total"] += int(truth.sum())
                    sums.setdefault("sel_pos", 0)
                    sums["sel_pos"] += int(np.sum(sel & (pl == 1)))
            if low_rank and cfg.lambda3:
                ortho = sum(layer.ortho_loss() for layer in layers)
                loss = loss + cfg.lambda3 * ortho
                sums["ortho"] += ortho.item()
            if not torch.isfinite(loss):
                raise TrainingDiverged(f"non-finite loss at task {task_index} epoch {epoch}")
            opt.zero_grad(set_to_none=True)
            loss.backward()
            if low_rank and cfg.projection_on:
                for layer in layers:
                    layer.project_grads()
            opt.step()
            if low_rank and cfg.projection_on:
                for layer in layers:
                    layer.reproject()
            correct = out.Y_hat == bag.bag_label
            sums["correct"] += int(correct)
            acc.update(correct)
            if on_step is not None:
                on_step(model)
        if sched is not None:
            sched.step()
        n = len(order)
        sel_pos = sums.get("sel_pos", 0)
        logs.append(EpochLog(
            task=task_index, epoch=epoch + 1,
            bag_loss=sums["bag"] / n, inst_loss=sums["inst"] / n, ortho_loss=sums["ortho"] / n,
            train_acc=sums["correct"] / n, pl_selected=sums["sel"],
            pl_precision=sums["tp"] / sel_pos if sel_pos else float("nan"),
            pl_recall=sums["tp"] / sums["pos_total"] if sums["pos_total"] else float("nan"),
            pl_accuracy=sums["sel_correct"] / sums["sel"] if sums["sel"] else float("nan"),
        ))
        log.debug("task %d epoch %d: %s", task_index, epoch + 1, logs[-1])
    for p in model.parameters():
        p.requires_grad_(True)
    return logs


# ---------------------------------------------------------------------------
# full runs
# ---------------------------------------------------------------------------


@dataclass
class RunResult:
    config: RunConfig
    metrics: MetricsMatrix
    summary: dict
    logs: list[EpochLog]
    predictions: dict[tuple[int, int], list[BagPrediction]]
    ranks: dict[str, int]
    model: MILModel


def build_model(config: RunConfig, datasets: list[TaskDataset]) -> MILModel:
    if config.joint:
        n_classes = max(max(ds.classes) for ds in datasets) + 1
    else:
        n_classes = max(datasets[0].classes) + 1
    mcfg = replace(config.model, feature_dim=config.synth.feature_dim, num_classes=n_classes)
    return MILModel(mcfg, seed=config.train.seed)


def positive_classes(datasets: list[TaskDataset]) -> frozenset[int]:
    return frozenset(c for ds in datasets for c in ds.positive_classes)


def run_sequence(config: RunConfig, datasets: list[TaskDataset] | None = None,
                 checkpoint_dir: str | Path | None = None,
                 resume_from: str | Path | None = None, on_step=None) -> RunResult:
    """Train every task in order, evaluating all seen tasks after each stage."""
    torch.set_num_threads(1)
    if datasets is None:
        datasets = build_sequence(config.num_tasks, config.bags_per_task, config.data_seed, config.synth)
    bppl = replace(config.bppl, positive_classes=positive_classes(datasets))
    cfg = config.train
    N = len(datasets)

    if config.joint:
        stages = [merge_tasks(datasets)]
        metrics = MetricsMatrix(1, N)
    else:
        stages = datasets
        metrics = MetricsMatrix(N, N)

    logs: list[EpochLog] = []
    predictions: dict[tuple[int, int], list[BagPrediction]] = {}
    ranks: dict[str, int] = {}
    start = 1
    if resume_from is not None:
        model, meta = load_checkpoint(resume_from)
        model.classifier.last_block_task = meta.get("last_block_task", 1)
        start = meta["task_index"] + 1
        ranks = meta.get("ranks", {})
        done = MetricsMatrix.from_csv(meta["metrics_csv"])
        for m in METRICS:
            metrics.values[m][: done.num_stages, : done.num_tasks] = done.values[m]
    else:
        model = build_model(config, datasets)

    last_good = None
    for t in range(start, len(stages) + 1):
        ds = stages[t - 1]
        before = model.classifier.num_classes
        begin_task(model, t, ds, cfg)
        if model.classifier.num_classes > before:
            model.classifier.last_block_task = t
        try:
            logs += train_task(model, ds, t, cfg, bppl, on_step=on_step)
        except (TrainingDiverged, NonFiniteError) as exc:
            raise TrainingDiverged(str(exc), last_good) from exc
        ranks.update(end_task(model, t, cfg))
        evaluated = datasets if config.joint else datasets[:t]
        for l, target in enumerate(evaluated):
            scores, preds = evaluate_task(model, target)
            metrics.record(t - 1, l, scores)
            predictions[(t, l + 1)] = preds
        if checkpoint_dir is not None:
            last_good = save_checkpoint(model, Path(checkpoint_dir) / f"task{t}", meta={
                "task_index": t,
                "ranks": ranks,
                "last_block_task": model.classifier.last_block_task,
                "metrics_csv": metrics.to_csv(),
            })
    summary = finalize_metrics(metrics)
    return RunResult(config, metrics, summary, logs, predictions, ranks, model)


# ---------------------------------------------------------------------------
# reference configurations
# ---------------------------------------------------------------------------


def preset(name: str, base: RunConfig) -> RunConfig:
    """Named method configurations used by the benchmark and the CLI."""
    t = base.train
    table = {
        "full": dict(),
        "finetune": dict(use_owlora=False),
        "joint": dict(use_owlora=False),
        "joint_no_bppl": dict(use_owlora=False, use_bppl=False),
        "no_bppl": dict(use_bppl=False),
        "no_projection": dict(projection_on=False),
        "no_lin": dict(lambda3=0.0),
    }
    if name not in table:
        raise KeyError(name)
    return replace(base, train=replace(t, **table[name]), joint=name.startswith("joint"), label=name)


def desk_config(seed: int = 0, num_tasks: int = 5) -> RunConfig:
    """Small CPU-friendly setting used by the benchmark tests and ``cmil train --desk``.

    Reference hyperparameters stay the dataclass defaults; this only swaps in a shorter
    schedule, a rank that fits D=32 for five tasks, and a grouping window that
    gives 16 groups on a 16x16 grid.
    """
    return RunConfig(
        model=ModelConfig(init_std=0.002, gdat=GdatConfig(grouping_factor=4)),
        train=TrainConfig(epochs=30, lr=1e-3, rank=2, adapter_lr_scale=10.0, seed=seed),
        num_tasks=num_tasks,
        data_seed=seed,
    )


def config_to_dict(config: RunConfig) -> dict:
    d = asdict(config)
    d["bppl"]["positive_classes"] = sorted(d["bppl"]["positive_classes"])
    return d


def git_hash(data: bytes) -> str:
    return hashlib.sha1(b"blob %d\0" % len(data) + data).hexdigest()


def write_run(result: RunResult, out_dir: str | Path, extra: dict | None = None) -> Path:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    metrics_csv = result.metrics.to_csv()
    (out_dir / "metrics.csv").write_text(metrics_csv)
    (out_dir / "summary.json").write_text(json.dumps(
        {"label": result.config.label, **result.summary}, indent=2, sort_keys=True))
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["stage", "epoch", "metric", "value"])
    for e in result.logs:
        for k, v in asdict(e).items():
            if k not in ("task", "epoch"):
                w.writerow([e.task, e.epoch, k, repr(float(v))])
    (out_dir / "train_log.csv").write_text(buf.getvalue())
    config_json = json.dumps(config_to_dict(result.config), sort_keys=True)
    manifest = {
        "label": result.config.label,
        "config": json.loads(config_json),
        "seeds": {"train": result.config.train.seed, "data": result.config.data_seed},
        "config_hash": git_hash(config_json.encode()),
        "metrics_hash": git_hash(metrics_csv.encode()),
        "ranks": result.ranks,
        **(extra or {}),
    }
    (out_dir / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))
    return out_dir
