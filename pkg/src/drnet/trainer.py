"""Optimizers, schedules, augmentation, voting evaluation, metrics, training loop.

Classification trains with SGD (momentum 0.9) under cosine annealing from
0.1 to 0.001; segmentation trains with Adam starting at 0.001 and halving
every 20 epochs. Every source of randomness is derived from the config seed
and the epoch index, so a run is bit-reproducible and a checkpoint resume
continues the exact same trajectory.
"""

from __future__ import annotations

import math
import os
from dataclasses import dataclass, field

import numpy as np

from drnet import data as dataio
from drnet.network import ERROR_LOSS_WEIGHTS, PointClassifier, PointSegmenter
from drnet.numerics import NumericalError, ParamStore, RandomStream, fold_seed

# stream tags: independent randomness lanes derived from the master seed
TAG_INIT = 0x11
TAG_SHUFFLE = 0x22
TAG_AUG = 0x33
TAG_DROPOUT = 0x44
TAG_VOTE = 0x55

SCALE_RANGE = (0.8, 1.25)
SHIFT_RANGE = (-0.1, 0.1)

LOG_HEADER = "epoch,lr,ce,er1,er2,er3,er4,train_acc,val_metric"


def cosine_lr(epoch: int, total: int) -> float:
    """Anneal from 0.1 to 0.001 over `total` epochs."""
    if not 0 <= epoch <= total:
        raise ValueError(f"epoch {epoch} outside [0, {total}]")
    return 0.001 + 0.5 * (0.1 - 0.001) * (1.0 + math.cos(math.pi * epoch / total))


def step_decay_lr(epoch: int) -> float:
    """Start at 0.001, halve after every 20 epochs."""
    if epoch < 0:
        raise ValueError("epoch must be non-negative")
    return 0.001 * 0.5 ** (epoch // 20)


def _check_grads_finite(store: ParamStore):
    for p in store:
        if not np.isfinite(p.grad).all():
            raise NumericalError(f"non-finite gradient in parameter {p.name!r}")


class SgdMomentum:
    """v <- 0.9 v + g; p <- p - lr v. Gradients are zeroed after the step."""

    def __init__(self, store: ParamStore, momentum: float = 0.9):
        self.store = store
        self.momentum = momentum
        self.velocity = {p.name: np.zeros_like(p.value) for p in store}

    def step(self, lr: float):
        _check_grads_finite(self.store)
        for p in self.store:
            v = self.velocity[p.name]
            v *= self.momentum
            v += p.grad
            p.value -= (lr * v).astype(p.value.dtype, copy=False)
        self.store.zero_grad()

    def state_dict(self):
        return {f"opt.v.{k}": v.copy() for k, v in self.velocity.items()}

    def load_state_dict(self, state):
        for k, v in self.velocity.items():
            v[...] = state[f"opt.v.{k}"].reshape(v.shape)


class Adam:
    """Bias-corrected Adam with beta1=0.9, beta2=0.999, eps=1e-8."""

    def __init__(self, store: ParamStore, beta1=0.9, beta2=0.999, eps=1e-8):
        self.store = store
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.t = 0
        self.m = {p.name: np.zeros_like(p.value) for p in store}
        self.v = {p.name: np.zeros_like(p.value) for p in store}

    def step(self, lr: float):
        _check_grads_finite(self.store)
        self.t += 1
        bc1 = 1.0 - self.beta1**self.t
        bc2 = 1.0 - self.beta2**self.t
        for p in self.store:
            m, v = self.m[p.name], self.v[p.name]
            m *= self.beta1
            m += (1.0 - self.beta1) * p.grad
            v *= self.beta2
            v += (1.0 - self.beta2) * p.grad * p.grad
            update = (lr / bc1) * m / (np.sqrt(v / bc2) + self.eps)
            p.value -= update.astype(p.value.dtype, copy=False)
        self.store.zero_grad()

    def state_dict(self):
        state = {f"opt.m.{k}": v.copy() for k, v in self.m.items()}
        state.update({f"opt.v.{k}": v.copy() for k, v in self.v.items()})
        state["opt.t"] = np.array([self.t], dtype=np.float32)
        return state

    def load_state_dict(self, state):
        for k, v in self.m.items():
            v[...] = state[f"opt.m.{k}"].reshape(v.shape)
        for k, v in self.v.items():
            v[...] = state[f"opt.v.{k}"].reshape(v.shape)
        self.t = int(state["opt.t"][0])


def augment(p: np.ndarray, rng: RandomStream) -> np.ndarray:
    """Random isotropic scale in [0.8, 1.25) plus a per-axis shift in [-0.1, 0.1)."""
    s = rng.uniform(*SCALE_RANGE)
    t = rng.uniform(*SHIFT_RANGE, (3,))
    return s * np.asarray(p) + t


def vote_eval(model: PointClassifier, cloud: np.ndarray, votes: int = 10, rng=None) -> int:
    """Average softmax over `votes` randomly rescaled copies; ties take the lower class.

    A single vote uses the cloud as-is; multi-vote runs rescale every copy
    (no translation) with draws from `rng`.
    """
    cloud = np.asarray(cloud)
    if votes == 1:
        batch = cloud[None]
    else:
        if rng is None:
            raise ValueError("multi-vote evaluation requires an rng stream")
        scales = np.array([rng.uniform(*SCALE_RANGE) for _ in range(votes)])
        batch = scales[:, None, None] * cloud[None]
    logits, _ = model.logits(batch, training=False)
    shifted = logits - logits.max(axis=1, keepdims=True)
    probs = np.exp(shifted)
    probs /= probs.sum(axis=1, keepdims=True)
    return int(np.argmax(probs.mean(axis=0)))


@dataclass
class MetricReport:
    overall_acc: float
    avg_class_acc: float
    per_class_acc: list
    miou: float | None = None
    per_category_iou: list | None = None

    def lines(self):
        out = [f"overall_acc,{self.overall_acc:.9g}", f"avg_class_acc,{self.avg_class_acc:.9g}"]
        for i, a in enumerate(self.per_class_acc):
            out.append(f"class_{i}_acc,{a:.9g}")
        if self.miou is not None:
            out.append(f"miou,{self.miou:.9g}")
            for i, a in enumerate(self.per_category_iou or []):
                out.append(f"category_{i}_iou,{a:.9g}")
        return out


def shape_iou(logits: np.ndarray, truth: np.ndarray, parts) -> float:
    """Mean IoU over a category's parts; an empty union counts as IoU 1."""
    parts = list(parts)
    sub = np.asarray(logits)[:, parts]
    pred = np.asarray(parts, dtype=np.int64)[np.argmax(sub, axis=1)]
    truth = np.asarray(truth, dtype=np.int64)
    ious = []
    for part in parts:
        inter = int(np.sum((pred == part) & (truth == part)))
        union = int(np.sum((pred == part) | (truth == part)))
        ious.append(1.0 if union == 0 else inter / union)
    return float(np.mean(ious))


def compute_miou(logits_per_shape, truths, categories, part_table):
    """Per-shape IoUs and their dataset mean.

    `part_table[c]` lists the global part ids of category c; predictions are
    the argmax over that subset only.
    """
    per_shape = []
    for logits, truth, cat in zip(logits_per_shape, truths, categories):
        if not 0 <= cat < len(part_table):
            raise ValueError(f"unknown category {cat}")
        per_shape.append(shape_iou(logits, truth, part_table[cat]))
    return per_shape, float(np.mean(per_shape)) if per_shape else 0.0


def _batched(items, size):
    for i in range(0, len(items), size):
        yield items[i : i + size]


def evaluate_classifier(model: PointClassifier, clouds, batch: int = 32) -> MetricReport:
    n_classes = model.n_classes
    correct = np.zeros(n_classes, dtype=np.int64)
    counts = np.zeros(n_classes, dtype=np.int64)
    for chunk in _batched(clouds, batch):
        coords = np.stack([c.coords for c in chunk])
        labels = np.array([c.cloud_label for c in chunk])
        logits, _ = model.logits(coords, training=False)
        pred = np.argmax(logits, axis=1)
        for lbl, pr in zip(labels, pred):
            counts[lbl] += 1
            correct[lbl] += int(pr == lbl)
    present = counts > 0
    per_class = np.where(present, correct / np.maximum(counts, 1), 0.0)
    overall = float(correct.sum() / max(counts.sum(), 1))
    avg_class = float(per_class[present].mean()) if present.any() else 0.0
    return MetricReport(overall, avg_class, [float(a) for a in per_class])


def evaluate_segmenter(model: PointSegmenter, clouds, part_table, batch: int = 32) -> MetricReport:
    logits_all, truths, cats = [], [], []
    point_correct = 0
    point_total = 0
    for chunk in _batched(clouds, batch):
        coords = np.stack([c.coords for c in chunk])
        onehot = np.zeros((len(chunk), model.n_categories), dtype=model.dtype)
        for i, c in enumerate(chunk):
            onehot[i, c.category] = 1.0
        logits, _ = model.logits(coords, onehot, training=False)
        for i, c in enumerate(chunk):
            logits_all.append(logits[i])
            truths.append(c.point_labels)
            cats.append(c.category)
            parts = part_table[c.category]
            pred = np.asarray(parts)[np.argmax(logits[i][:, parts], axis=1)]
            point_correct += int(np.sum(pred == c.point_labels))
            point_total += len(c.point_labels)
    per_shape, miou = compute_miou(logits_all, truths, cats, part_table)
    n_cat = len(part_table)
    per_cat = []
    for cat in range(n_cat):
        vals = [iou for iou, c in zip(per_shape, cats) if c == cat]
        per_cat.append(float(np.mean(vals)) if vals else 0.0)
    overall = point_correct / max(point_total, 1)
    return MetricReport(overall, float(np.mean(per_cat)), per_cat, miou, per_cat)


@dataclass
class StepRecord:
    epoch: int
    step: int
    total: float
    ce: float
    er: tuple


@dataclass
class EpochRecord:
    epoch: int
    lr: float
    ce: float
    er: tuple
    train_acc: float
    val_metric: float

    def csv(self) -> str:
        er = ",".join(f"{v:.9g}" for v in self.er)
        return (
            f"{self.epoch},{self.lr:.9g},{self.ce:.9g},{er},"
            f"{self.train_acc:.9g},{self.val_metric:.9g}"
        )


@dataclass
class TrainResult:
    epochs: list = field(default_factory=list)
    steps: list = field(default_factory=list)
    log_path: str = ""
    last_path: str = ""
    best_path: str = ""
    best_metric: float = 0.0
    model: object = None


def build_model(cfg, n_classes, n_parts=None, n_categories=None, dtype=np.float32):
    common = dict(
        k=cfg.k,
        d_max=cfg.d_max,
        k_mr=cfg.k_mr,
        embed=cfg.embed_width,
        dropout=cfg.dropout,
        dtype=dtype,
        seed=fold_seed(cfg.seed, TAG_INIT),
        edge_depth=cfg.edge_depth,
        hidden_relu=cfg.hidden_relu,
        normalize_metrics=cfg.metric_normalize,
        surrogate_gate=cfg.surrogate_gate,
        coordinate_knn=cfg.mr_coordinate_knn,
    )
    if cfg.task == "cls":
        return PointClassifier(n_classes=n_classes, **common)
    return PointSegmenter(n_parts=n_parts, n_categories=n_categories, **common)


def train_loop(cfg, bundle, out_dir=None, resume=None, stop_after=None) -> TrainResult:
    """Run the full training schedule; write the CSV log and checkpoints.

    `resume` is a state dict from a previous run's last checkpoint; training
    continues from the stored epoch with bit-identical log lines.
    `stop_after` interrupts the run after that many epochs without touching
    the schedule horizon, so a later resume reproduces the uninterrupted run.
    """
    out_dir = out_dir or cfg.out_dir
    os.makedirs(out_dir, exist_ok=True)
    log_path = os.path.join(out_dir, "train_log.csv")
    last_path = os.path.join(out_dir, "last.ckpt")
    best_path = os.path.join(out_dir, "best.ckpt")

    is_cls = cfg.task == "cls"
    n_classes = len(bundle.class_names)
    part_table = bundle.part_ids() if bundle.parts else None
    n_parts = max((max(p) for p in part_table), default=-1) + 1 if part_table else None
    model = build_model(cfg, n_classes, n_parts, n_classes)
    opt_kind = cfg.optimizer if cfg.optimizer != "auto" else ("sgd" if is_cls else "adam")
    optimizer = SgdMomentum(model.store) if opt_kind == "sgd" else Adam(model.store)
    sch_kind = cfg.schedule if cfg.schedule != "auto" else ("cosine" if is_cls else "step")
    schedule = cosine_lr if sch_kind == "cosine" else (lambda epoch, total: step_decay_lr(epoch))

    er_weights = tuple(cfg.er_scale * w for w in ERROR_LOSS_WEIGHTS)
    start_epoch = 0
    best_metric = -1.0
    if resume is not None:
        model.load_state_dict(resume)
        optimizer.load_state_dict(resume)
        start_epoch = int(resume["meta.epoch_next"][0])
        best_metric = float(resume["meta.best_metric"][0])
    else:
        with open(log_path, "w") as fh:
            fh.write(LOG_HEADER + "\n")

    train = bundle.train
    result = TrainResult(log_path=log_path, last_path=last_path, best_path=best_path, model=model)

    def save(path, epoch_next):
        state = model.state_dict()
        state.update(optimizer.state_dict())
        state["meta.epoch_next"] = np.array([epoch_next], dtype=np.float32)
        state["meta.best_metric"] = np.array([best_metric], dtype=np.float32)
        dataio.save_checkpoint(path, state)

    end_epoch = cfg.epochs if stop_after is None else min(cfg.epochs, stop_after)
    for epoch in range(start_epoch, end_epoch):
        lr = schedule(epoch, cfg.epochs)
        order = RandomStream(fold_seed(cfg.seed, TAG_SHUFFLE, epoch)).permutation(len(train))
        aug_rng = RandomStream(fold_seed(cfg.seed, TAG_AUG, epoch))
        drop_rng = RandomStream(fold_seed(cfg.seed, TAG_DROPOUT, epoch))
        ce_sum = 0.0
        er_sum = np.zeros(4)
        hits = 0
        total_items = 0
        for step, batch_ids in enumerate(_batched(list(order), cfg.batch)):
            clouds = [train[i] for i in batch_ids]
            coords = np.stack([augment(c.coords, aug_rng) for c in clouds])
            if is_cls:
                labels = np.array([c.cloud_label for c in clouds])
                out = model.loss_and_grad(coords, labels, True, drop_rng, er_weights)
                pred = np.argmax(out.logits, axis=1)
                hits += int(np.sum(pred == labels))
                total_items += len(clouds)
            else:
                onehot = np.zeros((len(clouds), model.n_categories), dtype=model.dtype)
                for i, c in enumerate(clouds):
                    onehot[i, c.category] = 1.0
                labels = np.stack([c.point_labels for c in clouds])
                out = model.loss_and_grad(coords, onehot, labels, True, drop_rng, er_weights)
                pred = np.argmax(out.logits, axis=2)
                hits += int(np.sum(pred == labels))
                total_items += labels.size
            if not math.isfinite(out.total):
                raise NumericalError(f"non-finite loss at epoch {epoch} step {step}")
            optimizer.step(lr)
            ce_sum += out.ce
            er_sum += np.asarray(out.er)
            result.steps.append(StepRecord(epoch, step, out.total, out.ce, out.er))
        n_steps = step + 1
        if is_cls:
            report = evaluate_classifier(model, bundle.test)
            val_metric = report.overall_acc
        else:
            report = evaluate_segmenter(model, bundle.test, part_table)
            val_metric = report.miou
        row = EpochRecord(
            epoch,
            lr,
            ce_sum / n_steps,
            tuple(er_sum / n_steps),
            hits / max(total_items, 1),
            val_metric,
        )
        result.epochs.append(row)
        with open(log_path, "a") as fh:
            fh.write(row.csv() + "\n")
        if val_metric > best_metric:
            best_metric = val_metric
            save(best_path, epoch + 1)
        save(last_path, epoch + 1)
    result.best_metric = best_metric
    return result
