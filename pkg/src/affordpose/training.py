"""Training: teacher pretraining, the alternating pose-model/discriminator
loop with multi-stage label mining, and the direct-prediction baselines."""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np
import torch
from torch import nn

from .config import LossWeights, ModelConfig, OptimConfig, RunConfig
from .losses import class_weights, loss_adv, loss_cls, loss_dis, loss_offset, loss_scale, offset_error, total_loss
from .model import (
    Discriminator,
    HeatmapBaseline,
    RegressionBaseline,
    TemplatePoseNet,
    Teacher,
    discriminator_input,
    gaussian_heatmaps,
    render_heatmaps_t,
)
from .model.nets import HEATMAP_SIZE
from .scene import SceneSample, crop_batch, make_labels, to_crop_frame
from .templates import TemplateLibrary

log = logging.getLogger(__name__)

LOG_FIELDS = ["step", "stage", "epoch", "cls", "offset", "scale", "dis", "adv", "disc", "total", "accuracy"]


class TrainingDiverged(RuntimeError):
    pass


@dataclass
class SceneTensors:
    """Dataset columns as tensors; poses are in the crop frame."""

    images: torch.Tensor  # (N, 3, H, W)
    targets: torch.Tensor  # (N, 2)
    heights: torch.Tensor  # (N,)
    gt_crop: torch.Tensor  # (N, 16, 2)
    gt_norm: torch.Tensor  # (N, 16, 2)
    gt_scale: torch.Tensor  # (N, 2)
    gt_index: torch.Tensor  # (N,)
    ids: list[str]

    def __len__(self) -> int:
        return len(self.ids)

    def crops(self, idx, size: int) -> torch.Tensor:
        return crop_batch(self.images[idx], self.targets[idx], size)


def scene_tensors(samples: Sequence[SceneSample], library: Optional[TemplateLibrary] = None) -> SceneTensors:
    shapes = {s.image.shape for s in samples}
    if len(shapes) != 1:
        raise ValueError(f"batched training needs equal image sizes, got {sorted(shapes)}")
    images = torch.from_numpy(np.stack([s.image.transpose(2, 0, 1) for s in samples])).float()
    crop, norm, scale, index = [], [], [], []
    for s in samples:
        crop.append(to_crop_frame(s.gt_pose, s.target, s.height))
        if library is not None:
            lab = make_labels(s, library)
            norm.append(lab.norm_pose)
            scale.append(lab.scale)
            index.append(lab.class_index)
    n = len(samples)
    return SceneTensors(
        images=images,
        targets=torch.tensor([s.target for s in samples], dtype=torch.float32),
        heights=torch.tensor([float(s.height) for s in samples]),
        gt_crop=torch.tensor(np.stack(crop), dtype=torch.float32),
        gt_norm=torch.tensor(np.stack(norm), dtype=torch.float32) if norm else torch.zeros(n, 16, 2),
        gt_scale=torch.tensor(np.stack(scale), dtype=torch.float32) if scale else torch.zeros(n, 2),
        gt_index=torch.tensor(index, dtype=torch.long) if index else torch.zeros(n, dtype=torch.long),
        ids=[s.sample_id for s in samples],
    )


# -- label mining --------------------------------------------------------------

@dataclass
class LabelState:
    gt_index: np.ndarray  # (N,)
    labels: np.ndarray  # (N, K) of {0, 1}
    stage: int = 0
    history: list = field(default_factory=list)
    changed: int = 0

    @classmethod
    def initial(cls, gt_index, num_templates: int) -> "LabelState":
        gt = np.asarray(gt_index, dtype=np.int64)
        labels = np.zeros((len(gt), num_templates), dtype=np.uint8)
        labels[np.arange(len(gt)), gt] = 1
        return cls(gt, labels, 0, [labels.copy()], 0)


def update_labels(state: LabelState, scores, threshold: float = 0.7) -> LabelState:
    """Promote every template scoring above ``threshold`` to positive.

    Labels only ever switch on; the ground-truth template stays positive.
    """
    s = np.asarray(scores, dtype=np.float64)
    new = state.labels | (s > threshold).astype(np.uint8)
    new[np.arange(len(new)), state.gt_index] = 1
    changed = int((new != state.labels).sum())
    return LabelState(state.gt_index, new, state.stage + 1, state.history + [new.copy()], changed)


@torch.no_grad()
def predict_scores(model: TemplatePoseNet, data: SceneTensors, idx=None, batch_size: int = 32) -> np.ndarray:
    was_training = model.training
    model.eval()
    idx = np.arange(len(data)) if idx is None else np.asarray(idx)
    size = model.cfg.input_size
    out = []
    dtype = next(model.parameters()).dtype
    for start in range(0, len(idx), batch_size):
        b = idx[start:start + batch_size]
        fmap, pooled, scores = model.foundation(data.crops(b, size).to(dtype))
        out.append(scores.double().numpy())
    model.train(was_training)
    return np.concatenate(out) if out else np.zeros((0, model.num_templates))


def self_training_update(model, data: SceneTensors, state: LabelState, threshold: float = 0.7, idx=None) -> LabelState:
    return update_labels(state, predict_scores(model, data, idx), threshold)


def classification_accuracy(model, data: SceneTensors, idx=None) -> float:
    idx = np.arange(len(data)) if idx is None else np.asarray(idx)
    if len(idx) == 0:
        return float("nan")
    scores = predict_scores(model, data, idx)
    return float(np.mean(scores.argmax(1) == data.gt_index[idx].numpy()))


# -- optimization --------------------------------------------------------------

def make_optimizer(model: nn.Module, opt: OptimConfig) -> torch.optim.Optimizer:
    backbone = set(id(p) for p in model.backbone_parameters()) if hasattr(model, "backbone_parameters") else set()
    groups = [
        {"params": [p for p in model.parameters() if id(p) in backbone], "lr": opt.lr * opt.backbone_lr_mult},
        {"params": [p for p in model.parameters() if id(p) not in backbone], "lr": opt.lr},
    ]
    groups = [g for g in groups if g["params"]]
    return _optimizer(groups, opt, opt.lr)


def _optimizer(params, opt: OptimConfig, lr: float) -> torch.optim.Optimizer:
    if opt.optimizer == "sgd":
        return torch.optim.SGD(params, lr=lr, momentum=opt.momentum, weight_decay=opt.weight_decay)
    if opt.optimizer == "adamw":
        return torch.optim.AdamW(params, lr=lr, weight_decay=opt.weight_decay)
    raise ValueError(f"unknown optimizer {opt.optimizer!r}")


def seed_everything(seed: int) -> None:
    torch.manual_seed(seed)
    np.random.seed(seed % (2**32))


def holdout_split(n: int, fraction: float, seed: int) -> tuple[np.ndarray, np.ndarray]:
    rng = np.random.default_rng([seed, 7919])
    perm = rng.permutation(n)
    n_hold = int(round(n * fraction)) if n > 1 else 0
    return np.sort(perm[n_hold:]), np.sort(perm[:n_hold])


def batches(idx: np.ndarray, batch_size: int, rng: np.random.Generator):
    order = rng.permutation(idx)
    for start in range(0, len(order), batch_size):
        yield order[start:start + batch_size]


class MetricsLog:
    """Append-only CSV of per-step loss components."""

    def __init__(self, path: Optional[Path]):
        self.path = Path(path) if path else None
        self.rows: list[dict] = []
        if self.path and not self.path.exists():
            self.path.parent.mkdir(parents=True, exist_ok=True)
            with open(self.path, "w", newline="") as fh:
                csv.DictWriter(fh, fieldnames=LOG_FIELDS).writeheader()

    def write(self, row: dict) -> None:
        row = {k: row.get(k, "") for k in LOG_FIELDS}
        self.rows.append(row)
        if self.path:
            with open(self.path, "a", newline="") as fh:
                csv.DictWriter(fh, fieldnames=LOG_FIELDS).writerow(row)


# -- one training step ---------------------------------------------------------

def compute_parts(
    model: TemplatePoseNet,
    crops: torch.Tensor,
    gt_index: torch.Tensor,
    gt_norm: torch.Tensor,
    gt_scale: torch.Tensor,
    labels: torch.Tensor,
    cw: Optional[torch.Tensor],
    weights: LossWeights,
    teacher: Optional[Teacher] = None,
    disc: Optional[Discriminator] = None,
):
    """Generator-side loss parts for one batch; also returns what the
    discriminator step needs."""
    out = model(crops)
    ar = torch.arange(len(gt_index))
    parts = {
        "cls": loss_cls(out.scores, labels, cw),
        "offset": offset_error(out.norm_poses[ar, gt_index], gt_norm),
        "scale": loss_scale(out.scales[ar, gt_index], gt_scale),
    }
    if teacher is not None and weights.lambda_dis > 0:
        # ground-truth template placed at the predicted scale; v is a fixed target
        with torch.no_grad():
            heat = render_heatmaps_t(model.templates[gt_index], out.scales[ar, gt_index], crops.shape[-1],
                                     model.cfg.heatmap_sigma)
            v, _ = teacher(crops[:, 1], heat)
        parts["dis"] = loss_dis(out.offset_embed[ar, gt_index], v)
    extra = labels.bool().clone()
    extra[ar, gt_index] = False
    q = None
    if disc is not None and weights.lambda_adv > 0:
        q = discriminator_input(out.norm_poses, out.scales, out.pooled)
        d = disc(q)
        parts["adv"] = loss_adv(d[ar, gt_index], d, extra).generator
    return out, parts, q, extra


def _check_finite(value: torch.Tensor, step: int) -> None:
    if not math.isfinite(float(value.detach())):
        raise TrainingDiverged(f"non-finite loss at step {step}")


@dataclass
class TrainResult:
    model: TemplatePoseNet
    disc: Optional[Discriminator]
    labels: LabelState
    log: list[dict]
    stage_accuracy: list[list[float]]
    holdout: np.ndarray
    train_idx: np.ndarray


def train(
    samples: Sequence[SceneSample] | SceneTensors,
    library: TemplateLibrary,
    cfg: RunConfig,
    teacher: Optional[Teacher] = None,
    log_path=None,
    progress: Optional[Callable[[str], None]] = None,
) -> TrainResult:
    """Multi-stage training of the template pose model.

    Each stage trains until held-out accuracy has sat below its best for
    ``patience`` consecutive epochs (or ``epochs_per_stage`` run out); then
    labels are mined from the model's scores.  Stops when mining changes
    nothing, after ``max_stages`` stages or once ``max_epochs`` epochs have
    run in total; the returned label state has been through one mining pass
    per completed stage.
    """
    opt_cfg, weights = cfg.optim, cfg.loss
    seed_everything(opt_cfg.seed)
    data = samples if isinstance(samples, SceneTensors) else scene_tensors(samples, library)
    mcfg = replace(cfg.model, num_templates=len(library))
    model = TemplatePoseNet(mcfg, library.templates)
    disc = Discriminator(mcfg) if weights.lambda_adv > 0 else None
    if teacher is not None:
        teacher = teacher.eval()
        for p in teacher.parameters():
            p.requires_grad_(False)
    optim = make_optimizer(model, opt_cfg)
    d_optim = _optimizer(disc.parameters(), opt_cfg, opt_cfg.disc_lr) if disc is not None else None

    train_idx, hold_idx = holdout_split(len(data), opt_cfg.holdout_fraction, opt_cfg.seed)
    state = LabelState.initial(data.gt_index[train_idx].numpy(), len(library))
    row_of = {int(i): r for r, i in enumerate(train_idx)}
    rng = np.random.default_rng([opt_cfg.seed, 1])
    metrics = MetricsLog(log_path)
    size = mcfg.input_size
    step = 0
    stage_acc: list[list[float]] = []

    epochs_done = 0
    for stage in range(opt_cfg.max_stages):
        cw = torch.tensor(class_weights(state.labels), dtype=torch.float32)
        labels_t = torch.from_numpy(state.labels.astype(np.float32))
        best, below = -1.0, 0
        accs: list[float] = []
        for epoch in range(opt_cfg.epochs_per_stage):
            if opt_cfg.max_epochs and epochs_done >= opt_cfg.max_epochs:
                break
            epochs_done += 1
            model.train()
            for b in batches(train_idx, opt_cfg.batch_size, rng):
                rows = torch.tensor([row_of[int(i)] for i in b])
                crops = data.crops(b, size)
                out, parts, q, extra = compute_parts(
                    model, crops, data.gt_index[b], data.gt_norm[b], data.gt_scale[b],
                    labels_t[rows], cw, weights, teacher, disc,
                )
                loss = total_loss(parts, weights)
                _check_finite(loss, step)
                optim.zero_grad(set_to_none=True)
                loss.backward()
                optim.step()
                row = {k: float(v.detach()) for k, v in parts.items()}
                if disc is not None:
                    d_optim.zero_grad(set_to_none=True)
                    qd = q.detach()
                    d = disc(qd)
                    ar = torch.arange(len(b))
                    d_loss = loss_adv(d[ar, data.gt_index[b]], d, extra).discriminator
                    _check_finite(d_loss, step)
                    d_loss.backward()
                    d_optim.step()
                    row["disc"] = float(d_loss.detach())
                step += 1
                metrics.write({**row, "step": step, "stage": stage, "epoch": epoch, "total": float(loss.detach())})
            acc = classification_accuracy(model, data, hold_idx) if len(hold_idx) else float("nan")
            accs.append(acc)
            metrics.write({"step": step, "stage": stage, "epoch": epoch, "accuracy": acc})
            if progress:
                progress(f"stage {stage} epoch {epoch} step {step} holdout-acc {acc:.3f}")
            if len(hold_idx):
                if acc >= best:
                    best, below = max(best, acc), 0
                else:
                    below += 1
                if below >= opt_cfg.patience:
                    break
        stage_acc.append(accs)
        if not opt_cfg.self_training:
            break
        state = self_training_update(model, data, state, opt_cfg.threshold, train_idx)
        if progress:
            progress(f"stage {stage}: mined {state.changed} new positive labels")
        if state.changed == 0 or (opt_cfg.max_epochs and epochs_done >= opt_cfg.max_epochs):
            break
    model.eval()
    return TrainResult(model, disc, state, metrics.rows, stage_acc, hold_idx, train_idx)


# -- teacher -----------------------------------------------------------------

def teacher_offset_loss(teacher: Teacher, data: SceneTensors, idx, templates: torch.Tensor, cfg: ModelConfig,
                        batch_size: int = 32) -> float:
    was = teacher.training
    teacher.eval()
    total, n = 0.0, 0
    with torch.no_grad():
        for start in range(0, len(idx), batch_size):
            b = np.asarray(idx[start:start + batch_size])
            loss = _teacher_loss(teacher, data, b, templates, cfg)
            total += float(loss) * len(b)
            n += len(b)
    teacher.train(was)
    return total / max(n, 1)


def _teacher_loss(teacher, data, b, templates, cfg):
    crop2 = data.crops(b, cfg.input_size)[:, 1]
    t = templates[data.gt_index[b]]
    heat = render_heatmaps_t(t, data.gt_scale[b], cfg.input_size, cfg.heatmap_sigma)
    _, offsets = teacher(crop2, heat)
    return loss_offset(offsets, t, data.gt_norm[b])


@dataclass
class TeacherResult:
    teacher: Teacher
    val_before: float
    val_after: float
    losses: list[float]


def pretrain_teacher(samples, library: TemplateLibrary, cfg: RunConfig, progress=None) -> TeacherResult:
    """Fit the teacher to predict ground-truth-template offsets from the scene
    crop plus heatmaps drawn at the ground-truth scale, then freeze it."""
    opt_cfg = cfg.optim
    seed_everything(opt_cfg.seed)
    data = samples if isinstance(samples, SceneTensors) else scene_tensors(samples, library)
    mcfg = replace(cfg.model, num_templates=len(library))
    templates = torch.as_tensor(library.templates, dtype=torch.float32)
    teacher = Teacher(mcfg)
    optim = _optimizer(teacher.parameters(), replace(opt_cfg, optimizer=opt_cfg.teacher_optimizer), opt_cfg.teacher_lr)
    train_idx, hold_idx = holdout_split(len(data), opt_cfg.holdout_fraction, opt_cfg.seed)
    val_idx = hold_idx if len(hold_idx) else train_idx
    before = teacher_offset_loss(teacher, data, val_idx, templates, mcfg)
    rng = np.random.default_rng([opt_cfg.seed, 2])
    losses = []
    for epoch in range(opt_cfg.teacher_epochs):
        teacher.train()
        for b in batches(train_idx, opt_cfg.batch_size, rng):
            loss = _teacher_loss(teacher, data, b, templates, mcfg)
            _check_finite(loss, len(losses))
            optim.zero_grad(set_to_none=True)
            loss.backward()
            optim.step()
            losses.append(float(loss.detach()))
        if progress:
            progress(f"teacher epoch {epoch} loss {np.mean(losses[-max(1, len(train_idx) // opt_cfg.batch_size):]):.4f}")
    after = teacher_offset_loss(teacher, data, val_idx, templates, mcfg)
    teacher.eval()
    for p in teacher.parameters():
        p.requires_grad_(False)
    return TeacherResult(teacher, before, after, losses)


# -- baselines -----------------------------------------------------------------

BASELINE_HEATMAP_SIGMA = 1.0  # pixels on the 56x56 map


def baseline_loss(model, crops, gt_crop):
    if isinstance(model, RegressionBaseline):
        return ((model(crops) - gt_crop.reshape(len(gt_crop), -1)) ** 2).sum(-1).mean()
    target = gaussian_heatmaps(gt_crop, HEATMAP_SIZE, BASELINE_HEATMAP_SIGMA)
    return ((model(crops) - target) ** 2).flatten(1).sum(-1).mean()


def make_baseline(kind: str, mcfg: ModelConfig) -> nn.Module:
    if kind == "regression":
        return RegressionBaseline(mcfg)
    if kind == "heatmap":
        return HeatmapBaseline(mcfg)
    raise ValueError(f"unknown baseline {kind!r}")


def train_baseline(samples, kind: str, cfg: RunConfig, epochs: Optional[int] = None, log_path=None, progress=None):
    opt_cfg = cfg.optim
    seed_everything(opt_cfg.seed)
    data = samples if isinstance(samples, SceneTensors) else scene_tensors(samples)
    model = make_baseline(kind, cfg.model)
    optim = make_optimizer(model, opt_cfg)
    rng = np.random.default_rng([opt_cfg.seed, 3])
    idx = np.arange(len(data))
    metrics = MetricsLog(log_path)
    n_epochs = opt_cfg.epochs_per_stage if epochs is None else epochs
    step = 0
    for epoch in range(n_epochs):
        model.train()
        for b in batches(idx, opt_cfg.batch_size, rng):
            loss = baseline_loss(model, data.crops(b, cfg.model.input_size), data.gt_crop[b])
            _check_finite(loss, step)
            optim.zero_grad(set_to_none=True)
            loss.backward()
            optim.step()
            step += 1
            metrics.write({"step": step, "stage": 0, "epoch": epoch, "total": float(loss.detach())})
        if progress:
            progress(f"{kind} epoch {epoch} loss {float(loss.detach()):.4f}")
    model.eval()
    return model
